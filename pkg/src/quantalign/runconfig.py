"""Run configuration: one JSON file wiring every stage of the pipeline.

Sections: ``model``, ``quant``, ``train`` (alignment-stage optimizer
settings), ``decode``, ``paths`` (corpus file and run directory), and the
preference ``beta``. Secrets (the judge API key) come only from the
environment, never from this file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .decode import DecodeParams
from .errors import ConfigError
from .model import ModelConfig
from .quant import QuantSpec
from .train import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: QuantSpec = field(default_factory=QuantSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeParams = field(default_factory=DecodeParams)
    corpus_path: str = "data/sample_corpus.txt"
    out_dir: str = "runs/default"
    # Preference-training beta; high values anchor the policy to the
    # reference (per-pair gradients saturate once the pair's margin flips).
    beta: float = 10.0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "quant": self.quant.to_dict(),
            "train": self.train.to_dict(),
            "decode": self.decode.to_dict(),
            "paths": {"corpus": self.corpus_path, "out_dir": self.out_dir},
            "beta": self.beta,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        try:
            paths = d.get("paths", {})
            cfg = RunConfig(
                model=ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig(),
                quant=QuantSpec.from_dict(d["quant"]) if "quant" in d else QuantSpec(),
                train=TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(),
                decode=DecodeParams.from_dict(d["decode"]) if "decode" in d else DecodeParams(),
                corpus_path=paths.get("corpus", "data/sample_corpus.txt"),
                out_dir=paths.get("out_dir", "runs/default"),
                beta=d.get("beta", 0.1),
            )
        except (KeyError, TypeError, ConfigError) as e:
            raise ConfigError(f"invalid run config: {e}") from e
        if cfg.beta <= 0:
            raise ConfigError("beta must be positive")
        return cfg

    @staticmethod
    def load(path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return RunConfig.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def apply_tiny_preset(cfg: RunConfig) -> RunConfig:
    """CI-sized preset: smaller model, fewer steps, fewer prompts."""
    return RunConfig(
        model=ModelConfig(
            vocab_size=256,
            d_model=64,
            n_layers=2,
            n_heads=4,
            d_ff=192,
            max_context=cfg.model.max_context,
            layer_norm_eps=cfg.model.layer_norm_eps,
        ),
        quant=cfg.quant,
        train=TrainConfig(
            learning_rate=cfg.train.learning_rate,
            steps=300,
            batch_size=cfg.train.batch_size,
            seed=cfg.train.seed,
            optimizer=cfg.train.optimizer,
            eval_every=cfg.train.eval_every,
        ),
        decode=cfg.decode,
        corpus_path=cfg.corpus_path,
        out_dir=cfg.out_dir,
        beta=cfg.beta,
    )


TINY_PROMPT_BUDGET = 500
