"""Shared fixtures.

``micro_model`` is a genuinely trained (small) byte-level model so tests
that need realistic, decisive token distributions don't fake them. It
trains once per session (seconds). The expensive full pipeline lives in
test_acceptance's own fixture.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest
import torch

from quantalign.corpus import ingest
from quantalign.model import ModelConfig, init_checkpoint
from quantalign.train import TrainConfig, train

torch.set_num_threads(1)

REPO_ROOT = Path(__file__).resolve().parent.parent
SAMPLE_CORPUS = REPO_ROOT / "data" / "sample_corpus.txt"

MICRO_CONFIG = ModelConfig(
    vocab_size=256,
    d_model=64,
    n_layers=2,
    n_heads=4,
    d_ff=192,
    max_context=96,
)


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    src = tmp_path_factory.mktemp("corpus") / "slice.txt"
    text = SAMPLE_CORPUS.read_text(encoding="utf-8")
    src.write_text(text[:500_000], encoding="utf-8")
    return ingest([src], split_seed=7)


@pytest.fixture(scope="session")
def micro_model(micro_corpus):
    # The window must span the whole context so every position's embedding
    # is trained; generations otherwise run onto random position rows.
    cfg = TrainConfig(learning_rate=1e-3, steps=3000, batch_size=8, seed=11, eval_every=3000)
    init = init_checkpoint(MICRO_CONFIG, seed=3)
    result = train(
        cfg,
        "lm_pretrain",
        init,
        corpus_tokens=micro_corpus.train_tokens,
        window=MICRO_CONFIG.max_context,
    )
    return result.final


@pytest.fixture()
def tiny_config():
    return ModelConfig(
        vocab_size=16, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_context=48
    )
