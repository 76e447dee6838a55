"""Small decoder-only transformer with KV-cached incremental inference.

The model is held as plain data (a config plus an ordered name -> tensor
map) rather than as a module tree, so that checkpoints can be quantized,
viewed, diffed, and serialized without touching framework state. All
forward paths are pure functions of (params, inputs) and are deterministic
on CPU for a fixed thread count.

Two forward paths exist on purpose:

* ``forward_step`` consumes one token against a KV cache. Decoding,
  divergence search, and cache splicing all use this path, so their
  results are bit-comparable with each other.
* ``forward_sequence`` scores a whole (batched, right-padded) sequence in
  one pass. Training and perplexity use it. The two paths agree to float
  rounding, not bitwise.

Tensor naming: ``embed.tok``, ``embed.pos``,
``layer.{i}.{norm1|attn|norm2|mlp}.*``, ``norm_f.*``, ``head.out``,
``head.bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import torch

from .errors import CapacityError, ConfigError, NumericError

GradientSet = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_context: int = 256
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_context": self.max_context,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.max_context < 2:
            raise ConfigError("max_context must be at least 2")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_context": self.max_context,
            "layer_norm_eps": self.layer_norm_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def parameter_schema(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) pairs every checkpoint of ``config`` must carry."""
    d, f, v, c = config.d_model, config.d_ff, config.vocab_size, config.max_context
    schema: List[Tuple[str, Tuple[int, ...]]] = [
        ("embed.tok", (v, d)),
        ("embed.pos", (c, d)),
    ]
    for i in range(config.n_layers):
        p = f"layer.{i}"
        schema += [
            (f"{p}.norm1.weight", (d,)),
            (f"{p}.norm1.bias", (d,)),
            (f"{p}.attn.wq", (d, d)),
            (f"{p}.attn.wk", (d, d)),
            (f"{p}.attn.wv", (d, d)),
            (f"{p}.attn.wo", (d, d)),
            (f"{p}.norm2.weight", (d,)),
            (f"{p}.norm2.bias", (d,)),
            (f"{p}.mlp.w1", (f, d)),
            (f"{p}.mlp.b1", (f,)),
            (f"{p}.mlp.w2", (d, f)),
            (f"{p}.mlp.b2", (d,)),
        ]
    schema += [
        ("norm_f.weight", (d,)),
        ("norm_f.bias", (d,)),
        ("head.out", (v, d)),
        ("head.bias", (v,)),
    ]
    return schema


@dataclass
class ModelCheckpoint:
    """Architecture config plus an ordered map of parameter tensors.

    ``role_tag`` distinguishes a plain full-precision model (``fp``) from a
    latent model whose forward pass is meant to run through fake
    quantization (``quantized_latent``). ``dtype_tag`` records the stored
    precision (always ``fp32`` on disk).
    """

    config: ModelConfig
    params: Dict[str, torch.Tensor]
    dtype_tag: str = "fp32"
    role_tag: str = "fp"

    def validate(self) -> None:
        expected = parameter_schema(self.config)
        names = [n for n, _ in expected]
        if list(self.params.keys()) != names:
            missing = set(names) - set(self.params)
            extra = set(self.params) - set(names)
            raise ConfigError(
                f"parameter names do not match schema (missing={sorted(missing)}, "
                f"extra={sorted(extra)})"
            )
        for name, shape in expected:
            t = self.params[name]
            if tuple(t.shape) != shape:
                raise ConfigError(f"tensor {name} has shape {tuple(t.shape)}, expected {shape}")
        if self.role_tag not in ("fp", "quantized_latent"):
            raise ConfigError(f"unknown role_tag {self.role_tag!r}")

    def clone(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            config=self.config,
            params={k: v.clone() for k, v in self.params.items()},
            dtype_tag=self.dtype_tag,
            role_tag=self.role_tag,
        )

    def with_role(self, role_tag: str) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, self.params, self.dtype_tag, role_tag)

    def named_tensors(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self.params.items())


def init_checkpoint(
    config: ModelConfig,
    seed: int = 0,
    role_tag: str = "fp",
    zero_residual_projections: bool = True,
) -> ModelCheckpoint:
    """Gaussian(0, 0.02) weights, zero biases and norms at identity.

    With ``zero_residual_projections`` (the default) each block's output
    projections (``attn.wo`` and ``mlp.w2``) start at zero, so a fresh
    model's residual stream is exactly the embedding sum. Passing False
    gives a fully random model, which the small-vocabulary verifier uses.
    """
    gen = torch.Generator().manual_seed(seed)
    params: Dict[str, torch.Tensor] = {}
    for name, shape in parameter_schema(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("weight",) and "norm" in name:
            t = torch.ones(shape, dtype=torch.float32)
        elif leaf in ("bias", "b1", "b2"):
            t = torch.zeros(shape, dtype=torch.float32)
        elif leaf in ("wo", "w2") and zero_residual_projections:
            t = torch.zeros(shape, dtype=torch.float32)
        else:
            t = torch.empty(shape, dtype=torch.float32).normal_(0.0, 0.02, generator=gen)
        params[name] = t
    ckpt = ModelCheckpoint(config=config, params=params, role_tag=role_tag)
    ckpt.validate()
    return ckpt


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


@dataclass
class KVCacheSnapshot:
    """Truncated copy of a cache: per-layer (k, v) of shape [heads, t, d_head]."""

    layers: List[Tuple[torch.Tensor, torch.Tensor]]
    t: int


class KVCache:
    """Preallocated per-layer key/value buffers for one generation.

    All layers share the fill length ``t``. A cache is owned by exactly one
    in-flight generation; concurrent decodes must each build their own.
    """

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        self.config = config
        self.t = 0
        self.layers: List[Tuple[torch.Tensor, torch.Tensor]] = [
            (
                torch.zeros(config.n_heads, config.max_context, config.d_head, dtype=dtype),
                torch.zeros(config.n_heads, config.max_context, config.d_head, dtype=dtype),
            )
            for _ in range(config.n_layers)
        ]

    @property
    def dtype(self) -> torch.dtype:
        return self.layers[0][0].dtype

    def clone(self) -> "KVCache":
        out = KVCache(self.config, dtype=self.dtype)
        out.t = self.t
        for (ok, ov), (k, v) in zip(out.layers, self.layers):
            ok[:, : self.t].copy_(k[:, : self.t])
            ov[:, : self.t].copy_(v[:, : self.t])
        return out

    def snapshot(self) -> KVCacheSnapshot:
        return KVCacheSnapshot(
            layers=[(k[:, : self.t].clone(), v[:, : self.t].clone()) for k, v in self.layers],
            t=self.t,
        )

    @staticmethod
    def from_snapshot(snap: KVCacheSnapshot, config: ModelConfig) -> "KVCache":
        if len(snap.layers) != config.n_layers:
            raise ConfigError(
                f"snapshot has {len(snap.layers)} layers, model expects {config.n_layers}"
            )
        cache = KVCache(config, dtype=snap.layers[0][0].dtype)
        if snap.t > config.max_context:
            raise CapacityError(f"snapshot length {snap.t} exceeds context {config.max_context}")
        for (ck, cv), (k, v) in zip(cache.layers, snap.layers):
            if k.shape != (config.n_heads, snap.t, config.d_head):
                raise ConfigError(
                    f"snapshot layer shape {tuple(k.shape)} does not match model "
                    f"({config.n_heads}, {snap.t}, {config.d_head})"
                )
            ck[:, : snap.t].copy_(k)
            cv[:, : snap.t].copy_(v)
        cache.t = snap.t
        return cache

    def truncated(self, t: int) -> "KVCache":
        if t > self.t:
            raise ConfigError(f"cannot truncate cache of length {self.t} to {t}")
        out = KVCache(self.config, dtype=self.dtype)
        out.t = t
        for (ok, ov), (k, v) in zip(out.layers, self.layers):
            ok[:, :t].copy_(k[:, :t])
            ov[:, :t].copy_(v[:, :t])
        return out


# ---------------------------------------------------------------------------
# Forward paths
# ---------------------------------------------------------------------------


def _layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * weight + bias


def forward_step(
    ckpt: ModelCheckpoint,
    token: int,
    cache: KVCache,
    return_attn: bool = False,
):
    """Advance one token: returns (logits [vocab], cache) with cache.t + 1.

    The cache is mutated in place and returned; callers that need the prior
    state must ``clone()`` first. Raises ``CapacityError`` when the context
    window is full and ``NumericError`` if the logits go non-finite.
    """
    cfg = ckpt.config
    if cache.t >= cfg.max_context:
        raise CapacityError(
            f"context full: cache holds {cache.t} of {cfg.max_context} tokens"
        )
    if not (0 <= token < cfg.vocab_size):
        raise ConfigError(f"token {token} out of range for vocab {cfg.vocab_size}")
    P = ckpt.params
    t = cache.t
    eps = cfg.layer_norm_eps
    h = P["embed.tok"][token] + P["embed.pos"][t]
    scale = 1.0 / math.sqrt(cfg.d_head)
    attn_maps: List[torch.Tensor] = []
    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        x = _layer_norm(h, P[f"{p}.norm1.weight"], P[f"{p}.norm1.bias"], eps)
        q = (P[f"{p}.attn.wq"] @ x).view(cfg.n_heads, cfg.d_head)
        k = (P[f"{p}.attn.wk"] @ x).view(cfg.n_heads, cfg.d_head)
        v = (P[f"{p}.attn.wv"] @ x).view(cfg.n_heads, cfg.d_head)
        k_buf, v_buf = cache.layers[i]
        k_buf[:, t] = k
        v_buf[:, t] = v
        keys = k_buf[:, : t + 1]
        values = v_buf[:, : t + 1]
        scores = (keys @ q.unsqueeze(-1)).squeeze(-1) * scale
        attn = torch.softmax(scores, dim=-1)
        if return_attn:
            attn_maps.append(attn)
        ctx = (attn.unsqueeze(1) @ values).squeeze(1).reshape(cfg.d_model)
        h = h + P[f"{p}.attn.wo"] @ ctx
        x2 = _layer_norm(h, P[f"{p}.norm2.weight"], P[f"{p}.norm2.bias"], eps)
        hidden = torch.nn.functional.gelu(P[f"{p}.mlp.w1"] @ x2 + P[f"{p}.mlp.b1"])
        h = h + P[f"{p}.mlp.w2"] @ hidden + P[f"{p}.mlp.b2"]
    hf = _layer_norm(h, P["norm_f.weight"], P["norm_f.bias"], eps)
    logits = P["head.out"] @ hf + P["head.bias"]
    cache.t = t + 1
    if not torch.isfinite(logits).all():
        raise NumericError(f"non-finite logits at cache position {t}", step=t)
    if return_attn:
        return logits, cache, attn_maps
    return logits, cache


def forward_sequence(
    params: Dict[str, torch.Tensor],
    config: ModelConfig,
    tokens: torch.Tensor,
    return_attn: bool = False,
    collect_layer_inputs: Optional[Dict[str, List[torch.Tensor]]] = None,
):
    """Batched causal forward over [B, T] token ids; returns logits [B, T, V].

    Right padding is safe: a padded column never sits inside any valid
    row's causal window, so valid positions are unaffected.
    ``collect_layer_inputs`` optionally records the input activations of
    each matmul weight (for scale calibration).
    """
    cfg = config
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    B, T = tokens.shape
    if T > cfg.max_context:
        raise CapacityError(f"sequence length {T} exceeds context {cfg.max_context}")
    P = params
    dtype = P["embed.tok"].dtype
    eps = cfg.layer_norm_eps
    h = P["embed.tok"][tokens] + P["embed.pos"][:T]
    causal = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)
    scale = 1.0 / math.sqrt(cfg.d_head)
    attn_maps: List[torch.Tensor] = []

    def record(name: str, x: torch.Tensor) -> None:
        if collect_layer_inputs is not None:
            collect_layer_inputs.setdefault(name, []).append(
                x.detach().reshape(-1, x.shape[-1])
            )

    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        x = _layer_norm(h, P[f"{p}.norm1.weight"], P[f"{p}.norm1.bias"], eps)
        record(f"{p}.attn.wq", x)
        q = (x @ P[f"{p}.attn.wq"].T).view(B, T, cfg.n_heads, cfg.d_head).transpose(1, 2)
        k = (x @ P[f"{p}.attn.wk"].T).view(B, T, cfg.n_heads, cfg.d_head).transpose(1, 2)
        v = (x @ P[f"{p}.attn.wv"].T).view(B, T, cfg.n_heads, cfg.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) * scale
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if return_attn:
            attn_maps.append(attn)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
        record(f"{p}.attn.wo", ctx)
        h = h + ctx @ P[f"{p}.attn.wo"].T
        x2 = _layer_norm(h, P[f"{p}.norm2.weight"], P[f"{p}.norm2.bias"], eps)
        record(f"{p}.mlp.w1", x2)
        hidden = torch.nn.functional.gelu(x2 @ P[f"{p}.mlp.w1"].T + P[f"{p}.mlp.b1"])
        record(f"{p}.mlp.w2", hidden)
        h = h + hidden @ P[f"{p}.mlp.w2"].T + P[f"{p}.mlp.b2"]
    hf = _layer_norm(h, P["norm_f.weight"], P["norm_f.bias"], eps)
    record("head.out", hf)
    logits = hf @ P["head.out"].T + P["head.bias"]
    if return_attn:
        return logits, attn_maps
    return logits


def consume_tokens(ckpt: ModelCheckpoint, tokens, cache: KVCache) -> torch.Tensor:
    """Feed tokens through the cached path; returns logits after the last one."""
    logits = None
    for tok in tokens:
        logits, cache = forward_step(ckpt, int(tok), cache)
    if logits is None:
        raise ConfigError("consume_tokens requires at least one token")
    return logits


def sequence_logprob(
    ckpt: ModelCheckpoint,
    prompt: Tuple[int, ...],
    response: Tuple[int, ...],
) -> float:
    """Sum of response-token log probabilities given the prompt.

    Prompt positions are excluded; the sum runs over response tokens only
    and is accumulated in float64.
    """
    if not prompt or not response:
        raise ConfigError("prompt and response must be non-empty")
    tokens = torch.tensor([list(prompt) + list(response)], dtype=torch.long)
    logits = forward_sequence(ckpt.params, ckpt.config, tokens)
    logps = torch.log_softmax(logits[0], dim=-1)
    start = len(prompt) - 1
    idx = torch.tensor(list(response), dtype=torch.long)
    picked = logps[start : start + len(response)].gather(1, idx.unsqueeze(1)).squeeze(1)
    return float(picked.double().sum().item())


# ---------------------------------------------------------------------------
# Loss/gradient entry point (math lives in the train module)
# ---------------------------------------------------------------------------


def loss_and_grad(ckpt: ModelCheckpoint, loss_spec) -> Tuple[float, GradientSet]:
    """Scalar loss plus d(loss)/d(param) for every trainable tensor.

    Dispatches on ``loss_spec.kind``; raises ``NumericError`` when the loss
    goes non-finite.
    """
    from importlib import import_module

    return import_module("quantalign.train").evaluate_loss_spec(ckpt, loss_spec)


def validate_gradients(grads: GradientSet, ckpt: ModelCheckpoint) -> None:
    for name, _ in parameter_schema(ckpt.config):
        if name not in grads:
            raise ConfigError(f"gradient missing for {name}")
        if not torch.isfinite(grads[name]).all():
            raise NumericError(f"non-finite gradient for {name}")
