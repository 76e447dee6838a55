"""Per-channel min-max uniform weight quantization with STE pass-through.

Each channel is quantized over its full min-max range: ``step = (max -
min) / (2^bits - 1)``, codes are round-half-away-from-zero of ``(w - min)
/ step``, and dequantization is ``min + code * step``. Channel parameters
are rounded to fp32 at construction (the on-disk width) while the
arithmetic runs in float64, so dequantized values are identical in memory
and after a save/load round trip.

Rounding ties go away from zero. The argument of the rounding is always
non-negative here, so this is ``floor(x + 0.5)``.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from .errors import ConfigError, NumericError
from .model import GradientSet, ModelCheckpoint, forward_sequence

# Embeddings, norm parameters, and biases stay full precision by default;
# every matmul weight is quantized.
DEFAULT_SKIP = (
    "embed.*",
    "*.norm1.*",
    "*.norm2.*",
    "norm_f.*",
    "*.mlp.b1",
    "*.mlp.b2",
    "head.bias",
)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    axis: int = 0
    rounding: str = "half_away_from_zero"
    skip_set: Tuple[str, ...] = DEFAULT_SKIP

    def __post_init__(self):
        if not (2 <= self.bits <= 8):
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        if self.rounding != "half_away_from_zero":
            raise ConfigError(f"unsupported rounding {self.rounding!r}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "axis": self.axis,
            "rounding": self.rounding,
            "skip_set": list(self.skip_set),
        }

    @staticmethod
    def from_dict(d: dict) -> "QuantSpec":
        return QuantSpec(
            bits=d["bits"],
            axis=d.get("axis", 0),
            rounding=d.get("rounding", "half_away_from_zero"),
            skip_set=tuple(d.get("skip_set", DEFAULT_SKIP)),
        )


@dataclass
class QuantizedTensor:
    """Integer codes plus per-channel (min, step); dequant = min + code*step."""

    codes: torch.Tensor  # [channels, elements_per_channel], uint8
    channel_min: torch.Tensor  # [channels], fp32
    channel_step: torch.Tensor  # [channels], fp32 (zero for constant channels)
    original_shape: Tuple[int, ...]
    axis: int = 0

    def dequantize(self) -> torch.Tensor:
        deq64 = self.channel_min.double().unsqueeze(1) + self.codes.double() * (
            self.channel_step.double().unsqueeze(1)
        )
        deq = deq64.to(torch.float32)
        return _unflatten_channels(deq, self.original_shape, self.axis)

    @property
    def bits_upper_bound(self) -> int:
        return int(self.codes.max().item()).bit_length() if self.codes.numel() else 0


def _flatten_channels(tensor: torch.Tensor, axis: int) -> torch.Tensor:
    if tensor.dim() == 0:
        raise ConfigError("cannot quantize a scalar tensor")
    if not (-tensor.dim() <= axis < tensor.dim()):
        raise ConfigError(f"axis {axis} invalid for tensor of rank {tensor.dim()}")
    return tensor.movedim(axis, 0).reshape(tensor.shape[axis], -1)


def _unflatten_channels(flat: torch.Tensor, shape: Tuple[int, ...], axis: int) -> torch.Tensor:
    moved_shape = (shape[axis],) + tuple(s for i, s in enumerate(shape) if i != axis)
    return flat.reshape(moved_shape).movedim(0, axis).contiguous()


def quantize(tensor: torch.Tensor, spec: QuantSpec, name: str = "<tensor>") -> QuantizedTensor:
    """Round-to-nearest quantization of one tensor along ``spec.axis``."""
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values in tensor {name}")
    flat = _flatten_channels(tensor, spec.axis).double()
    cmin = flat.min(dim=1).values
    cmax = flat.max(dim=1).values
    # Channel parameters are committed at fp32 before any arithmetic so the
    # in-memory codebook equals the serialized one.
    step32 = (((cmax - cmin) / spec.levels).to(torch.float32)).double()
    min32 = cmin.to(torch.float32).double()
    constant = cmax == cmin
    step32 = torch.where(constant, torch.zeros_like(step32), step32)
    safe_step = torch.where(constant, torch.ones_like(step32), step32)
    ratio = (flat - min32.unsqueeze(1)) / safe_step.unsqueeze(1)
    codes = torch.floor(ratio + 0.5).clamp_(0, spec.levels)
    codes = torch.where(constant.unsqueeze(1), torch.zeros_like(codes), codes)
    return QuantizedTensor(
        codes=codes.to(torch.uint8),
        channel_min=min32.to(torch.float32),
        channel_step=step32.to(torch.float32),
        original_shape=tuple(tensor.shape),
        axis=spec.axis,
    )


def dequantize(q: QuantizedTensor) -> torch.Tensor:
    return q.dequantize()


def quantized_names(ckpt: ModelCheckpoint, spec: QuantSpec) -> List[str]:
    """Parameter names the spec quantizes, in checkpoint order."""
    names = list(ckpt.params.keys())
    for pattern in spec.skip_set:
        if not any(fnmatch.fnmatchcase(n, pattern) for n in names):
            raise ConfigError(f"skip pattern {pattern!r} matches no parameter")
    return [
        n
        for n in names
        if not any(fnmatch.fnmatchcase(n, p) for p in spec.skip_set)
    ]


def fake_quant_forward(
    latent: ModelCheckpoint,
    spec: QuantSpec,
    scales: Optional[Dict[str, torch.Tensor]] = None,
) -> ModelCheckpoint:
    """Checkpoint view whose non-skipped tensors are quantize-then-dequantize.

    ``scales`` optionally applies a per-input-channel multiplier before
    quantization and divides it back out afterwards (the calibration
    hook). Skipped tensors pass through by reference.
    """
    if latent.role_tag != "quantized_latent":
        raise ConfigError(
            f"fake_quant_forward expects role_tag 'quantized_latent', got {latent.role_tag!r}"
        )
    qnames = set(quantized_names(latent, spec))
    params: Dict[str, torch.Tensor] = {}
    for name, tensor in latent.params.items():
        if name not in qnames:
            params[name] = tensor
            continue
        if scales is not None and name in scales:
            s = scales[name].to(tensor.dtype)
            scaled = tensor * s
            params[name] = (quantize(scaled, spec, name=name).dequantize() / s).to(tensor.dtype)
        else:
            params[name] = quantize(tensor, spec, name=name).dequantize().to(tensor.dtype)
    return ModelCheckpoint(
        config=latent.config,
        params=params,
        dtype_tag=latent.dtype_tag,
        role_tag="fp",
    )


def ste_backward(
    grads_wrt_quantized: GradientSet, latent: Optional[ModelCheckpoint] = None
) -> GradientSet:
    """Identity pass-through of gradients from forward weights to latent ones.

    The rounding inside quantization is treated as identity in the
    backward direction; skipped tensors were never transformed, so the map
    is the identity everywhere.
    """
    if latent is not None:
        for name, g in grads_wrt_quantized.items():
            if name not in latent.params:
                raise ConfigError(f"gradient for unknown parameter {name}")
            if tuple(g.shape) != tuple(latent.params[name].shape):
                raise ConfigError(
                    f"gradient shape {tuple(g.shape)} does not match latent "
                    f"{tuple(latent.params[name].shape)} for {name}"
                )
    return dict(grads_wrt_quantized)


SCALE_GRID = tuple(2.0 ** (k / 2.0) for k in range(-4, 5))  # 2^-2 .. 2^2, half-octave steps


def calibrate_scales(
    latent: ModelCheckpoint,
    spec: QuantSpec,
    calib_tokens: Sequence[Sequence[int]],
    max_rows_per_weight: int = 512,
) -> Dict[str, torch.Tensor]:
    """Per-input-channel scale search minimizing layer output error.

    For each quantized matmul weight, calibration activations are captured
    from a full-precision forward pass; each input channel then picks the
    scale from ``SCALE_GRID`` that minimizes the mean squared difference
    between full-precision and fake-quantized layer outputs, with the
    remaining channels held at 1. The grid contains 1.0, so the result is
    never worse than plain round-to-nearest on the calibration set.
    """
    if not calib_tokens:
        raise ConfigError("calibration token set is empty")
    collected: Dict[str, List[torch.Tensor]] = {}
    for seq in calib_tokens:
        toks = torch.tensor([list(seq)], dtype=torch.long)
        forward_sequence(latent.params, latent.config, toks, collect_layer_inputs=collected)
    scales: Dict[str, torch.Tensor] = {}
    for name in quantized_names(latent, spec):
        if name not in collected:
            continue
        acts = torch.cat(collected[name], dim=0)
        if acts.shape[0] > max_rows_per_weight:
            acts = acts[:max_rows_per_weight]
        weight = latent.params[name]
        scales[name] = _search_weight_scales(weight, spec, acts.double(), name)
    return scales


# Replace a unit scale only for a real improvement; calibration-noise-level
# wins stay at 1.0 (and at high bit widths nearly everything does).
MIN_RELATIVE_GAIN = 1e-3


def _search_weight_scales(
    weight: torch.Tensor, spec: QuantSpec, acts: torch.Tensor, name: str
) -> torch.Tensor:
    w64 = weight.double()
    ref = acts @ w64.T
    n_in = weight.shape[1]
    chosen = torch.ones(n_in, dtype=torch.float32)

    def mse_with(scale_vec: torch.Tensor) -> float:
        scaled = (weight * scale_vec).to(weight.dtype)
        deq = quantize(scaled, spec, name=name).dequantize().double() / scale_vec.double()
        return float(((acts @ deq.T) - ref).pow(2).mean().item())

    # Sequential coordinate descent: the working vector is always a grid
    # candidate of its own scan, so the final error never exceeds plain
    # round-to-nearest.
    current_mse = mse_with(chosen)
    for j in range(n_in):
        best_s, best_mse = float(chosen[j]), current_mse
        for s in SCALE_GRID:
            if s == best_s:
                continue
            chosen[j] = s
            mse = mse_with(chosen)
            if mse < best_mse * (1.0 - MIN_RELATIVE_GAIN):
                best_s, best_mse = s, mse
        chosen[j] = best_s
        current_mse = best_mse
    return chosen
