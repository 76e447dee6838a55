"""Bit-exact checkpoint serialization.

Layout::

    magic (8 bytes, b"QACKPT01")
    header_len (uint64 LE)
    header (UTF-8 JSON: config, tags, tensor index with name/shape/offset)
    payload (concatenated raw little-endian blobs)
    checksum (8 bytes: leading bytes of SHA-256 over everything before it)

Dense tensors are stored as fp32. Quantized tensors use dtype ``q{bits}``
with three blobs per tensor: uint8 codes, fp32 channel minima, fp32
channel steps.
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
from typing import Dict, Optional, Tuple

import torch

from .errors import (
    CheckpointChecksumError,
    CheckpointSchemaError,
    CheckpointTruncatedError,
    ConfigError,
)
from .model import ModelCheckpoint, ModelConfig

MAGIC = b"QACKPT01"

if sys.byteorder != "little":
    raise RuntimeError("checkpoint format assumes a little-endian host")


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().contiguous().numpy().tobytes()


def _checksum(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()[:8]


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    ckpt.validate()
    index = []
    payload = bytearray()
    for name, tensor in ckpt.params.items():
        if tensor.dtype != torch.float32:
            raise ConfigError(f"tensor {name} is {tensor.dtype}, expected float32")
        blob = _tensor_bytes(tensor)
        index.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "fp32",
                "offset": len(payload),
                "nbytes": len(blob),
            }
        )
        payload.extend(blob)
    header = {
        "format_version": 1,
        "config": ckpt.config.to_dict(),
        "dtype_tag": ckpt.dtype_tag,
        "role_tag": ckpt.role_tag,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(payload)
    with open(path, "wb") as f:
        f.write(body)
        f.write(_checksum(body))


def save_quantized_checkpoint(path, ckpt: ModelCheckpoint, spec) -> None:
    """Store a latent checkpoint with its non-skipped tensors quantized.

    The stored form is lossy for quantized tensors (they round-trip to
    their dequantized values); skipped tensors stay fp32 and round-trip
    bit-exactly.
    """
    from .quant import quantize, quantized_names

    ckpt.validate()
    qnames = set(quantized_names(ckpt, spec))
    index = []
    payload = bytearray()
    for name, tensor in ckpt.params.items():
        if name in qnames:
            q = quantize(tensor, spec, name=name)
            codes = q.codes.to(torch.uint8).contiguous().numpy().tobytes()
            mins = _tensor_bytes(q.channel_min)
            steps = _tensor_bytes(q.channel_step)
            entry = {
                "name": name,
                "shape": list(q.original_shape),
                "dtype": f"q{spec.bits}",
                "axis": spec.axis,
                "offset": len(payload),
                "nbytes": len(codes),
                "min_nbytes": len(mins),
                "step_nbytes": len(steps),
            }
            payload.extend(codes)
            entry["min_offset"] = len(payload)
            payload.extend(mins)
            entry["step_offset"] = len(payload)
            payload.extend(steps)
            index.append(entry)
        else:
            blob = _tensor_bytes(tensor)
            index.append(
                {
                    "name": name,
                    "shape": list(tensor.shape),
                    "dtype": "fp32",
                    "offset": len(payload),
                    "nbytes": len(blob),
                }
            )
            payload.extend(blob)
    header = {
        "format_version": 1,
        "config": ckpt.config.to_dict(),
        "dtype_tag": f"q{spec.bits}",
        "role_tag": ckpt.role_tag,
        "quant": {"bits": spec.bits, "axis": spec.axis, "rounding": spec.rounding},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(payload)
    with open(path, "wb") as f:
        f.write(body)
        f.write(_checksum(body))


def _read_exact(data: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(data):
        raise CheckpointTruncatedError(f"file truncated while reading {what}")
    return data[offset : offset + n]


def load_checkpoint(path) -> ModelCheckpoint:
    """Load a checkpoint; quantized tensors are returned dequantized (fp32)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 + 8:
        raise CheckpointTruncatedError("file too short for header")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointSchemaError("bad magic; not a checkpoint file")
    body, stored = data[:-8], data[-8:]
    if _checksum(body) != stored:
        raise CheckpointChecksumError("checksum mismatch; file corrupt")
    (header_len,) = struct.unpack("<Q", body[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    header_bytes = _read_exact(body, header_start, header_len, "header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointSchemaError(f"unparseable header: {e}") from e
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointSchemaError(f"invalid config in header: {e}") from e
    payload_start = header_start + header_len
    payload = body[payload_start:]
    params: Dict[str, torch.Tensor] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        dtype = entry["dtype"]
        if dtype == "fp32":
            blob = _read_exact(payload, entry["offset"], entry["nbytes"], name)
            t = torch.frombuffer(bytearray(blob), dtype=torch.float32).reshape(shape).clone()
        elif dtype.startswith("q"):
            t = _load_quantized_entry(payload, entry)
        else:
            raise CheckpointSchemaError(f"unknown dtype {dtype!r} for tensor {name}")
        params[name] = t
    ckpt = ModelCheckpoint(
        config=config,
        params=params,
        dtype_tag=header.get("dtype_tag", "fp32"),
        role_tag=header.get("role_tag", "fp"),
    )
    try:
        ckpt.validate()
    except ConfigError as e:
        raise CheckpointSchemaError(str(e)) from e
    return ckpt


def _load_quantized_entry(payload: bytes, entry: dict) -> torch.Tensor:
    from .quant import QuantizedTensor

    name = entry["name"]
    shape = tuple(entry["shape"])
    codes_blob = _read_exact(payload, entry["offset"], entry["nbytes"], f"{name} codes")
    mins_blob = _read_exact(payload, entry["min_offset"], entry["min_nbytes"], f"{name} minima")
    steps_blob = _read_exact(payload, entry["step_offset"], entry["step_nbytes"], f"{name} steps")
    codes_flat = torch.frombuffer(bytearray(codes_blob), dtype=torch.uint8).clone()
    mins = torch.frombuffer(bytearray(mins_blob), dtype=torch.float32).clone()
    steps = torch.frombuffer(bytearray(steps_blob), dtype=torch.float32).clone()
    axis = entry["axis"]
    n_channels = shape[axis]
    codes = codes_flat.reshape(n_channels, -1)
    q = QuantizedTensor(
        codes=codes,
        channel_min=mins,
        channel_step=steps,
        original_shape=shape,
        axis=axis,
    )
    return q.dequantize()


def checkpoint_content_hash(ckpt: ModelCheckpoint) -> str:
    """SHA-256 over config and raw tensor bytes; stable across processes."""
    h = hashlib.sha256()
    h.update(json.dumps(ckpt.config.to_dict(), sort_keys=True).encode())
    for name, tensor in ckpt.params.items():
        h.update(name.encode())
        h.update(_tensor_bytes(tensor))
    return h.hexdigest()
