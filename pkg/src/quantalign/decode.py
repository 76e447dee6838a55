"""Deterministic greedy and beam decoding with full generation traces.

Traces record, for every emitted token, the top-k probabilities of the
step distribution, and can optionally carry KV-cache snapshots so the
breakdown harness can splice generation state between models. Ties are
broken toward the lowest token id everywhere, which makes decoding a pure
function of (checkpoint, prompt, params).
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .errors import CapacityError, ConfigError
from .model import KVCache, KVCacheSnapshot, ModelCheckpoint, forward_step

STOP_EOS = "eos"
STOP_MAX_TOKENS = "max_tokens"
STOP_CONTEXT_FULL = "context_full"


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int = 100
    num_beams: int = 1
    eos_token: int = 0
    topk_logged: int = 5

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.num_beams < 1:
            raise ConfigError("num_beams must be >= 1")
        if self.topk_logged < 1:
            raise ConfigError("topk_logged must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_new_tokens": self.max_new_tokens,
            "num_beams": self.num_beams,
            "eos_token": self.eos_token,
            "topk_logged": self.topk_logged,
        }

    @staticmethod
    def from_dict(d: dict) -> "DecodeParams":
        return DecodeParams(**d)


@dataclass
class TraceStep:
    chosen: int
    topk: List[Tuple[int, float]]  # (token, probability), descending
    cache_snapshot_id: Optional[int] = None


@dataclass
class GenerationTrace:
    prompt: Tuple[int, ...]
    steps: List[TraceStep]
    stop_reason: str
    # Snapshots live beside the steps; cache_snapshot_id indexes this list.
    snapshots: List[KVCacheSnapshot] = field(default_factory=list)
    # Beam instrumentation: live hypotheses expanded at each step.
    beam_expansions: List[int] = field(default_factory=list)

    def tokens(self) -> List[int]:
        return [s.chosen for s in self.steps]

    def text(self) -> str:
        return bytes(t for t in self.tokens()).decode("utf-8", errors="replace")


def argmax_lowest(logits: torch.Tensor) -> int:
    """Index of the max value; ties resolve to the lowest index."""
    m = logits.max()
    return int((logits == m).nonzero()[0].item())


def _topk_pairs(probs: torch.Tensor, k: int) -> List[Tuple[int, float]]:
    k = min(k, probs.shape[0])
    vals, idx = torch.sort(probs, descending=True, stable=True)
    return [(int(idx[i].item()), float(vals[i].item())) for i in range(k)]


def _consume_prompt(ckpt: ModelCheckpoint, prompt: Sequence[int], cache: KVCache) -> torch.Tensor:
    logits = None
    for tok in prompt:
        logits, cache = forward_step(ckpt, int(tok), cache)
    assert logits is not None
    return logits


def greedy_decode(
    ckpt: ModelCheckpoint,
    prompt: Sequence[int],
    params: DecodeParams,
    collect_snapshots: bool = False,
) -> GenerationTrace:
    """Argmax decoding; stops at eos, max_new_tokens, or a full context.

    With ``collect_snapshots`` each step stores the cache state that
    produced its logits (covering prompt plus all previously generated
    tokens).
    """
    cfg = ckpt.config
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    if len(prompt) > cfg.max_context:
        raise CapacityError(f"prompt of {len(prompt)} tokens exceeds context {cfg.max_context}")
    if len(prompt) == cfg.max_context:
        return GenerationTrace(prompt=prompt, steps=[], stop_reason=STOP_CONTEXT_FULL)
    cache = KVCache(cfg)
    logits = _consume_prompt(ckpt, prompt, cache)
    trace = GenerationTrace(prompt=prompt, steps=[], stop_reason=STOP_MAX_TOKENS)
    for j in range(params.max_new_tokens):
        snap_id = None
        if collect_snapshots:
            trace.snapshots.append(cache.snapshot())
            snap_id = len(trace.snapshots) - 1
        probs = torch.softmax(logits, dim=-1)
        chosen = argmax_lowest(probs)
        trace.steps.append(
            TraceStep(chosen=chosen, topk=_topk_pairs(probs, params.topk_logged), cache_snapshot_id=snap_id)
        )
        if chosen == params.eos_token:
            trace.stop_reason = STOP_EOS
            return trace
        if j + 1 == params.max_new_tokens:
            trace.stop_reason = STOP_MAX_TOKENS
            return trace
        if cache.t >= cfg.max_context:
            trace.stop_reason = STOP_CONTEXT_FULL
            return trace
        logits, cache = forward_step(ckpt, chosen, cache)
    return trace


def snapshot_cache(trace: GenerationTrace, step_index: int) -> KVCacheSnapshot:
    """Cache state that produced the logits of ``trace.steps[step_index]``."""
    if not (0 <= step_index < len(trace.steps)):
        raise ConfigError(f"step index {step_index} out of range")
    sid = trace.steps[step_index].cache_snapshot_id
    if sid is None:
        raise ConfigError("trace was decoded without snapshot collection")
    return trace.snapshots[sid]


def decode_with_spliced_state(
    ckpt: ModelCheckpoint,
    prompt: Sequence[int],
    prefix_tokens: Sequence[int],
    injected_cache: KVCacheSnapshot,
    forced_first_token: Optional[int],
    params: DecodeParams,
) -> GenerationTrace:
    """Continue generation from an injected KV state.

    The injected cache must cover exactly ``prompt + prefix_tokens``. When
    ``forced_first_token`` is given it is emitted unconditionally as step 0
    (no distribution is logged for it) and decoding proceeds greedily with
    ``ckpt``. Without a forced token, the final context token is re-run
    against the cache (truncated by one) to recover next-token logits; for
    a cache produced by the same model this reproduces the uninterrupted
    continuation exactly.
    """
    cfg = ckpt.config
    prompt = tuple(int(t) for t in prompt)
    prefix_tokens = tuple(int(t) for t in prefix_tokens)
    context = prompt + prefix_tokens
    if not context:
        raise ConfigError("prompt plus prefix must be non-empty")
    if injected_cache.t != len(context):
        raise ConfigError(
            f"injected cache covers {injected_cache.t} tokens, "
            f"prompt+prefix has {len(context)}"
        )
    cache = KVCache.from_snapshot(injected_cache, cfg)
    trace = GenerationTrace(prompt=prompt, steps=[], stop_reason=STOP_MAX_TOKENS)

    if forced_first_token is not None:
        chosen = int(forced_first_token)
        trace.steps.append(TraceStep(chosen=chosen, topk=[]))
        if chosen == params.eos_token:
            trace.stop_reason = STOP_EOS
            return trace
        if params.max_new_tokens == 1:
            trace.stop_reason = STOP_MAX_TOKENS
            return trace
        if cache.t >= cfg.max_context:
            trace.stop_reason = STOP_CONTEXT_FULL
            return trace
        logits, cache = forward_step(ckpt, chosen, cache)
        emitted = 1
    else:
        cache = cache.truncated(cache.t - 1)
        logits, cache = forward_step(ckpt, context[-1], cache)
        emitted = 0

    for j in range(emitted, params.max_new_tokens):
        probs = torch.softmax(logits, dim=-1)
        chosen = argmax_lowest(probs)
        trace.steps.append(TraceStep(chosen=chosen, topk=_topk_pairs(probs, params.topk_logged)))
        if chosen == params.eos_token:
            trace.stop_reason = STOP_EOS
            return trace
        if j + 1 == params.max_new_tokens:
            trace.stop_reason = STOP_MAX_TOKENS
            return trace
        if cache.t >= cfg.max_context:
            trace.stop_reason = STOP_CONTEXT_FULL
            return trace
        logits, cache = forward_step(ckpt, chosen, cache)
    return trace


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------


@dataclass
class _Hypothesis:
    tokens: List[int]
    logprob_sum: float
    steps: List[TraceStep]
    cache: KVCache
    logits: torch.Tensor

    def normalized(self) -> float:
        return self.logprob_sum / max(1, len(self.tokens))


@dataclass
class _Finished:
    tokens: List[int]
    logprob_sum: float
    steps: List[TraceStep]
    stop_reason: str

    def normalized(self) -> float:
        return self.logprob_sum / max(1, len(self.tokens))


def beam_decode(
    ckpt: ModelCheckpoint,
    prompt: Sequence[int],
    params: DecodeParams,
) -> GenerationTrace:
    """Length-normalized beam search; returns the best hypothesis as a trace.

    Keeps exactly ``num_beams`` live hypotheses per step (counted in
    ``beam_expansions``). Hypotheses ending in eos are set aside; the
    search stops once ``num_beams`` of them are collected or the token
    budget runs out, and the best of finished plus live wins by
    length-normalized total log probability. With ``num_beams=1`` this
    reduces to greedy decoding token for token.
    """
    cfg = ckpt.config
    W = params.num_beams
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    if len(prompt) > cfg.max_context:
        raise CapacityError(f"prompt of {len(prompt)} tokens exceeds context {cfg.max_context}")
    if len(prompt) == cfg.max_context:
        return GenerationTrace(prompt=prompt, steps=[], stop_reason=STOP_CONTEXT_FULL)
    cache = KVCache(cfg)
    logits = _consume_prompt(ckpt, prompt, cache)
    live: List[_Hypothesis] = [
        _Hypothesis(tokens=[], logprob_sum=0.0, steps=[], cache=cache, logits=logits)
    ]
    finished: List[_Finished] = []
    expansions: List[int] = []

    for step in range(params.max_new_tokens):
        expansions.append(len(live))
        candidates: List[Tuple[float, int, int, List[Tuple[int, float]]]] = []
        for h_idx, hyp in enumerate(live):
            logp = torch.log_softmax(hyp.logits, dim=-1)
            probs = torch.softmax(hyp.logits, dim=-1)
            pairs = _topk_pairs(probs, max(params.topk_logged, min(cfg.vocab_size, 2 * W + 1)))
            for tok, _prob in pairs:
                total = hyp.logprob_sum + float(logp[tok].item())
                candidates.append((total, tok, h_idx, pairs))
        # Deterministic order: higher total first, then lower token, lower parent.
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live: List[_Hypothesis] = []
        for rank, (total, tok, h_idx, pairs) in enumerate(candidates):
            parent = live[h_idx]
            step_rec = TraceStep(chosen=tok, topk=pairs[: params.topk_logged])
            if tok == params.eos_token:
                # An eos hypothesis completes only when it ranks within the
                # beam width; lower-ranked eos candidates are discarded.
                if rank < W:
                    finished.append(
                        _Finished(
                            tokens=parent.tokens + [tok],
                            logprob_sum=total,
                            steps=parent.steps + [step_rec],
                            stop_reason=STOP_EOS,
                        )
                    )
                continue
            if len(next_live) < W:
                if parent.cache.t >= cfg.max_context:
                    finished.append(
                        _Finished(
                            tokens=parent.tokens + [tok],
                            logprob_sum=total,
                            steps=parent.steps + [step_rec],
                            stop_reason=STOP_CONTEXT_FULL,
                        )
                    )
                    continue
                # Each child owns its cache; parents may spawn several children.
                new_cache = parent.cache.clone()
                new_logits, new_cache = forward_step(ckpt, tok, new_cache)
                next_live.append(
                    _Hypothesis(
                        tokens=parent.tokens + [tok],
                        logprob_sum=total,
                        steps=parent.steps + [step_rec],
                        cache=new_cache,
                        logits=new_logits,
                    )
                )
        live = next_live
        if len(finished) >= W or not live:
            break

    # When the search stopped because enough hypotheses completed, the
    # completed set is the result pool (this is what makes width 1 match
    # greedy decoding exactly). Otherwise survivors compete too.
    pool: List[Tuple[float, int, List[TraceStep], str]] = []
    for i, f in enumerate(finished):
        pool.append((f.normalized(), i, f.steps, f.stop_reason))
    if len(finished) < W:
        for i, h in enumerate(live):
            pool.append((h.normalized(), len(finished) + i, h.steps, STOP_MAX_TOKENS))
    if not pool:
        return GenerationTrace(prompt=prompt, steps=[], stop_reason=STOP_CONTEXT_FULL)
    pool.sort(key=lambda e: (-e[0], e[1]))
    _, _, steps, stop = pool[0]
    trace = GenerationTrace(prompt=prompt, steps=steps, stop_reason=stop)
    trace.beam_expansions = expansions
    return trace


def total_logprob(trace: GenerationTrace) -> float:
    """Sum of the chosen tokens' log probabilities along a trace.

    Requires every step to carry its distribution (no forced steps) and
    the chosen token to be in the logged top-k.
    """
    total = 0.0
    for s in trace.steps:
        probs = dict(s.topk)
        if s.chosen not in probs:
            raise ConfigError("chosen token missing from logged top-k; raise topk_logged")
        total += math.log(probs[s.chosen])
    return total


# ---------------------------------------------------------------------------
# Trace serialization: JSONL records plus a binary snapshot sidecar
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"QASNAP01"


def write_traces(path, traces: Sequence[GenerationTrace], sidecar_path=None) -> None:
    """One JSON record per generation; snapshots go to a sidecar by id."""
    sidecar: List[Tuple[int, KVCacheSnapshot]] = []
    next_id = 0
    with open(path, "w", encoding="utf-8") as f:
        for trace in traces:
            id_map: Dict[int, int] = {}
            if sidecar_path is not None:
                for local_id, snap in enumerate(trace.snapshots):
                    id_map[local_id] = next_id
                    sidecar.append((next_id, snap))
                    next_id += 1
            rec = {
                "prompt_b64": base64.b64encode(bytes(trace.prompt)).decode("ascii"),
                "stop_reason": trace.stop_reason,
                "steps": [
                    {
                        "chosen": s.chosen,
                        "topk": [[t, p] for t, p in s.topk],
                        "snap": id_map.get(s.cache_snapshot_id)
                        if s.cache_snapshot_id is not None
                        else None,
                    }
                    for s in trace.steps
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    if sidecar_path is not None:
        write_snapshot_sidecar(sidecar_path, sidecar)


def read_traces(path) -> List[GenerationTrace]:
    traces: List[GenerationTrace] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            prompt = tuple(base64.b64decode(rec["prompt_b64"]))
            steps = [
                TraceStep(
                    chosen=s["chosen"],
                    topk=[(int(t), float(p)) for t, p in s["topk"]],
                    cache_snapshot_id=s.get("snap"),
                )
                for s in rec["steps"]
            ]
            traces.append(
                GenerationTrace(prompt=prompt, steps=steps, stop_reason=rec["stop_reason"])
            )
    return traces


def write_snapshot_sidecar(path, items: Sequence[Tuple[int, KVCacheSnapshot]]) -> None:
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<I", len(items)))
        for snap_id, snap in items:
            n_layers = len(snap.layers)
            h, t, d = snap.layers[0][0].shape if n_layers else (0, 0, 0)
            f.write(struct.pack("<QIIII", snap_id, n_layers, int(h), snap.t, int(d)))
            for k, v in snap.layers:
                f.write(k.contiguous().numpy().tobytes())
                f.write(v.contiguous().numpy().tobytes())


def read_snapshot_sidecar(path) -> Dict[int, KVCacheSnapshot]:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise ConfigError("not a snapshot sidecar file")
    off = len(SNAPSHOT_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out: Dict[int, KVCacheSnapshot] = {}
    for _ in range(count):
        snap_id, n_layers, h, t, d = struct.unpack_from("<QIIII", data, off)
        off += struct.calcsize("<QIIII")
        layers = []
        nbytes = h * t * d * 4
        for _layer in range(n_layers):
            k = torch.frombuffer(bytearray(data[off : off + nbytes]), dtype=torch.float32)
            off += nbytes
            v = torch.frombuffer(bytearray(data[off : off + nbytes]), dtype=torch.float32)
            off += nbytes
            layers.append((k.reshape(h, t, d).clone(), v.reshape(h, t, d).clone()))
        out[snap_id] = KVCacheSnapshot(layers=layers, t=t)
    return out
