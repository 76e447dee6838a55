"""Preference pairs from paired decoding, preference math, and the
exhaustive argmax-preference verifier.

A pair's chosen side is the full-precision model's greedy response and its
rejected side is the quantized model's, for the same prompt. Pairs whose
two responses are identical carry no training signal and are dropped (and
counted). The verifier enumerates every response over a restricted
alphabet and checks that the implicit preference of the two exact
sequence-level argmaxes never falls below one half.
"""

from __future__ import annotations

import base64
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .checkpoint_io import checkpoint_content_hash
from .decode import DecodeParams, greedy_decode
from .errors import ConfigError
from .model import ModelCheckpoint, forward_sequence, sequence_logprob
from .quant import QuantSpec, fake_quant_forward

DEFAULT_BETA = 0.1


@dataclass
class PreferenceTriplet:
    x: Tuple[int, ...]
    y_w: Tuple[int, ...]
    y_l: Tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.y_w or not self.y_l:
            raise ConfigError("chosen and rejected responses must be non-empty")
        if self.y_w == self.y_l:
            raise ConfigError("identical chosen/rejected pair carries no signal")


@dataclass
class PreferenceDataset:
    triplets: List[PreferenceTriplet]
    provenance: dict
    dropped_identical: int = 0


def first_divergence_index(a: Sequence[int], b: Sequence[int]) -> Optional[int]:
    for i in range(min(len(a), len(b))):
        if a[i] != b[i]:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def build_dataset(
    fp: ModelCheckpoint,
    q_latent: ModelCheckpoint,
    spec: QuantSpec,
    prompts: Sequence[Sequence[int]],
    params: DecodeParams,
    workers: int = 1,
    greedy_gap_sample: int = 0,
) -> PreferenceDataset:
    """Greedy-decode both policies on each prompt and keep differing pairs.

    Output order follows prompt order regardless of worker count, so the
    dataset bytes are a pure function of (checkpoints, prompts, params).

    Greedy decoding only approximates the sequence-level argmax, so a
    pair's implicit preference may fall below one half; with
    ``greedy_gap_sample`` > 0 that fraction is measured on the first
    sampled pairs and recorded in the provenance (logged, never asserted).
    """
    if not prompts:
        raise ConfigError("prompt list is empty")
    if fp.config != q_latent.config:
        raise ConfigError("checkpoints have mismatched configs")
    q_view = fake_quant_forward(q_latent.with_role("quantized_latent"), spec)

    def one(idx_prompt):
        idx, prompt = idx_prompt
        w_trace = greedy_decode(fp, prompt, params)
        l_trace = greedy_decode(q_view, prompt, params)
        return idx, tuple(w_trace.tokens()), tuple(l_trace.tokens())

    items = list(enumerate(tuple(int(t) for t in p) for p in prompts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    results.sort(key=lambda r: r[0])

    triplets: List[PreferenceTriplet] = []
    dropped = 0
    for idx, y_w, y_l in results:
        if not y_w or not y_l or y_w == y_l:
            dropped += 1
            continue
        triplets.append(
            PreferenceTriplet(
                x=items[idx][1],
                y_w=y_w,
                y_l=y_l,
                meta={
                    "first_divergence_index": first_divergence_index(y_w, y_l),
                    "source_seed": idx,
                },
            )
        )
    provenance = {
        "fp_ckpt_hash": checkpoint_content_hash(fp),
        "q_ckpt_hash": checkpoint_content_hash(q_latent),
        "decode_params": params.to_dict(),
        "quant": spec.to_dict(),
        "creation_time": "",
    }
    if greedy_gap_sample > 0 and triplets:
        sample = triplets[: min(greedy_gap_sample, len(triplets))]
        below = sum(
            implicit_preference(fp, q_view, t.x, t.y_w, t.y_l, beta=DEFAULT_BETA) < 0.5
            for t in sample
        )
        provenance["greedy_gap_fraction"] = below / len(sample)
        provenance["greedy_gap_sample"] = len(sample)
    return PreferenceDataset(triplets=triplets, provenance=provenance, dropped_identical=dropped)


def save_dataset(dataset: PreferenceDataset, path) -> None:
    """Line-delimited records with a provenance header.

    The in-memory creation time is intentionally not serialized: dataset
    bytes must be identical across reruns with the same inputs.
    """
    header = dict(dataset.provenance)
    header.pop("creation_time", None)
    header["dropped_identical"] = dataset.dropped_identical
    header["count"] = len(dataset.triplets)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"provenance": header}, sort_keys=True, separators=(",", ":")) + "\n")
        for t in dataset.triplets:
            rec = {
                "x": base64.b64encode(bytes(t.x)).decode("ascii"),
                "chosen": base64.b64encode(bytes(t.y_w)).decode("ascii"),
                "rejected": base64.b64encode(bytes(t.y_l)).decode("ascii"),
                "meta": t.meta,
            }
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path) -> PreferenceDataset:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"empty dataset file: {path}")
    head = json.loads(lines[0])
    if "provenance" not in head:
        raise ConfigError("dataset file missing provenance header")
    provenance = head["provenance"]
    triplets = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        triplets.append(
            PreferenceTriplet(
                x=tuple(base64.b64decode(rec["x"])),
                y_w=tuple(base64.b64decode(rec["chosen"])),
                y_l=tuple(base64.b64decode(rec["rejected"])),
                meta=rec.get("meta", {}),
            )
        )
    return PreferenceDataset(
        triplets=triplets,
        provenance=provenance,
        dropped_identical=provenance.get("dropped_identical", 0),
    )


# ---------------------------------------------------------------------------
# Preference probabilities
# ---------------------------------------------------------------------------


def stable_sigmoid(a: float) -> float:
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    t = math.exp(a)
    return t / (1.0 + t)


def bt_probability(r1: float, r2: float) -> float:
    """Pairwise win probability of reward r1 over r2 (logistic in r1 - r2)."""
    if not (math.isfinite(r1) and math.isfinite(r2)):
        raise ConfigError("rewards must be finite")
    return stable_sigmoid(r1 - r2)


def implicit_preference(
    fp: ModelCheckpoint,
    q: ModelCheckpoint,
    x: Sequence[int],
    y1: Sequence[int],
    y2: Sequence[int],
    beta: float = DEFAULT_BETA,
) -> float:
    """Preference of y1 over y2 implied by the two policies' log ratios.

    sigma(beta * [log(pi_fp(y1)/pi_fp(y2)) - log(pi_q(y1)/pi_q(y2))]),
    with exact sequence log probabilities summed over response tokens.
    """
    if beta <= 0:
        raise ConfigError("beta must be positive")
    x = tuple(int(t) for t in x)
    y1 = tuple(int(t) for t in y1)
    y2 = tuple(int(t) for t in y2)
    lp_fp_1 = sequence_logprob(fp, x, y1)
    lp_fp_2 = sequence_logprob(fp, x, y2)
    lp_q_1 = sequence_logprob(q, x, y1)
    lp_q_2 = sequence_logprob(q, x, y2)
    a = beta * ((lp_fp_1 - lp_fp_2) - (lp_q_1 - lp_q_2))
    return stable_sigmoid(a)


# ---------------------------------------------------------------------------
# Exhaustive verifier
# ---------------------------------------------------------------------------

MAX_ENUM_VOCAB = 8
MAX_ENUM_LEN = 5


@dataclass
class ArgmaxPreferenceResult:
    holds: bool
    margin: float  # log-odds argument; >= 0 whenever the guarantee holds
    prob: float
    y1: Tuple[int, ...]
    y2: Tuple[int, ...]


def enumerate_sequence_logprobs(
    ckpt: ModelCheckpoint,
    x: Tuple[int, ...],
    max_len: int,
    eos_token: int,
) -> Dict[Tuple[int, ...], float]:
    """Exact log probability of every complete response of length <= max_len.

    Responses either end at the eos token or are truncated at max_len; the
    set is prefix-free, so the probabilities sum to one. One batched
    forward pass covers the whole tree: every eos-free prefix of length
    max_len - 1 is a row, and all shorter prefixes are materialized as the
    lexicographically first row extending them.
    """
    cfg = ckpt.config
    v = cfg.vocab_size
    if v > MAX_ENUM_VOCAB or max_len > MAX_ENUM_LEN:
        raise ConfigError(
            f"enumeration bound exceeded (vocab {v} <= {MAX_ENUM_VOCAB}, "
            f"max_len {max_len} <= {MAX_ENUM_LEN})"
        )
    if len(x) + max_len > cfg.max_context:
        raise ConfigError("prompt plus max_len exceeds the context window")
    non_eos = [t for t in range(v) if t != eos_token]
    nb = len(non_eos)
    depth = max_len - 1

    prefixes: List[Tuple[int, ...]] = []

    def build(prefix: Tuple[int, ...]):
        if len(prefix) == depth:
            prefixes.append(prefix)
            return
        for t in non_eos:
            build(prefix + (t,))

    build(())
    if not prefixes:
        prefixes = [()]
    rows = torch.tensor([list(x) + list(p) for p in prefixes], dtype=torch.long)
    logits = forward_sequence(ckpt.params, cfg, rows)
    logps = torch.log_softmax(logits.double(), dim=-1)

    # next_lp[b, d, tok]: logp of tok after consuming x plus d prefix tokens.
    start = len(x) - 1
    next_lp = logps[:, start : start + max_len, :]

    # Cumulative prefix log probabilities per row.
    cum64 = torch.zeros(len(prefixes), max_len, dtype=torch.float64)
    for d in range(1, max_len):
        toks = torch.tensor([p[d - 1] for p in prefixes], dtype=torch.long)
        cum64[:, d] = cum64[:, d - 1] + next_lp[:, d - 1, :].gather(
            1, toks.unsqueeze(1)
        ).squeeze(1)

    def canonical_row(prefix: Tuple[int, ...]) -> int:
        idx = 0
        for t in prefix:
            idx = idx * nb + non_eos.index(t)
        for _ in range(depth - len(prefix)):
            idx = idx * nb
        return idx

    out: Dict[Tuple[int, ...], float] = {}

    def emit(prefix: Tuple[int, ...]):
        b = canonical_row(prefix)
        d = len(prefix)
        if d < depth:
            out[prefix + (eos_token,)] = float(cum64[b, d] + next_lp[b, d, eos_token])
            for t in non_eos:
                emit(prefix + (t,))
        else:
            for t in range(v):
                out[prefix + (t,)] = float(cum64[b, d] + next_lp[b, d, t])

    emit(())
    return out


def verify_theorem_argmax_preference(
    fp: ModelCheckpoint,
    q: ModelCheckpoint,
    x: Sequence[int],
    max_len: int,
    beta: float = DEFAULT_BETA,
    eos_token: int = 0,
) -> ArgmaxPreferenceResult:
    """Brute-force check that the exact argmax of the full-precision policy
    is implicitly preferred (probability >= 0.5) over the quantized one's.

    Both argmaxes are taken over the identical enumerated response set with
    lexicographic tie-breaking, and the preference is evaluated on the same
    enumerated log probabilities, so the result is exact.
    """
    if beta <= 0:
        raise ConfigError("beta must be positive")
    if fp.config != q.config:
        raise ConfigError("checkpoints have mismatched configs")
    x = tuple(int(t) for t in x)
    lp_fp = enumerate_sequence_logprobs(fp, x, max_len, eos_token)
    lp_q = enumerate_sequence_logprobs(q, x, max_len, eos_token)
    order = sorted(lp_fp.keys())

    def argmax_of(table: Dict[Tuple[int, ...], float]) -> Tuple[int, ...]:
        best, best_lp = None, -math.inf
        for seq in order:
            if table[seq] > best_lp:
                best, best_lp = seq, table[seq]
        assert best is not None
        return best

    y1 = argmax_of(lp_fp)
    y2 = argmax_of(lp_q)
    a = beta * ((lp_fp[y1] - lp_fp[y2]) - (lp_q[y1] - lp_q[y2]))
    prob = stable_sigmoid(a)
    return ArgmaxPreferenceResult(holds=prob >= 0.5, margin=a, prob=prob, y1=y1, y2=y2)


# Name used by the CLI and acceptance suite.
verify_theorem1 = verify_theorem_argmax_preference
