"""Measurement suite for quantization-induced generation drift.

* Divergence search: run the baseline and quantized models in teacher-
  forced lockstep (both consume the baseline's token stream) and record
  the first step whose argmax tokens differ, dumping both KV caches at
  that point.
* Breakdown harness: restart generation from the divergence with each of
  the eight on/off combinations of three factors: the flipped token
  itself, the perturbed KV cache, and ongoing quantization error in the
  continuing model.
* ROUGE-1/2/L, top-1 minus top-2 probability margins, and windowed
  perplexity round out the suite.

Continuations are scored against the baseline continuation only (the
shared prefix would inflate similarity).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .decode import (
    DecodeParams,
    GenerationTrace,
    argmax_lowest,
    decode_with_spliced_state,
    greedy_decode,
)
from .errors import CapacityError, ConfigError
from .model import (
    KVCache,
    KVCacheSnapshot,
    ModelCheckpoint,
    forward_sequence,
    forward_step,
)

DIVERGENCE_HORIZON = 100


@dataclass(frozen=True)
class BreakdownCase:
    """One of eight divergence scenarios, keyed by three boolean factors.

    Case 1 has all factors on (standard quantized inference); case 8 has
    all off (baseline inference). The id equals 1 plus the binary value of
    (not flipped_token, not perturbed_kv, not quant_error), flipped token
    most significant.
    """

    flipped_token: bool
    perturbed_kv: bool
    quant_error: bool

    @property
    def case_id(self) -> int:
        return 1 + (
            ((not self.flipped_token) << 2)
            | ((not self.perturbed_kv) << 1)
            | (not self.quant_error)
        )

    @staticmethod
    def from_case_id(case_id: int) -> "BreakdownCase":
        if not (1 <= case_id <= 8):
            raise ConfigError(f"case_id must be in 1..8, got {case_id}")
        bits = case_id - 1
        return BreakdownCase(
            flipped_token=not bool((bits >> 2) & 1),
            perturbed_kv=not bool((bits >> 1) & 1),
            quant_error=not bool(bits & 1),
        )

    @staticmethod
    def all_cases() -> List["BreakdownCase"]:
        return [BreakdownCase.from_case_id(i) for i in range(1, 9)]


@dataclass
class DivergenceRecord:
    prompt: Tuple[int, ...]
    divergence_index: Optional[int]
    baseline_token: Optional[int] = None
    flipped_token: Optional[int] = None
    baseline_cache: Optional[KVCacheSnapshot] = None
    quant_cache: Optional[KVCacheSnapshot] = None
    baseline_prefix: Tuple[int, ...] = ()
    baseline_cache_id: Optional[int] = None
    quant_cache_id: Optional[int] = None


@dataclass
class RougeScore:
    rouge1_p: float
    rouge1_r: float
    rouge1_f: float
    rouge2_p: float
    rouge2_r: float
    rouge2_f: float
    rougeL_p: float
    rougeL_r: float
    rougeL_f: float


def find_divergence(
    fp: ModelCheckpoint,
    q: ModelCheckpoint,
    prompt: Sequence[int],
    params: DecodeParams,
    horizon: Optional[int] = None,
) -> DivergenceRecord:
    """First step where the two models' argmax differs, within ``horizon``
    steps (defaulting to ``params.max_new_tokens``, canonically 100).

    Both models consume the identical baseline token stream (teacher-forced
    lockstep), so "first different token" is well defined. On divergence,
    both caches are dumped in the state that produced the differing logits.
    """
    if horizon is None:
        horizon = params.max_new_tokens
    if fp.config != q.config:
        raise ConfigError("checkpoints have mismatched configs")
    cfg = fp.config
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    if len(prompt) >= cfg.max_context:
        return DivergenceRecord(prompt=prompt, divergence_index=None)
    fp_cache = KVCache(cfg)
    q_cache = KVCache(cfg)
    fp_logits = None
    q_logits = None
    for tok in prompt:
        fp_logits, fp_cache = forward_step(fp, tok, fp_cache)
        q_logits, q_cache = forward_step(q, tok, q_cache)
    prefix: List[int] = []
    for j in range(horizon):
        base_tok = argmax_lowest(fp_logits)
        quant_tok = argmax_lowest(q_logits)
        if base_tok != quant_tok:
            return DivergenceRecord(
                prompt=prompt,
                divergence_index=j,
                baseline_token=base_tok,
                flipped_token=quant_tok,
                baseline_cache=fp_cache.snapshot(),
                quant_cache=q_cache.snapshot(),
                baseline_prefix=tuple(prefix),
            )
        if base_tok == params.eos_token:
            break
        if fp_cache.t >= cfg.max_context:
            break
        prefix.append(base_tok)
        fp_logits, fp_cache = forward_step(fp, base_tok, fp_cache)
        q_logits, q_cache = forward_step(q, base_tok, q_cache)
    return DivergenceRecord(prompt=prompt, divergence_index=None)


def run_breakdown_case(
    fp: ModelCheckpoint,
    q: ModelCheckpoint,
    record: DivergenceRecord,
    case: BreakdownCase,
    params: DecodeParams,
) -> GenerationTrace:
    """Continuation from the divergence under one factor combination.

    Step 0 emits the flipped token when the flipped-token factor is on,
    else the baseline token; the injected cache is the quantized model's
    when the KV factor is on, else the baseline's; steps after 0 are
    generated by the quantized model when the error factor is on, else the
    baseline model.
    """
    if record.divergence_index is None:
        raise ConfigError("record has no divergence to break down")
    first = record.flipped_token if case.flipped_token else record.baseline_token
    snap = record.quant_cache if case.perturbed_kv else record.baseline_cache
    gen_model = q if case.quant_error else fp
    return decode_with_spliced_state(
        gen_model,
        record.prompt,
        record.baseline_prefix,
        snap,
        forced_first_token=first,
        params=params,
    )


@dataclass
class BreakdownRow:
    prompt_id: int
    case_id: int
    rouge1: float
    rouge2: float
    rougeL: float


def breakdown_suite(
    fp: ModelCheckpoint,
    q: ModelCheckpoint,
    prompts: Sequence[Sequence[int]],
    params: DecodeParams,
    min_divergent: Optional[int] = None,
    workers: int = 1,
) -> Tuple[List[BreakdownRow], List[DivergenceRecord]]:
    """Per-prompt, per-case ROUGE of each continuation against the baseline
    continuation (case 8). Prompts without divergence are skipped; the scan
    stops once ``min_divergent`` divergent prompts have been processed.

    Caches are released after each prompt, so memory stays flat.
    """
    rows: List[BreakdownRow] = []
    records: List[DivergenceRecord] = []
    divergent = 0
    for pid, prompt in enumerate(prompts):
        record = find_divergence(fp, q, prompt, params)
        if record.divergence_index is None:
            records.append(record)
            continue
        baseline = run_breakdown_case(fp, q, record, BreakdownCase.from_case_id(8), params)
        ref_units = continuation_units(baseline)
        if not ref_units:
            records.append(DivergenceRecord(prompt=record.prompt, divergence_index=None))
            continue

        def one_case(case: BreakdownCase):
            if case.case_id == 8:
                trace = baseline
            else:
                trace = run_breakdown_case(fp, q, record, case, params)
            cand = continuation_units(trace)
            score = rouge(cand, ref_units)
            return BreakdownRow(
                prompt_id=pid,
                case_id=case.case_id,
                rouge1=score.rouge1_f,
                rouge2=score.rouge2_f,
                rougeL=score.rougeL_f,
            )

        cases = BreakdownCase.all_cases()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                case_rows = list(pool.map(one_case, cases))
        else:
            case_rows = [one_case(c) for c in cases]
        rows.extend(sorted(case_rows, key=lambda r: r.case_id))
        records.append(DivergenceRecord(
            prompt=record.prompt,
            divergence_index=record.divergence_index,
            baseline_token=record.baseline_token,
            flipped_token=record.flipped_token,
            baseline_prefix=record.baseline_prefix,
        ))
        divergent += 1
        if min_divergent is not None and divergent >= min_divergent:
            break
    return rows, records


def flip_scan(
    fp: ModelCheckpoint,
    q: ModelCheckpoint,
    prompts: Sequence[Sequence[int]],
    params: DecodeParams,
    workers: int = 1,
) -> List[DivergenceRecord]:
    """Divergence search over many prompts, caches dropped to keep memory flat."""

    def one(idx_prompt):
        idx, prompt = idx_prompt
        r = find_divergence(fp, q, prompt, params)
        return idx, DivergenceRecord(
            prompt=r.prompt,
            divergence_index=r.divergence_index,
            baseline_token=r.baseline_token,
            flipped_token=r.flipped_token,
        )

    items = list(enumerate(prompts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    results.sort(key=lambda r: r[0])
    return [r for _, r in results]


def flip_rate(records: Sequence[DivergenceRecord]) -> float:
    if not records:
        return 0.0
    return sum(1 for r in records if r.divergence_index is not None) / len(records)


def continuation_units(trace: GenerationTrace, eos_token: int = 0) -> List:
    """Scoring units for a continuation: whitespace words when the bytes
    decode as UTF-8, raw bytes otherwise."""
    toks = [t for t in trace.tokens() if t != eos_token]
    return tokens_to_units(toks)


def tokens_to_units(tokens: Sequence[int]) -> List:
    data = bytes(tokens)
    try:
        words = data.decode("utf-8").split()
    except UnicodeDecodeError:
        return list(data)
    return words if words else list(data)


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _ngram_counts(units: Sequence, n: int) -> Dict[tuple, int]:
    counts: Dict[tuple, int] = {}
    for i in range(len(units) - n + 1):
        g = tuple(units[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def _rouge_n(candidate: Sequence, reference: Sequence, n: int) -> Tuple[float, float, float]:
    cand = _ngram_counts(candidate, n)
    ref = _ngram_counts(reference, n)
    overlap = sum(min(c, ref.get(g, 0)) for g, c in cand.items())
    n_cand = max(0, len(candidate) - n + 1)
    n_ref = max(0, len(reference) - n + 1)
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    return p, r, _f_measure(p, r)


def _lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[len(b)]


def rouge(candidate: Sequence, reference: Sequence) -> RougeScore:
    """ROUGE-1/2 from clipped n-gram overlap, ROUGE-L from the longest
    common subsequence, all with balanced F-measure."""
    if not reference:
        raise ConfigError("ROUGE reference must be non-empty")
    candidate = list(candidate)
    reference = list(reference)
    p1, r1, f1 = _rouge_n(candidate, reference, 1)
    p2, r2, f2 = _rouge_n(candidate, reference, 2)
    lcs = _lcs_length(candidate, reference)
    pl = lcs / len(candidate) if candidate else 0.0
    rl = lcs / len(reference)
    return RougeScore(
        rouge1_p=p1, rouge1_r=r1, rouge1_f=f1,
        rouge2_p=p2, rouge2_r=r2, rouge2_f=f2,
        rougeL_p=pl, rougeL_r=rl, rougeL_f=_f_measure(pl, rl),
    )


# ---------------------------------------------------------------------------
# Margins
# ---------------------------------------------------------------------------


@dataclass
class SampleMargins:
    prompt_id: int
    mean_gap: float
    gaps: List[float]


@dataclass
class MarginReport:
    samples: List[SampleMargins]

    @property
    def mean_gap(self) -> float:
        vals = [s.mean_gap for s in self.samples if s.gaps]
        return sum(vals) / len(vals) if vals else 0.0


def margin_stats(
    ckpt: ModelCheckpoint,
    prompts: Sequence[Sequence[int]],
    params: DecodeParams,
    workers: int = 1,
) -> MarginReport:
    """Top-1 minus top-2 probability at every generated step, per prompt."""
    if params.topk_logged < 2:
        raise ConfigError("margin stats need topk_logged >= 2")

    def one(idx_prompt):
        idx, prompt = idx_prompt
        trace = greedy_decode(ckpt, prompt, params)
        gaps = [s.topk[0][1] - s.topk[1][1] for s in trace.steps if len(s.topk) >= 2]
        mean = sum(gaps) / len(gaps) if gaps else 0.0
        return SampleMargins(prompt_id=idx, mean_gap=mean, gaps=gaps)

    items = list(enumerate(prompts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, items))
    else:
        samples = [one(it) for it in items]
    samples.sort(key=lambda s: s.prompt_id)
    return MarginReport(samples=samples)


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------


def perplexity(ckpt: ModelCheckpoint, tokens: Sequence[int]) -> float:
    """exp(mean NLL) over non-overlapping context-sized windows.

    Each window's first token is unconditioned and contributes no term;
    the stride equals the window, so every other position is predicted
    exactly once.
    """
    toks = [int(t) for t in tokens]
    if len(toks) < 2:
        raise ConfigError("perplexity needs at least 2 tokens")
    cfg = ckpt.config
    window = cfg.max_context
    total_nll = 0.0
    count = 0
    for start in range(0, len(toks), window):
        chunk = toks[start : start + window]
        if len(chunk) < 2:
            break
        batch = torch.tensor([chunk], dtype=torch.long)
        logits = forward_sequence(ckpt.params, cfg, batch)[0, :-1]
        logps = torch.log_softmax(logits, dim=-1)
        targets = torch.tensor(chunk[1:], dtype=torch.long)
        picked = logps.gather(1, targets.unsqueeze(1)).squeeze(1)
        total_nll += float(-picked.double().sum().item())
        count += len(chunk) - 1
    return math.exp(total_nll / count)


def perplexity_bruteforce(ckpt: ModelCheckpoint, tokens: Sequence[int]) -> float:
    """Independent oracle: per-token loop over the incremental cached path,
    restarting at the same window boundaries as ``perplexity``."""
    toks = [int(t) for t in tokens]
    if len(toks) < 2:
        raise ConfigError("perplexity needs at least 2 tokens")
    cfg = ckpt.config
    window = cfg.max_context
    total_nll = 0.0
    count = 0
    for start in range(0, len(toks), window):
        chunk = toks[start : start + window]
        if len(chunk) < 2:
            break
        cache = KVCache(cfg)
        logits, cache = forward_step(ckpt, chunk[0], cache)
        for tok in chunk[1:]:
            logp = torch.log_softmax(logits.double(), dim=-1)
            total_nll += float(-logp[tok].item())
            count += 1
            if cache.t < cfg.max_context:
                logits, cache = forward_step(ckpt, tok, cache)
    return math.exp(total_nll / count)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def write_breakdown_csv(rows: Sequence[BreakdownRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("prompt_id,case_id,rouge1,rouge2,rougeL\n")
        for r in rows:
            f.write(f"{r.prompt_id},{r.case_id},{r.rouge1:.10g},{r.rouge2:.10g},{r.rougeL:.10g}\n")


def write_margins_csv(reports: Dict[str, MarginReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("prompt_id,mean_gap,model_tag\n")
        for tag in sorted(reports):
            for s in reports[tag].samples:
                f.write(f"{s.prompt_id},{s.mean_gap:.10g},{tag}\n")


def write_flips_csv(records: Sequence[DivergenceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("prompt_id,divergence_index\n")
        for i, r in enumerate(records):
            idx = "" if r.divergence_index is None else str(r.divergence_index)
            f.write(f"{i},{idx}\n")


def write_ppl_csv(values: Dict[str, float], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("model_tag,ppl\n")
        for tag in sorted(values):
            f.write(f"{tag},{values[tag]:.10g}\n")
