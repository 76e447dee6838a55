"""Alignment evaluation of a candidate model against the full-precision
baseline, plus an optional external pairwise-judge HTTP client.

The desk-scale acceptance signals are automatic: ROUGE-L of candidate
generations against baseline generations, flip rate, divergence position,
top-1/top-2 margin, and perplexity. The judge client is an integration
point for an external chat-completion endpoint and is never required by
the rest of the pipeline.
"""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .decode import DecodeParams, greedy_decode
from .diagnostics import (
    MarginReport,
    find_divergence,
    margin_stats,
    perplexity,
    rouge,
    tokens_to_units,
)
from .errors import ConfigError, ExternalServiceError
from .model import ModelCheckpoint


@dataclass
class AlignmentRow:
    prompt_id: int
    rougeL_vs_fp: float
    flip_present: bool
    divergence_index: Optional[int]


@dataclass
class AlignmentReport:
    rows: List[AlignmentRow]
    mean_rougeL: float
    flip_rate: float
    mean_divergence_index: float
    mean_margin_gap: float
    ppl: float

    @staticmethod
    def from_rows(rows: List[AlignmentRow], mean_margin_gap: float, ppl: float) -> "AlignmentReport":
        n = len(rows)
        diverged = [r.divergence_index for r in rows if r.divergence_index is not None]
        return AlignmentReport(
            rows=rows,
            mean_rougeL=sum(r.rougeL_vs_fp for r in rows) / n if n else 0.0,
            flip_rate=sum(1 for r in rows if r.flip_present) / n if n else 0.0,
            mean_divergence_index=sum(diverged) / len(diverged) if diverged else float("nan"),
            mean_margin_gap=mean_margin_gap,
            ppl=ppl,
        )


def alignment_report(
    fp: ModelCheckpoint,
    candidate: ModelCheckpoint,
    prompts: Sequence[Sequence[int]],
    params: DecodeParams,
    ppl_tokens: Optional[Sequence[int]] = None,
) -> AlignmentReport:
    """One pass of all automatic alignment metrics on shared prompts."""
    if fp.config != candidate.config:
        raise ConfigError("checkpoints have mismatched configs")
    rows: List[AlignmentRow] = []
    gaps: List[float] = []
    for pid, prompt in enumerate(prompts):
        fp_trace = greedy_decode(fp, prompt, params)
        cand_trace = greedy_decode(candidate, prompt, params)
        ref_units = tokens_to_units([t for t in fp_trace.tokens() if t != params.eos_token])
        cand_units = tokens_to_units([t for t in cand_trace.tokens() if t != params.eos_token])
        score = rouge(cand_units, ref_units).rougeL_f if ref_units else 0.0
        record = find_divergence(fp, candidate, prompt, params)
        rows.append(
            AlignmentRow(
                prompt_id=pid,
                rougeL_vs_fp=score,
                flip_present=record.divergence_index is not None,
                divergence_index=record.divergence_index,
            )
        )
        step_gaps = [s.topk[0][1] - s.topk[1][1] for s in cand_trace.steps if len(s.topk) >= 2]
        if step_gaps:
            gaps.append(sum(step_gaps) / len(step_gaps))
    mean_gap = sum(gaps) / len(gaps) if gaps else 0.0
    ppl = perplexity(candidate, ppl_tokens) if ppl_tokens is not None else float("nan")
    return AlignmentReport.from_rows(rows, mean_gap, ppl)


def write_alignment_csv(report: AlignmentReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("prompt_id,rougeL_vs_fp,flip_present,divergence_index\n")
        for r in report.rows:
            idx = "" if r.divergence_index is None else str(r.divergence_index)
            f.write(f"{r.prompt_id},{r.rougeL_vs_fp:.10g},{int(r.flip_present)},{idx}\n")
        f.write(
            f"# aggregates mean_rougeL={report.mean_rougeL:.10g} "
            f"flip_rate={report.flip_rate:.10g} "
            f"mean_divergence_index={report.mean_divergence_index:.10g} "
            f"mean_margin_gap={report.mean_margin_gap:.10g} "
            f"ppl={report.ppl:.10g}\n"
        )


def read_alignment_rows(path) -> List[AlignmentRow]:
    rows: List[AlignmentRow] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("prompt_id") or line.startswith("#"):
                continue
            pid, score, flip, idx = line.split(",")
            rows.append(
                AlignmentRow(
                    prompt_id=int(pid),
                    rougeL_vs_fp=float(score),
                    flip_present=bool(int(flip)),
                    divergence_index=int(idx) if idx else None,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# External pairwise judge
# ---------------------------------------------------------------------------

# Stored verbatim so tallies are auditable against the exact instruction.
JUDGE_PROMPT_TEMPLATE = (
    "You are comparing two assistant answers to the same user prompt.\n"
    "Prompt:\n{prompt}\n\n"
    "Answer A:\n{answer_a}\n\n"
    "Answer B:\n{answer_b}\n\n"
    "Which answer is better? Reply with exactly one character: "
    "'A' if answer A is better, 'B' if answer B is better, or 'C' for a tie."
)

ENV_ENDPOINT = "QUANTALIGN_JUDGE_URL"
ENV_API_KEY = "QUANTALIGN_JUDGE_API_KEY"
ENV_MODEL = "QUANTALIGN_JUDGE_MODEL"


@dataclass
class JudgeConfig:
    endpoint_url: str = ""
    model: str = "judge"
    temperature: float = 0.0
    max_retries: int = 5
    backoff_base: float = 0.5
    timeout: float = 30.0
    # Original rule: any tie or reversal counts as tie. Modified rule
    # (default): only a position-swap reversal or double tie counts as tie;
    # a single decisive judgment wins over one tie.
    tie_rule: str = "modified"
    transcript_path: Optional[str] = None

    @staticmethod
    def from_env(**overrides) -> "JudgeConfig":
        cfg = JudgeConfig(**overrides)
        if not cfg.endpoint_url:
            cfg.endpoint_url = os.environ.get(ENV_ENDPOINT, "")
        env_model = os.environ.get(ENV_MODEL)
        if env_model and "model" not in overrides:
            cfg.model = env_model
        return cfg


@dataclass
class JudgeVerdict:
    prompt_id: int
    verdict: str  # win | tie | lose | error (win means answer A preferred)
    raw_response: str
    judge_model_tag: str
    requests_made: int = 0


Transport = Callable[[dict], str]


def _http_transport(config: JudgeConfig) -> Transport:
    def post(payload: dict) -> str:
        if not config.endpoint_url:
            raise ExternalServiceError(
                f"no judge endpoint configured (set {ENV_ENDPOINT})"
            )
        req = urllib.request.Request(
            config.endpoint_url,
            data=json.dumps(payload).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {os.environ.get(ENV_API_KEY, '')}",
            },
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=config.timeout) as resp:
            return resp.read().decode("utf-8")

    return post


def _chat_payload(config: JudgeConfig, content: str) -> dict:
    return {
        "model": config.model,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": content}],
    }


def _parse_choice(body: str) -> str:
    """Single-character verdict from a chat-completion response body."""
    data = json.loads(body)
    text = data["choices"][0]["message"]["content"]
    stripped = text.strip().upper()
    if stripped[:1] in ("A", "B", "C"):
        return stripped[:1]
    raise ValueError(f"unparseable judge verdict: {text!r}")


def _query_with_retries(
    transport: Transport, config: JudgeConfig, payload: dict, log: List[dict]
) -> str:
    last_err: Optional[Exception] = None
    for attempt in range(config.max_retries):
        try:
            body = transport(payload)
            log.append({"request": payload, "response": body})
            return body
        except (urllib.error.URLError, urllib.error.HTTPError, OSError, TimeoutError) as e:
            last_err = e
            retriable = True
            if isinstance(e, urllib.error.HTTPError):
                retriable = e.code == 429 or e.code >= 500
            log.append({"request": payload, "error": str(e)})
            if not retriable:
                break
            if attempt + 1 < config.max_retries:
                time.sleep(config.backoff_base * (2**attempt))
    raise ExternalServiceError(f"judge request failed after retries: {last_err}")


def combine_position_swapped(first: str, swapped: str, tie_rule: str) -> str:
    """Merge two judgments of the same pair with answers swapped.

    Both inputs are normalized to answer identity ('A' prefers the first
    answer as originally ordered). The modified rule treats a verdict that
    flips with position as a tie; under the original rule anything short of
    two consistent wins is a tie.
    """
    if tie_rule == "original":
        if first == "A" and swapped == "A":
            return "win"
        if first == "B" and swapped == "B":
            return "lose"
        return "tie"
    if tie_rule == "modified":
        if first == "A" and swapped == "B":
            return "tie"
        if first == "B" and swapped == "A":
            return "tie"
        if "A" in (first, swapped) and "B" not in (first, swapped):
            return "win"
        if "B" in (first, swapped) and "A" not in (first, swapped):
            return "lose"
        return "tie"  # both judged tie
    raise ConfigError(f"unknown tie rule {tie_rule!r}")


def pairwise_judge(
    config: JudgeConfig,
    prompt: str,
    answer_a: str,
    answer_b: str,
    prompt_id: int = 0,
    transport: Optional[Transport] = None,
) -> JudgeVerdict:
    """Double-query pairwise comparison with position swap.

    Exactly two requests are issued per comparison (plus retries on
    transport failures); a verdict is never derived from a single query.
    Unparseable responses yield an explicit ``error`` verdict rather than a
    guess. All traffic is appended to the transcript file when configured.
    """
    transport = transport or _http_transport(config)
    log: List[dict] = []
    requests_made = 0
    try:
        body1 = _query_with_retries(
            transport,
            config,
            _chat_payload(
                config,
                JUDGE_PROMPT_TEMPLATE.format(prompt=prompt, answer_a=answer_a, answer_b=answer_b),
            ),
            log,
        )
        requests_made += 1
        body2 = _query_with_retries(
            transport,
            config,
            _chat_payload(
                config,
                JUDGE_PROMPT_TEMPLATE.format(prompt=prompt, answer_a=answer_b, answer_b=answer_a),
            ),
            log,
        )
        requests_made += 1
    finally:
        _append_transcript(config, prompt_id, log)
    try:
        v1 = _parse_choice(body1)
        v2_raw = _parse_choice(body2)
    except (ValueError, KeyError, IndexError, json.JSONDecodeError) as e:
        return JudgeVerdict(
            prompt_id=prompt_id,
            verdict="error",
            raw_response=f"{body1!r} / {body2!r} ({e})",
            judge_model_tag=config.model,
            requests_made=requests_made,
        )
    # Normalize the swapped judgment back to original answer identity.
    v2 = {"A": "B", "B": "A", "C": "C"}[v2_raw]
    verdict = combine_position_swapped(v1, v2, config.tie_rule)
    return JudgeVerdict(
        prompt_id=prompt_id,
        verdict=verdict,
        raw_response=f"{v1}/{v2_raw}",
        judge_model_tag=config.model,
        requests_made=requests_made,
    )


_TRANSCRIPT_LOCK = threading.Lock()


def _append_transcript(config: JudgeConfig, prompt_id: int, log: List[dict]) -> None:
    if not config.transcript_path or not log:
        return
    with _TRANSCRIPT_LOCK:
        with open(config.transcript_path, "a", encoding="utf-8") as f:
            for entry in log:
                rec = dict(entry)
                rec["prompt_id"] = prompt_id
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def judge_many(
    config: JudgeConfig,
    items: Sequence[Tuple[str, str, str]],
    transport: Optional[Transport] = None,
    workers: int = 1,
) -> List[JudgeVerdict]:
    """Judge (prompt, answer_a, answer_b) items; results ordered by index
    regardless of the in-flight worker count."""

    def one(indexed):
        i, (p, a, b) = indexed
        return pairwise_judge(config, p, a, b, prompt_id=i, transport=transport)

    indexed = list(enumerate(items))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(one, indexed))
    else:
        verdicts = [one(it) for it in indexed]
    verdicts.sort(key=lambda v: v.prompt_id)
    return verdicts


def tally_verdicts(verdicts: Sequence[JudgeVerdict]) -> Dict[str, int]:
    tally = {"win": 0, "tie": 0, "lose": 0, "error": 0}
    for v in verdicts:
        tally[v.verdict] += 1
    return tally


def write_verdicts_csv(verdicts: Sequence[JudgeVerdict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("prompt_id,verdict,judge_model_tag,raw\n")
        for v in verdicts:
            raw = v.raw_response.replace(",", ";").replace("\n", " ")
            f.write(f"{v.prompt_id},{v.verdict},{v.judge_model_tag},{raw}\n")
