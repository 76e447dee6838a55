"""Byte-level corpus ingestion and synthetic restricted-alphabet corpora.

Tokens are raw bytes (vocab 256); byte 0x00 is reserved as the end-of-
sequence token and is stripped from all ingested text, so any UTF-8
language round-trips without a trained tokenizer. Splits are line-level
and seeded; prompts are prefixes of validation lines only, so no prompt
text ever appears in the training stream.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .errors import ConfigError

EOS_BYTE = 0
PROMPT_MIN_BYTES = 16
PROMPT_MAX_BYTES = 64


@dataclass
class Corpus:
    train_tokens: List[int]
    val_tokens: List[int]
    prompt_pool: List[Tuple[int, ...]]
    split_seed: int
    source_hash: str

    def manifest(self) -> dict:
        return {
            "split_seed": self.split_seed,
            "source_hash": self.source_hash,
            "train_tokens": len(self.train_tokens),
            "val_tokens": len(self.val_tokens),
            "prompts": len(self.prompt_pool),
        }


def tokenize(text: str) -> List[int]:
    """UTF-8 bytes with the reserved eos byte removed."""
    return [b for b in text.encode("utf-8") if b != EOS_BYTE]


def detokenize(tokens: Sequence[int]) -> str:
    return bytes(t for t in tokens if t != EOS_BYTE).decode("utf-8", errors="replace")


def ingest(paths: Sequence, split_seed: int, val_fraction: float = 0.1) -> Corpus:
    """Line-shuffled 90/10 split; prompts drawn from validation lines only."""
    raw = bytearray()
    for p in paths:
        path = Path(p)
        if not path.is_file():
            raise ConfigError(f"corpus file not found: {path}")
        raw.extend(path.read_bytes())
    if not raw:
        raise ConfigError("corpus input is empty")
    text = bytes(raw).replace(b"\x00", b"").decode("utf-8", errors="strict")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("corpus contains no non-empty lines")
    rng = random.Random(split_seed)
    order = list(range(len(lines)))
    rng.shuffle(order)
    n_val = max(1, int(round(len(lines) * val_fraction)))
    val_idx = set(order[:n_val])
    train_lines = [lines[i] for i in sorted(set(range(len(lines))) - val_idx)]
    val_lines = [lines[i] for i in sorted(val_idx)]

    prompt_pool: List[Tuple[int, ...]] = []
    for ln in val_lines:
        toks = tokenize(ln)
        if len(toks) < PROMPT_MIN_BYTES:
            continue
        length = rng.randint(PROMPT_MIN_BYTES, min(PROMPT_MAX_BYTES, len(toks)))
        prompt_pool.append(tuple(toks[:length]))

    return Corpus(
        train_tokens=tokenize("\n".join(train_lines) + "\n"),
        val_tokens=tokenize("\n".join(val_lines) + "\n"),
        prompt_pool=prompt_pool,
        split_seed=split_seed,
        source_hash=hashlib.sha256(bytes(raw)).hexdigest(),
    )


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.bin").write_bytes(bytes(corpus.train_tokens))
    (out / "val.bin").write_bytes(bytes(corpus.val_tokens))
    with open(out / "prompts.jsonl", "w", encoding="utf-8") as f:
        for p in corpus.prompt_pool:
            f.write(json.dumps(list(p)) + "\n")
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(corpus.manifest(), f, sort_keys=True, indent=2)
        f.write("\n")


def load_corpus(in_dir) -> Corpus:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
        train = list((src / "train.bin").read_bytes())
        val = list((src / "val.bin").read_bytes())
        prompts = []
        with open(src / "prompts.jsonl", "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    prompts.append(tuple(json.loads(line)))
    except FileNotFoundError as e:
        raise ConfigError(f"corpus directory {src} is incomplete: {e}") from e
    return Corpus(
        train_tokens=train,
        val_tokens=val,
        prompt_pool=prompts,
        split_seed=manifest["split_seed"],
        source_hash=manifest["source_hash"],
    )


# ---------------------------------------------------------------------------
# Synthetic restricted-alphabet corpora (second-order Markov source)
# ---------------------------------------------------------------------------


@dataclass
class MarkovSource:
    """Seeded second-order Markov chain over a small alphabet."""

    vocab: int
    table: Dict[Tuple[int, int], List[float]]
    initial: List[float]

    @staticmethod
    def random(vocab: int, seed: int) -> "MarkovSource":
        rng = random.Random(seed)
        table: Dict[Tuple[int, int], List[float]] = {}
        for a in range(vocab):
            for b in range(vocab):
                weights = [rng.random() + 0.05 for _ in range(vocab)]
                z = sum(weights)
                table[(a, b)] = [w / z for w in weights]
        weights = [rng.random() + 0.05 for _ in range(vocab)]
        z = sum(weights)
        return MarkovSource(vocab=vocab, table=table, initial=[w / z for w in weights])

    def sample(self, rng: random.Random, length: int) -> List[int]:
        seq = [
            rng.choices(range(self.vocab), weights=self.initial)[0],
            rng.choices(range(self.vocab), weights=self.initial)[0],
        ]
        while len(seq) < length:
            probs = self.table[(seq[-2], seq[-1])]
            seq.append(rng.choices(range(self.vocab), weights=probs)[0])
        return seq[:length]


def synth_restricted(
    vocab: int, n_sequences: int, seed: int, seq_len: int = 64
) -> Tuple[Corpus, MarkovSource]:
    """Restricted-alphabet corpus for exhaustive-enumeration checks.

    Returns the corpus together with its generating source so empirical
    statistics can be compared against the ground-truth table.
    """
    if vocab < 2:
        raise ConfigError("restricted vocab must be >= 2")
    if vocab > 8:
        raise ConfigError("restricted vocab must be <= 8 to keep enumeration feasible")
    source = MarkovSource.random(vocab, seed)
    rng = random.Random(seed + 1)
    sequences = [source.sample(rng, seq_len) for _ in range(n_sequences)]
    flat: List[int] = [t for s in sequences for t in s]
    n_train = int(len(sequences) * 0.9)
    train = [t for s in sequences[:n_train] for t in s]
    val = [t for s in sequences[n_train:] for t in s]
    prompt_pool = [tuple(s[: rng.randint(2, max(2, min(6, seq_len)))]) for s in sequences[n_train:]]
    digest = hashlib.sha256(bytes(flat)).hexdigest()
    corpus = Corpus(
        train_tokens=train,
        val_tokens=val,
        prompt_pool=prompt_pool,
        split_seed=seed,
        source_hash=digest,
    )
    return corpus, source


def empirical_conditional_tv(sequences: Sequence[Sequence[int]], source: MarkovSource) -> float:
    """Count-weighted mean total-variation between empirical next-symbol
    frequencies and the generating table, over observed 2-token contexts.

    Transitions are counted within each sequence, never across boundaries.
    """
    counts: Dict[Tuple[int, int], List[int]] = {}
    for seq in sequences:
        toks = list(seq)
        for i in range(len(toks) - 2):
            ctx = (toks[i], toks[i + 1])
            row = counts.setdefault(ctx, [0] * source.vocab)
            row[toks[i + 2]] += 1
    total = 0
    acc = 0.0
    for ctx, row in counts.items():
        n = sum(row)
        p_true = source.table[ctx]
        tv = 0.5 * sum(abs(row[k] / n - p_true[k]) for k in range(source.vocab))
        acc += tv * n
        total += n
    return acc / total if total else 0.0
