"""Ingestion, splits, and the synthetic restricted-alphabet source."""

import hashlib
import random

import pytest

from quantalign.corpus import (
    EOS_BYTE,
    MarkovSource,
    detokenize,
    empirical_conditional_tv,
    ingest,
    load_corpus,
    save_corpus,
    synth_restricted,
    tokenize,
)
from quantalign.errors import ConfigError


@pytest.fixture()
def text_file(tmp_path):
    lines = [f"line number {i} with some words about the {w}."
             for i, w in enumerate(["river", "harbor", "meadow", "bridge"] * 30)]
    p = tmp_path / "input.txt"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_tokenize_detokenize_identity_on_bytes():
    text = "Grüße, 강 crossing mañana"
    assert detokenize(tokenize(text)) == text


def test_same_inputs_and_seed_give_identical_corpus(text_file):
    a = ingest([text_file], split_seed=5)
    b = ingest([text_file], split_seed=5)
    assert a.train_tokens == b.train_tokens
    assert a.val_tokens == b.val_tokens
    assert a.prompt_pool == b.prompt_pool
    assert a.source_hash == b.source_hash


def test_nul_bytes_are_stripped(tmp_path):
    p = tmp_path / "weird.txt"
    p.write_bytes("хорошо\x00 line one of text that is long enough\n".encode("utf-8"))
    corpus = ingest([p], split_seed=1)
    assert EOS_BYTE not in corpus.train_tokens
    assert EOS_BYTE not in corpus.val_tokens


def test_train_and_val_lines_disjoint(text_file):
    corpus = ingest([text_file], split_seed=2)
    train_lines = set(detokenize(corpus.train_tokens).splitlines())
    val_lines = set(detokenize(corpus.val_tokens).splitlines())
    assert train_lines and val_lines
    assert not (train_lines & val_lines)


def test_prompts_come_from_val_only_with_bounded_length(text_file):
    corpus = ingest([text_file], split_seed=3)
    train_text = detokenize(corpus.train_tokens)
    val_text = detokenize(corpus.val_tokens)
    assert corpus.prompt_pool
    for prompt in corpus.prompt_pool:
        assert 16 <= len(prompt) <= 64
        s = detokenize(prompt)
        assert s in val_text
        assert all(s not in ln for ln in train_text.splitlines())


def test_empty_input_rejected(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    with pytest.raises(ConfigError):
        ingest([p], split_seed=0)
    with pytest.raises(ConfigError):
        ingest([tmp_path / "missing.txt"], split_seed=0)


def test_save_load_round_trip(tmp_path, text_file):
    corpus = ingest([text_file], split_seed=9)
    save_corpus(corpus, tmp_path / "c")
    loaded = load_corpus(tmp_path / "c")
    assert loaded.train_tokens == corpus.train_tokens
    assert loaded.val_tokens == corpus.val_tokens
    assert loaded.prompt_pool == corpus.prompt_pool
    assert loaded.source_hash == corpus.source_hash


class TestSynthRestricted:
    def test_symbols_within_vocab(self):
        corpus, _ = synth_restricted(vocab=6, n_sequences=50, seed=4)
        assert all(0 <= t < 6 for t in corpus.train_tokens + corpus.val_tokens)

    def test_same_seed_reproduces(self):
        a, _ = synth_restricted(vocab=5, n_sequences=40, seed=8)
        b, _ = synth_restricted(vocab=5, n_sequences=40, seed=8)
        assert a.train_tokens == b.train_tokens
        assert a.source_hash == b.source_hash

    def test_vocab_bounds(self):
        with pytest.raises(ConfigError):
            synth_restricted(vocab=1, n_sequences=5, seed=0)
        with pytest.raises(ConfigError):
            synth_restricted(vocab=9, n_sequences=5, seed=0)

    def test_bigram_statistics_match_source(self):
        # Count-weighted conditional total variation against the generating
        # table, 10,000 sequences.
        source = MarkovSource.random(vocab=6, seed=123)
        rng = random.Random(456)
        sequences = [source.sample(rng, 64) for _ in range(10_000)]
        tv = empirical_conditional_tv(sequences, source)
        assert tv < 0.02
