"""Shared fixtures: tiny vocabularies, random models, and two trained models.

The trained models are session-scoped because they back both the decoding
tests and the acceptance suite; training each takes a few seconds on CPU.
All seeds are fixed, so every run sees identical models.
"""

from __future__ import annotations

import pytest

from blankfill import ModelConfig, build_model, build_vocab
from blankfill.training import TrainConfig, train

from oracles import char_heldout_lines, char_train_lines, word_corpus


def small_model(vocab, *, seed=0, d_model=16, n_layers=1, n_heads=2, d_ff=24,
                t_max=None, double=True):
    """A tiny random-weight model; float64 by default for tight tolerances."""
    cfg = ModelConfig(
        mode=vocab.mode,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        d_ff=d_ff,
        dropout=0.0,
        t_max=t_max if t_max is not None else vocab.t_max,
    )
    model = build_model(cfg, vocab, seed=seed)
    if double:
        model.double()
    return model.eval()


@pytest.fixture(scope="session")
def tiny_vocab():
    """Word vocabulary with 8 content words (11 ids total)."""
    lines = ["red green blue", "red lion tiger", "green bear wolf fox"]
    return build_vocab(lines, "word")


@pytest.fixture(scope="session")
def tiny_char_vocab():
    return build_vocab(["abcd", "dcba"], "char", t_max=6)


@pytest.fixture(scope="session")
def word_setup():
    lines = word_corpus()
    vocab = build_vocab(lines, "word")
    sentences = [vocab.encode_line(line) for line in lines]
    return lines, vocab, sentences


@pytest.fixture(scope="session")
def overfit_model(word_setup):
    """Word model trained to memorize the 50-sentence toy corpus (~8 s)."""
    _, vocab, sentences = word_setup
    cfg = ModelConfig(
        mode="word", d_model=64, n_layers=2, n_heads=2, d_ff=128, dropout=0.0
    )
    model = build_model(cfg, vocab, seed=0)
    train(
        model,
        sentences,
        TrainConfig(
            steps=1200,
            batch_size=16,
            optimizer="adam",
            lr=1e-3,
            weight_decay=0.0,
            warmup_steps=50,
            seed=0,
            log_every=0,
        ),
    )
    return model.eval()


@pytest.fixture(scope="session")
def char_setup():
    train_lines = char_train_lines()
    held_lines = char_heldout_lines()
    vocab = build_vocab(train_lines, "char", t_max=24)
    return train_lines, held_lines, vocab


@pytest.fixture(scope="session")
def char_model(char_setup):
    """Char model trained on periodic-pattern documents (~8 s)."""
    train_lines, _, vocab = char_setup
    sentences = [vocab.encode_line(line) for line in train_lines]
    cfg = ModelConfig(
        mode="char", d_model=32, n_layers=2, n_heads=2, d_ff=64,
        dropout=0.0, t_max=24,
    )
    model = build_model(cfg, vocab, seed=0)
    train(
        model,
        sentences,
        TrainConfig(
            steps=1200,
            batch_size=16,
            optimizer="adam",
            lr=2e-3,
            weight_decay=0.0,
            warmup_steps=50,
            seed=0,
            log_every=0,
        ),
    )
    return model.eval()
