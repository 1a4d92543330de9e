"""Decoders: beam/greedy agreement, budgets, sampling, and restoration."""

from __future__ import annotations

import itertools
import random

import pytest
import torch

from blankfill import (
    Action,
    Blank,
    Canvas,
    apply_action,
    blank_count,
    build_vocab,
    is_complete,
    render,
    tokens,
)
from blankfill.decoding import (
    DecodeConfig,
    Hypothesis,
    beam_fill,
    greedy_fill,
    rerank,
    restore_fill,
    sample_fill,
    trajectory_lines,
)

from conftest import small_model


@pytest.fixture(scope="module")
def world():
    vocab = build_vocab(["red green blue lion tiger wolf"], "word")
    return vocab


@pytest.fixture(scope="module")
def cworld():
    vocab = build_vocab(["abcdcb"], "char", t_max=6)
    return vocab


def enumerate_completions(model, c, budget):
    """Every reachable completion's joint log-prob, by exhaustive DFS."""
    vocab = model.vocab
    words = [
        vocab.token(vocab.surface(i))
        for i in range(vocab.size)
        if i not in model._masked_word_ids
    ]
    best = [float("-inf")]

    def walk(canvas, generated, lp):
        if is_complete(canvas):
            best[0] = max(best[0], lp)
            return
        k = blank_count(canvas)
        headroom = budget - generated - k
        flag_space = [
            (left, right)
            for left, right in itertools.product([False, True], repeat=2)
            if int(left) + int(right) <= headroom
        ]
        for b in range(1, k + 1):
            for w in words:
                for left, right in flag_space:
                    a = Action(b, w, left=left, right=right)
                    with torch.no_grad():
                        delta = float(model.action_logprob(canvas, a))
                    walk(apply_action(canvas, a), generated + 1, lp + delta)

    walk(c, 0, 0.0)
    return best[0]


class TestBudget:
    def test_default_budget_is_generous_but_finite(self, world):
        model = small_model(world, seed=0)
        c = Canvas((Blank(), world.token("red"), Blank()))
        h = greedy_fill(model, c)  # max_tokens=None -> 2 * 3 + 10 = 16
        assert h.generated <= 16
        assert is_complete(h.canvas)

    def test_budget_below_blank_count_is_rejected(self, world):
        model = small_model(world, seed=1)
        c = Canvas((Blank(), world.token("red"), Blank()))
        with pytest.raises(ValueError, match="below the canvas"):
            greedy_fill(model, c, DecodeConfig(max_tokens=1))

    def test_budget_equal_to_blank_count_forces_plain_fills(self, world):
        model = small_model(world, seed=2)
        c = Canvas((Blank(), world.token("red"), Blank()))
        h = greedy_fill(model, c, DecodeConfig(max_tokens=2))
        assert h.generated == 2
        assert len(tokens(h.canvas)) == 3

    def test_all_decodes_respect_the_budget(self, world):
        model = small_model(world, seed=3)
        c = Canvas((Blank(),))
        for budget in (1, 2, 3, 5):
            for h in beam_fill(model, c, DecodeConfig(beam_size=4, max_tokens=budget)):
                assert h.generated <= budget
            for h in sample_fill(
                model, c, DecodeConfig(n_samples=3, max_tokens=budget, seed=7)
            ):
                assert h.generated <= budget


class TestBeamAndGreedy:
    def test_beam_one_is_greedy_exactly(self, world):
        red = world.token("red")
        for seed in range(5):
            model = small_model(world, seed=seed)
            for c in [
                Canvas((Blank(),)),
                Canvas((Blank(), red, Blank())),
                Canvas((red, Blank(), red)),
            ]:
                g = greedy_fill(model, c, DecodeConfig(max_tokens=6))
                b = beam_fill(model, c, DecodeConfig(beam_size=1, max_tokens=6))
                assert len(b) == 1
                assert b[0].canvas == g.canvas
                assert b[0].logprob == g.logprob

    def test_wide_beam_finds_the_global_joint_optimum(self, world):
        """With the beam wider than the whole frontier, search is exhaustive."""
        model = small_model(world, seed=6)
        c = Canvas((Blank(),))
        budget = 3
        want = enumerate_completions(model, c, budget)
        got = beam_fill(
            model, c,
            DecodeConfig(beam_size=4000, top_k_words=model.vocab.size,
                         max_tokens=budget),
        )[0].logprob
        assert abs(got - want) < 1e-9

    def test_hypothesis_logprob_is_the_sum_of_its_steps(self, world):
        model = small_model(world, seed=7)
        c = Canvas((Blank(), world.token("blue"), Blank()))
        for h in beam_fill(model, c, DecodeConfig(beam_size=3, max_tokens=5)):
            with torch.no_grad():
                total = sum(
                    float(model.action_logprob(s.canvas, s.action)) for s in h.steps
                )
            assert abs(h.logprob - total) < 1e-9

    def test_replaying_the_steps_reproduces_the_canvas(self, world):
        model = small_model(world, seed=8)
        c = Canvas((Blank(), world.token("lion"), Blank()))
        h = greedy_fill(model, c, DecodeConfig(max_tokens=5))
        replay = c
        for step in h.steps:
            assert step.canvas == replay
            replay = apply_action(replay, step.action)
        assert replay == h.canvas

    def test_complete_canvas_needs_no_work(self, world):
        model = small_model(world, seed=9)
        c = Canvas((world.token("red"),))
        h = greedy_fill(model, c)
        assert h.canvas == c
        assert h.logprob == 0.0
        assert h.steps == ()

    def test_beam_size_must_be_positive(self, world):
        model = small_model(world, seed=10)
        with pytest.raises(ValueError, match="beam_size"):
            beam_fill(model, Canvas((Blank(),)), DecodeConfig(beam_size=0))


class TestSampling:
    def test_same_seed_reproduces_every_stream(self, world):
        model = small_model(world, seed=11)
        c = Canvas((Blank(), world.token("red"), Blank()))
        cfg = DecodeConfig(n_samples=5, temperature=1.0, seed=21, max_tokens=6)
        s1 = sample_fill(model, c, cfg)
        s2 = sample_fill(model, c, cfg)
        assert [h.canvas for h in s1] == [h.canvas for h in s2]
        assert [h.logprob for h in s1] == [h.logprob for h in s2]

    def test_streams_are_independent_of_batch_size(self, world):
        """Stream j's draw depends only on (seed, j), not on n_samples."""
        model = small_model(world, seed=12)
        c = Canvas((Blank(),))
        few = sample_fill(model, c, DecodeConfig(n_samples=2, seed=5, max_tokens=4))
        many = sample_fill(model, c, DecodeConfig(n_samples=6, seed=5, max_tokens=4))
        assert [h.canvas for h in few] == [h.canvas for h in many[:2]]

    def test_near_zero_temperature_is_greedy(self, world):
        model = small_model(world, seed=13)
        c = Canvas((Blank(), world.token("wolf"), Blank()))
        g = greedy_fill(model, c, DecodeConfig(max_tokens=6))
        for h in sample_fill(
            model, c, DecodeConfig(n_samples=3, temperature=1e-5, seed=1, max_tokens=6)
        ):
            assert h.canvas == g.canvas
            assert abs(h.logprob - g.logprob) < 1e-12

    def test_warm_temperature_explores(self, world):
        model = small_model(world, seed=14)
        c = Canvas((Blank(),))
        hs = sample_fill(
            model, c, DecodeConfig(n_samples=8, temperature=1.5, seed=3, max_tokens=4)
        )
        assert len({render(h.canvas, "word") for h in hs}) > 1

    def test_all_samples_are_complete(self, world):
        model = small_model(world, seed=15)
        c = Canvas((Blank(), world.token("red"), Blank()))
        hs = sample_fill(model, c, DecodeConfig(n_samples=4, seed=9, max_tokens=6))
        assert len(hs) == 4
        assert all(is_complete(h.canvas) for h in hs)

    def test_negative_temperature_is_rejected(self, world):
        model = small_model(world, seed=16)
        with pytest.raises(ValueError, match="temperature"):
            sample_fill(model, Canvas((Blank(),)), DecodeConfig(temperature=-1.0))

    def test_sampling_a_complete_canvas_is_a_no_op(self, world):
        model = small_model(world, seed=17)
        c = Canvas((world.token("red"),))
        hs = sample_fill(model, c, DecodeConfig(n_samples=3))
        assert [h.canvas for h in hs] == [c, c, c]


class TestRestoration:
    def test_exactly_the_annotated_number_of_steps(self, cworld):
        model = small_model(cworld, seed=18)
        a = cworld.token("a")
        c = Canvas((Blank(2), a, Blank(3)))
        h = restore_fill(model, c)
        assert h.generated == 5
        assert is_complete(h.canvas)
        assert len(h.canvas.items) == 6
        assert h.canvas.items[2].surface == "a"  # the fixed anchor survives

    def test_beam_restoration_matches_or_beats_greedy(self, cworld):
        model = small_model(cworld, seed=19)
        c = Canvas((Blank(3), cworld.token("d"), Blank(2)))
        g = restore_fill(model, c)
        b = restore_fill(model, c, DecodeConfig(beam_size=8))
        assert b.logprob >= g.logprob - 1e-12

    def test_word_models_cannot_restore(self, world):
        model = small_model(world, seed=20)
        with pytest.raises(ValueError, match="char-mode"):
            restore_fill(model, Canvas((Blank(2),)))

    def test_unannotated_blanks_cannot_restore(self, cworld):
        model = small_model(cworld, seed=21)
        with pytest.raises(ValueError, match="exact length"):
            restore_fill(model, Canvas((Blank(),)))

    def test_annotation_above_t_max_is_rejected(self, cworld):
        model = small_model(cworld, seed=22)
        with pytest.raises(ValueError, match="t_max"):
            restore_fill(model, Canvas((Blank(7),)))


class TestRerank:
    def mk(self, vocab, text, lp):
        c = Canvas(tuple(vocab.token(w) for w in text.split()))
        return Hypothesis(c, lp)

    def test_external_score_decides(self, world):
        hs = [self.mk(world, "red red", -1.0), self.mk(world, "blue", -9.0)]
        best = rerank(hs, lambda s: len(s), "word")
        assert render(best.canvas, "word") == "red red"

    def test_score_ties_fall_back_to_logprob(self, world):
        hs = [self.mk(world, "red", -5.0), self.mk(world, "blue", -2.0)]
        best = rerank(hs, lambda s: 0.0, "word")
        assert render(best.canvas, "word") == "blue"

    def test_full_ties_prefer_the_earlier_candidate(self, world):
        hs = [self.mk(world, "red", -2.0), self.mk(world, "blue", -2.0)]
        best = rerank(hs, lambda s: 0.0, "word")
        assert render(best.canvas, "word") == "red"

    def test_empty_candidate_list_is_rejected(self):
        with pytest.raises(ValueError, match="nothing"):
            rerank([], lambda s: 0.0, "word")


class TestTrajectoryLog:
    def test_one_line_per_state_from_template_to_output(self, world):
        model = small_model(world, seed=23)
        c = Canvas((Blank(), world.token("red"), Blank()))
        h = greedy_fill(model, c, DecodeConfig(max_tokens=6))
        lines = trajectory_lines(h, "word")
        assert len(lines) == h.generated + 1
        assert lines[0] == render(c, "word")
        assert lines[-1] == render(h.canvas, "word")
        assert all("__" in line for line in lines[:-1])
        assert "__" not in lines[-1]


class TestOnTrainedModel:
    def test_memorized_sentences_come_back_from_light_masking(
        self, word_setup, overfit_model
    ):
        from blankfill.corpus import MaskSpec, compile_infilling

        _, _, sentences = word_setup
        rng = random.Random(0)
        hits = 0
        picks = rng.sample(range(len(sentences)), 10)
        for i in picks:
            x = sentences[i]
            canvas, ref = compile_infilling(x, MaskSpec(0.3, seed=9000 + i))
            h = greedy_fill(overfit_model, canvas)
            if [t.surface for t in tokens(h.canvas)] == [t.surface for t in ref]:
                hits += 1
        assert hits >= 8
