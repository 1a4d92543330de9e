"""Vocabulary layout, task compilation (masking, slots), and dataset files."""

from __future__ import annotations

import math
import os
import random

import pytest

from blankfill import Blank, Token, blank_count, tokens
from blankfill.corpus import (
    BLANK_SURFACE,
    PAD_SURFACE,
    UNK_SURFACE,
    CorpusError,
    MaskSpec,
    atomic_write_text,
    build_vocab,
    compile_infilling,
    compile_restoration,
    load_sentences,
    save_lines,
)


class TestVocabulary:
    def test_reserved_id_layout(self):
        v = build_vocab(["b a a"], "word")
        assert (v.pad_id, v.unk_id, v.blank_id) == (0, 1, 2)
        assert v.surfaces[:3] == (PAD_SURFACE, UNK_SURFACE, BLANK_SURFACE)
        assert v.n_structural == 3

    def test_char_mode_reserves_length_markers(self):
        v = build_vocab(["ab"], "char", t_max=4)
        assert v.n_structural == 3 + 4
        assert v.surfaces[3:7] == ("[1]", "[2]", "[3]", "[4]")
        assert v.length_id(1) == 3
        assert v.length_id(4) == 6
        with pytest.raises(CorpusError, match="outside"):
            v.length_id(5)
        with pytest.raises(CorpusError, match="outside"):
            v.length_id(0)

    def test_word_mode_has_no_length_markers(self):
        v = build_vocab(["a"], "word")
        with pytest.raises(CorpusError, match="char mode"):
            v.length_id(1)

    def test_content_ids_sort_by_count_then_surface(self):
        v = build_vocab(["c b b a a a", "z z z z"], "word")
        assert v.surfaces[3:] == ("z", "a", "b", "c")

    def test_min_count_filters_rare_words(self):
        v = build_vocab(["a a b"], "word", min_count=2)
        assert "a" in v.surfaces and "b" not in v.surfaces
        assert v.token("b").id == v.unk_id

    def test_unknown_and_structural_surfaces_map_to_unk(self):
        v = build_vocab(["a"], "word")
        assert v.token("zzz") == Token(v.unk_id, UNK_SURFACE)
        assert v.token(PAD_SURFACE).id == v.unk_id
        assert v.token(BLANK_SURFACE).id == v.unk_id
        assert v.token(UNK_SURFACE).id == v.unk_id

    def test_encode_line_roundtrips_known_words(self):
        v = build_vocab(["the cat sat"], "word")
        enc = v.encode_line("cat sat the")
        assert [t.surface for t in enc] == ["cat", "sat", "the"]
        assert all(t.id >= v.n_structural for t in enc)
        assert v.surface(enc[0].id) == "cat"

    def test_char_mode_splits_characters(self):
        v = build_vocab(["abc"], "char", t_max=2)
        assert [t.surface for t in v.encode_line("cab")] == ["c", "a", "b"]

    def test_build_is_deterministic(self):
        lines = ["a b c", "b c d", "c d e"]
        assert build_vocab(lines, "word") == build_vocab(lines, "word")

    def test_unknown_mode_is_rejected(self):
        with pytest.raises(CorpusError, match="unknown mode"):
            build_vocab(["a"], "subword")


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["a b c d e f g h i j"], "word")


@pytest.fixture(scope="module")
def doc(vocab):
    return vocab.encode_line("a b c d e f g h i j")


class TestInfilling:
    def test_mask_count_rounds_half_up(self, vocab):
        for n, ratio, want in [(10, 0.3, 3), (7, 0.3, 2), (2, 0.25, 1), (10, 0.25, 3)]:
            doc = vocab.encode_line(" ".join("abcdefghij"[:n]))
            canvas, ref = compile_infilling(doc, MaskSpec(ratio, seed=5))
            kept = len(tokens(canvas))
            assert n - kept == want
            assert ref == tuple(doc)

    def test_masked_runs_collapse_to_single_blanks(self, vocab):
        doc = vocab.encode_line("a b c d e")
        # find a seed producing an adjacent masked pair
        for seed in range(100):
            canvas, _ = compile_infilling(doc, MaskSpec(0.4, seed))
            runs = blank_count(canvas)
            if runs == 1:  # two adjacent positions fell in one run
                assert len(canvas) == 4
                return
        pytest.fail("no seed produced an adjacent masked pair")

    def test_kept_tokens_stay_in_order(self, doc):
        rng = random.Random(20)
        surfaces = [t.surface for t in doc]
        for _ in range(30):
            canvas, ref = compile_infilling(doc, MaskSpec(0.4, rng.randrange(10**6)))
            kept = [t.surface for t in tokens(canvas)]
            it = iter(surfaces)
            assert all(s in it for s in kept)  # subsequence check
            assert [t.surface for t in ref] == surfaces

    def test_masking_everything_is_rejected(self, vocab):
        doc = vocab.encode_line("a b")
        with pytest.raises(CorpusError, match="at least one kept token"):
            compile_infilling(doc, MaskSpec(1.0, 0))
        with pytest.raises(CorpusError):
            compile_infilling(doc, MaskSpec(0.9, 0))  # rounds to 2 of 2

    def test_masking_nothing_warns_and_returns_complete(self, doc):
        with pytest.warns(UserWarning, match="zero"):
            canvas, _ = compile_infilling(doc, MaskSpec(0.01, 0))
        assert blank_count(canvas) == 0

    def test_same_seed_same_canvas(self, doc):
        a, _ = compile_infilling(doc, MaskSpec(0.3, 77))
        b, _ = compile_infilling(doc, MaskSpec(0.3, 77))
        assert a == b

    def test_annotated_blanks_cover_the_masked_counts(self, doc):
        canvas, _ = compile_infilling(doc, MaskSpec(0.4, 3), annotate_lengths=True)
        hidden = sum(it.length for it in canvas if isinstance(it, Blank))
        assert hidden == 4
        assert all(
            it.length is not None for it in canvas if isinstance(it, Blank)
        )


class TestRestoration:
    def test_slots_have_exact_lengths_and_gaps(self, vocab):
        doc = vocab.encode_line(" ".join(["a"] * 40))
        for seed in range(20):
            canvas, ref = compile_restoration(
                doc, slot_count=3, slot_lengths=(2, 5), seed=seed
            )
            blanks = [it for it in canvas if isinstance(it, Blank)]
            assert len(blanks) == 3
            assert all(2 <= b.length <= 5 for b in blanks)
            # at least one kept token between consecutive blanks
            for i in range(len(canvas) - 1):
                if isinstance(canvas[i], Blank):
                    assert isinstance(canvas[i + 1], Token)
            hidden = sum(b.length for b in blanks)
            assert len(tokens(canvas)) + hidden == 40
            assert ref == tuple(doc)

    def test_mask_fraction_can_be_pinned_exactly(self, vocab):
        doc = vocab.encode_line(" ".join(["a"] * 100))
        canvas, _ = compile_restoration(
            doc, slot_count=10, slot_lengths=(5, 5), seed=1
        )
        hidden = sum(it.length for it in canvas if isinstance(it, Blank))
        assert hidden / 100 == 0.5

    def test_same_seed_same_placement(self, vocab):
        doc = vocab.encode_line(" ".join(["a"] * 30))
        a, _ = compile_restoration(doc, 2, (1, 6), seed=9)
        b, _ = compile_restoration(doc, 2, (1, 6), seed=9)
        assert a == b

    def test_impossible_requests_are_rejected(self, vocab):
        doc = vocab.encode_line("a b c")
        with pytest.raises(CorpusError, match="cannot place"):
            compile_restoration(doc, slot_count=2, slot_lengths=(2, 2))
        with pytest.raises(CorpusError, match="bad slot length"):
            compile_restoration(doc, slot_count=1, slot_lengths=(0, 2))
        with pytest.raises(CorpusError, match=">= 1"):
            compile_restoration(doc, slot_count=0)


class TestDatasetFiles:
    def test_save_then_load_roundtrips(self, tmp_path):
        path = str(tmp_path / "corpus.txt")
        lines = ["the cat", "a dog ran"]
        save_lines(path, lines)
        assert load_sentences(path) == lines

    def test_empty_lines_are_reported_with_their_number(self, tmp_path):
        path = str(tmp_path / "bad.txt")
        path_obj = tmp_path / "bad.txt"
        path_obj.write_text("ok\n\nalso ok\n")
        with pytest.raises(CorpusError, match=r"bad\.txt:2"):
            load_sentences(path)

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_sentences(str(tmp_path / "nope.txt"))

    def test_atomic_write_replaces_and_leaves_no_droppings(self, tmp_path):
        path = str(tmp_path / "out.txt")
        atomic_write_text(path, "first\n")
        atomic_write_text(path, "second\n")
        assert (tmp_path / "out.txt").read_text() == "second\n"
        assert os.listdir(tmp_path) == ["out.txt"]


class TestRoundHalfUpProperty:
    def test_mask_count_matches_the_formula_for_many_cases(self, vocab):
        rng = random.Random(30)
        letters = "abcdefghij"
        for _ in range(60):
            n = rng.randrange(2, 11)
            ratio = rng.uniform(0.05, 0.8)
            doc = vocab.encode_line(" ".join(letters[:n]))
            want = math.floor(ratio * n + 0.5)
            if want >= n:
                with pytest.raises(CorpusError):
                    compile_infilling(doc, MaskSpec(ratio, 0))
                continue
            if want == 0:
                with pytest.warns(UserWarning):
                    canvas, _ = compile_infilling(doc, MaskSpec(ratio, 0))
            else:
                canvas, _ = compile_infilling(doc, MaskSpec(ratio, 0))
            assert n - len(tokens(canvas)) == want
