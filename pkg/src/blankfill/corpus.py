"""Vocabulary construction, task compilation, and dataset file handling.

The vocabulary owns the id layout shared by models and checkpoints: a fixed
block of structural ids first (padding, the unknown token, the blank marker,
and — in char mode — one marker per exact blank length up to ``t_max``),
then content words/characters ordered by descending count with ties broken
lexicographically, so builds are reproducible.

Task compilers turn plain sentences into (canvas, reference) pairs:
``compile_infilling`` masks a fixed fraction of positions and collapses
adjacent masked positions into one blank; ``compile_restoration`` damages
non-overlapping spans with exact length annotations, the setting used for
length-annotated (char) models.
"""

from __future__ import annotations

import math
import os
import random
import tempfile
import warnings
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

from .canvas import Blank, Canvas, Token

PAD_SURFACE = "<pad>"
UNK_SURFACE = "<unk>"
BLANK_SURFACE = "<blank>"


class CorpusError(ValueError):
    """A dataset file or vocabulary violated its documented format."""


@dataclass(frozen=True)
class Vocabulary:
    """Immutable id <-> surface mapping with a structural-id prefix.

    Ids 0, 1, 2 are padding, unknown, and the unbounded-blank marker.  In
    char mode ids ``3 .. 3+t_max-1`` are the exact-length blank markers
    ``[1] .. [t_max]``.  Everything after the structural block is a content
    word (word mode) or character (char mode); the unknown token counts as
    predictable content, the rest of the structural block does not.
    """

    mode: str  # "word" | "char"
    surfaces: tuple[str, ...]
    min_count: int = 1
    t_max: int = 16

    pad_id = 0
    unk_id = 1
    blank_id = 2

    @property
    def n_structural(self) -> int:
        return 3 + (self.t_max if self.mode == "char" else 0)

    @property
    def size(self) -> int:
        return len(self.surfaces)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.surfaces)}

    def length_id(self, t: int) -> int:
        """Id of the exact-length marker ``[t]`` (char mode only)."""
        if self.mode != "char":
            raise CorpusError("length markers exist only in char mode")
        if not 1 <= t <= self.t_max:
            raise CorpusError(f"blank length {t} outside 1..{self.t_max}")
        return 3 + t - 1

    def token(self, surface: str) -> Token:
        """Look a surface up; unknown surfaces map to the unknown token."""
        i = self._index.get(surface)
        if i is None or (i < self.n_structural and i != self.unk_id):
            return Token(self.unk_id, UNK_SURFACE)
        return Token(i, surface)

    def surface(self, i: int) -> str:
        return self.surfaces[i]

    def split_line(self, line: str) -> list[str]:
        return line.split() if self.mode == "word" else list(line)

    def encode_line(self, line: str) -> tuple[Token, ...]:
        """Tokenize one sentence; out-of-vocabulary surfaces become unknown."""
        return tuple(self.token(s) for s in self.split_line(line))


def _structural_surfaces(mode: str, t_max: int) -> list[str]:
    out = [PAD_SURFACE, UNK_SURFACE, BLANK_SURFACE]
    if mode == "char":
        out += [f"[{t}]" for t in range(1, t_max + 1)]
    return out


def build_vocab(
    lines: Iterable[str], mode: str, min_count: int = 1, t_max: int = 16
) -> Vocabulary:
    """Count surfaces over a corpus and fix the id layout.

    Word mode keeps whitespace tokens seen at least ``min_count`` times;
    char mode keeps every observed character.  Content ids are assigned by
    descending count, ties broken lexicographically.
    """
    if mode not in ("word", "char"):
        raise CorpusError(f"unknown mode {mode!r}")
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.split() if mode == "word" else line)
    structural = _structural_surfaces(mode, t_max)
    taken = set(structural)
    threshold = min_count if mode == "word" else 1
    kept = [
        s
        for s, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if c >= threshold and s not in taken
    ]
    return Vocabulary(
        mode=mode,
        surfaces=tuple(structural + kept),
        min_count=min_count,
        t_max=t_max,
    )


# ---------------------------------------------------------------------------
# Task compilation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    """How much of a document to hide, and the seed that decides where."""

    ratio: float
    seed: int


def compile_infilling(
    doc: Sequence[Token], spec: MaskSpec, annotate_lengths: bool = False
) -> tuple[Canvas, tuple[Token, ...]]:
    """Mask a fixed fraction of positions and collapse runs into blanks.

    Exactly ``round(ratio * n)`` positions are masked (half rounds up),
    chosen uniformly without replacement.  Masking everything is rejected —
    an infilling canvas must anchor on at least one kept token.  Masking
    nothing is allowed but warned about, since the canvas is already
    complete.
    """
    n = len(doc)
    k = math.floor(spec.ratio * n + 0.5)
    if n > 0 and k >= n:
        raise CorpusError(
            f"mask ratio {spec.ratio} would mask all {n} positions; "
            "infilling needs at least one kept token"
        )
    if k == 0:
        warnings.warn("mask ratio rounds to zero positions; canvas is complete")
        return Canvas(tuple(doc)), tuple(doc)

    rng = random.Random(spec.seed)
    masked = set(rng.sample(range(1, n + 1), k))
    items: list = []
    j = 1
    while j <= n:
        if j not in masked:
            items.append(doc[j - 1])
            j += 1
            continue
        run = 0
        while j <= n and j in masked:
            run += 1
            j += 1
        items.append(Blank(run) if annotate_lengths else Blank())
    return Canvas(tuple(items)), tuple(doc)


def compile_restoration(
    doc: Sequence[Token],
    slot_count: int,
    slot_lengths: tuple[int, int] = (1, 10),
    seed: int = 0,
    max_tries: int = 100,
) -> tuple[Canvas, tuple[Token, ...]]:
    """Hide ``slot_count`` non-overlapping spans with exact length annotations.

    Span lengths are drawn uniformly from ``slot_lengths`` (inclusive);
    placements keep at least one kept token between spans.  Raises
    :class:`CorpusError` when the document cannot host the requested spans.
    """
    n = len(doc)
    lo, hi = slot_lengths
    if not 1 <= lo <= hi:
        raise CorpusError(f"bad slot length range {slot_lengths}")
    if slot_count < 1:
        raise CorpusError("slot_count must be >= 1")
    if slot_count * lo + (slot_count - 1) > n:
        raise CorpusError(
            f"cannot place {slot_count} spans of length >= {lo} "
            f"with gaps in a document of {n} tokens"
        )

    rng = random.Random(seed)
    for _ in range(max_tries):
        lengths = [rng.randint(lo, hi) for _ in range(slot_count)]
        free = n - sum(lengths) - (slot_count - 1)
        if free < 0:
            continue
        # Distribute the free slack among the gaps: a sorted draw without
        # replacement gives a uniform nondecreasing offset sequence.
        draw = sorted(rng.sample(range(free + slot_count), slot_count))
        offsets = [c - i for i, c in enumerate(draw)]
        starts = []
        pos = 1
        prev = 0
        for i, length in enumerate(lengths):
            pos += offsets[i] - prev + (1 if i else 0)
            prev = offsets[i]
            starts.append(pos)
            pos += length
        break
    else:
        raise CorpusError(
            f"could not place {slot_count} spans from {slot_lengths} "
            f"in {n} tokens after {max_tries} tries"
        )

    slots = {s: ln for s, ln in zip(starts, lengths)}
    items: list = []
    j = 1
    while j <= n:
        if j in slots:
            items.append(Blank(slots[j]))
            j += slots[j]
        else:
            items.append(doc[j - 1])
            j += 1
    return Canvas(tuple(items)), tuple(doc)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def load_sentences(path: str) -> list[str]:
    """One sentence per line, UTF-8.  Empty lines are format errors."""
    out = []
    with open(path, encoding="utf-8") as f:
        for no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                raise CorpusError(f"{path}:{no}: empty line")
            out.append(line)
    return out


def save_lines(path: str, lines: Iterable[str]) -> None:
    atomic_write_text(path, "".join(line + "\n" for line in lines))
