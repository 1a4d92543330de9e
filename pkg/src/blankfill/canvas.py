"""Canvas grammar: partially written sequences and the actions that extend them.

A canvas is an immutable sequence of items, each either a concrete token or a
blank.  A blank is a placeholder for one or more missing tokens; it may carry
an exact length annotation (char/restoration mode) or be unbounded (word
mode).  One action rewrites one blank into a word plus optional sub-blanks,
so every action grows the canvas by exactly one token and generation
terminates when no blanks remain.

Positions are 1-based throughout the public API: item positions within a
canvas and blank indices within an action both count from 1.  This matches
the way generation orders are written down everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union


class TemplateError(ValueError):
    """Raised when template text does not follow the documented blank syntax."""


class InvalidActionError(ValueError):
    """Raised when an action does not apply to the given canvas."""


@dataclass(frozen=True)
class Token:
    """A concrete vocabulary item: integer id plus its surface form."""

    id: int
    surface: str


@dataclass(frozen=True)
class Blank:
    """A placeholder for missing tokens.

    ``length=None`` means unbounded (any positive number of tokens may end up
    here); ``length=t`` means exactly ``t`` tokens are missing.
    """

    length: int | None = None

    def __post_init__(self) -> None:
        if self.length is not None and self.length < 1:
            raise ValueError(f"blank length must be >= 1, got {self.length}")


CanvasItem = Union[Token, Blank]


@dataclass(frozen=True)
class Canvas:
    """An immutable sequence of tokens and blanks."""

    items: tuple[CanvasItem, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[CanvasItem]:
        return iter(self.items)

    def __getitem__(self, i: int) -> CanvasItem:
        return self.items[i]


@dataclass(frozen=True)
class Action:
    """Rewrite blank number ``blank`` (1-based) into a word.

    In unbounded mode the ``left``/``right`` flags say whether a new blank is
    kept on each side of the word.  In length-annotated mode ``left_len``
    gives the number of still-missing tokens to the left of the word; the
    right length is implied by the annotation of the blank being filled
    (``t - 1 - left_len``) and is not stored.
    """

    blank: int
    word: Token
    left: bool = False
    right: bool = False
    left_len: int | None = None


def initial_canvas() -> Canvas:
    """The canvas generation starts from: a single unbounded blank."""
    return Canvas((Blank(),))


def is_complete(c: Canvas) -> bool:
    """True when the canvas contains no blanks."""
    return not any(isinstance(it, Blank) for it in c.items)


def blank_locations(c: Canvas) -> list[int]:
    """1-based item positions of the blanks, in canvas order."""
    return [i + 1 for i, it in enumerate(c.items) if isinstance(it, Blank)]


def blank_count(c: Canvas) -> int:
    return sum(1 for it in c.items if isinstance(it, Blank))


def tokens(c: Canvas) -> list[Token]:
    """The concrete tokens of the canvas, in order (blanks skipped)."""
    return [it for it in c.items if isinstance(it, Token)]


def normalize(c: Canvas, strict: bool = False) -> Canvas:
    """Merge runs of adjacent unbounded blanks into one.

    Two adjacent unbounded blanks denote the same set of completions as a
    single one, so canvases are kept in the merged normal form.  With
    ``strict=True`` adjacency is an error instead of a merge.  Length-
    annotated blanks are never merged: their annotations are exact.
    """
    out: list[CanvasItem] = []
    for it in c.items:
        if (
            isinstance(it, Blank)
            and it.length is None
            and out
            and isinstance(out[-1], Blank)
            and out[-1].length is None
        ):
            if strict:
                raise TemplateError("adjacent unbounded blanks")
            continue
        out.append(it)
    return Canvas(tuple(out))


def apply_action(c: Canvas, a: Action) -> Canvas:
    """Apply one action, returning the extended canvas.

    The canvas gains exactly one token.  Raises :class:`InvalidActionError`
    when the blank index is out of range, when flag/annotation style does not
    match the blank being filled, or when ``left_len`` is outside
    ``[0, t-1]`` for a blank annotated with length ``t``.
    """
    locs = blank_locations(c)
    if not 1 <= a.blank <= len(locs):
        raise InvalidActionError(
            f"blank index {a.blank} out of range (canvas has {len(locs)} blanks)"
        )
    pos = locs[a.blank - 1] - 1  # 0-based item index
    target = c.items[pos]
    assert isinstance(target, Blank)

    replacement: list[CanvasItem] = []
    if target.length is None:
        if a.left_len is not None:
            raise InvalidActionError("left_len given for an unbounded blank")
        if a.left:
            replacement.append(Blank())
        replacement.append(a.word)
        if a.right:
            replacement.append(Blank())
    else:
        if a.left_len is None:
            raise InvalidActionError(
                "action on a length-annotated blank requires left_len"
            )
        t = target.length
        if not 0 <= a.left_len <= t - 1:
            raise InvalidActionError(
                f"left_len {a.left_len} out of range for blank of length {t}"
            )
        right_len = t - 1 - a.left_len
        if a.left_len > 0:
            replacement.append(Blank(a.left_len))
        replacement.append(a.word)
        if right_len > 0:
            replacement.append(Blank(right_len))

    return Canvas(c.items[:pos] + tuple(replacement) + c.items[pos + 1 :])


BLANK_WORD = "__"
BLANK_CHAR = "?"


def parse_template(text: str, mode: str, vocab, strict: bool = False) -> Canvas:
    """Parse template text into a canvas.

    Word mode: tokens are whitespace-separated; the literal token ``__`` is
    an unbounded blank.  Char mode: every character is an item; each maximal
    run of ``t`` question marks is a blank annotated with length ``t``.
    Unknown surfaces map to the vocabulary's unknown token.  The result is
    normalized (adjacent unbounded blanks merged; rejected under ``strict``).
    """
    items: list[CanvasItem] = []
    if mode == "word":
        for piece in text.split():
            if piece == BLANK_WORD:
                items.append(Blank())
            else:
                items.append(vocab.token(piece))
    elif mode == "char":
        run = 0
        for ch in text:
            if ch == BLANK_CHAR:
                run += 1
                continue
            if run:
                items.append(Blank(run))
                run = 0
            items.append(vocab.token(ch))
        if run:
            items.append(Blank(run))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return normalize(Canvas(tuple(items)), strict=strict)


def render(c: Canvas, mode: str) -> str:
    """Render a canvas back to template text (inverse of :func:`parse_template`).

    Word mode joins surfaces with single spaces; char mode concatenates.
    Unbounded blanks render as ``__``, length-annotated ones as that many
    question marks.
    """
    pieces: list[str] = []
    for it in c.items:
        if isinstance(it, Token):
            pieces.append(it.surface)
        elif it.length is None:
            pieces.append(BLANK_WORD)
        else:
            pieces.append(BLANK_CHAR * it.length)
    if mode == "word":
        return " ".join(pieces)
    if mode == "char":
        return "".join(pieces)
    raise ValueError(f"unknown mode {mode!r}")
