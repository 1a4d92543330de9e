"""Generation orders and the canvas/action training views they induce.

A finished sentence of ``n`` tokens can be generated in any of the ``n!``
orders.  Given an order, the intermediate canvases and the action taken at
each step are uniquely determined: the tokens placed so far appear in
sentence order, every maximal run of still-missing positions collapses to a
single blank, and the next action fills the blank containing the next
position in the order.

Two views are provided.  :func:`trajectory_from_order` walks an entire order
step by step (used for replay, enumeration and exact scoring).
:func:`canvas_from_partial` jumps straight to the canvas after an unordered
prefix has been placed and lists *all* next-step target actions (used by the
training objective, which scores every remaining position against one
canvas).  They are implemented independently and cross-checked in tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

from .canvas import Action, Blank, Canvas, Token

MAX_ENUMERATED = 8


@dataclass(frozen=True)
class TrajectoryStep:
    """The canvas seen at step ``t`` (0-based) and the action taken on it."""

    t: int
    canvas: Canvas
    action: Action


@dataclass(frozen=True)
class TrainingInstance:
    """Canvas after a prefix of ``t`` placements, with all next-step targets.

    ``spans`` maps each blank's 1-based index to the inclusive 1-based range
    of sentence positions it covers.  ``targets`` holds one action per
    still-missing position, ordered by position.
    """

    canvas: Canvas
    targets: tuple[Action, ...]
    n: int
    t: int
    spans: dict[int, tuple[int, int]]


def _check_positions(n: int, positions: Sequence[int], what: str) -> None:
    seen = set(positions)
    if len(seen) != len(positions):
        raise ValueError(f"{what} contains repeated positions: {positions}")
    for p in positions:
        if not 1 <= p <= n:
            raise ValueError(f"{what} position {p} outside 1..{n}")


def trajectory_from_order(
    x: Sequence[Token], sigma: Sequence[int], annotate_lengths: bool = False
) -> list[TrajectoryStep]:
    """The unique length-``n`` trajectory that writes ``x`` in order ``sigma``.

    ``sigma`` is a permutation of ``1..n`` (1-based sentence positions).
    With ``annotate_lengths=True`` blanks carry their exact missing-token
    counts and actions use ``left_len``; otherwise blanks are unbounded and
    actions use left/right flags.
    """
    n = len(x)
    if len(sigma) != n:
        raise ValueError(f"order length {len(sigma)} != sentence length {n}")
    _check_positions(n, sigma, "order")
    if n == 0:
        return []

    # Segments of the evolving canvas: ("tok", pos) or ("blank", lo, hi)
    # where lo..hi is an inclusive range of still-missing positions.
    segments: list[tuple] = [("blank", 1, n)]
    steps: list[TrajectoryStep] = []

    def snapshot() -> Canvas:
        items = []
        for seg in segments:
            if seg[0] == "tok":
                items.append(x[seg[1] - 1])
            else:
                _, lo, hi = seg
                items.append(Blank(hi - lo + 1) if annotate_lengths else Blank())
        return Canvas(tuple(items))

    for t, p in enumerate(sigma):
        blank_index = 0
        for si, seg in enumerate(segments):
            if seg[0] != "blank":
                continue
            blank_index += 1
            _, lo, hi = seg
            if lo <= p <= hi:
                word = x[p - 1]
                if annotate_lengths:
                    action = Action(blank_index, word, left_len=p - lo)
                else:
                    action = Action(blank_index, word, left=p > lo, right=p < hi)
                steps.append(TrajectoryStep(t, snapshot(), action))
                pieces: list[tuple] = []
                if p > lo:
                    pieces.append(("blank", lo, p - 1))
                pieces.append(("tok", p))
                if p < hi:
                    pieces.append(("blank", p + 1, hi))
                segments[si : si + 1] = pieces
                break
        else:
            raise AssertionError(f"position {p} already placed")

    return steps


def canvas_from_partial(
    x: Sequence[Token], prefix: Sequence[int], annotate_lengths: bool = False
) -> TrainingInstance:
    """Canvas after placing ``prefix`` (any distinct positions), plus targets.

    The canvas does not depend on the order within the prefix, only on the
    set.  Each still-missing position contributes one target action: the
    action that would place it next.
    """
    n = len(x)
    _check_positions(n, prefix, "prefix")
    placed = set(prefix)

    items: list = []
    spans: dict[int, tuple[int, int]] = {}
    # run_of[j] = (blank index, lo) for each missing position j
    run_of: dict[int, tuple[int, int]] = {}
    j = 1
    while j <= n:
        if j in placed:
            items.append(x[j - 1])
            j += 1
            continue
        lo = j
        while j <= n and j not in placed:
            j += 1
        hi = j - 1
        items.append(Blank(hi - lo + 1) if annotate_lengths else Blank())
        b = len(spans) + 1
        spans[b] = (lo, hi)
        for q in range(lo, hi + 1):
            run_of[q] = (b, lo)

    targets = []
    for q in sorted(run_of):
        b, lo = run_of[q]
        hi = spans[b][1]
        if annotate_lengths:
            targets.append(Action(b, x[q - 1], left_len=q - lo))
        else:
            targets.append(Action(b, x[q - 1], left=q > lo, right=q < hi))

    return TrainingInstance(
        canvas=Canvas(tuple(items)),
        targets=tuple(targets),
        n=n,
        t=len(prefix),
        spans=spans,
    )


def enumerate_orders(n: int) -> list[tuple[int, ...]]:
    """All ``n!`` generation orders.  Guarded: refuses ``n > 8``."""
    if n > MAX_ENUMERATED:
        raise ValueError(f"refusing to enumerate {n}! orders (n > {MAX_ENUMERATED})")
    return list(itertools.permutations(range(1, n + 1)))
