"""Decoders that iteratively fill a canvas until no blanks remain.

All strategies share one expansion rule: for each blank, take the top-K
words by the word head (K = ``top_k_words``, default 16), cross them with
every shape (left/right flags or left length), and score each candidate
action by its exact log-probability.  Greedy takes the best candidate of a
single hypothesis; beam search keeps the best ``beam_size`` partial
hypotheses by cumulative joint log-probability and retires completed ones
into a pool; sampling draws from the temperature-scaled distribution over
the same candidate set (top-k truncated sampling — temperatures at or below
1e-4 are treated as exact argmax, so the zero-temperature limit coincides
with greedy).  Because the rule is shared, beam size 1 and greedy are the
same computation by construction.

Unbounded decoding is kept finite by a token budget (default ``2 * input
items + 10``): once the tokens generated plus the open blanks reach the
budget, candidates that keep extra blanks open are dropped, so every
remaining blank is filled with exactly one word.  Length-annotated decoding
needs no budget — each action conserves the annotated totals, so it always
terminates in exactly the annotated number of steps.

Ties are broken deterministically: lower blank index, then lower word id,
then lower shape index.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import torch

from .canvas import (
    Action,
    Blank,
    Canvas,
    apply_action,
    blank_count,
    blank_locations,
    is_complete,
    render,
)
from .model import BlankModel
from .trajectory import TrajectoryStep


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 1
    top_k_words: int = 16
    temperature: float = 1.0
    n_samples: int = 10
    max_tokens: int | None = None  # None: 2 * input items + 10
    seed: int = 0


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly finished) decode: canvas, joint log-prob, and trajectory."""

    canvas: Canvas
    logprob: float
    steps: tuple[TrajectoryStep, ...] = ()

    @property
    def generated(self) -> int:
        return len(self.steps)


_ARGMAX_TEMPERATURE = 1e-4


def _budget(c: Canvas, cfg: DecodeConfig) -> int:
    budget = cfg.max_tokens if cfg.max_tokens is not None else 2 * len(c.items) + 10
    if budget < blank_count(c):
        raise ValueError(
            f"token budget {budget} is below the canvas's {blank_count(c)} blanks"
        )
    return budget


def _expand(
    model: BlankModel,
    z: torch.Tensor,
    c: Canvas,
    cfg: DecodeConfig,
    generated: int,
    budget: float,
) -> list[tuple[float, Action]]:
    """All candidate actions for one canvas with their log-probabilities.

    Candidates are ordered by (blank, word id, shape) so downstream stable
    sorts and max() tie-breaks resolve to the lowest-index candidate.
    """
    positions = [p - 1 for p in blank_locations(c)]
    k = len(positions)
    lp_b = model.blank_logprobs(z, positions)  # (k,)
    zb = z[positions]  # (k, d)
    lp_w = model.word_logprobs(zb)  # (k, V)
    n_allowed = model.vocab.size - len(model._masked_word_ids)
    K = min(cfg.top_k_words, n_allowed)
    top_vals, top_ids = lp_w.topk(K, dim=-1)  # (k, K)

    flat_ids = top_ids.reshape(-1)
    zb_rep = zb.repeat_interleave(K, dim=0)
    out: list[tuple[float, Action]] = []
    if model.config.mode == "word":
        lp_f = model.flag_logprobs(zb_rep, flat_ids).view(k, K, 4)
        # Every open blank still owes one token, so opening new blanks is
        # allowed only while the guaranteed total stays within the budget.
        # A class with both flags set opens two.
        headroom = budget - generated - k
        classes = [cls for cls in range(4) if (cls >> 1) + (cls & 1) <= headroom]
        for b in range(k):
            # reorder the top-K words by id for deterministic tie-breaking
            by_id = sorted(range(K), key=lambda j: int(top_ids[b, j]))
            for j in by_id:
                wid = int(top_ids[b, j])
                word = model.vocab.token(model.vocab.surface(wid))
                base = float(lp_b[b]) + float(top_vals[b, j])
                for cls in classes:
                    left, right = bool(cls & 2), bool(cls & 1)
                    out.append(
                        (
                            base + float(lp_f[b, j, cls]),
                            Action(b + 1, word, left=left, right=right),
                        )
                    )
    else:
        lengths = []
        for p in positions:
            item = c.items[p]
            assert isinstance(item, Blank)
            if item.length is None:
                raise ValueError("char-mode decoding requires length annotations")
            lengths.append(item.length)
        lens_rep = torch.tensor(lengths).repeat_interleave(K)
        lp_l = model.length_logprobs(zb_rep, flat_ids, lens_rep).view(k, K, -1)
        for b in range(k):
            by_id = sorted(range(K), key=lambda j: int(top_ids[b, j]))
            for j in by_id:
                wid = int(top_ids[b, j])
                word = model.vocab.token(model.vocab.surface(wid))
                base = float(lp_b[b]) + float(top_vals[b, j])
                for left_len in range(lengths[b]):
                    out.append(
                        (
                            base + float(lp_l[b, j, left_len]),
                            Action(b + 1, word, left_len=left_len),
                        )
                    )
    return out


def beam_fill(
    model: BlankModel, c: Canvas, cfg: DecodeConfig = DecodeConfig()
) -> list[Hypothesis]:
    """Beam search over actions; returns completed hypotheses, best first."""
    # Length annotations already bound char-mode output; only unbounded
    # (word-mode) decoding needs the token budget.
    budget = _budget(c, cfg) if model.config.mode == "word" else math.inf
    B = cfg.beam_size
    if B < 1:
        raise ValueError("beam_size must be >= 1")
    start = Hypothesis(c, 0.0)
    if is_complete(c):
        return [start]

    model.eval()
    live = [start]
    pool: list[Hypothesis] = []
    with torch.no_grad():
        while live:
            z, _ = model.encode_canvases([h.canvas for h in live])
            candidates: list[tuple[float, Hypothesis]] = []
            for i, h in enumerate(live):
                t = h.generated
                for delta, action in _expand(model, z[i], h.canvas, cfg, t, budget):
                    nxt = Hypothesis(
                        apply_action(h.canvas, action),
                        h.logprob + delta,
                        h.steps + (TrajectoryStep(t, h.canvas, action),),
                    )
                    candidates.append((nxt.logprob, nxt))
            candidates.sort(key=lambda sc: -sc[0])  # stable: ties keep expansion order
            live = []
            for _, h in candidates[:B]:
                (pool if is_complete(h.canvas) else live).append(h)
    pool.sort(key=lambda h: -h.logprob)
    return pool[:B]


def greedy_fill(
    model: BlankModel, c: Canvas, cfg: DecodeConfig = DecodeConfig()
) -> Hypothesis:
    """Repeatedly apply the best candidate action (beam search of size 1)."""
    return beam_fill(model, c, replace(cfg, beam_size=1))[0]


def sample_fill(
    model: BlankModel, c: Canvas, cfg: DecodeConfig = DecodeConfig()
) -> list[Hypothesis]:
    """Draw ``n_samples`` completions by temperature sampling over candidates.

    Stream ``j`` uses its own RNG derived from ``cfg.seed``, so results are
    reproducible and independent of how many streams run.  Logged joint
    log-probs are the model's own (temperature only reshapes the draw).
    """
    budget = _budget(c, cfg) if model.config.mode == "word" else math.inf
    if cfg.temperature < 0:
        raise ValueError("temperature must be >= 0")
    if is_complete(c):
        return [Hypothesis(c, 0.0) for _ in range(cfg.n_samples)]
    model.eval()
    chains = [
        (Hypothesis(c, 0.0), random.Random(cfg.seed * 100_003 + j))
        for j in range(cfg.n_samples)
    ]
    done: dict[int, Hypothesis] = {}
    with torch.no_grad():
        while len(done) < len(chains):
            open_idx = [j for j in range(len(chains)) if j not in done]
            z, _ = model.encode_canvases([chains[j][0].canvas for j in open_idx])
            for row, j in enumerate(open_idx):
                h, rng = chains[j]
                cands = _expand(model, z[row], h.canvas, cfg, h.generated, budget)
                if cfg.temperature <= _ARGMAX_TEMPERATURE:
                    # max keeps the first of equals: lowest-index tie-break
                    delta, action = max(cands, key=lambda da: da[0])
                else:
                    best = max(d for d, _ in cands)
                    weights = [
                        math.exp((d - best) / cfg.temperature) for d, _ in cands
                    ]
                    delta, action = rng.choices(cands, weights=weights, k=1)[0]
                nxt = Hypothesis(
                    apply_action(h.canvas, action),
                    h.logprob + delta,
                    h.steps + (TrajectoryStep(h.generated, h.canvas, action),),
                )
                chains[j] = (nxt, rng)
                if is_complete(nxt.canvas):
                    done[j] = nxt
    return [done[j] for j in range(len(chains))]


def restore_fill(
    model: BlankModel, c: Canvas, cfg: DecodeConfig = DecodeConfig()
) -> Hypothesis:
    """Fill a fully length-annotated canvas; step count equals the annotations.

    Requires a char-mode model and annotations within its ``t_max``.  Uses
    greedy choice unless ``cfg.beam_size > 1``.
    """
    if model.config.mode != "char":
        raise ValueError("restoration requires a char-mode (length-annotated) model")
    total = 0
    for it in c.items:
        if isinstance(it, Blank):
            if it.length is None:
                raise ValueError("restoration requires exact length annotations")
            if it.length > model.config.t_max:
                raise ValueError(
                    f"blank length {it.length} above model t_max {model.config.t_max}"
                )
            total += it.length
    best = beam_fill(model, c, cfg)[0]
    assert best.generated == total, "length annotations must be conserved"
    return best


def rerank(
    candidates: Sequence[Hypothesis],
    scorer: Callable[[str], float],
    mode: str,
) -> Hypothesis:
    """Pick the candidate with the best external score on its rendered text.

    Ties go to the higher joint log-prob, then to the earlier candidate.
    """
    if not candidates:
        raise ValueError("nothing to rerank")
    scored = [
        (scorer(render(h.canvas, mode)), h.logprob, -i, h)
        for i, h in enumerate(candidates)
    ]
    return max(scored)[3]


def trajectory_lines(h: Hypothesis, mode: str) -> list[str]:
    """Rendered canvas after every step: initial canvas first, final last."""
    return [render(s.canvas, mode) for s in h.steps] + [render(h.canvas, mode)]
