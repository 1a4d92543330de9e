"""Likelihood evaluation and text metrics.

The marginal likelihood of a sentence sums the probabilities of all ``n!``
generation trajectories.  :func:`exact_log_marginal` enumerates them (short
sentences only).  :func:`mc_log_marginal` estimates the same quantity from
``m`` uniformly sampled orders:

    X_m = (n! / m) * sum_i p(x, order_i)

which is unbiased for p(x).  Perplexity derived from it, ``X_m**(-1/n)``,
is biased upward for finite ``m`` and non-increasing in ``m`` on average,
so reported perplexities are conservative; raising ``m`` tightens them.

Text metrics are corpus-level 4-gram BLEU (brevity penalty; add-1 smoothing
on the n >= 2 precisions), positional character error rate over aligned
restoration slots, and the validity rate of infilled outputs against their
input canvases (all fixed tokens kept in order, every blank filled with at
least one token).
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

from .canvas import Blank, Canvas, Token
from .model import BlankModel
from .trajectory import enumerate_orders, trajectory_from_order

EXACT_MAX_N = 6


def _trajectory_pairs(model: BlankModel, x, orders):
    annotate = model.config.mode == "char"
    pairs = []
    for sigma in orders:
        for step in trajectory_from_order(x, sigma, annotate_lengths=annotate):
            pairs.append((step.canvas, step.action))
    return pairs


def _order_logprobs(model: BlankModel, x, orders) -> torch.Tensor:
    """Joint log p(x, order) for each order, scored in batched chunks."""
    n = len(x)
    pairs = _trajectory_pairs(model, x, orders)
    with torch.no_grad():
        scores = model.score_actions(pairs).double()
    return scores.view(len(orders), n).sum(dim=1)


def exact_log_marginal(model: BlankModel, x: Sequence[Token]) -> float:
    """log p(x) by enumerating all n! orders.  Guarded to n <= 6."""
    n = len(x)
    if n > EXACT_MAX_N:
        raise ValueError(f"exact marginal is enumerative; refusing n={n} > {EXACT_MAX_N}")
    if n == 0:
        return 0.0
    sums = _order_logprobs(model, x, enumerate_orders(n))
    return float(torch.logsumexp(sums, dim=0))


def mc_log_marginal(
    model: BlankModel,
    x: Sequence[Token],
    m: int,
    seed: int = 0,
    exhaustive: bool = False,
) -> float:
    """log X_m — unbiased Monte-Carlo estimate of log-domain p(x).

    Draws ``m`` orders uniformly with replacement.  With ``exhaustive=True``
    every order is used exactly once instead (then the estimate *is* the
    exact marginal and ``m``/``seed`` are ignored).
    """
    n = len(x)
    if n == 0:
        return 0.0
    if exhaustive:
        orders = enumerate_orders(n)
        sums = _order_logprobs(model, x, orders)
        return float(torch.logsumexp(sums, dim=0))
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = random.Random(seed)
    positions = list(range(1, n + 1))
    orders = [tuple(rng.sample(positions, n)) for _ in range(m)]
    sums = _order_logprobs(model, x, orders)
    return math.lgamma(n + 1) - math.log(m) + float(torch.logsumexp(sums, dim=0))


@dataclass(frozen=True)
class PplEstimate:
    """Corpus perplexity with its per-sentence evidence.

    ``ppl`` is token-weighted: exp(- sum log X_m / total tokens).  The
    per-sentence view (each sentence's own X_m**(-1/n)) is exposed too,
    since the two aggregations answer different questions.
    """

    log_marginals: tuple[float, ...]
    lengths: tuple[int, ...]
    m: int
    ppl: float

    @property
    def n_tokens(self) -> int:
        return sum(self.lengths)

    @property
    def sentence_ppls(self) -> tuple[float, ...]:
        return tuple(
            math.exp(-lx / n) for lx, n in zip(self.log_marginals, self.lengths)
        )

    @property
    def mean_sentence_ppl(self) -> float:
        return sum(self.sentence_ppls) / len(self.sentence_ppls)


def corpus_ppl(
    model: BlankModel,
    sentences: Sequence[Sequence[Token]],
    m: int,
    seed: int = 0,
    exhaustive: bool = False,
) -> PplEstimate:
    """Monte-Carlo corpus perplexity; each sentence gets its own seeded stream."""
    if not sentences:
        raise ValueError("empty corpus")
    logs, lens = [], []
    for i, x in enumerate(sentences):
        logs.append(
            mc_log_marginal(model, x, m, seed=seed * 1_000_003 + i, exhaustive=exhaustive)
        )
        lens.append(len(x))
    ppl = math.exp(-sum(logs) / sum(lens))
    return PplEstimate(tuple(logs), tuple(lens), m, ppl)


# ---------------------------------------------------------------------------
# Text metrics
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]
) -> float:
    """Corpus-level 4-gram BLEU in [0, 100], one reference per candidate.

    Clipped n-gram counts are pooled over the corpus before computing
    precisions; orders 2-4 get add-1 smoothing so finite scores survive
    zero-match orders; the brevity penalty uses total lengths.  Identical
    corpora score exactly 100.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise ValueError("nothing to score")
    matches = [0] * 5
    totals = [0] * 5
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            got = _ngrams(cand, n)
            want = _ngrams(ref, n)
            matches[n] += sum(min(c, want[g]) for g, c in got.items())
            totals[n] += max(0, len(cand) - n + 1)
    if cand_len == 0 or totals[1] == 0 or matches[1] == 0:
        return 0.0
    log_p = math.log(matches[1] / totals[1])
    for n in range(2, 5):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p / 4)


def cer(predicted: Sequence[str], reference: Sequence[str]) -> float:
    """Positional error rate over aligned slots: mismatches / total positions.

    Every predicted slot must have the same length as its reference slot —
    that is what exact length annotations guarantee; anything else is an
    alignment bug, reported as an error rather than folded into the rate.
    """
    if len(predicted) != len(reference):
        raise ValueError(f"{len(predicted)} predicted vs {len(reference)} true slots")
    total = wrong = 0
    for i, (p, r) in enumerate(zip(predicted, reference)):
        if len(p) != len(r):
            raise ValueError(
                f"slot {i}: predicted length {len(p)} != reference length {len(r)}"
            )
        total += len(r)
        wrong += sum(a != b for a, b in zip(p, r))
    if total == 0:
        raise ValueError("no slot content to score")
    return wrong / total


def extract_slots(template: Canvas, filled: Sequence[str]) -> list[str]:
    """Contents of each annotated blank, read out of a completed token list.

    ``filled`` is the token surface sequence of a completed canvas that was
    decoded from ``template``; exact annotations make the alignment unique.
    """
    out = []
    j = 0
    for item in template.items:
        if isinstance(item, Token):
            j += 1
            continue
        if item.length is None:
            raise ValueError("slot extraction requires length annotations")
        if j + item.length > len(filled):
            raise ValueError("filled sequence shorter than the template demands")
        out.append("".join(filled[j : j + item.length]))
        j += item.length
    if j != len(filled):
        raise ValueError(
            f"filled sequence has {len(filled)} tokens, template implies {j}"
        )
    return out


def is_valid_fill(template: Canvas, output: Sequence[str]) -> bool:
    """Does ``output`` keep all fixed tokens in order and fill every blank?

    Unbounded blanks must absorb at least one token; length-annotated blanks
    exactly their annotation.  Decided by memoized matching, so a fill
    counts as valid if *any* assignment of output tokens to blanks works.
    """
    items = template.items

    memo: dict[tuple[int, int], bool] = {}

    def match(i: int, j: int) -> bool:
        key = (i, j)
        if key in memo:
            return memo[key]
        if i == len(items):
            ok = j == len(output)
        else:
            item = items[i]
            if isinstance(item, Token):
                ok = j < len(output) and output[j] == item.surface and match(i + 1, j + 1)
            elif item.length is not None:
                ok = j + item.length <= len(output) and match(i + 1, j + item.length)
            else:
                ok = any(match(i + 1, jj) for jj in range(j + 1, len(output) + 1))
        memo[key] = ok
        return ok

    return match(0, 0)


def validity_rate(
    templates: Sequence[Canvas], outputs: Sequence[Sequence[str]]
) -> float:
    """Fraction of outputs that are valid fills of their templates."""
    if len(templates) != len(outputs):
        raise ValueError(f"{len(templates)} templates vs {len(outputs)} outputs")
    if not templates:
        raise ValueError("nothing to score")
    return sum(
        is_valid_fill(t, o) for t, o in zip(templates, outputs)
    ) / len(templates)
