"""Training objective and loop.

A sentence's marginal likelihood sums over every generation order, which is
intractable to optimize directly; training instead maximizes the uniform-
order lower bound

    log p(x) >= log n! + E_order E_step [ n * log p(action_t | canvas_t) ]

Per sample this package draws a step count ``t`` uniformly from ``0..n-1``
and a uniform ordered prefix of ``t`` positions, builds the collapsed canvas
once, and scores *all* ``n - t`` next-step target actions against it in one
encoder pass, weighting the summed log-probabilities by ``n / (n - t)``
(:func:`efficient_loss`).  :func:`naive_loss` is the single-action estimator
of the same expectation — one random order, one random step — kept for
variance comparisons.  Both average to the exact negative bound, which
:func:`lower_bound_exact` computes by full enumeration for short sentences.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .canvas import Token
from .corpus import CorpusError
from .model import BlankModel
from .trajectory import canvas_from_partial, enumerate_orders, trajectory_from_order

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LossReport:
    """One loss evaluation; ``loss`` stays a tensor so callers can backprop."""

    loss: torch.Tensor
    n: int
    t: int

    @property
    def per_token(self) -> torch.Tensor:
        return self.loss / self.n

    @property
    def n_actions(self) -> int:
        return self.n - self.t


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    optimizer: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.1
    weight_decay: float = 0.01
    warmup_steps: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables cadence checkpoints
    log_every: int = 100


def _annotate(model: BlankModel) -> bool:
    return model.config.mode == "char"


def efficient_loss(
    model: BlankModel, x: Sequence[Token], prefix: Sequence[int]
) -> LossReport:
    """All-remaining-actions estimator from one canvas / one encoder pass.

    ``prefix`` is the ordered set of already-placed positions (its order
    does not affect the value, only the set does).  Requires ``len(prefix) <
    len(x)`` so at least one target action exists.
    """
    inst = canvas_from_partial(x, prefix, annotate_lengths=_annotate(model))
    if inst.t >= inst.n:
        raise ValueError("prefix already covers the whole sentence")
    scores = model.score_actions([(inst.canvas, a) for a in inst.targets])
    loss = -math.lgamma(inst.n + 1) - (inst.n / (inst.n - inst.t)) * scores.sum()
    return LossReport(loss=loss, n=inst.n, t=inst.t)


def naive_loss(
    model: BlankModel, x: Sequence[Token], sigma: Sequence[int], t: int
) -> LossReport:
    """Single-action estimator: same mean as :func:`efficient_loss`, higher variance."""
    n = len(x)
    if not 0 <= t < n:
        raise ValueError(f"step {t} outside 0..{n - 1}")
    step = trajectory_from_order(x, sigma, annotate_lengths=_annotate(model))[t]
    lp = model.score_actions([(step.canvas, step.action)])[0]
    loss = -math.lgamma(n + 1) - n * lp
    return LossReport(loss=loss, n=n, t=t)


def lower_bound_exact(model: BlankModel, x: Sequence[Token]) -> float:
    """The exact order-averaged bound by enumerating all n! trajectories."""
    n = len(x)
    orders = enumerate_orders(n)
    trajs = [trajectory_from_order(x, s, annotate_lengths=_annotate(model)) for s in orders]
    pairs = [(st.canvas, st.action) for traj in trajs for st in traj]
    with torch.no_grad():
        scores = model.score_actions(pairs).double()
    sums = scores.view(len(orders), n).sum(dim=1)
    return math.lgamma(n + 1) + float(sums.mean())


def batch_loss(
    model: BlankModel,
    batch: Sequence[tuple[Sequence[Token], Sequence[int]]],
) -> tuple[torch.Tensor, float]:
    """Mean sentence loss over ``(sentence, prefix)`` pairs in one forward.

    Returns the differentiable batch loss and the mean per-token loss.
    Padding introduced by batching must not change any sentence's value —
    the padded-vs-single-forward agreement is covered by tests.
    """
    insts = [
        canvas_from_partial(x, prefix, annotate_lengths=_annotate(model))
        for x, prefix in batch
    ]
    pairs = []
    slices = []
    for inst in insts:
        if inst.t >= inst.n:
            raise ValueError("prefix already covers the whole sentence")
        start = len(pairs)
        pairs.extend((inst.canvas, a) for a in inst.targets)
        slices.append((start, len(pairs)))
    scores = model.score_actions(pairs)
    losses = []
    per_token = 0.0
    for inst, (lo, hi) in zip(insts, slices):
        loss_i = -math.lgamma(inst.n + 1) - (inst.n / (inst.n - inst.t)) * scores[
            lo:hi
        ].sum()
        losses.append(loss_i)
        per_token += loss_i.item() / inst.n
    loss = torch.stack(losses).mean()
    return loss, per_token / len(insts)


def train(
    model: BlankModel,
    sentences: Sequence[Sequence[Token]],
    cfg: TrainConfig,
    on_step: Callable[[int, BlankModel], None] | None = None,
) -> list[tuple[int, float, float]]:
    """Seeded training loop; returns the loss curve as (step, loss, per_token).

    Each step draws ``batch_size`` sentences with replacement and, per
    sentence, a uniform step count and prefix.  Optimizes with plain SGD
    plus decoupled weight decay and linear warmup by default; ``optimizer=
    "adam"`` switches to AdamW.  Gradients are clipped to ``grad_clip``.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    if not sentences:
        raise ValueError("no training sentences")
    for i, x in enumerate(sentences):
        if len(x) == 0:
            raise CorpusError(f"sentence {i + 1} is empty")
        if model.config.mode == "char" and len(x) > model.config.t_max:
            raise CorpusError(
                f"sentence {i + 1} has {len(x)} items, above t_max="
                f"{model.config.t_max}; char-mode training requires sentences "
                "that fit one length annotation"
            )

    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed)
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr)
    elif cfg.optimizer == "adam":
        opt = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    curve: list[tuple[int, float, float]] = []
    model.train()
    for step in range(1, cfg.steps + 1):
        lr_t = cfg.lr * min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps else cfg.lr
        for group in opt.param_groups:
            group["lr"] = lr_t

        batch = []
        for _ in range(cfg.batch_size):
            x = sentences[rng.randrange(len(sentences))]
            t = rng.randrange(len(x))
            prefix = rng.sample(range(1, len(x) + 1), t)
            batch.append((x, prefix))
        loss, per_token = batch_loss(model, batch)
        if not torch.isfinite(loss):
            model.eval()
            raise DivergenceError(f"non-finite loss {loss.item()} at step {step}")

        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if cfg.optimizer == "sgd" and cfg.weight_decay > 0:
            with torch.no_grad():
                for p in model.parameters():
                    p.mul_(1.0 - lr_t * cfg.weight_decay)

        value = loss.item()
        curve.append((step, value, per_token))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.4f per-token %.4f", step, value, per_token)
        if on_step is not None:
            on_step(step, model)
    model.eval()
    return curve


CURVE_HEADER = "step,loss,per_token_loss"


def format_curve(curve: Sequence[tuple[int, float, float]]) -> str:
    """Loss curve as CSV text: step, batch loss, mean per-token loss."""
    lines = [CURVE_HEADER]
    lines += [f"{s},{l:.6f},{p:.6f}" for s, l, p in curve]
    return "\n".join(lines) + "\n"
