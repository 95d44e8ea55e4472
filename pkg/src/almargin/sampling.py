"""Selection strategies: margin scoring, length-penalized sentence margin,
subsetted ascending-rank batch selection, passive sampling, and the
power-law weighted ensemble scorer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import predict_proba_batch
from .seeding import rng_for


class SamplingError(Exception):
    pass


# ---------------------------------------------------------------------------
# margin scores


def margin_score(probs: Sequence[float]) -> float:
    """Top-1 minus top-2 probability of a (any-order) probability vector."""
    p = np.asarray(probs, dtype=float)
    if p.size < 2:
        raise SamplingError("probability vector must have length >= 2")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise SamplingError("entries must be non-negative and sum to 1")
    top2 = np.sort(p)[-2:]
    return float(top2[1] - top2[0])


def sentence_margin(token_probs) -> float:
    """Sentence-level margin under per-token independence.

    The most likely joint labeling takes each token's better option; the
    runner-up flips exactly the token with the largest second-best/best
    ratio. Hence M = prod_t max_t * (1 - max_t ratio_t).
    """
    q = np.asarray(token_probs, dtype=float)
    if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] != 2:
        raise SamplingError("token_probs must be a nonempty sequence of binary pairs")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-6):
        raise SamplingError("each token pair must be a valid probability pair")
    best = q.max(axis=1)
    second = q.min(axis=1)
    p1 = float(np.prod(best))
    worst_ratio = float(np.max(second / np.maximum(best, 1e-300)))
    return p1 * (1.0 - worst_ratio)


def penalized_margin(margin: float, length: int, lam: float) -> float:
    """Length-regularized margin M * L**lambda."""
    if length < 1:
        raise SamplingError("length must be >= 1")
    return margin * float(length) ** lam


# ---------------------------------------------------------------------------
# batch selection


def _sorted_by_id(pool: Sequence) -> list:
    return sorted(pool, key=lambda item: item.id)


def select_batch(
    pool: Sequence,
    scorer: Callable[[Sequence], np.ndarray],
    batch_size: int,
    subset_size: int | None,
    seed,
) -> list[int]:
    """Ascending-rank selection of the batch_size lowest-scoring items.

    With subset_size set, a uniform subset is drawn first and only that
    subset is ranked. Ties break by ascending id; output is rank-ordered.
    The result does not depend on the pool's presentation order.
    """
    items = _sorted_by_id(pool)
    if not items:
        raise SamplingError("empty pool")
    if subset_size is not None:
        if subset_size < batch_size:
            raise SamplingError("subset_size must be >= batch_size")
        if subset_size < len(items):
            rng = rng_for(seed, "subset")
            idx = rng.choice(len(items), size=subset_size, replace=False)
            items = [items[i] for i in sorted(idx)]
    if batch_size > len(items):
        raise SamplingError(f"batch_size {batch_size} exceeds candidate pool of {len(items)}")
    scores = np.asarray(scorer(items), dtype=float)
    if scores.shape != (len(items),):
        raise SamplingError("scorer must return one score per candidate")
    order = sorted(range(len(items)), key=lambda i: (scores[i], items[i].id))
    return [items[i].id for i in order[:batch_size]]


def passive_select(pool: Sequence, batch_size: int, seed) -> list[int]:
    """Uniform selection without replacement, deterministic given seed."""
    items = _sorted_by_id(pool)
    if batch_size > len(items):
        raise SamplingError(f"batch_size {batch_size} exceeds pool of {len(items)}")
    rng = rng_for(seed, "passive")
    idx = rng.choice(len(items), size=batch_size, replace=False)
    return [items[i].id for i in idx]


# ---------------------------------------------------------------------------
# power-law ensemble weights


@dataclass(frozen=True)
class PowerPiece:
    t_start: int
    a: float
    b: float
    alpha: float

    def params(self) -> tuple[float, float, float]:
        return (self.a, self.b, self.alpha)


@dataclass(frozen=True)
class PowerSchedule:
    """Piecewise f(t) = a + b * t**alpha of cumulative training size,
    clamped to [0, 1]."""

    pieces: tuple[PowerPiece, ...]

    def __post_init__(self):
        if len(self.pieces) == 0:
            raise SamplingError("schedule must have at least one piece")
        starts = [p.t_start for p in self.pieces]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise SamplingError("piece t_start values must be strictly increasing")


def power_weight(t: float, schedule: PowerSchedule) -> float:
    """Evaluate the piece whose t_start is the largest <= t; clamp to [0, 1]."""
    if t < 0:
        raise SamplingError("t must be non-negative")
    piece = None
    for p in schedule.pieces:
        if p.t_start <= t:
            piece = p
    if piece is None:
        piece = schedule.pieces[0]
    value = piece.a + piece.b * float(t) ** piece.alpha if t > 0 or piece.alpha >= 0 else np.inf
    return float(min(1.0, max(0.0, value)))


def ensemble_score(models: Sequence, weights: Sequence[float], x) -> float:
    """Margin of the weighted average of the models' probability vectors."""
    w = np.asarray(weights, dtype=float)
    if len(models) != len(w):
        raise SamplingError("models and weights must have equal length")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise SamplingError("weights must be non-negative and sum to 1")
    probs = predict_proba_batch(models[0], [x])[0] * w[0]
    for model, wi in zip(models[1:], w[1:]):
        probs = probs + predict_proba_batch(model, [x])[0] * wi
    return margin_score(probs)


def fit_power_schedule(
    candidates: Sequence[PowerSchedule],
    evaluate: Callable[[PowerSchedule], float],
) -> PowerSchedule:
    """Exhaustive grid search over candidate schedules, maximizing the
    callback's mean-over-rounds metric. Ties go to the lexicographically
    smallest parameter tuple."""
    if len(candidates) == 0:
        raise SamplingError("empty candidate grid")

    def key(s: PowerSchedule):
        return tuple(p.params() for p in s.pieces)

    best = None
    best_score = -np.inf
    for cand in sorted(candidates, key=key):
        score = evaluate(cand)
        if score > best_score:
            best, best_score = cand, score
    return best


# ---------------------------------------------------------------------------
# scheme configuration

_SCHEME_KINDS = ("passive", "margin_pure", "margin_naive_adaptive", "margin_power")


@dataclass(frozen=True)
class SchemeConfig:
    """One sampling strategy as it appears in an experiment config."""

    kind: str
    scorer_kind: str | None = None  # margin_pure only
    schedule: PowerSchedule | None = None  # margin_power only
    length_penalty: float = 0.0  # sentence track only

    def __post_init__(self):
        if self.kind not in _SCHEME_KINDS:
            raise SamplingError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "margin_pure" and self.scorer_kind is None:
            raise SamplingError("margin_pure requires a scorer_kind")
        if self.kind == "margin_power" and self.schedule is None:
            raise SamplingError("margin_power requires a schedule")

    @property
    def name(self) -> str:
        if self.kind == "passive":
            return "passive"
        if self.kind == "margin_pure":
            return f"margin-{self.scorer_kind}"
        if self.kind == "margin_naive_adaptive":
            return "margin-naive_adaptive"
        return "margin-power"
