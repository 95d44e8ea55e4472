"""Evaluation metrics, curve aggregation with confidence bands, sampling
gains, discounted comparison, half-sampling variance, and batch diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Example, LabeledSet, TokenSentence
from .models import TokenTaggerModel, predict_proba, predict_proba_batch
from .seeding import rng_for


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class LearningCurve:
    """Ordered (training_size, metric_value) points."""

    points: tuple[tuple[int, float], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.points)

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(v for _, v in self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class GainPart:
    gain: float
    active_size: int
    reference_size: int


@dataclass(frozen=True)
class GainReport:
    last_vs_max: GainPart | None
    first_vs_final: GainPart | None


@dataclass(frozen=True)
class AggregateCurve:
    sizes: tuple[int, ...]
    mean: tuple[float, ...]
    ci_lo: tuple[float, ...] | None
    ci_hi: tuple[float, ...] | None


# ---------------------------------------------------------------------------
# point metrics


def metric_from_proba(probs: np.ndarray, y_true: np.ndarray, metric: str) -> float:
    """Accuracy or binary F1 (positive class 1) from an (n, 2) probability array."""
    pred = np.argmax(probs, axis=1)
    return metric_from_predictions(pred, y_true, metric)


def metric_from_predictions(pred: np.ndarray, y_true: np.ndarray, metric: str) -> float:
    if len(y_true) == 0:
        raise MetricsError("empty evaluation set")
    if metric == "accuracy":
        return float(np.mean(pred == y_true))
    if metric == "f1":
        tp = int(np.sum((pred == 1) & (y_true == 1)))
        fp = int(np.sum((pred == 1) & (y_true == 0)))
        fn = int(np.sum((pred == 0) & (y_true == 1)))
        if 2 * tp + fp + fn == 0:
            return 0.0
        return 2.0 * tp / (2 * tp + fp + fn)
    raise MetricsError(f"unknown metric {metric!r}")


def evaluate(model, holdout: Sequence, metric: str = "accuracy") -> float:
    """Evaluate a model on labeled items. For the token tagger the metric is
    computed over all tokens, with "break" (label 1) as the positive class."""
    if len(holdout) == 0:
        raise MetricsError("empty holdout")
    if isinstance(model, TokenTaggerModel):
        preds, trues = [], []
        for sent in holdout:
            probs = predict_proba(model, sent)
            preds.append(np.argmax(probs, axis=1))
            trues.append(np.asarray(sent.labels))
        return metric_from_predictions(np.concatenate(preds), np.concatenate(trues), metric)
    probs = predict_proba_batch(model, holdout)
    y = np.asarray([ex.label for ex in holdout])
    return metric_from_proba(probs, y, metric)


# ---------------------------------------------------------------------------
# curve aggregation


def aggregate_curves(curves: Sequence[LearningCurve]) -> AggregateCurve:
    """Pointwise mean with approximate 95% normal bands (mean +/- 1.96 se).

    All curves must share the same training-size grid; bands are absent for
    a single curve.
    """
    if len(curves) == 0:
        raise MetricsError("no curves to aggregate")
    grid = curves[0].sizes
    for c in curves[1:]:
        if c.sizes != grid:
            raise MetricsError("curves do not share a training_size grid")
    vals = np.array([c.values for c in curves])
    mean = vals.mean(axis=0)
    if len(curves) < 2:
        return AggregateCurve(sizes=grid, mean=tuple(mean), ci_lo=None, ci_hi=None)
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(curves))
    return AggregateCurve(
        sizes=grid,
        mean=tuple(float(m) for m in mean),
        ci_lo=tuple(float(m - 1.96 * s) for m, s in zip(mean, se)),
        ci_hi=tuple(float(m + 1.96 * s) for m, s in zip(mean, se)),
    )


# ---------------------------------------------------------------------------
# sampling gains


def last_vs_max_gain(active: LearningCurve, passive: LearningCurve) -> GainPart | None:
    """Label savings at the latest upward crossing of the passive maximum.

    Crossing strictly: equal values never count as surpassing. Returns None
    when the active curve never exceeds the passive max.
    """
    if len(active) == 0 or len(passive) == 0:
        raise MetricsError("curves must be nonempty")
    p_vals = passive.values
    m = max(p_vals)
    n_p = passive.sizes[p_vals.index(m)]
    a_vals = active.values
    crossing = None
    for i, v in enumerate(a_vals):
        if v > m and (i == 0 or a_vals[i - 1] <= m):
            crossing = i
    if crossing is None:
        return None
    n_a = active.sizes[crossing]
    return GainPart(gain=(n_p - n_a) / n_p, active_size=n_a, reference_size=n_p)


def first_vs_final_gain(active: LearningCurve, passive: LearningCurve) -> GainPart | None:
    """Label savings at the earliest point the active curve exceeds the final
    passive value. Returns None when never surpassed."""
    if len(active) == 0 or len(passive) == 0:
        raise MetricsError("curves must be nonempty")
    n_f = passive.sizes[-1]
    f = passive.values[-1]
    for size, v in active.points:
        if v > f:
            return GainPart(gain=(n_f - size) / n_f, active_size=size, reference_size=n_f)
    return None


def gain_report(active: LearningCurve, passive: LearningCurve) -> GainReport:
    return GainReport(
        last_vs_max=last_vs_max_gain(active, passive),
        first_vs_final=first_vs_final_gain(active, passive),
    )


def discounted_average(values: Sequence[float], rho: float) -> float:
    """Geometrically discounted mean over round indices; rho = 1 is the
    plain mean."""
    if len(values) == 0:
        raise MetricsError("empty curve")
    if not 0.0 < rho <= 1.0:
        raise MetricsError("rho must lie in (0, 1]")
    w = rho ** np.arange(len(values))
    return float(np.dot(w, np.asarray(values, dtype=float)) / w.sum())


# ---------------------------------------------------------------------------
# half-sampling variance


def _item_label(item) -> int:
    return item.label if isinstance(item, Example) else -1


def half_sampling_variance(
    train_procedure: Callable[[Sequence, int], object],
    labeled_items: Sequence,
    holdout: Sequence,
    n_pairs: int,
    seed,
    metric: str = "accuracy",
) -> float:
    """Performance variance over models trained on complementary halves.

    Each of n_pairs iterations splits the labeled items into two halves
    (stratified by class for Examples), trains on each half via
    ``train_procedure(items, seed)``, and evaluates on the holdout; the
    result is the ddof=1 sample variance of all 2 * n_pairs metric values.
    """
    if len(labeled_items) < 4:
        raise MetricsError("labeled set too small to half-sample")
    if n_pairs < 1:
        raise MetricsError("n_pairs must be >= 1")
    by_class: dict[int, list[int]] = {}
    for i, item in enumerate(labeled_items):
        by_class.setdefault(_item_label(item), []).append(i)
    if isinstance(labeled_items[0], Example):
        if len(by_class) < 2 or any(len(v) < 2 for v in by_class.values()):
            raise MetricsError("cannot halve with both classes present in each half")

    values = []
    for pair in range(n_pairs):
        rng = rng_for(seed, "half_sampling", pair)
        half_a: list[int] = []
        half_b: list[int] = []
        for cls in sorted(by_class):
            idx = list(by_class[cls])
            rng.shuffle(idx)
            half_a.extend(idx[: len(idx) // 2])
            half_b.extend(idx[len(idx) // 2 :])
        for half_no, half in enumerate((sorted(half_a), sorted(half_b))):
            items = [labeled_items[i] for i in half]
            model = train_procedure(items, rng_for(seed, "half_train", pair, half_no).integers(2**31))
            values.append(evaluate(model, holdout, metric))
    return float(np.var(values, ddof=1))


# ---------------------------------------------------------------------------
# batch composition


@dataclass(frozen=True)
class BatchComposition:
    domain_proportions: dict
    mean_token_length: dict  # domain -> mean length, absent domains omitted
    overall_mean_length: float | None


def batch_composition(batch: Sequence, domains: Sequence[str] = ("A", "B")) -> BatchComposition:
    """Exact domain proportions and mean token lengths of a batch.

    Domains absent from the batch get proportion 0 and no mean length.
    Items without a length (sparse Examples) contribute to proportions only.
    """
    if len(batch) == 0:
        raise MetricsError("empty batch")
    counts = {d: 0 for d in domains}
    lengths: dict[str, list[int]] = {d: [] for d in domains}
    all_lengths = []
    for item in batch:
        d = item.domain
        if d not in counts:
            counts[d] = 0
            lengths[d] = []
        counts[d] += 1
        if isinstance(item, TokenSentence):
            lengths[d].append(len(item))
            all_lengths.append(len(item))
    n = len(batch)
    return BatchComposition(
        domain_proportions={d: c / n for d, c in counts.items()},
        mean_token_length={d: float(np.mean(v)) for d, v in lengths.items() if v},
        overall_mean_length=float(np.mean(all_lengths)) if all_lengths else None,
    )
