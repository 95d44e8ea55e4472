"""Data model, SVMlight ingestion, splitting, synthetic corpora, and label events."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .seeding import derive_seed, rng_for, uniform_for


class DataError(Exception):
    """Invalid data or invalid data operation."""


class ParseError(DataError):
    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Example:
    """One classification instance with a sparse feature vector.

    Feature indices are 1-based and strictly increasing, as in the
    SVMlight format. ``label`` is a class index in 0..K-1.
    """

    id: int
    features: tuple[tuple[int, float], ...]
    label: int
    domain: str | None = None

    def __post_init__(self):
        idxs = [i for i, _ in self.features]
        if any(b <= a for a, b in zip(idxs, idxs[1:])):
            raise DataError(f"example {self.id}: feature indices not strictly increasing")
        if idxs and idxs[0] < 1:
            raise DataError(f"example {self.id}: feature indices must be >= 1")


@dataclass(frozen=True)
class TokenSentence:
    """Token sequence with per-token binary break labels and a domain tag."""

    id: int
    tokens: tuple[int, ...]
    labels: tuple[int, ...]
    domain: str

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise DataError(f"sentence {self.id}: empty token sequence")
        if len(self.labels) != len(self.tokens):
            raise DataError(f"sentence {self.id}: labels/tokens length mismatch")
        if any(l not in (0, 1) for l in self.labels):
            raise DataError(f"sentence {self.id}: labels must be binary")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Dataset:
    """A collection of Examples with shared label and feature spaces."""

    examples: tuple[Example, ...]
    n_classes: int
    n_features: int
    native_labels: tuple[float, ...]  # sorted native label values, index = class

    def __len__(self) -> int:
        return len(self.examples)


@dataclass(frozen=True)
class LabeledEntry:
    """One labeled item with its acquisition history."""

    item: Example | TokenSentence
    acquisition_round: int
    revision_generation: int = 0


@dataclass(frozen=True)
class LabeledSet:
    """Ordered labeled entries; acquisition rounds non-decreasing."""

    entries: tuple[LabeledEntry, ...]
    generation: int = 0

    def __post_init__(self):
        rounds = [e.acquisition_round for e in self.entries]
        if any(b < a for a, b in zip(rounds, rounds[1:])):
            raise DataError("acquisition rounds must be non-decreasing in insertion order")
        if any(e.revision_generation > self.generation for e in self.entries):
            raise DataError("entry revision_generation exceeds set generation")

    def __len__(self) -> int:
        return len(self.entries)

    def items(self) -> list:
        return [e.item for e in self.entries]


@dataclass(frozen=True)
class RevisionRule:
    """Selects a fraction of labeled items and flips some of their labels.

    The default flip predicate is a deterministic involution: applying the
    same rule with the same seed twice restores the original labels.
    ``flip_predicate(item, seed)`` may override which label positions flip
    for a selected item; it must return a set of positions (for sentences)
    or True/False (for single-label examples).
    """

    target_fraction: float
    flip_predicate: Callable | None = None

    def __post_init__(self):
        if not 0.0 <= self.target_fraction <= 1.0:
            raise DataError("target_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class RevisionStats:
    sentences_touched_fraction: float
    labels_flipped_count: int


@dataclass(frozen=True)
class ExpirationPolicy:
    """Either a hard age limit or a per-age retention probability schedule.

    ``hard_limit`` of None means no hard limit. ``retention[a]`` is the
    probability of keeping an entry of age a (last element reused for
    older entries).
    """

    hard_limit: int | None = None
    retention: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.hard_limit is not None and self.hard_limit < 0:
            raise DataError("hard_limit must be non-negative")
        if self.retention is not None:
            if len(self.retention) == 0:
                raise DataError("retention schedule must be nonempty")
            if any(not 0.0 <= p <= 1.0 for p in self.retention):
                raise DataError("retention probabilities must lie in [0, 1]")


# ---------------------------------------------------------------------------
# SVMlight parsing / serialization


def parse_svmlight(source) -> Dataset:
    """Parse SVMlight/libsvm text into a Dataset.

    ``source`` may be a string, an open text file, or an iterable of lines.
    Native labels are remapped to 0..K-1 by sorted native value; example
    ids are 1-based line numbers.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = source

    raw: list[tuple[int, float, tuple[tuple[int, float], ...]]] = []
    max_index = 0
    n_lines = 0
    for lineno, line in enumerate(lines, start=1):
        n_lines = lineno
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            native = float(fields[0])
        except ValueError:
            raise ParseError(f"bad label {fields[0]!r}", lineno)
        feats = []
        prev = 0
        for tok in fields[1:]:
            try:
                idx_s, val_s = tok.split(":", 1)
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(f"bad feature token {tok!r}", lineno)
            if idx < 1:
                raise ParseError(f"feature index {idx} must be >= 1", lineno)
            if idx <= prev:
                raise ParseError(f"feature indices not strictly increasing at {idx}", lineno)
            prev = idx
            feats.append((idx, val))
        max_index = max(max_index, prev)
        raw.append((lineno, native, tuple(feats)))

    if not raw:
        raise ParseError("empty input" if n_lines == 0 else "no examples in input")

    natives = sorted({native for _, native, _ in raw})
    remap = {v: i for i, v in enumerate(natives)}
    examples = tuple(
        Example(id=lineno, features=feats, label=remap[native])
        for lineno, native, feats in raw
    )
    return Dataset(
        examples=examples,
        n_classes=len(natives),
        n_features=max_index,
        native_labels=tuple(natives),
    )


def _fmt_value(v: float) -> str:
    return repr(int(v)) if float(v).is_integer() else repr(v)


def serialize_svmlight(dataset: Dataset) -> str:
    """Inverse of parse_svmlight (labels written as their native values)."""
    lines = []
    for ex in dataset.examples:
        native = dataset.native_labels[ex.label]
        parts = [_fmt_value(native)]
        parts += [f"{i}:{_fmt_value(v)}" for i, v in ex.features]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def to_dense(examples: Sequence[Example], n_features: int) -> tuple[np.ndarray, np.ndarray]:
    """Densify sparse examples into (X, y) arrays. Indices shift to 0-based."""
    X = np.zeros((len(examples), n_features))
    y = np.empty(len(examples), dtype=np.int64)
    for row, ex in enumerate(examples):
        for idx, val in ex.features:
            if idx > n_features:
                raise DataError(f"example {ex.id}: index {idx} exceeds n_features={n_features}")
            X[row, idx - 1] = val
        y[row] = ex.label
    return X, y


# ---------------------------------------------------------------------------
# splitting


def split_pool_holdout(dataset: Dataset, holdout_size: int, seed) -> tuple[Dataset, Dataset]:
    """Uniform random partition into (pool, holdout), deterministic given seed."""
    n = len(dataset)
    if not 0 < holdout_size < n:
        raise DataError(f"holdout_size {holdout_size} out of range for dataset of {n}")
    rng = rng_for(seed, "split_pool_holdout")
    hold_idx = rng.choice(n, size=holdout_size, replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[hold_idx] = True
    pool = tuple(ex for ex, m in zip(dataset.examples, mask) if not m)
    hold = tuple(ex for ex, m in zip(dataset.examples, mask) if m)
    make = lambda exs: replace(dataset, examples=exs)
    return make(pool), make(hold)


# ---------------------------------------------------------------------------
# synthetic segmentation corpus

# token categories by residue mod 7: 0 -> strong delimiter, 1/2 -> compound
_STRONG_RESIDUE = (0,)
_COMPOUND_RESIDUES = (1, 2)


def _is_strong(token: int) -> bool:
    return token % 7 in _STRONG_RESIDUE


def _is_compound(token: int) -> bool:
    return token % 7 in _COMPOUND_RESIDUES


def segment_labels(tokens: Sequence[int], rule_version: int) -> tuple[int, ...]:
    """Deterministic break labels for a token sequence.

    v1 breaks after strong delimiter tokens; v2 additionally breaks inside
    runs of adjacent compound tokens (the guideline-revision analogue).
    """
    if rule_version not in (1, 2):
        raise DataError(f"unknown rule_version {rule_version}")
    labels = []
    n = len(tokens)
    for i, t in enumerate(tokens):
        lab = 1 if _is_strong(t) else 0
        if rule_version == 2 and lab == 0:
            if _is_compound(t) and i + 1 < n and _is_compound(tokens[i + 1]):
                lab = 1
        labels.append(lab)
    return tuple(labels)


@dataclass(frozen=True)
class CorpusConfig:
    """Generator settings for the synthetic two-domain segmentation corpus.

    Domain A and B sentences get different length distributions
    (1 + Poisson(mean - 1)) so batch-composition diagnostics have signal.
    """

    n_sentences: int
    domain_mix: float = 0.5  # fraction of domain A
    length_mean_a: float = 6.0
    length_mean_b: float = 12.0
    vocab_size: int = 49
    rule_version: int = 1

    def __post_init__(self):
        if self.n_sentences <= 0:
            raise DataError("n_sentences must be positive")
        if not 0.0 < self.domain_mix < 1.0:
            raise DataError("domain_mix must lie in (0, 1)")
        if self.vocab_size < 7:
            raise DataError("vocab_size must be >= 7 to cover all token categories")
        if min(self.length_mean_a, self.length_mean_b) < 1.0:
            raise DataError("length means must be >= 1")


def generate_segmentation_corpus(config: CorpusConfig, seed) -> tuple[TokenSentence, ...]:
    """Reproducible corpus; tokens depend only on (config sizes, seed), labels
    only on rule_version, so rule v1 vs v2 relabels identical token streams."""
    sentences = []
    for i in range(config.n_sentences):
        rng = rng_for(seed, "sentence", i)
        domain = "A" if rng.random() < config.domain_mix else "B"
        mean = config.length_mean_a if domain == "A" else config.length_mean_b
        length = 1 + int(rng.poisson(mean - 1.0))
        tokens = tuple(int(t) for t in rng.integers(0, config.vocab_size, size=length))
        sentences.append(
            TokenSentence(
                id=i,
                tokens=tokens,
                labels=segment_labels(tokens, config.rule_version),
                domain=domain,
            )
        )
    return tuple(sentences)


# ---------------------------------------------------------------------------
# covtype-scale synthetic stand-in (linear + radial signal)


@dataclass(frozen=True)
class SyntheticBinaryConfig:
    """Settings for the covtype-scale linear+radial stand-in dataset."""

    n_examples: int
    n_features: int = 54
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_examples <= 0:
            raise DataError("n_examples must be positive")


def generate_linear_radial_dataset(
    n: int, n_features: int = 54, seed=0, noise: float = 0.05
) -> Dataset:
    """Binary dataset whose boundary has a linear part plus a radial part.

    A linear model captures only the linear component; an RBF-featurized
    model can also exploit the radial component (dims 11-15). The remaining
    dims are low-scale distractors so an RBF kernel is not drowned by the
    ambient dimensionality. Used as a local stand-in where a covtype-scale
    file is not available.
    """
    if n <= 0:
        raise DataError("n must be positive")
    if n_features < 16:
        raise DataError("n_features must be >= 16")
    rng = rng_for(seed, "linear_radial")
    X = rng.normal(size=(n, n_features))
    X[:, 15:] *= 0.3
    # low-SNR weights on the scaled dims keep the linear learning curve
    # rising well past a 1,000-example seed set
    w = np.zeros(n_features)
    w[:10] = np.linspace(1.0, 0.4, 10)
    w[15:] = 1.8
    lin = X @ w
    rad = (X[:, 10:15] ** 2).sum(axis=1) - 5.0
    score = lin + 1.0 * rad
    score = score + rng.normal(scale=noise * np.std(score), size=n)
    y = (score > 0).astype(int)
    examples = []
    for i in range(n):
        feats = tuple((j + 1, float(X[i, j])) for j in range(n_features) if X[i, j] != 0.0)
        examples.append(Example(id=i + 1, features=feats, label=int(y[i])))
    return Dataset(
        examples=tuple(examples),
        n_classes=2,
        n_features=n_features,
        native_labels=(0.0, 1.0),
    )


# ---------------------------------------------------------------------------
# label revision


def _default_flip_positions(item, seed) -> list[int]:
    """Deterministic nonempty position set for a selected item (involution)."""
    if isinstance(item, TokenSentence):
        pos = [p for p in range(len(item)) if derive_seed(seed, "flip", item.id, p) % 2 == 0]
        return pos or [0]
    return [0]


def _flip_item(item, positions: Sequence[int], n_classes: int = 2):
    if isinstance(item, TokenSentence):
        labels = list(item.labels)
        for p in positions:
            labels[p] = 1 - labels[p]
        return replace(item, labels=tuple(labels)), len(positions)
    if positions:
        # class involution: label -> K-1-label
        return replace(item, label=(n_classes - 1) - item.label), 1
    return item, 0


def apply_label_revision(
    labeled_set: LabeledSet, rule: RevisionRule, seed
) -> tuple[LabeledSet, RevisionStats]:
    """Flip labels on a deterministic ~target_fraction subset of entries.

    Selection is by quota on a per-item hash, so the touched fraction is
    exact up to rounding and the same (rule, seed) always touches the same
    entries. The default flip is an involution: applying the revision twice
    restores the original labels.
    """
    if len(labeled_set) == 0:
        raise DataError("cannot revise an empty labeled set")
    n = len(labeled_set)
    n_touch = round(rule.target_fraction * n)
    order = sorted(range(n), key=lambda i: derive_seed(seed, "revise", labeled_set.entries[i].item.id))
    selected = set(order[:n_touch])

    new_gen = labeled_set.generation + 1
    flipped_total = 0
    touched = 0
    entries = []
    for i, entry in enumerate(labeled_set.entries):
        if i in selected:
            item = entry.item
            if rule.flip_predicate is not None:
                decision = rule.flip_predicate(item, seed)
                if isinstance(decision, bool):
                    positions = [0] if decision else []
                else:
                    positions = sorted(decision)
            else:
                positions = _default_flip_positions(item, seed)
            new_item, n_flips = _flip_item(item, positions)
            if n_flips > 0:
                touched += 1
                flipped_total += n_flips
                entry = replace(entry, item=new_item, revision_generation=new_gen)
        entries.append(entry)
    revised = LabeledSet(entries=tuple(entries), generation=new_gen)
    stats = RevisionStats(
        sentences_touched_fraction=touched / n, labels_flipped_count=flipped_total
    )
    return revised, stats


# ---------------------------------------------------------------------------
# expiration


def apply_expiration_limit(
    labeled_set: LabeledSet, current_round: int, policy: ExpirationPolicy, seed
) -> LabeledSet:
    """Drop entries per the expiration policy; age = current_round - acquisition.

    The hard limit is inclusive: entries with age == limit are kept. The
    gradual policy retains each entry independently with its scheduled
    retention probability, keyed by (seed, round, entry id).
    """
    for entry in labeled_set.entries:
        if entry.acquisition_round > current_round:
            raise DataError("current_round precedes an entry's acquisition round")
    kept = []
    for entry in labeled_set.entries:
        age = current_round - entry.acquisition_round
        if policy.hard_limit is not None and age > policy.hard_limit:
            continue
        if policy.retention is not None:
            p = policy.retention[min(age, len(policy.retention) - 1)]
            if uniform_for(seed, "retain", current_round, entry.item.id) >= p:
                continue
        kept.append(entry)
    return replace(labeled_set, entries=tuple(kept))


# ---------------------------------------------------------------------------
# JSONL snapshots


def _item_to_obj(item) -> dict:
    if isinstance(item, TokenSentence):
        return {
            "type": "sentence",
            "id": item.id,
            "tokens": list(item.tokens),
            "labels": list(item.labels),
            "domain": item.domain,
        }
    obj = {
        "type": "example",
        "id": item.id,
        "features": [[i, v] for i, v in item.features],
        "label": item.label,
    }
    if item.domain is not None:
        obj["domain"] = item.domain
    return obj


def _item_from_obj(obj: dict):
    if obj["type"] == "sentence":
        return TokenSentence(
            id=obj["id"],
            tokens=tuple(obj["tokens"]),
            labels=tuple(obj["labels"]),
            domain=obj["domain"],
        )
    return Example(
        id=obj["id"],
        features=tuple((int(i), float(v)) for i, v in obj["features"]),
        label=obj["label"],
        domain=obj.get("domain"),
    )


def write_corpus_jsonl(items: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(_item_to_obj(item)) + "\n")


def read_corpus_jsonl(path) -> tuple:
    items = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                items.append(_item_from_obj(json.loads(line)))
    return tuple(items)


def write_labeled_set_jsonl(labeled_set: LabeledSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"type": "meta", "generation": labeled_set.generation}) + "\n")
        for entry in labeled_set.entries:
            obj = _item_to_obj(entry.item)
            obj["acquisition_round"] = entry.acquisition_round
            obj["revision_generation"] = entry.revision_generation
            f.write(json.dumps(obj) + "\n")


def read_labeled_set_jsonl(path) -> LabeledSet:
    entries = []
    generation = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("type") == "meta":
                generation = obj["generation"]
                continue
            entries.append(
                LabeledEntry(
                    item=_item_from_obj(obj),
                    acquisition_round=obj["acquisition_round"],
                    revision_generation=obj["revision_generation"],
                )
            )
    return LabeledSet(entries=tuple(entries), generation=generation)
