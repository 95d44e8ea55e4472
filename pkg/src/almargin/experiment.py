"""Round-based active-learning loop with an event schedule (model switch,
label revision, expiration) and deterministic multi-trial orchestration."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import dataset as ds
from . import metrics, models, sampling
from .seeding import derive_seed, rng_for

_MODEL_KINDS = ("logistic", "kernel_logistic", "token_tagger")
_EVENT_KINDS = ("model_switch", "label_revision", "expiration_policy_change")


class ExperimentError(Exception):
    pass


@dataclass(frozen=True)
class Event:
    round: int
    kind: str
    to: str | None = None  # model_switch
    reseed: bool = False  # model_switch: fold acquired labels into the seed
    rule: ds.RevisionRule | None = None  # label_revision
    policy: ds.ExpirationPolicy | None = None  # expiration_policy_change

    def __post_init__(self):
        if self.round < 0:
            raise ExperimentError("event round must be non-negative")
        if self.kind not in _EVENT_KINDS:
            raise ExperimentError(f"unknown event kind {self.kind!r}")
        if self.kind == "model_switch" and self.to not in _MODEL_KINDS:
            raise ExperimentError(f"model_switch target {self.to!r} unknown")
        if self.kind == "label_revision" and self.rule is None:
            raise ExperimentError("label_revision requires a rule")
        if self.kind == "expiration_policy_change" and self.policy is None:
            raise ExperimentError("expiration_policy_change requires a policy")


@dataclass(frozen=True)
class EventSchedule:
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        switch_rounds = [e.round for e in self.events if e.kind == "model_switch"]
        if len(switch_rounds) != len(set(switch_rounds)):
            raise ExperimentError("at most one model_switch per round")

    def at(self, round_index: int) -> list[Event]:
        return [e for e in self.events if e.round == round_index]


@dataclass(frozen=True)
class ExperimentConfig:
    rounds: int
    batch_size: int
    seed_set_size: int
    holdout_size: int
    schemes: tuple[sampling.SchemeConfig, ...]
    dataset_path: str | None = None
    corpus: ds.CorpusConfig | None = None
    synthetic_binary: ds.SyntheticBinaryConfig | None = None
    dataset_subsample: int | None = None  # cap total dataset size before splitting
    subset_size: int | None = None
    events: EventSchedule = field(default_factory=EventSchedule)
    trials: int = 1
    base_seed: int = 0
    best_of_k: int = 1
    metric: str = "accuracy"
    initial_model: str = "logistic"
    train: models.TrainConfig = field(default_factory=models.TrainConfig)
    # RFF feature scale is sqrt(2/D), so SGD on transformed features wants a
    # much larger step size than on raw features
    train_kernel: models.TrainConfig | None = None
    rff_dim: int = 512
    rff_bandwidth: float = 0.02

    def __post_init__(self):
        if self.rounds < 1 or self.trials < 1 or self.batch_size < 1:
            raise ExperimentError("rounds, trials and batch_size must be >= 1")
        if self.best_of_k < 1:
            raise ExperimentError("best_of_k must be >= 1")
        sources = [self.dataset_path, self.corpus, self.synthetic_binary]
        if sum(s is not None for s in sources) != 1:
            raise ExperimentError(
                "exactly one of dataset_path / corpus / synthetic_binary must be set"
            )
        if self.metric not in ("accuracy", "f1"):
            raise ExperimentError(f"unknown metric {self.metric!r}")
        if self.initial_model not in _MODEL_KINDS:
            raise ExperimentError(f"unknown initial_model {self.initial_model!r}")
        if len(self.schemes) == 0:
            raise ExperimentError("at least one scheme required")
        names = [s.name for s in self.schemes]
        if len(names) != len(set(names)):
            raise ExperimentError("scheme names must be unique")


@dataclass(frozen=True)
class ExperimentData:
    """Loaded data plus a dense cache for the example track."""

    dataset: ds.Dataset | None = None
    sentences: tuple[ds.TokenSentence, ...] | None = None
    X: np.ndarray | None = None  # (n, d), row i for dataset.examples[i]
    row_of: dict | None = None  # example id -> row

    @property
    def is_sentence_track(self) -> bool:
        return self.sentences is not None


def load_experiment_data(config: ExperimentConfig) -> ExperimentData:
    if config.corpus is not None:
        corpus = ds.generate_segmentation_corpus(
            config.corpus, seed=(config.base_seed, "corpus")
        )
        return ExperimentData(sentences=corpus)
    if config.synthetic_binary is not None:
        sb = config.synthetic_binary
        data = ds.generate_linear_radial_dataset(
            sb.n_examples, n_features=sb.n_features, seed=sb.seed, noise=sb.noise
        )
    else:
        with open(config.dataset_path, encoding="utf-8") as f:
            data = ds.parse_svmlight(f)
    if config.dataset_subsample is not None and config.dataset_subsample < len(data):
        rng = rng_for(config.base_seed, "dataset_subsample")
        idx = np.sort(rng.choice(len(data), size=config.dataset_subsample, replace=False))
        data = replace(data, examples=tuple(data.examples[i] for i in idx))
    X, _ = ds.to_dense(data.examples, data.n_features)
    row_of = {ex.id: i for i, ex in enumerate(data.examples)}
    return ExperimentData(dataset=data, X=X, row_of=row_of)


# ---------------------------------------------------------------------------
# per-trial results


@dataclass(frozen=True)
class BatchRecord:
    round: int
    ids: tuple[int, ...]
    raw_margins: tuple[float, ...] | None
    penalized_margins: tuple[float, ...] | None


@dataclass(frozen=True)
class SchemeResult:
    scheme: str
    curve: metrics.LearningCurve
    batches: tuple[BatchRecord, ...]


@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    schemes: tuple[SchemeResult, ...]
    events: tuple[dict, ...]


# ---------------------------------------------------------------------------
# trial internals


class _SchemeState:
    def __init__(self, scheme, entries, pool_items, eval_kind):
        self.scheme = scheme
        self.entries: list[ds.LabeledEntry] = list(entries)
        self.generation = 0
        self.pool: dict[int, object] = {it.id: it for it in pool_items}
        self.eval_kind = eval_kind
        self.policy: ds.ExpirationPolicy | None = None
        self.models: dict[str, object] = {}
        self.points: list[tuple[int, float]] = []
        self.batches: list[BatchRecord] = []

    def needed_kinds(self) -> list[str]:
        kinds = [self.eval_kind]
        if self.scheme.kind == "margin_pure" and self.scheme.scorer_kind not in kinds:
            kinds.append(self.scheme.scorer_kind)
        if self.scheme.kind == "margin_power":
            for k in ("logistic", "kernel_logistic"):
                if k not in kinds:
                    kinds.append(k)
        return kinds


class _Trial:
    def __init__(self, config: ExperimentConfig, data: ExperimentData, trial_index: int):
        self.config = config
        self.data = data
        self.trial = trial_index
        self.event_log: list[dict] = []
        if data.is_sentence_track:
            self.rff = None
            self.Z = None
        else:
            self.rff = models.RFFParams.make(
                input_dim=data.dataset.n_features,
                n_features=config.rff_dim,
                bandwidth=config.rff_bandwidth,
                seed=(config.base_seed, trial_index, "rff"),
            )
            # whole-dataset RFF cache: turns every kernel train/score/eval
            # into a row gather plus one small matmul
            self.Z = models.rff_transform(data.X, self.rff)

    # -- seeds ------------------------------------------------------------
    # Scheme names are deliberately excluded from seed derivations so that
    # schemes whose labeled sets coincide train identical models and draw
    # identical candidate subsets (pre-switch coincidence).

    def _seed(self, *parts):
        return (self.config.base_seed, self.trial, *parts)

    # -- training ---------------------------------------------------------

    def _entry_rows(self, entries) -> tuple[np.ndarray, np.ndarray]:
        rows = np.array([self.data.row_of[e.item.id] for e in entries])
        y = np.array([e.item.label for e in entries])
        return rows, y

    def _proba_rows(self, model, rows: np.ndarray) -> np.ndarray:
        """Class probabilities for dataset rows, via the RFF cache for
        kernel models."""
        if isinstance(model, models.KernelLogisticModel):
            w = model.weights
            p1 = models._sigmoid(self.Z[rows] @ w[:-1] + w[-1])
            return np.column_stack([1.0 - p1, p1])
        return model.proba_dense(self.data.X[rows])

    def _fit(self, kind: str, entries, seed_val: int):
        base_cfg = self.config.train
        if kind == "kernel_logistic" and self.config.train_kernel is not None:
            base_cfg = self.config.train_kernel
        cfg = replace(base_cfg, seed=seed_val)
        if kind == "token_tagger":
            return models.train_token_tagger([e.item for e in entries], cfg)
        rows, y = self._entry_rows(entries)
        if len(np.unique(y)) < 2:
            raise ExperimentError("labeled set collapsed to a single class")
        if kind == "logistic":
            w, loss = models._sgd_fit(self.data.X[rows], y.astype(float), cfg)
            return models.LogisticModel(
                weights=w,
                n_features=self.data.dataset.n_features,
                final_loss=loss,
                epochs_run=cfg.epochs,
            )
        if kind == "kernel_logistic":
            w, loss = models._sgd_fit(self.Z[rows], y.astype(float), cfg)
            return models.KernelLogisticModel(
                weights=w, rff=self.rff, final_loss=loss, epochs_run=cfg.epochs
            )
        raise ExperimentError(f"unknown model kind {kind!r}")

    def _train(self, kind: str, entries, round_tag):
        base = derive_seed(*self._seed(round_tag, "train", kind))
        if self.config.best_of_k <= 1:
            return self._fit(kind, entries, base)
        # best-of-k: carve a 10% validation slice for selection only
        rng = rng_for(*self._seed(round_tag, "val_split"))
        n = len(entries)
        n_val = max(1, n // 10)
        val_idx = set(int(i) for i in rng.choice(n, size=n_val, replace=False))
        train_entries = [e for i, e in enumerate(entries) if i not in val_idx]
        val_items = [entries[i].item for i in sorted(val_idx)]
        return models.best_of_k_train(
            lambda s: self._fit(kind, train_entries, s),
            self.config.best_of_k,
            val_items,
            lambda m, v: metrics.evaluate(m, v, self.config.metric),
            base_seed=base,
        )

    def _retrain(self, state: _SchemeState, round_tag):
        state.models = {
            kind: self._train(kind, state.entries, round_tag)
            for kind in state.needed_kinds()
        }

    # -- scoring ----------------------------------------------------------

    def _margins_for(self, state: _SchemeState, items, r: int) -> np.ndarray:
        scheme = state.scheme
        if self.data.is_sentence_track:
            model = state.models[self._scorer_kind(state)]
            raw = np.array(
                [sampling.sentence_margin(models.predict_proba(model, s)) for s in items]
            )
            return raw
        rows = np.array([self.data.row_of[it.id] for it in items])
        if scheme.kind == "margin_power":
            t = len(state.entries)
            w = sampling.power_weight(t, scheme.schedule)
            probs = (
                w * self._proba_rows(state.models["logistic"], rows)
                + (1.0 - w) * self._proba_rows(state.models["kernel_logistic"], rows)
            )
        else:
            probs = self._proba_rows(state.models[self._scorer_kind(state)], rows)
        return np.abs(probs[:, 0] - probs[:, 1])

    def _scorer_kind(self, state: _SchemeState) -> str:
        if state.scheme.kind == "margin_pure":
            return state.scheme.scorer_kind
        # naive_adaptive (and the sentence track's power-free default):
        # the current evaluation model is the scorer
        return state.eval_kind

    def _select(self, state: _SchemeState, r: int) -> BatchRecord:
        cfg = self.config
        pool_items = list(state.pool.values())
        if len(pool_items) < cfg.batch_size:
            raise ExperimentError(
                f"trial {self.trial} scheme {state.scheme.name}: pool exhausted at round {r}"
            )
        if state.scheme.kind == "passive":
            ids = sampling.passive_select(pool_items, cfg.batch_size, self._seed(r, "select"))
            return BatchRecord(round=r, ids=tuple(ids), raw_margins=None, penalized_margins=None)

        score_cache: dict[int, tuple[float, float]] = {}

        def scorer(items):
            raw = self._margins_for(state, items, r)
            if self.data.is_sentence_track and state.scheme.length_penalty != 0.0:
                pen = np.array(
                    [
                        sampling.penalized_margin(m, len(it), state.scheme.length_penalty)
                        for m, it in zip(raw, items)
                    ]
                )
            else:
                pen = raw
            for it, m, p in zip(items, raw, pen):
                score_cache[it.id] = (float(m), float(p))
            return pen

        ids = sampling.select_batch(
            pool_items, scorer, cfg.batch_size, cfg.subset_size, self._seed(r, "select")
        )
        return BatchRecord(
            round=r,
            ids=tuple(ids),
            raw_margins=tuple(score_cache[i][0] for i in ids),
            penalized_margins=tuple(score_cache[i][1] for i in ids),
        )

    # -- evaluation -------------------------------------------------------

    def _evaluate(self, state: _SchemeState, holdout_items, hold_rows, y_hold) -> float:
        model = state.models[state.eval_kind]
        if self.data.is_sentence_track:
            return metrics.evaluate(model, holdout_items, self.config.metric)
        probs = self._proba_rows(model, hold_rows)
        return metrics.metric_from_proba(probs, y_hold, self.config.metric)

    # -- events -----------------------------------------------------------

    def _apply_events(self, state: _SchemeState, r: int) -> bool:
        """Apply all events due at round r in listed order; returns whether a
        pre-selection retrain is needed."""
        changed = False
        for ev in self.config.events.at(r):
            log = {"trial": self.trial, "scheme": state.scheme.name, "round": r, "kind": ev.kind}
            if ev.kind == "model_switch":
                if ev.to == state.eval_kind:
                    log["detail"] = f"no-op (already {ev.to})"
                else:
                    log["detail"] = f"{state.eval_kind} -> {ev.to}"
                    state.eval_kind = ev.to
                    changed = True
                if ev.reseed:
                    # fold everything acquired so far into the common seed
                    state.entries = [
                        replace(e, acquisition_round=-1) for e in state.entries
                    ]
                    log["detail"] += "; reseeded"
            elif ev.kind == "label_revision":
                labeled = ds.LabeledSet(entries=tuple(state.entries), generation=state.generation)
                revised, stats = ds.apply_label_revision(
                    labeled, ev.rule, self._seed(r, "revision")
                )
                state.entries = list(revised.entries)
                state.generation = revised.generation
                log["detail"] = (
                    f"touched_fraction={stats.sentences_touched_fraction:.4f}"
                    f" labels_flipped={stats.labels_flipped_count}"
                )
                log["touched_fraction"] = stats.sentences_touched_fraction
                log["labels_flipped"] = stats.labels_flipped_count
                changed = True
            elif ev.kind == "expiration_policy_change":
                state.policy = ev.policy
                log["detail"] = "policy set"
            self.event_log.append(log)
        if state.policy is not None:
            # the common seed (acquisition round -1) is exempt from expiration
            seed_entries = [e for e in state.entries if e.acquisition_round < 0]
            acquired = [e for e in state.entries if e.acquisition_round >= 0]
            pruned = ds.apply_expiration_limit(
                ds.LabeledSet(entries=tuple(acquired), generation=state.generation),
                r,
                state.policy,
                self._seed("expire"),
            )
            if len(pruned.entries) != len(acquired):
                changed = True
            state.entries = seed_entries + list(pruned.entries)
        return changed

    # -- main loop --------------------------------------------------------

    def run(self) -> TrialResult:
        cfg = self.config
        if self.data.is_sentence_track:
            all_items = list(self.data.sentences)
            rng = rng_for(*self._seed("split"))
            hold_idx = set(
                int(i) for i in rng.choice(len(all_items), size=cfg.holdout_size, replace=False)
            )
            holdout_items = [it for i, it in enumerate(all_items) if i in hold_idx]
            pool_items = [it for i, it in enumerate(all_items) if i not in hold_idx]
            hold_rows = y_hold = None
        else:
            pool_ds, hold_ds = ds.split_pool_holdout(
                self.data.dataset, cfg.holdout_size, self._seed("split")
            )
            pool_items = list(pool_ds.examples)
            holdout_items = list(hold_ds.examples)
            hold_rows = np.array([self.data.row_of[ex.id] for ex in holdout_items])
            y_hold = np.array([ex.label for ex in holdout_items])

        if cfg.seed_set_size + cfg.batch_size > len(pool_items):
            raise ExperimentError("pool too small for seed set plus one batch")
        rng = rng_for(*self._seed("seed_set"))
        pool_items = sorted(pool_items, key=lambda it: it.id)
        seed_idx = set(
            int(i) for i in rng.choice(len(pool_items), size=cfg.seed_set_size, replace=False)
        )
        seed_entries = [
            ds.LabeledEntry(item=pool_items[i], acquisition_round=-1)
            for i in sorted(seed_idx)
        ]
        remaining = [it for i, it in enumerate(pool_items) if i not in seed_idx]

        states = [
            _SchemeState(scheme, seed_entries, remaining, cfg.initial_model)
            for scheme in cfg.schemes
        ]
        for state in states:
            self._retrain(state, -1)
            state.points.append(
                (len(state.entries), self._evaluate(state, holdout_items, hold_rows, y_hold))
            )
            for r in range(cfg.rounds):
                if self._apply_events(state, r):
                    self._retrain(state, ("event", r))
                batch = self._select(state, r)
                for bid in batch.ids:
                    item = state.pool.pop(bid)
                    state.entries.append(
                        ds.LabeledEntry(
                            item=item,
                            acquisition_round=r,
                            revision_generation=state.generation,
                        )
                    )
                state.batches.append(batch)
                self._retrain(state, r)
                state.points.append(
                    (len(state.entries), self._evaluate(state, holdout_items, hold_rows, y_hold))
                )

        return TrialResult(
            trial_index=self.trial,
            schemes=tuple(
                SchemeResult(
                    scheme=s.scheme.name,
                    curve=metrics.LearningCurve(points=tuple(s.points)),
                    batches=tuple(s.batches),
                )
                for s in states
            ),
            events=tuple(self.event_log),
        )


def run_trial(config: ExperimentConfig, trial_index: int, data: ExperimentData | None = None) -> TrialResult:
    """One seeded trial: a pure function of (config, trial_index)."""
    if data is None:
        data = load_experiment_data(config)
    return _Trial(config, data, trial_index).run()


# ---------------------------------------------------------------------------
# multi-trial orchestration

_WORKER_STATE: dict = {}


def _worker_init(config: ExperimentConfig) -> None:
    _WORKER_STATE["config"] = config
    _WORKER_STATE["data"] = load_experiment_data(config)


def _worker_run(trial_index: int) -> TrialResult:
    return run_trial(_WORKER_STATE["config"], trial_index, _WORKER_STATE["data"])


def run_experiment(
    config: ExperimentConfig, jobs: int = 1, data: ExperimentData | None = None
) -> list[TrialResult]:
    """Run all trials; results are identical for any jobs value."""
    if jobs <= 1:
        if data is None:
            data = load_experiment_data(config)
        return [run_trial(config, t, data) for t in range(config.trials)]
    with ProcessPoolExecutor(
        max_workers=min(jobs, config.trials),
        initializer=_worker_init,
        initargs=(config,),
    ) as pool:
        return list(pool.map(_worker_run, range(config.trials)))
