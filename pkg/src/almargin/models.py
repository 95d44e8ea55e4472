"""Probabilistic learners: SGD logistic regression, RFF kernel logistic,
an averaged-perceptron token tagger, and best-of-k scorer selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import DataError, Example, TokenSentence, to_dense
from .seeding import derive_seed, rng_for


class ModelError(Exception):
    """Invalid training input or model/input mismatch."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 5
    l2: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ModelError("learning_rate, epochs and batch_size must be positive")
        if self.l2 < 0:
            raise ModelError("l2 must be non-negative")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss_and_grad(
    w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float
) -> tuple[float, np.ndarray]:
    """Mean L2-regularized log-loss and its gradient; bias is w[-1], unpenalized."""
    z = X @ w[:-1] + w[-1]
    p = _sigmoid(z)
    eps = 1e-12
    loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    loss += 0.5 * l2 * float(w[:-1] @ w[:-1])
    err = p - y
    grad = np.empty_like(w)
    grad[:-1] = X.T @ err / len(y) + l2 * w[:-1]
    grad[-1] = float(np.mean(err))
    return float(loss), grad


def _sgd_fit(X: np.ndarray, y: np.ndarray, config: TrainConfig) -> tuple[np.ndarray, float]:
    """Mini-batch SGD with inverse-time learning-rate decay per epoch."""
    n, d = X.shape
    rng = rng_for(config.seed, "sgd_init")
    w = rng.normal(scale=0.01, size=d + 1)
    final_loss = np.inf
    for epoch in range(config.epochs):
        lr = config.learning_rate / (1.0 + epoch)
        order = rng_for(config.seed, "sgd_shuffle", epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grad = logistic_loss_and_grad(w, X[idx], y[idx], config.l2)
            w -= lr * grad
        final_loss, _ = logistic_loss_and_grad(w, X, y, config.l2)
    return w, final_loss


@dataclass(frozen=True)
class LogisticModel:
    """Binary logistic regression; class-1 probability is sigmoid(w.x + b)."""

    weights: np.ndarray  # (d + 1,), bias last
    n_features: int
    final_loss: float = np.nan
    epochs_run: int = 0
    kind: str = "logistic"

    def proba_dense(self, X: np.ndarray) -> np.ndarray:
        p1 = _sigmoid(X @ self.weights[:-1] + self.weights[-1])
        return np.column_stack([1.0 - p1, p1])


@dataclass(frozen=True)
class RFFParams:
    """Frozen random-Fourier projection approximating an RBF kernel
    exp(-gamma * ||x - x'||^2)."""

    n_features: int  # D
    bandwidth: float  # gamma
    input_dim: int
    omega: np.ndarray  # (D, input_dim)
    phase: np.ndarray  # (D,)

    @classmethod
    def make(cls, input_dim: int, n_features: int, bandwidth: float, seed) -> "RFFParams":
        if n_features < 1 or input_dim < 1:
            raise ModelError("n_features and input_dim must be >= 1")
        if bandwidth <= 0:
            raise ModelError("bandwidth must be positive")
        rng = rng_for(seed, "rff")
        omega = rng.normal(scale=np.sqrt(2.0 * bandwidth), size=(n_features, input_dim))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
        return cls(
            n_features=n_features,
            bandwidth=bandwidth,
            input_dim=input_dim,
            omega=omega,
            phase=phase,
        )


def rff_transform(x, params: RFFParams) -> np.ndarray:
    """Map inputs to sqrt(2/D) * cos(omega.x + phase). Accepts a single
    Example, a dense vector, or a dense (n, d) matrix."""
    if isinstance(x, Example):
        X, _ = to_dense([x], params.input_dim)
        return rff_transform(X[0], params)
    X = np.asarray(x, dtype=float)
    z = X @ params.omega.T + params.phase
    return np.sqrt(2.0 / params.n_features) * np.cos(z)


@dataclass(frozen=True)
class KernelLogisticModel:
    """Logistic regression on random-Fourier features."""

    weights: np.ndarray  # (D + 1,), bias last
    rff: RFFParams
    final_loss: float = np.nan
    epochs_run: int = 0
    kind: str = "kernel_logistic"

    @property
    def n_features(self) -> int:
        return self.rff.input_dim

    def proba_dense(self, X: np.ndarray) -> np.ndarray:
        Z = rff_transform(X, self.rff)
        p1 = _sigmoid(Z @ self.weights[:-1] + self.weights[-1])
        return np.column_stack([1.0 - p1, p1])


def _check_two_classes(y: np.ndarray) -> None:
    classes = np.unique(y)
    if len(classes) < 2:
        raise ModelError("training set contains a single class; probabilities degenerate")


def train_logistic(
    examples: Sequence[Example], n_features: int, config: TrainConfig
) -> LogisticModel:
    """Fit binary logistic regression by mini-batch SGD with L2."""
    if len(examples) == 0:
        raise ModelError("empty training set")
    X, y = to_dense(examples, n_features)
    _check_two_classes(y)
    w, loss = _sgd_fit(X, y.astype(float), config)
    return LogisticModel(
        weights=w, n_features=n_features, final_loss=loss, epochs_run=config.epochs
    )


def train_kernel_logistic(
    examples: Sequence[Example], rff_params: RFFParams, config: TrainConfig
) -> KernelLogisticModel:
    """Fit logistic regression on RFF-transformed features."""
    if len(examples) == 0:
        raise ModelError("empty training set")
    X, y = to_dense(examples, rff_params.input_dim)
    _check_two_classes(y)
    Z = rff_transform(X, rff_params)
    w, loss = _sgd_fit(Z, y.astype(float), config)
    return KernelLogisticModel(
        weights=w, rff=rff_params, final_loss=loss, epochs_run=config.epochs
    )


# ---------------------------------------------------------------------------
# averaged-perceptron token tagger

_WINDOW = (-2, -1, 0, 1, 2)
_PAD = -1  # out-of-range token marker


def _token_features(tokens: Sequence[int], pos: int) -> list[tuple[int, int]]:
    n = len(tokens)
    feats = []
    for off in _WINDOW:
        j = pos + off
        feats.append((off, tokens[j] if 0 <= j < n else _PAD))
    return feats


@dataclass(frozen=True)
class TokenTaggerModel:
    """Averaged perceptron over a +/-2 token window, with a logistic link
    calibrating the margin to a break probability."""

    weights: dict  # (offset, token) -> float
    bias: float
    calib_scale: float
    calib_shift: float
    final_loss: float = np.nan
    epochs_run: int = 0
    kind: str = "token_tagger"

    def margins(self, sentence: TokenSentence) -> np.ndarray:
        out = np.empty(len(sentence))
        for i in range(len(sentence)):
            s = self.bias
            for key in _token_features(sentence.tokens, i):
                s += self.weights.get(key, 0.0)
            out[i] = s
        return out

    def proba(self, sentence: TokenSentence) -> np.ndarray:
        p1 = _sigmoid(self.calib_scale * self.margins(sentence) + self.calib_shift)
        return np.column_stack([1.0 - p1, p1])


def _fit_calibration(margins: np.ndarray, labels: np.ndarray, seed) -> tuple[float, float]:
    """1-d logistic fit of labels on margins by full-batch gradient descent."""
    a, c = 1.0, 0.0
    scale = max(1.0, float(np.std(margins)))
    m = margins / scale
    for _ in range(300):
        p = _sigmoid(a * m + c)
        err = p - labels
        ga = float(np.mean(err * m))
        gc = float(np.mean(err))
        a -= 0.5 * ga
        c -= 0.5 * gc
    return a / scale, c


def train_token_tagger(
    sentences: Sequence[TokenSentence], config: TrainConfig
) -> TokenTaggerModel:
    """Averaged perceptron on per-token break labels, then margin calibration."""
    if len(sentences) == 0:
        raise ModelError("empty training corpus")
    w: dict = {}
    u: dict = {}  # step-weighted accumulator for averaging
    b = 0.0
    ub = 0.0
    step = 1
    mistakes = 0
    for epoch in range(config.epochs):
        order = rng_for(config.seed, "tagger_shuffle", epoch).permutation(len(sentences))
        for si in order:
            sent = sentences[si]
            for i in range(len(sent)):
                feats = _token_features(sent.tokens, i)
                s = b + sum(w.get(k, 0.0) for k in feats)
                pred = 1 if s > 0 else 0
                target = sent.labels[i]
                if pred != target:
                    mistakes += 1
                    delta = 1.0 if target == 1 else -1.0
                    for k in feats:
                        w[k] = w.get(k, 0.0) + delta
                        u[k] = u.get(k, 0.0) + step * delta
                    b += delta
                    ub += step * delta
                step += 1
    avg_w = {k: w[k] - u.get(k, 0.0) / step for k in w}
    avg_b = b - ub / step

    model = TokenTaggerModel(
        weights=avg_w, bias=avg_b, calib_scale=1.0, calib_shift=0.0, epochs_run=config.epochs
    )
    margins = np.concatenate([model.margins(s) for s in sentences])
    labels = np.concatenate([np.asarray(s.labels, dtype=float) for s in sentences])
    a, c = _fit_calibration(margins, labels, config.seed)
    p = _sigmoid(a * margins + c)
    eps = 1e-12
    loss = float(-np.mean(labels * np.log(p + eps) + (1 - labels) * np.log(1 - p + eps)))
    return TokenTaggerModel(
        weights=avg_w,
        bias=avg_b,
        calib_scale=a,
        calib_shift=c,
        final_loss=loss,
        epochs_run=config.epochs,
    )


# ---------------------------------------------------------------------------
# prediction dispatch


def predict_proba(model, item):
    """Class probabilities for one item: a (2,) vector for an Example, an
    (L, 2) array of per-token pairs for a TokenSentence."""
    if isinstance(model, TokenTaggerModel):
        if not isinstance(item, TokenSentence):
            raise ModelError("token tagger requires a TokenSentence input")
        return model.proba(item)
    if isinstance(item, TokenSentence):
        raise ModelError(f"{model.kind} model cannot score a TokenSentence")
    X, _ = to_dense([item], model.n_features)
    return model.proba_dense(X)[0]


def predict_proba_batch(model, items: Sequence) -> np.ndarray:
    """Vectorized class probabilities, shape (n, 2), for Example inputs."""
    if isinstance(model, TokenTaggerModel):
        raise ModelError("use predict_proba per sentence for the token tagger")
    X, _ = to_dense(items, model.n_features)
    return model.proba_dense(X)


# ---------------------------------------------------------------------------
# best-of-k training


def best_of_k_train(
    train_procedure: Callable[[int], object],
    k: int,
    validation_set: Sequence,
    metric: Callable[[object, Sequence], float],
    base_seed: int = 0,
):
    """Run training k times with derived seeds; keep the model maximizing the
    validation metric. Ties break to the lowest run index, so the result is
    independent of any concurrent completion order."""
    if k < 1:
        raise ModelError("k must be >= 1")
    if len(validation_set) == 0:
        raise ModelError("validation set must be nonempty")
    best_model = None
    best_score = -np.inf
    for run in range(k):
        model = train_procedure(derive_seed(base_seed, "best_of_k", run))
        score = metric(model, validation_set)
        if score > best_score:
            best_model, best_score = model, score
    return best_model


# ---------------------------------------------------------------------------
# checkpoints (human-diffable structured text)


def save_model(model, path) -> None:
    if isinstance(model, LogisticModel):
        obj = {
            "kind": model.kind,
            "n_features": model.n_features,
            "weights": model.weights.tolist(),
            "final_loss": model.final_loss,
            "epochs_run": model.epochs_run,
        }
    elif isinstance(model, KernelLogisticModel):
        obj = {
            "kind": model.kind,
            "weights": model.weights.tolist(),
            "final_loss": model.final_loss,
            "epochs_run": model.epochs_run,
            "rff": {
                "n_features": model.rff.n_features,
                "bandwidth": model.rff.bandwidth,
                "input_dim": model.rff.input_dim,
                "omega": model.rff.omega.tolist(),
                "phase": model.rff.phase.tolist(),
            },
        }
    elif isinstance(model, TokenTaggerModel):
        obj = {
            "kind": model.kind,
            "weights": {f"{off}|{tok}": v for (off, tok), v in sorted(model.weights.items())},
            "bias": model.bias,
            "calib_scale": model.calib_scale,
            "calib_shift": model.calib_shift,
            "final_loss": model.final_loss,
            "epochs_run": model.epochs_run,
        }
    else:
        raise ModelError(f"cannot serialize model of type {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    kind = obj.get("kind")
    if kind == "logistic":
        return LogisticModel(
            weights=np.asarray(obj["weights"]),
            n_features=obj["n_features"],
            final_loss=obj["final_loss"],
            epochs_run=obj["epochs_run"],
        )
    if kind == "kernel_logistic":
        r = obj["rff"]
        rff = RFFParams(
            n_features=r["n_features"],
            bandwidth=r["bandwidth"],
            input_dim=r["input_dim"],
            omega=np.asarray(r["omega"]),
            phase=np.asarray(r["phase"]),
        )
        return KernelLogisticModel(
            weights=np.asarray(obj["weights"]),
            rff=rff,
            final_loss=obj["final_loss"],
            epochs_run=obj["epochs_run"],
        )
    if kind == "token_tagger":
        weights = {}
        for key, v in obj["weights"].items():
            off, tok = key.split("|")
            weights[(int(off), int(tok))] = v
        return TokenTaggerModel(
            weights=weights,
            bias=obj["bias"],
            calib_scale=obj["calib_scale"],
            calib_shift=obj["calib_shift"],
            final_loss=obj["final_loss"],
            epochs_run=obj["epochs_run"],
        )
    raise ModelError(f"unknown checkpoint kind {kind!r}")
