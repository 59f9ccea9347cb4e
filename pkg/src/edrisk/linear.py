"""Logistic regression and Bernoulli naive Bayes over sparse binary features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .featurize import FeatureVector, FeatureVocabulary, to_csr


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class LogisticParams:
    l2_strength: float = 1e-4
    learning_rate: float = 1.0
    max_epochs: int = 500
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be nonnegative")
        if self.learning_rate <= 0 or self.tolerance <= 0 or self.max_epochs < 1:
            raise ValueError("learning_rate, tolerance and max_epochs must be positive")


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    hyperparams: LogisticParams = field(default_factory=LogisticParams)
    losses: list[float] = field(default_factory=list)
    recorded_epochs: int | None = None  # set when only the final loss was kept

    @property
    def dimension(self) -> int:
        return len(self.weights)

    @property
    def epochs(self) -> int:
        return self.recorded_epochs if self.recorded_epochs is not None else len(self.losses)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def weight_map(self) -> dict[int, float]:
        return {int(j): float(self.weights[j]) for j in np.flatnonzero(self.weights)}

    def to_text(self) -> str:
        hp = self.hyperparams
        lines = [
            "# logistic",
            f"dimension {self.dimension}",
            f"l2_strength {float(hp.l2_strength)!r}",
            f"learning_rate {float(hp.learning_rate)!r}",
            f"max_epochs {hp.max_epochs}",
            f"tolerance {float(hp.tolerance)!r}",
            f"epochs {self.epochs}",
            f"final_loss {float(self.final_loss)!r}",
            f"intercept {float(self.intercept)!r}",
        ]
        lines += [f"w {j} {float(w)!r}" for j, w in self.weight_map().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LogisticModel":
        head = {}
        weights = {}
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "w":
                weights[int(parts[1])] = float(parts[2])
            else:
                head[parts[0]] = parts[1]
        w = np.zeros(int(head["dimension"]))
        for j, value in weights.items():
            w[j] = value
        hp = LogisticParams(
            l2_strength=float(head["l2_strength"]),
            learning_rate=float(head["learning_rate"]),
            max_epochs=int(head["max_epochs"]),
            tolerance=float(head["tolerance"]),
        )
        # only the final loss survives serialization
        epochs = int(head["epochs"])
        losses = [float(head["final_loss"])] if epochs else []
        return cls(w, float(head["intercept"]), hp, losses, epochs)


def as_matrix(X, dimension: int | None = None):
    """Accept FeatureVectors, a sparse matrix or a dense 2-D array."""
    if sp.issparse(X):
        return sp.csr_matrix(X)
    if isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise ValueError("dense input must be 2-D")
        return X.astype(np.float64)
    return to_csr(list(X), dimension)


def logistic_loss_and_grad(weights, intercept, X, y, l2):
    """Mean negative log-likelihood plus ``l2/2 * ||w||^2`` and its gradient.

    The intercept is not regularized.
    """
    y = np.asarray(y, dtype=np.float64)
    z = X @ weights + intercept
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(weights @ weights))
    r = (expit(z) - y) / len(y)
    grad_w = np.asarray(X.T @ r).ravel() + l2 * weights
    return loss, grad_w, float(r.sum())


def _column_scale(X, l2):
    if sp.issparse(X):
        sq = np.asarray(X.multiply(X).mean(axis=0)).ravel()
    else:
        sq = np.mean(X * X, axis=0)
    return 0.25 * sq + l2 + 1e-12


def fit_logistic(X, y, hyperparams: LogisticParams | None = None,
                 dimension: int | None = None) -> LogisticModel:
    """Fit by full-batch gradient descent with a Jacobi preconditioner.

    Each epoch takes one step along the diagonally scaled negative gradient.
    A step that fails the sufficient-decrease test is halved until it passes;
    an accepted step doubles the trial length for the next epoch.  Fitting
    stops when the relative loss change drops below ``tolerance``.
    """
    hp = hyperparams or LogisticParams()
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("cannot fit on empty data")
    X = as_matrix(X, dimension)
    if X.shape[0] != len(y):
        raise ValueError(f"{X.shape[0]} rows but {len(y)} labels")

    scale_w = _column_scale(X, hp.l2_strength)
    scale_b = 0.25
    w = np.zeros(X.shape[1])
    b = 0.0
    loss, gw, gb = logistic_loss_and_grad(w, b, X, y, hp.l2_strength)
    if not math.isfinite(loss):
        raise DivergenceError(0)
    losses = [loss]
    step = hp.learning_rate
    max_step = hp.learning_rate * 1e6
    for epoch in range(1, hp.max_epochs + 1):
        dw = -gw / scale_w
        db = -gb / scale_b
        slope = float(gw @ dw) + gb * db
        if slope >= 0:
            break
        accepted = False
        for _ in range(60):
            w_new = w + step * dw
            b_new = b + step * db
            trial, gw_new, gb_new = logistic_loss_and_grad(w_new, b_new, X, y, hp.l2_strength)
            if math.isfinite(trial) and trial <= loss + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not math.isfinite(trial):
                raise DivergenceError(epoch)
            # no representable decrease left
            break
        w, b = w_new, b_new
        gw, gb = gw_new, gb_new
        change = loss - trial
        loss = trial
        losses.append(loss)
        step = min(step * 2.0, max_step)
        if change <= hp.tolerance * max(abs(loss), 1e-300):
            break
    return LogisticModel(w, b, hp, losses)


def predict_logistic_batch(model: LogisticModel, X) -> np.ndarray:
    X = as_matrix(X, model.dimension)
    if X.shape[1] != model.dimension:
        raise ValueError(f"input dimension {X.shape[1]} does not match model dimension {model.dimension}")
    return expit(X @ model.weights + model.intercept)


def predict_logistic(model: LogisticModel, x: FeatureVector) -> float:
    if x.dimension != model.dimension:
        raise ValueError(f"vector dimension {x.dimension} does not match model dimension {model.dimension}")
    return float(predict_logistic_batch(model, [x])[0])


def top_coefficients(model: LogisticModel, vocab: FeatureVocabulary, k: int):
    """The k (field, value, coefficient) triples with the largest |coefficient|."""
    if k <= 0:
        raise ValueError("k must be positive")
    if vocab.dimension != model.dimension:
        raise ValueError("model and vocabulary dimensions differ")
    order = sorted(range(model.dimension), key=lambda j: (-abs(model.weights[j]), j))
    return [(*vocab.entries[j], float(model.weights[j])) for j in order[:k]]


@dataclass
class NaiveBayesModel:
    """Bernoulli naive Bayes; row 0 holds the negative class, row 1 the positive."""

    log_prior: np.ndarray
    log_cond_present: np.ndarray
    log_cond_absent: np.ndarray
    smoothing_alpha: float = 1.0

    def __post_init__(self):
        self._absent_sum = self.log_cond_absent.sum(axis=1)
        self._delta = self.log_cond_present - self.log_cond_absent

    @property
    def dimension(self) -> int:
        return self.log_cond_present.shape[1]

    def to_text(self) -> str:
        lines = [
            "# naive_bayes",
            f"dimension {self.dimension}",
            f"smoothing_alpha {float(self.smoothing_alpha)!r}",
            f"log_prior {float(self.log_prior[0])!r} {float(self.log_prior[1])!r}",
        ]
        p, a = self.log_cond_present, self.log_cond_absent
        for j in range(self.dimension):
            lines.append(f"c {j} {float(p[0, j])!r} {float(a[0, j])!r} {float(p[1, j])!r} {float(a[1, j])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NaiveBayesModel":
        head = {}
        rows = []
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "c":
                rows.append([float(v) for v in parts[2:]])
            else:
                head[parts[0]] = parts[1:]
        d = int(head["dimension"][0])
        table = np.array(rows, dtype=np.float64).reshape(d, 4)
        present = np.vstack([table[:, 0], table[:, 2]])
        absent = np.vstack([table[:, 1], table[:, 3]])
        prior = np.array([float(v) for v in head["log_prior"]])
        return cls(prior, present, absent, float(head["smoothing_alpha"][0]))


def fit_naive_bayes(X, y, smoothing_alpha: float = 1.0, dimension: int | None = None) -> NaiveBayesModel:
    """Per-feature Bernoulli conditionals with additive smoothing.

    P(present | c) = (count_c + alpha) / (n_c + 2 alpha).
    """
    if smoothing_alpha <= 0:
        raise ValueError("smoothing_alpha must be positive")
    y = np.asarray(y, dtype=bool)
    if len(y) == 0:
        raise ValueError("cannot fit on empty data")
    X = as_matrix(X, dimension)
    if X.shape[0] != len(y):
        raise ValueError(f"{X.shape[0]} rows but {len(y)} labels")
    n_c = np.array([np.sum(~y), np.sum(y)], dtype=np.float64)
    counts = np.vstack([
        np.asarray(X[~y].sum(axis=0)).ravel(),
        np.asarray(X[y].sum(axis=0)).ravel(),
    ])
    denom = (n_c + 2 * smoothing_alpha)[:, None]
    present = np.log((counts + smoothing_alpha) / denom)
    absent = np.log((n_c[:, None] - counts + smoothing_alpha) / denom)
    with np.errstate(divide="ignore"):
        prior = np.log(n_c / len(y))
    return NaiveBayesModel(prior, present, absent, smoothing_alpha)


def naive_bayes_log_joint(model: NaiveBayesModel, X) -> np.ndarray:
    """Per-class log P(class, x) for each row, shape (n, 2)."""
    X = as_matrix(X, model.dimension)
    if X.shape[1] != model.dimension:
        raise ValueError(f"input dimension {X.shape[1]} does not match model dimension {model.dimension}")
    scores = np.asarray(X @ model._delta.T)
    return scores + (model.log_prior + model._absent_sum)[None, :]


def naive_bayes_posteriors(model: NaiveBayesModel, X) -> np.ndarray:
    joint = naive_bayes_log_joint(model, X)
    norm = np.logaddexp(joint[:, 0], joint[:, 1])
    return np.exp(joint - norm[:, None])


def predict_naive_bayes_batch(model: NaiveBayesModel, X) -> np.ndarray:
    return naive_bayes_posteriors(model, X)[:, 1]


def predict_naive_bayes(model: NaiveBayesModel, x: FeatureVector) -> float:
    if x.dimension != model.dimension:
        raise ValueError(f"vector dimension {x.dimension} does not match model dimension {model.dimension}")
    return float(predict_naive_bayes_batch(model, [x])[0])


def constant_logistic(dimension: int, probability: float) -> LogisticModel:
    """A model that ignores its input and returns ``probability``."""
    p = min(max(probability, 1e-12), 1 - 1e-12)
    return LogisticModel(np.zeros(dimension), math.log(p / (1 - p)), LogisticParams(), [])
