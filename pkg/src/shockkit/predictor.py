"""Attrition classifier.

Inputs are per-subreddit record counts in the six months before the event,
transformed with ``ln(1 + x)``.  The network has two ReLU hidden layers and
two sigmoid outputs ordered ``(stay, leave)``.  Training minimizes

    L = mean_i sum_j (ln(1 + o_ij) - ln(1 + t_ij))^2

against one-hot targets with seeded mini-batch gradient descent.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata, t as student_t

from .attrition import is_inactive
from .cohort import Cohort
from .errors import DataError
from .store import DAY, EventStore

FEATURE_WINDOW = 182 * DAY
LABEL_GRACE_WEEKS = 4
STAY, LEAVE = 0, 1


@dataclass
class FeatureSpace:
    vocabulary: list[str]
    users: list[str]
    counts: np.ndarray
    labels: np.ndarray

    def features(self) -> np.ndarray:
        return np.log1p(self.counts.astype(float))

    def aligned(self, vocabulary: Sequence[str]) -> FeatureSpace:
        """Re-express the counts over another vocabulary; unknown names drop out."""
        position = {name: j for j, name in enumerate(self.vocabulary)}
        counts = np.zeros((len(self.users), len(vocabulary)), dtype=self.counts.dtype)
        for j, name in enumerate(vocabulary):
            if name in position:
                counts[:, j] = self.counts[:, position[name]]
        return FeatureSpace(list(vocabulary), list(self.users), counts, self.labels.copy())


def build_features(
    store: EventStore,
    cohort: Cohort,
    *,
    window: int = FEATURE_WINDOW,
    grace_weeks: int = LABEL_GRACE_WEEKS,
) -> FeatureSpace:
    """Feature matrix and stay/leave labels for the treatment users.

    The vocabulary is every subreddit any treatment user touched in the
    feature window, sorted.  Label 1 means inactive after ``grace_weeks``.
    """
    event = cohort.spec.event_time
    users = list(cohort.treatment_users)
    per_user = [store.user_subreddit_counts(u, event - window, event) for u in users]
    vocabulary = sorted(set().union(*per_user)) if per_user else []
    position = {name: j for j, name in enumerate(vocabulary)}
    counts = np.zeros((len(users), len(vocabulary)), dtype=np.int64)
    for i, row in enumerate(per_user):
        for name, n in row.items():
            counts[i, position[name]] = n
    labels = np.array(
        [int(is_inactive(store, u, event, grace_weeks, cohort.spec.post_window)) for u in users], dtype=np.int64
    )
    return FeatureSpace(vocabulary, users, counts, labels)


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 64
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    loss: str = "lmse"

    def __post_init__(self) -> None:
        if self.loss not in ("lmse", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    config: TrainConfig = field(default_factory=TrainConfig)
    vocabulary: list[str] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    @classmethod
    def initialize(cls, n_inputs: int, config: TrainConfig) -> MlpModel:
        rng = np.random.default_rng(config.seed)
        sizes = [n_inputs, config.hidden, config.hidden, 2]
        weights = [rng.normal(0.0, math.sqrt(2.0 / max(a, 1)), size=(a, b)) for a, b in zip(sizes, sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights, biases, config)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return _sigmoid(h @ self.weights[-1] + self.biases[-1])

    def loss(self, x: np.ndarray, targets: np.ndarray) -> float:
        return _loss(self.forward(x), targets, self.config.loss)

    def loss_and_gradients(self, x: np.ndarray, targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Loss and gradients ordered like :meth:`parameters`."""
        acts = [np.asarray(x, dtype=float)]
        pre = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0))
        out = _sigmoid(acts[-1] @ self.weights[-1] + self.biases[-1])
        n = out.shape[0]
        if self.config.loss == "lmse":
            diff = np.log1p(out) - np.log1p(targets)
            d_out = 2.0 * diff / (1.0 + out) / n
        else:
            diff = out - targets
            d_out = 2.0 * diff / n
        loss = float((diff**2).sum() / n)
        delta = d_out * out * (1.0 - out)
        grads_w: list[np.ndarray] = []
        grads_b: list[np.ndarray] = []
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w.append(acts[layer].T @ delta)
            grads_b.append(delta.sum(axis=0))
            if layer:
                delta = (delta @ self.weights[layer].T) * (pre[layer - 1] > 0)
        grads_w.reverse()
        grads_b.reverse()
        return loss, [g for pair in zip(grads_w, grads_b) for g in pair]

    def to_dict(self) -> dict:
        return {
            "layers": self.layer_sizes,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "config": asdict(self.config),
            "seed": self.config.seed,
            "vocabulary": self.vocabulary,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, data: dict) -> MlpModel:
        sizes = data["layers"]
        weights = [np.array(w, dtype=float).reshape(a, b) for w, a, b in zip(data["weights"], sizes, sizes[1:])]
        biases = [np.array(b, dtype=float) for b in data["biases"]]
        return cls(weights, biases, TrainConfig(**data["config"]), list(data["vocabulary"]), list(data["history"]))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


def _loss(out: np.ndarray, targets: np.ndarray, kind: str) -> float:
    if kind == "lmse":
        diff = np.log1p(out) - np.log1p(targets)
    else:
        diff = out - targets
    return float((diff**2).sum() / out.shape[0])


def one_hot(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, 2))
    out[np.arange(labels.size), labels] = 1.0
    return out


def train(
    x: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig = TrainConfig(),
    vocabulary: Sequence[str] = (),
) -> MlpModel:
    """Fit a model; identical inputs and seed give identical parameters."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if np.count_nonzero(labels == STAY) < 2 or np.count_nonzero(labels == LEAVE) < 2:
        raise DataError("training needs at least two examples of each class")
    model = MlpModel.initialize(x.shape[1], config)
    model.vocabulary = list(vocabulary)
    targets = one_hot(labels)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grads = model.loss_and_gradients(x[batch], targets[batch])
            for p, g in zip(params, grads):
                p -= config.learning_rate * g
        model.history.append(model.loss(x, targets))
    return model


def predict(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave scores ``o_leave / (o_leave + o_stay)`` and argmax labels (tie -> stay)."""
    return decide(model.forward(x))


def decide(outputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    outputs = np.atleast_2d(outputs)
    stay, leave = outputs[:, STAY], outputs[:, LEAVE]
    scores = leave / (leave + stay)
    labels = np.where(leave > stay, LEAVE, STAY)
    return scores, labels


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied scores earn half credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """F1 of the leave class; 0.0 when it is never predicted nor present."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tp = int(np.count_nonzero((predictions == LEAVE) & (labels == LEAVE)))
    fp = int(np.count_nonzero((predictions == LEAVE) & (labels != LEAVE)))
    fn = int(np.count_nonzero((predictions != LEAVE) & (labels == LEAVE)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold number for every example, classes spread evenly across folds."""
    labels = np.asarray(labels)
    out = np.empty(labels.size, dtype=np.int64)
    rng = np.random.default_rng([seed, 2])
    offset = 0
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        out[idx] = (np.arange(idx.size) + offset) % folds
        offset += idx.size
    return out


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    auc: float
    f1: float


@dataclass
class CvResult:
    folds: list[FoldMetrics]

    def summary(self, metric: str = "auc") -> tuple[float, float]:
        """Mean and 95% t-interval half width across folds."""
        values = np.array([getattr(f, metric) for f in self.folds])
        if values.size < 2:
            return float(values.mean()), 0.0
        half = student_t.ppf(0.975, values.size - 1) * values.std(ddof=1) / math.sqrt(values.size)
        return float(values.mean()), float(half)


def cross_validate(fs: FeatureSpace, folds: int = 5, config: TrainConfig = TrainConfig()) -> CvResult:
    labels = fs.labels
    for cls in (STAY, LEAVE):
        if np.count_nonzero(labels == cls) < folds:
            raise DataError(f"cross validation needs >= {folds} examples of class {cls}")
    assignment = stratified_folds(labels, folds, config.seed)
    x = fs.features()
    out = []
    for k in range(folds):
        train_idx = assignment != k
        model = train(x[train_idx], labels[train_idx], config, fs.vocabulary)
        scores, predicted = predict(model, x[~train_idx])
        out.append(FoldMetrics(k, auc(scores, labels[~train_idx]), f1(predicted, labels[~train_idx])))
    return CvResult(out)


@dataclass(frozen=True)
class TransferResult:
    auc: float
    f1: float
    model: MlpModel


def transfer_eval(train_fs: FeatureSpace, test_fs: FeatureSpace, config: TrainConfig = TrainConfig()) -> TransferResult:
    """Train on one cohort, score another over the training vocabulary."""
    model = train(train_fs.features(), train_fs.labels, config, train_fs.vocabulary)
    test = test_fs.aligned(train_fs.vocabulary)
    scores, predicted = predict(model, test.features())
    return TransferResult(auc(scores, test.labels), f1(predicted, test.labels), model)
