"""Reference classifiers for the comparison study, plus shared metrics.

KNN, first-order gradient boosting with decision stumps, and a small
feed-forward network over the same standardized features. The neural model
replaces a convolutional baseline because these features have no spatial
axis. Positive class throughout is NLOS (label 1).
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rngstream
from .errors import ConfigError, InputError, TrainingFault
from .nn import Adam, Mlp, init_mlp, mlp_backward, mlp_forward, sigmoid, softmax

# ---------------------------------------------------------------------------
# K-nearest neighbors
# ---------------------------------------------------------------------------


@dataclass
class KnnModel:
    k: int
    x: np.ndarray  # standardized training matrix
    y: np.ndarray

    def __post_init__(self):
        if self.k % 2 == 0 or self.k < 1:
            raise ConfigError(f"k must be odd and positive, got {self.k}")
        if self.k > len(self.y):
            raise ConfigError(f"k={self.k} exceeds training size {len(self.y)}")


def knn_fit(train_ds, k: int) -> KnnModel:
    return KnnModel(k=k, x=train_ds.standardized, y=train_ds.labels)


def _knn_vote_counts(model: KnnModel, x: np.ndarray) -> np.ndarray:
    """(n, 2) neighbor label counts; distance ties go to lower training index."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ model.x.T + (model.x * model.x).sum(1)[None, :]
    order = np.argsort(d2, axis=1, kind="stable")[:, :model.k]
    votes = model.y[order]
    counts = np.stack([(votes == 0).sum(axis=1), (votes == 1).sum(axis=1)], axis=1)
    return counts


def knn_predict_batch(model: KnnModel, x: np.ndarray) -> np.ndarray:
    counts = _knn_vote_counts(model, x)
    return (counts[:, 1] > counts[:, 0]).astype(int)


def knn_predict(model: KnnModel, x) -> int:
    """Majority label among the k nearest training points by Euclidean
    distance; equal distances resolve to the lower training index."""
    return int(knn_predict_batch(model, np.asarray(x, float)[None, :])[0])


def knn_posterior_batch(model: KnnModel, x: np.ndarray) -> np.ndarray:
    """(n, 2) vote fractions, usable as a soft posterior."""
    return _knn_vote_counts(model, x) / model.k


# ---------------------------------------------------------------------------
# Gradient-boosted decision stumps (first-order, logistic loss)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    left: float   # value when x[feature] <= threshold
    right: float


@dataclass
class GbtModel:
    stumps: list
    learning_rate: float
    rounds: int
    f0: float  # prior log-odds
    train_losses: list = field(default_factory=list)

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError(f"rounds must be nonnegative, got {self.rounds}")


def _stump_outputs(stump: Stump, x: np.ndarray) -> np.ndarray:
    return np.where(x[:, stump.feature] <= stump.threshold, stump.left, stump.right)


def _best_stump(x_sorted_idx, x: np.ndarray, g: np.ndarray) -> Stump:
    """Stump minimizing squared error to the residuals g over all
    (feature, midpoint threshold) candidates. Ties resolve to the lowest
    feature index, then the lowest threshold."""
    n, d = x.shape
    g_total = g.sum()
    best = None  # (score, feature, threshold, left, right)
    for j in range(d):
        order = x_sorted_idx[j]
        xs = x[order, j]
        gs = np.cumsum(g[order])
        # split after position i (1-based count); valid only between distinct values
        counts = np.arange(1, n)
        left_sum = gs[:-1]
        valid = xs[1:] > xs[:-1]
        if not np.any(valid):
            continue
        left_mean = left_sum / counts
        right_mean = (g_total - left_sum) / (n - counts)
        score = counts * left_mean**2 + (n - counts) * right_mean**2
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        if best is None or score[i] > best[0]:
            thr = 0.5 * (xs[i] + xs[i + 1])
            best = (score[i], j, thr, float(left_mean[i]), float(right_mean[i]))
    if best is None:
        # every feature constant: fall back to the intercept-only stump
        mean = float(g.mean())
        return Stump(0, math.inf, mean, mean)
    return Stump(best[1], best[2], best[3], best[4])


def _logistic_loss(y: np.ndarray, f: np.ndarray) -> float:
    # numerically stable -[y log p + (1-y) log(1-p)] with p = sigmoid(f)
    return float(np.mean(np.logaddexp(0.0, f) - y * f))


def gbt_train(train_ds, rounds: int = 200, learning_rate: float = 0.3) -> GbtModel:
    """Stagewise logistic-loss boosting: each round fits the stump that best
    matches the current negative gradients and adds it at the learning rate."""
    x = train_ds.standardized
    y = train_ds.labels.astype(float)
    if set(np.unique(y)) != {0.0, 1.0}:
        raise TrainingFault("training data must contain both classes")
    prior = float(y.mean())
    f0 = math.log(prior / (1.0 - prior))
    f = np.full(len(y), f0)
    x_sorted_idx = [np.argsort(x[:, j], kind="stable") for j in range(x.shape[1])]
    model = GbtModel(stumps=[], learning_rate=learning_rate, rounds=rounds, f0=f0)
    model.train_losses.append(_logistic_loss(y, f))
    for _ in range(rounds):
        g = y - sigmoid(f)
        stump = _best_stump(x_sorted_idx, x, g)
        model.stumps.append(stump)
        f = f + learning_rate * _stump_outputs(stump, x)
        model.train_losses.append(_logistic_loss(y, f))
    return model


def gbt_score_batch(model: GbtModel, x: np.ndarray) -> np.ndarray:
    """P(NLOS) = sigmoid of the summed scaled leaf scores plus prior odds."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    f = np.full(len(x), model.f0)
    for stump in model.stumps:
        f += model.learning_rate * _stump_outputs(stump, x)
    return sigmoid(f)


def gbt_predict(model: GbtModel, x):
    """(label, score) for a single feature vector; score is P(NLOS)."""
    score = float(gbt_score_batch(model, np.asarray(x, float)[None, :])[0])
    return int(score >= 0.5), score


def gbt_predict_batch(model: GbtModel, x: np.ndarray) -> np.ndarray:
    return (gbt_score_batch(model, x) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# Feed-forward neural baseline
# ---------------------------------------------------------------------------


@dataclass
class NeuralConfig:
    hidden: tuple = (64, 64)
    activation: str = "silu"
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: Optional[int] = None  # steps between validation-loss records
    seed: int = 0


@dataclass
class NeuralBaseline:
    mlp: Mlp
    cfg: NeuralConfig
    val_history: list = field(default_factory=list)  # (step, validation CE loss)


def _ce_loss_and_dz(z: np.ndarray, y: np.ndarray):
    logp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
    n = len(y)
    loss = -float(logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    return loss, dz / n


def neural_train(train_ds, cfg: NeuralConfig = NeuralConfig(), val_ds=None) -> NeuralBaseline:
    """Cross-entropy training with the same Adam machinery as the diffusion
    model; bit-deterministic under the config seed."""
    x = train_ds.standardized
    y = train_ds.labels
    if set(np.unique(y)) != {0, 1}:
        raise TrainingFault("training data must contain both classes")
    n, d = x.shape
    rng = rngstream.stream(cfg.seed, rngstream.TRAIN, 1)
    mlp = init_mlp((d, *cfg.hidden, 2), cfg.activation, rng)
    adam = Adam(mlp.params(), lr=cfg.learning_rate, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.adam_eps)
    model = NeuralBaseline(mlp=mlp, cfg=cfg)

    steps_per_epoch = max(1, n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    eval_interval = cfg.eval_interval or max(1, total // 50)

    def record(step):
        if val_ds is not None:
            zv, _ = mlp_forward(mlp, val_ds.standardized)
            lv, _ = _ce_loss_and_dz(zv, val_ds.labels)
            model.val_history.append((step, lv))

    record(0)
    initial_loss = None
    bad = 0
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            z, cache = mlp_forward(mlp, x[idx])
            loss, dz = _ce_loss_and_dz(z, y[idx])
            if not math.isfinite(loss):
                raise TrainingFault(f"non-finite loss at step {step + 1}")
            if initial_loss is None:
                initial_loss = loss
            elif loss > 10.0 * initial_loss:
                bad += 1
                if bad >= 3 * steps_per_epoch:
                    raise TrainingFault("training loss diverged (>10x initial)")
            else:
                bad = 0
            grads, _ = mlp_backward(mlp, cache, dz)
            adam.step(mlp.params(), grads)
            step += 1
            if step % eval_interval == 0 or step == total:
                record(step)
    return model


def neural_predict_batch(model: NeuralBaseline, x: np.ndarray) -> np.ndarray:
    z, _ = mlp_forward(model.mlp, np.atleast_2d(np.asarray(x, float)))
    return softmax(z, axis=1)


def neural_predict(model: NeuralBaseline, x) -> np.ndarray:
    """2-class probability vector (LOS at index 0), summing to 1."""
    return neural_predict_batch(model, np.asarray(x, float)[None, :])[0]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    total: int
    warn_empty_positive: bool = False

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "total": self.total, "warn_empty_positive": self.warn_empty_positive,
        }


def evaluate(predictions, truth) -> MetricsReport:
    """Confusion metrics with NLOS (1) as the positive class. Precision and
    recall over an empty positive set are 0, flagged by warn_empty_positive."""
    p = np.asarray(predictions, dtype=int)
    t = np.asarray(truth, dtype=int)
    if p.shape != t.shape or p.ndim != 1 or len(p) < 1:
        raise InputError(f"predictions and truth must be equal-length 1-d arrays of length >= 1, got {p.shape} vs {t.shape}")
    if np.any((p != 0) & (p != 1)) or np.any((t != 0) & (t != 1)):
        raise InputError("labels must be 0 (LOS) or 1 (NLOS)")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    total = len(p)
    warn = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        accuracy=(tp + tn) / total, precision=precision, recall=recall, f1=f1,
        tp=tp, fp=fp, tn=tn, fn=fn, total=total, warn_empty_positive=warn,
    )
