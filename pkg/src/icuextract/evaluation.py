"""Classification metrics and a logistic-regression baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class DegenerateLabels(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    return s, y


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(x)]])
    block_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(block_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both classes")
    u = average_ranks(s)[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over descending score thresholds, ties as one block."""
    s, y = _as_arrays(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise DegenerateLabels("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    block_end = np.concatenate([np.flatnonzero(np.diff(s)), [len(s) - 1]])
    tp = np.cumsum(y)[block_end]
    predicted = block_end + 1
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


def classify_metrics(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Accuracy and F1 of ``score >= threshold``; F1 is 0 when precision + recall is 0."""
    s, y = _as_arrays(scores, labels)
    pred = (s >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    accuracy = float((pred == y).mean()) if len(y) else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    accuracy: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int

    def as_percent(self) -> dict:
        out = asdict(self)
        for k in ("auroc", "auprc", "accuracy", "f1"):
            out[k] = round(100.0 * out[k], 1)
        return out


def evaluate_binary(scores, labels, threshold: float = 0.5) -> MetricsReport:
    s, y = _as_arrays(scores, labels)
    accuracy, f1 = classify_metrics(s, y, threshold)
    n_pos = int((y == 1).sum())
    return MetricsReport(
        auroc=auroc(s, y),
        auprc=auprc(s, y),
        accuracy=accuracy,
        f1=f1,
        threshold=threshold,
        n_pos=n_pos,
        n_neg=len(y) - n_pos,
    )


def evaluate_multiclass(probs: np.ndarray, labels, classes) -> dict:
    """One-vs-rest AUROC/AUPRC per class, their unweighted means, accuracy and macro F1.

    Classes absent from ``labels`` get null per-class AUROC/AUPRC and are left
    out of the macro means.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    pred = np.asarray(classes)[np.argmax(probs, axis=1)]
    per_class = {}
    for k, c in enumerate(classes):
        y = (labels == c).astype(int)
        entry = {"n": int(y.sum())}
        if 0 < y.sum() < len(y):
            entry["auroc"] = auroc(probs[:, k], y)
            entry["auprc"] = auprc(probs[:, k], y)
        else:
            entry["auroc"] = entry["auprc"] = None
        tp = int(((pred == c) & (labels == c)).sum())
        p_den, r_den = int((pred == c).sum()), int(y.sum())
        precision = tp / p_den if p_den else 0.0
        recall = tp / r_den if r_den else 0.0
        entry["f1"] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = entry
    defined = [e for e in per_class.values() if e["auroc"] is not None]
    return {
        "per_class": per_class,
        "macro_auroc": float(np.mean([e["auroc"] for e in defined])) if defined else None,
        "macro_auprc": float(np.mean([e["auprc"] for e in defined])) if defined else None,
        "accuracy": float((pred == labels).mean()) if len(labels) else 0.0,
        "macro_f1": float(np.mean([e["f1"] for e in per_class.values()])),
    }


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray
    losses: list[float] = field(default_factory=list)
    seed: int = 0

    def decision(self, features) -> np.ndarray:
        x = (np.asarray(features, dtype=float) - self.center) / self.scale
        return x @ self.weights + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return _sigmoid(self.decision(features))


def _log_loss(z: np.ndarray, y: np.ndarray) -> float:
    # mean of log(1 + exp(-z)) for y=1 and log(1 + exp(z)) for y=0
    return float(np.mean(np.logaddexp(0.0, np.where(y == 1, -z, z))))


def train_logreg(
    features,
    labels,
    l2: float = 1e-2,
    epochs: int = 300,
    lr: float = 0.5,
    seed: int = 0,
) -> LogRegModel:
    """L2-regularized logistic regression by full-batch gradient descent.

    Columns are centered and scaled on the training data first.  Updates
    start from all-zero weights and use no sampling, so the fit is
    deterministic; ``seed`` is carried on the model for provenance.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    center = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    scale = x.std(axis=0) if len(x) else np.ones(x.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (x - center) / scale
    n, d = xs.shape
    w = np.zeros(d)
    b = 0.0
    losses = []
    for _ in range(epochs):
        z = xs @ w + b
        loss = _log_loss(z, y) + 0.5 * l2 * float(w @ w)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} after {len(losses)} epochs")
        losses.append(loss)
        err = _sigmoid(z) - y
        w -= lr * (xs.T @ err / n + l2 * w)
        b -= lr * float(err.mean())
    return LogRegModel(weights=w, bias=b, center=center, scale=scale, losses=losses, seed=seed)


def train_one_vs_rest(features, labels, classes, **kwargs) -> list[LogRegModel]:
    labels = np.asarray(labels)
    return [train_logreg(features, (labels == c).astype(int), **kwargs) for c in classes]


def predict_one_vs_rest(models: list[LogRegModel], features) -> np.ndarray:
    return np.column_stack([m.predict_proba(features) for m in models])
