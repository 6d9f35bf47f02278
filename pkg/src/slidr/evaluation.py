"""Evaluation of frozen point features: linear probing, mIoU, k-NN and similarity maps."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-6


@dataclass
class ProbeConfig:
    lr: float = 0.05
    epochs: int = 50
    num_classes: int = 3

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class LinearClassifier:
    weight: np.ndarray  # D x num_classes
    bias: np.ndarray
    history: list[dict] = field(default_factory=list)

    def logits(self, feats):
        return np.asarray(feats) @ self.weight + self.bias

    def predict(self, feats):
        return self.logits(feats).argmax(axis=1)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    n = len(labels)
    log_p = z[np.arange(n), labels] - np.log(denom[:, 0])
    loss = float(-np.mean(log_p))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def linear_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig, seed: int = 0) -> LinearClassifier:
    """Full-batch gradient descent on a linear softmax classifier over frozen features."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    missing = sorted(set(range(cfg.num_classes)) - set(np.unique(y).tolist()))
    if missing:
        raise ValueError(f"classes absent from the training labels: {missing}")
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(X.shape[1], cfg.num_classes))
    b = np.zeros(cfg.num_classes)
    history = []
    for epoch in range(cfg.epochs):
        logits = X @ W + b
        loss, d_logits = softmax_xent(logits, y)
        pred = logits.argmax(axis=1)
        _, mean_iou = miou(pred, y, cfg.num_classes)
        history.append({"epoch": epoch, "loss": loss, "acc": float(np.mean(pred == y)), "miou": mean_iou})
        W = W - cfg.lr * (X.T @ d_logits)
        b = b - cfg.lr * d_logits.sum(axis=0)
    return LinearClassifier(W, b, history)


def miou(pred, gt, num_classes: int):
    """Per-class IoU (NaN where a class never occurs) and their mean over occurring classes."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(0) + conf.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = denom > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def knn_classify(db_feats, db_labels, query, k: int = 20, num_classes: int | None = None):
    """Vote fractions among the ``k`` nearest database entries by cosine distance."""
    db = np.asarray(db_feats, dtype=np.float64)
    lab = np.asarray(db_labels, dtype=np.int64)
    if k > len(db):
        raise ValueError("k exceeds the database size")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    sim = (db @ q) / (np.linalg.norm(db, axis=1) * np.linalg.norm(q))
    order = np.argsort(1.0 - sim, kind="stable")[:k]
    n = num_classes if num_classes is not None else int(lab.max()) + 1
    return np.bincount(lab[order], minlength=n) / k


def similarity_map(query, targets):
    """Cosine similarities of a unit query against unit target embeddings (any leading shape)."""
    q = np.asarray(query, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL or np.any(np.abs(np.linalg.norm(t, axis=-1) - 1.0) > UNIT_TOL):
        raise ValueError("similarity_map expects unit-norm embeddings")
    return np.clip(t @ q, -1.0, 1.0)


def write_probe_metrics(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "acc", "miou"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["acc"])), repr(float(row["miou"]))])
