"""Evaluation: accuracy, mIoU, clustering accuracy and embedding export."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError


@dataclass
class MetricRecord:
    step: int = 0
    epoch: int | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)

    def to_json(self, with_time: bool = False) -> dict:
        d = {"step": self.step, "epoch": self.epoch, "metrics": dict(self.metrics)}
        if with_time:
            d["timestamp"] = self.timestamp
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricRecord":
        return cls(step=d["step"], epoch=d.get("epoch"), metrics=dict(d["metrics"]),
                   timestamp=d.get("timestamp", 0.0))


def classification_accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        return 0.0
    return float((p == y).mean())


def miou(pred_masks, gt_masks, n_classes: int) -> float:
    """Mean IoU over the classes present in the ground truth."""
    p, g = np.asarray(pred_masks), np.asarray(gt_masks)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    ious = []
    for k in range(n_classes):
        gk = g == k
        if not gk.any():
            continue
        pk = p == k
        ious.append((pk & gk).sum() / (pk | gk).sum())
    return float(np.mean(ious)) if ious else 0.0


def _to_onehot(assign, k: int) -> np.ndarray:
    a = np.asarray(assign)
    if a.ndim == 2:
        return a.astype(np.int64)
    out = np.zeros((a.shape[0], k), dtype=np.int64)
    out[np.arange(a.shape[0]), a] = 1
    return out


def _check_assignment(y: np.ndarray, what: str) -> None:
    if y.ndim != 2 or y.shape[1] < 1:
        raise ValueError(f"{what} must be an N x K one-hot matrix")
    if not np.all((y == 0) | (y == 1)) or not np.all(y.sum(1) == 1):
        raise ValueError(f"{what} must have exactly one 1 per row")


def kmeans_cluster(embeddings, k: int, rng: np.random.Generator, restarts: int = 10,
                   max_iter: int = 100) -> np.ndarray:
    """Hard k-means with farthest-point seeding; returns an N x K one-hot assignment.

    Each restart picks a random first center and then greedily adds the point
    farthest from the chosen centers. The restart with the lowest within-cluster
    squared distance wins.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ConfigurationError(f"k-means needs 1 <= K <= N (got K={k}, N={n})")
    sq = (x ** 2).sum(1)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = [x[rng.integers(n)]]
        d2 = ((x - centers[0]) ** 2).sum(1)
        for _ in range(1, k):
            centers.append(x[int(np.argmax(d2))])
            d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(1))
        c = np.stack(centers)
        labels = None
        for _ in range(max_iter):
            dist = sq[:, None] - 2 * x @ c.T + (c ** 2).sum(1)[None]
            new = dist.argmin(1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = labels == j
                if members.any():
                    c[j] = x[members].mean(0)
        inertia = ((x - c[labels]) ** 2).sum()
        if inertia < best_inertia - 1e-12:
            best_inertia, best_labels = inertia, labels
    return _to_onehot(best_labels, k)


def optimal_permutation(y_c, y) -> np.ndarray:
    """Permutation matrix P maximizing tr(P^T Y_c^T Y), via linear assignment on -Y_c^T Y."""
    yc, yy = np.asarray(y_c), np.asarray(y)
    _check_assignment(yc, "cluster assignment")
    _check_assignment(yy, "labels")
    if yc.shape != yy.shape:
        raise ValueError(f"dimension mismatch: {yc.shape} vs {yy.shape}")
    k = yc.shape[1]
    contingency = yc.T @ yy
    rows, cols = linear_sum_assignment(-contingency)
    p = np.zeros((k, k), dtype=np.int64)
    p[rows, cols] = 1
    return p


def cluster_accuracy(y_c, y) -> float:
    yc, yy = np.asarray(y_c), np.asarray(y)
    p = optimal_permutation(yc, yy)
    return float(np.trace(p.T @ yc.T @ yy) / yc.shape[0])


def onehot(labels, k: int) -> np.ndarray:
    return _to_onehot(np.asarray(labels, dtype=np.int64), k)


@torch.no_grad()
def embed(encoder, images: torch.Tensor, batch_size: int = 500) -> np.ndarray:
    encoder.eval()
    if images.shape[0] == 0:
        return np.zeros((0, encoder.out_dim), dtype=np.float32)
    out = [encoder(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).numpy()


def export_embeddings(encoder, images: torch.Tensor, labels, path, ids=None) -> Path:
    """Write pooled encoder embeddings as ``id,label,e0,...`` rows (9 significant digits)."""
    path = Path(path)
    z = embed(encoder, images)
    ids = list(range(len(z))) if ids is None else list(ids)
    labels = np.asarray(labels)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"e{i}" for i in range(z.shape[1])])
            for i, lab, row in zip(ids, labels, z):
                w.writerow([i, int(lab)] + [f"{v:.9g}" for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def read_embeddings(path):
    """Inverse of ``export_embeddings``: returns (ids, labels, embeddings)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read embeddings from {path}: {exc}") from exc
    header, body = rows[0], rows[1:]
    d = len(header) - 2
    ids = [int(r[0]) for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    emb = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), d)
    return ids, labels, emb
