"""Accuracy, confusion matrices, loss-curve CSV, and two-component PCA."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from splitvfl.errors import DataError

METRICS_HEADER = ("epoch", "train_loss", "val_loss", "val_accuracy")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [C x C], rows = true class, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def to_csv(self) -> bytes:
        c = self.counts.shape[0]
        lines = ["true\\pred," + ",".join(str(j) for j in range(c))]
        lines += [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(self.counts)]
        return ("\n".join(lines) + "\n").encode()


def confusion(labels, predictions, num_classes: int) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise DataError(f"labels {labels.shape} and predictions {predictions.shape} differ in length")
    for name, arr in (("label", labels), ("prediction", predictions)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise DataError(f"{name} {arr[bad[0]]} at position {bad[0]} is outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    return float(np.mean(labels == np.asarray(predictions))) if labels.size else float("nan")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def metrics_csv(records: Sequence[MetricsRecord]) -> bytes:
    lines = [",".join(METRICS_HEADER)]
    for r in records:
        lines.append(f"{int(r.epoch)},{_fmt(r.train_loss)},{_fmt(r.val_loss)},{_fmt(r.val_accuracy)}")
    return ("\n".join(lines) + "\n").encode()


def parse_metrics_csv(data: bytes) -> list[MetricsRecord]:
    rows = list(csv.reader(io.StringIO(data.decode())))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise DataError("metrics CSV header mismatch")
    return [MetricsRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:] if r]


# ----------------------------------------------------------------- PCA ---

@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray  # [2 x F], orthonormal rows
    projections: np.ndarray  # [N x 2]
    loadings: np.ndarray  # [F x 2] = components.T * sqrt(explained_variance)
    explained_variance: np.ndarray  # [2], nonincreasing
    mean: np.ndarray  # [F]


class ConvergenceError(ArithmeticError):
    pass


def _power_iteration(cov: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    scale = max(float(np.abs(cov).max()), 1e-300)
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm <= 1e-12 * scale:
            # matrix is zero on the remaining subspace: any unit vector is an eigenvector
            return 0.0, v
        w /= norm
        if np.dot(w, v) < 0:
            w = -w
        if np.linalg.norm(w - v) < tol:
            return float(w @ cov @ w), w
        v = w
    residual = float(np.linalg.norm(cov @ v - (v @ cov @ v) * v))
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations (residual {residual:.3e})")


def _orient(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def pca2(features: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000) -> PcaResult:
    """Top two principal components by power iteration with deflation.

    Runs in float64.  Each component is flipped so its largest-magnitude
    entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DataError(f"pca2 needs an [N x F] matrix with N >= 3, got {x.shape}")
    if x.shape[1] < 2:
        raise DataError("pca2 needs at least 2 features")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    start = np.random.default_rng(0).standard_normal(x.shape[1])

    lam1, v1 = _power_iteration(cov, start, tol, max_iter)
    v1 = _orient(v1)
    deflated = cov - lam1 * np.outer(v1, v1)
    start2 = start - (start @ v1) * v1
    if np.linalg.norm(start2) < 1e-12:
        start2 = np.roll(v1, 1) - (np.roll(v1, 1) @ v1) * v1
    lam2, v2 = _power_iteration(deflated, start2, tol, max_iter)
    # re-orthogonalise against v1 to clean accumulated rounding
    v2 = v2 - (v2 @ v1) * v1
    v2 = _orient(v2 / np.linalg.norm(v2))
    lam2 = float(v2 @ cov @ v2)

    comps = np.stack([v1, v2])
    ev = np.array([lam1, max(lam2, 0.0)])
    return PcaResult(comps, xc @ comps.T, comps.T * np.sqrt(ev), ev, mean)


def pca_projection_csv(ids: Sequence[str], result: PcaResult) -> bytes:
    lines = ["id,pc1,pc2"]
    lines += [f"{sid},{p[0]:.10g},{p[1]:.10g}" for sid, p in zip(ids, result.projections)]
    return ("\n".join(lines) + "\n").encode()


def pca_loadings_csv(feature_names: Sequence[str], result: PcaResult) -> bytes:
    lines = ["feature,loading1,loading2"]
    lines += [f"{name},{l[0]:.10g},{l[1]:.10g}" for name, l in zip(feature_names, result.loadings)]
    return ("\n".join(lines) + "\n").encode()

