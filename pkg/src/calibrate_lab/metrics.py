"""Calibration measurement: confidence records, ECE, reliability diagrams, MMCE.

Bins are right-closed, ``B_m = ((m-1)/M, m/M]``; a confidence of exactly
``m/M`` lands in bin ``m``.  MMCE and weighted MMCE accept a differentiable
confidence tensor so they can be used as training regularizers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class MetricError(ValueError):
    """Invalid input to a calibration metric."""


class ConfidenceRecord(NamedTuple):
    r: float
    c: int


@dataclass
class Records:
    """Column-wise collection of (confidence, correctness) pairs.

    ``r`` may be a Tensor when the records feed a training loss.
    """

    r: np.ndarray | Tensor
    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        r = self.r.data if isinstance(self.r, Tensor) else np.asarray(self.r, dtype=np.float64).reshape(-1)
        if not isinstance(self.r, Tensor):
            self.r = r
        if r.shape != self.c.shape:
            raise MetricError(f"r and c lengths differ: {r.shape} vs {self.c.shape}")
        if np.any((self.c != 0) & (self.c != 1)):
            raise MetricError("correctness scores must be 0 or 1")
        if r.size and (np.any(r <= 0) or np.any(r > 1 + 1e-12)):
            raise MetricError("confidences must lie in (0, 1]")

    @property
    def r_values(self) -> np.ndarray:
        return self.r.data if isinstance(self.r, Tensor) else self.r

    def __len__(self) -> int:
        return int(self.c.size)

    def __iter__(self) -> Iterator[ConfidenceRecord]:
        for r, c in zip(self.r_values, self.c):
            yield ConfidenceRecord(float(r), int(c))

    def subset(self, mask) -> "Records":
        mask = np.asarray(mask, dtype=bool)
        return Records(self.r_values[mask], self.c[mask])

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, int]]) -> "Records":
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros(0), np.zeros(0))
        r, c = zip(*pairs)
        return cls(np.asarray(r, dtype=np.float64), np.asarray(c, dtype=np.float64))


def as_records(records) -> Records:
    if isinstance(records, Records):
        return records
    return Records.from_pairs(records)


@dataclass(frozen=True)
class KernelSpec:
    """Laplacian kernel ``exp(-|r_i - r_j| / bandwidth)``."""

    bandwidth: float = 0.4
    family: str = "laplacian"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise MetricError("kernel bandwidth must be positive")
        if self.family != "laplacian":
            raise MetricError(f"unsupported kernel family {self.family!r}")

    def __call__(self, a: float, b: float) -> float:
        return float(np.exp(-abs(a - b) / self.bandwidth))


TRAIN_KERNEL = KernelSpec(0.4)
SELECTOR_KERNEL = KernelSpec(0.2)


def score_records(probs, labels) -> Records:
    """Confidence ``max_y p`` and correctness of the argmax for each example."""
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1:
        probs = probs[None, :]
        labels = labels.reshape(1)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise MetricError(f"probabilities {probs.shape} and labels {labels.shape} do not align")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.all(labels == np.round(labels))):
        raise MetricError(f"labels must be integers in [0, {k})")
    pred = np.argmax(probs, axis=1)
    r = probs[np.arange(len(pred)), pred]
    return Records(r, (pred == labels.astype(np.int64)).astype(np.float64))


# ---------------------------------------------------------------------------
# Binning


def bin_edges(n_bins: int) -> np.ndarray:
    if n_bins < 1:
        raise MetricError("bin count must be >= 1")
    return np.arange(n_bins + 1, dtype=np.float64) / n_bins


def bin_index(values, n_bins: int) -> np.ndarray:
    """1-based right-closed bin index of each value in [0, 1]; 0 maps to bin 1."""
    edges = bin_edges(n_bins)
    idx = np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="left")
    return np.clip(idx, 1, n_bins)


@dataclass
class BinStats:
    lo: float
    hi: float
    count: int
    conf: float
    acc: float
    displayed: bool


@dataclass
class ReliabilityDiagram:
    n_bins: int
    bins: list[BinStats]
    min_count: int = 0

    @property
    def counts(self) -> np.ndarray:
        return np.array([b.count for b in self.bins])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "conf", "acc", "displayed"])
        for b in self.bins:
            conf = "" if b.count == 0 else repr(b.conf)
            acc = "" if b.count == 0 else repr(b.acc)
            w.writerow([repr(b.lo), repr(b.hi), b.count, conf, acc, int(b.displayed)])
        return buf.getvalue()


def _bin_stats(rec: Records, n_bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = rec.r_values
    idx = bin_index(r, n_bins) - 1
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=r, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=rec.c, minlength=n_bins)
    return counts, conf_sum, acc_sum


def reliability_diagram(records, n_bins: int = 15, min_count_for_display: int = 0) -> ReliabilityDiagram:
    """Per-bin count, mean confidence and accuracy.

    Bins with fewer than ``min_count_for_display`` records are flagged as
    hidden; they are still part of the diagram and of the ECE.
    """
    rec = as_records(records)
    edges = bin_edges(n_bins)
    counts, conf_sum, acc_sum = _bin_stats(rec, n_bins)
    bins = []
    for m in range(n_bins):
        n = int(counts[m])
        conf = conf_sum[m] / n if n else float("nan")
        acc = acc_sum[m] / n if n else float("nan")
        bins.append(BinStats(float(edges[m]), float(edges[m + 1]), n, float(conf), float(acc),
                             n > 0 and n >= min_count_for_display))
    return ReliabilityDiagram(n_bins, bins, min_count_for_display)


def ece(records, n_bins: int = 15) -> float:
    """Expected calibration error, ``sum_m |B_m|/N * |acc(B_m) - conf(B_m)|``."""
    rec = as_records(records)
    n = len(rec)
    if n == 0:
        raise MetricError("ECE of an empty record set is undefined")
    counts, conf_sum, acc_sum = _bin_stats(rec, n_bins)
    # |B_m| * |acc - conf| = |acc_sum - conf_sum|; empty bins vanish.
    return float(np.sum(np.abs(acc_sum - conf_sum)) / n)


def accuracy(records) -> float:
    rec = as_records(records)
    if len(rec) == 0:
        raise MetricError("accuracy of an empty record set is undefined")
    return float(rec.c.mean())


# ---------------------------------------------------------------------------
# Kernel calibration errors


def kernel_matrix(r, kernel: KernelSpec = TRAIN_KERNEL) -> Tensor:
    """Pairwise Laplacian kernel matrix built from autodiff primitives."""
    r = ad.as_tensor(r)
    n = r.shape[0]
    col = r.reshape((n, 1))
    grid = ad.matmul(col, np.ones((1, n), dtype=r.dtype))
    return ad.exp(ad.abs(grid - grid.T) * (-1.0 / kernel.bandwidth))


def quadratic_form(v, k) -> Tensor:
    """``v^T K v`` for a vector ``v`` and square matrix ``K``."""
    v = ad.as_tensor(v)
    return ad.sum(v * ad.matmul(k, v))


def _sqrt_clamped(inner: Tensor) -> Tensor:
    if inner.data < 0:
        # Round-off only; the true quadratic form is PSD.
        inner = inner * 0.0
    return ad.sqrt(inner)


def mmce(records, kernel: KernelSpec = TRAIN_KERNEL) -> Tensor:
    """MMCE, ``sqrt(sum_ij (c_i - r_i)(c_j - r_j) k(r_i, r_j) / N^2)``.

    Returns a scalar tensor; differentiable when ``records.r`` is a tensor.
    """
    rec = as_records(records)
    n = len(rec)
    if n == 0:
        raise MetricError("MMCE of an empty record set is undefined")
    r = ad.as_tensor(rec.r)
    v = (ad.as_tensor(rec.c.astype(r.dtype)) - r) * (1.0 / n)
    return _sqrt_clamped(quadratic_form(v, kernel_matrix(r, kernel)))


def weighted_mmce(records, kernel: KernelSpec = TRAIN_KERNEL) -> Tensor:
    """Class-balanced MMCE that normalizes correct and incorrect groups separately.

    Incorrect records enter with weight ``-r_i / (N - n_c)`` and correct ones
    with ``(1 - r_i) / n_c``; the result is the square root of the kernel
    quadratic form in those weights, which expands to the three-term sum over
    (incorrect, incorrect), (correct, correct) and the doubled cross pairs.
    Falls back to :func:`mmce` when either group is empty.
    """
    rec = as_records(records)
    n = len(rec)
    if n == 0:
        raise MetricError("MMCE of an empty record set is undefined")
    n_c = float(rec.c.sum())
    if n_c == 0 or n_c == n:
        return mmce(rec, kernel)
    r = ad.as_tensor(rec.r)
    c = rec.c.astype(r.dtype)
    scale = c / n_c + (1.0 - c) / (n - n_c)
    v = (ad.as_tensor(c) - r) * scale
    return _sqrt_clamped(quadratic_form(v, kernel_matrix(r, kernel)))


def records_from_arrays(r: Sequence[float], c: Sequence[int]) -> Records:
    return Records(np.asarray(r, dtype=np.float64), np.asarray(c, dtype=np.float64))
