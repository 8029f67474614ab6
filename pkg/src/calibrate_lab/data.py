"""Synthetic tasks, OOD inputs, deterministic splits and CSV ingestion.

CSV files are UTF-8 with a mandatory header ``x0,...,x{d-1}[,label]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TASKS = ("two_moons", "gaussian_blobs")
OOD_MODES = ("ring", "shift", "rotate")
TAGS = ("train", "val", "test", "uncertainty", "ood_test", "raw")


class DataError(ValueError):
    """Malformed or inconsistent data."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    tag: str = "raw"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise DataError(f"inputs must be an (N, d) matrix, got shape {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise DataError("labels and inputs disagree on N")
            if self.labels.size and self.labels.min() < 0:
                raise DataError("labels must be non-negative class indices")
        if self.tag not in TAGS:
            raise DataError(f"unknown provenance tag {self.tag!r}")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def n_classes(self) -> int:
        if self.labels is None or self.labels.size == 0:
            return 0
        return int(self.labels.max()) + 1

    def take(self, idx, tag: str | None = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.inputs[idx], labels, tag or self.tag)


def _balanced_labels(n: int, k: int) -> np.ndarray:
    return np.arange(n) % k


def make_synthetic(task: str, n: int, noise: float = 0.1, seed: int = 0, n_classes: int = 2) -> Dataset:
    """Draw ``n`` labelled points from a 2-D toy task.

    ``two_moons`` is the classic pair of interleaved half circles;
    ``gaussian_blobs`` places ``n_classes`` isotropic clusters of std
    ``noise`` on a circle of radius 3.  Class counts differ by at most one.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng(seed)
    if task == "two_moons":
        labels = _balanced_labels(n, 2)
        t = rng.uniform(0.0, math.pi, size=n)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where(labels[:, None] == 0, outer, inner)
    else:
        if n_classes < 2:
            raise DataError("gaussian_blobs needs n_classes >= 2")
        labels = _balanced_labels(n, n_classes)
        angles = 2 * math.pi * np.arange(n_classes) / n_classes
        centers = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        x = centers[labels]
    x = x + noise * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return Dataset(x[perm], labels[perm], "raw")


def _task_center(task: str) -> np.ndarray:
    return np.array([0.5, 0.25]) if task == "two_moons" else np.zeros(2)


def make_ood(base_task: str, mode: str, n: int, magnitude: float, seed: int = 0,
             base_noise: float = 0.1, tag: str = "uncertainty") -> Dataset:
    """Unlabelled inputs whose distribution departs from ``base_task``.

    * ``ring``: points on a circle of radius ``magnitude`` around the task's
      centre, with 5% radial jitter.
    * ``shift``: task inputs each displaced by ``magnitude`` in a uniformly
      random direction.
    * ``rotate``: task inputs rotated by ``magnitude`` radians about the centre.
    """
    if mode not in OOD_MODES:
        raise DataError(f"unknown OOD mode {mode!r}; expected one of {OOD_MODES}")
    if not magnitude > 0:
        raise DataError("OOD magnitude must be positive")
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    center = _task_center(base_task)
    if mode == "ring":
        angle = rng.uniform(0.0, 2 * math.pi, size=n)
        radius = magnitude * (1.0 + 0.05 * rng.standard_normal(n))
        x = center + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    else:
        base = make_synthetic(base_task, n, base_noise, int(rng.integers(2**31))).inputs
        if mode == "shift":
            angle = rng.uniform(0.0, 2 * math.pi, size=n)
            x = base + magnitude * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        else:
            c, s = math.cos(magnitude), math.sin(magnitude)
            rot = np.array([[c, -s], [s, c]])
            x = (base - center) @ rot.T + center
    return Dataset(x, None, tag)


def split(dataset: Dataset, fractions, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint (train, val, test) partition with the given fractions."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(dataset.take(np.sort(p), tag) for p, tag in zip(parts, ("train", "val", "test")))


@dataclass(frozen=True)
class CsvSchema:
    """Expected layout: ``n_features`` columns (inferred if None) + optional label."""

    n_features: int | None = None
    label: str = "optional"  # "required" | "optional" | "absent"


def load_csv(path: str | Path, schema: CsvSchema = CsvSchema(), tag: str = "raw") -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        has_label = bool(header) and header[-1] == "label"
        feats = header[:-1] if has_label else header
        if feats != [f"x{i}" for i in range(len(feats))] or not feats:
            raise DataError(f"{path}: header must be x0,...,x{{d-1}}[,label], got {','.join(header)}")
        if schema.n_features is not None and len(feats) != schema.n_features:
            raise DataError(f"{path}: expected {schema.n_features} feature columns, found {len(feats)}")
        if schema.label == "required" and not has_label:
            raise DataError(f"{path}: missing required 'label' column")
        if schema.label == "absent" and has_label:
            raise DataError(f"{path}: unexpected 'label' column")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} columns, got {len(row)}")
            values = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{line_no}: column {col!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{line_no}: column {col!r}: non-finite value {cell!r}")
                values.append(v)
            if has_label:
                lab = values.pop()
                if lab != int(lab) or lab < 0:
                    raise DataError(f"{path}:{line_no}: column 'label': not a class index {row[-1]!r}")
                labels.append(int(lab))
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.asarray(rows), np.asarray(labels) if has_label else None, tag)


def save_csv(path: str | Path, dataset: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"x{i}" for i in range(dataset.dim)]
    if dataset.labels is not None:
        header.append("label")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.inputs[i]]
            if dataset.labels is not None:
                row.append(int(dataset.labels[i]))
            w.writerow(row)
    return path
