"""Non-parametric outlier scores over last-hidden-layer features.

Four scorers are fitted on a set of training features ``{z_i}``:

* ``kde``: mean Gaussian kernel ``exp(-||z - z_i||^2 / h)``, in (0, 1].
* ``iforest``: isolation-forest score ``2 ** (-mean_depth / c(psi))``, in (0, 1].
* ``ocsvm``: one-class SVM decision value ``sum_i a_i k(z, z_i) - rho``.
* ``knn``: Euclidean distance to the k-th nearest training feature.

Higher KDE/OCSVM values mean more inlier; higher forest/kNN values mean
more outlying.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .models import MlpParams, VariationalParams, detach, features, sample_theta

log = logging.getLogger(__name__)

OUTLIER_FORMAT = "calibrate-lab/outlier/v1"


class OutlierError(ValueError):
    pass


class OutlierScores(NamedTuple):
    kde: float
    iforest: float
    ocsvm: float
    knn: float


@dataclass(frozen=True)
class OutlierConfig:
    k: int = 10
    n_trees: int = 100
    subsample: int = 256
    nu: float = 0.1
    svm_tol: float = 1e-6
    svm_max_sweeps: int = 2000
    max_train: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.n_trees < 1 or self.subsample < 1:
            raise OutlierError("k, n_trees and subsample must be >= 1")
        if self.max_train < self.k + 1:
            raise OutlierError("max_train must exceed k")
        if not 0 < self.nu <= 1:
            raise OutlierError("nu must lie in (0, 1]")


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, accumulated one dimension at a time.

    Avoids the ``|a|^2 + |b|^2 - 2ab`` expansion so that identical points are
    at distance exactly 0 and results match a naive per-pair loop.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    out = np.zeros((a.shape[0], b.shape[0]))
    for j in range(a.shape[1]):
        d = a[:, j, None] - b[None, :, j]
        out += d * d
    return out


def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1))) if n >= 1 else 0.0


def average_path_length(n: int) -> float:
    """``c(n) = 2 H(n-1) - 2 (n-1) / n``: expected unsuccessful-search depth."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


# ---------------------------------------------------------------------------
# Isolation forest


@dataclass
class IsolationTree:
    """Array-encoded tree; leaves have ``feature == -1`` and store their size."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    def path_lengths(self, z: np.ndarray) -> np.ndarray:
        node = np.zeros(len(z), dtype=np.int64)
        depth = np.zeros(len(z))
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = z[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            depth[idx] += 1.0
            active = self.feature[node] >= 0
        correction = np.array([average_path_length(int(s)) for s in self.size[node]])
        return depth + correction

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "size")}

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["size"], dtype=np.int64))


def _grow_tree(x: np.ndarray, rng: np.random.Generator, height_limit: int) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node(n):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        return len(feature) - 1

    root = new_node(len(x))
    stack = [(root, np.arange(len(x)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= height_limit or len(rows) <= 1:
            continue
        sub = x[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.nonzero(hi > lo)[0]
        if candidates.size == 0:
            continue
        q = int(candidates[rng.integers(candidates.size)])
        p = float(rng.uniform(lo[q], hi[q]))
        mask = sub[:, q] < p
        if mask.all() or not mask.any():
            # uniform() can return exactly lo; keep the split proper.
            p = float(hi[q])
            mask = sub[:, q] < p
        lnode = new_node(int(mask.sum()))
        rnode = new_node(int((~mask).sum()))
        feature[node], threshold[node], left[node], right[node] = q, p, lnode, rnode
        stack.append((rnode, rows[~mask], depth + 1))
        stack.append((lnode, rows[mask], depth + 1))
    return IsolationTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                         np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                         np.asarray(size, dtype=np.int64))


# ---------------------------------------------------------------------------
# One-class SVM


def solve_ocsvm_dual(kmat: np.ndarray, tol: float = 1e-6, max_sweeps: int = 2000) -> tuple[np.ndarray, bool, float]:
    """Minimize ``a^T K a`` over the probability simplex.

    Pairwise coordinate steps move mass between the most and least
    favourable support points (exact line search along ``e_i - e_j``) until
    the duality gap ``max_{a_i>0} grad_i - min grad`` falls below ``tol``.

    Returns:
        ``(alpha, converged, final_gap)``.
    """
    n = kmat.shape[0]
    alpha = np.full(n, 1.0 / n)
    grad = kmat @ alpha
    gap = math.inf
    diag = np.diag(kmat)
    for _ in range(max_sweeps * n):
        support = alpha > 0
        i = int(np.argmax(np.where(support, grad, -np.inf)))
        j = int(np.argmin(grad))
        gap = float(grad[i] - grad[j])
        if gap <= tol:
            return alpha, True, gap
        curv = diag[i] + diag[j] - 2.0 * kmat[i, j]
        step = alpha[i] if curv <= 0 else min(alpha[i], gap / curv)
        alpha[i] -= step
        alpha[j] += step
        if alpha[i] < 0:
            alpha[i] = 0.0
        grad += step * (kmat[:, j] - kmat[:, i])
    return alpha, False, gap


# ---------------------------------------------------------------------------
# Fitted models


@dataclass
class OutlierModels:
    train_features: np.ndarray
    kde_h: float
    trees: list[IsolationTree]
    forest_c: float
    svm_alpha: np.ndarray
    svm_rho: float
    svm_sigma: float
    k: int
    config: OutlierConfig = field(default_factory=OutlierConfig)
    warnings: list[str] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.train_features.shape[1])

    def svm_kernel(self, sq: np.ndarray) -> np.ndarray:
        return np.exp(-sq / (2.0 * self.svm_sigma**2))


def _scott_h(z: np.ndarray) -> float:
    n, d = z.shape
    sigma = math.sqrt(float(np.mean(np.var(z, axis=0)))) if n > 1 else 0.0
    if sigma == 0.0:
        return 1.0
    bw = sigma * n ** (-1.0 / (d + 4))
    return 2.0 * bw * bw


def fit(train_features, config: OutlierConfig = OutlierConfig()) -> OutlierModels:
    """Fit all four scorers.

    Raises:
        OutlierError: fewer than ``k`` features (``k + 1`` when more than one
            is available), or non-finite features.
    """
    z = np.asarray(train_features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise OutlierError("features must be a non-empty (N, d) matrix")
    if not np.all(np.isfinite(z)):
        raise OutlierError("features must be finite")
    n = z.shape[0]
    if config.k > n or (n > 1 and n < config.k + 1):
        raise OutlierError(f"need at least k+1={config.k + 1} training features, got {n}")
    rng = np.random.default_rng(config.seed)
    warnings: list[str] = []
    if n > config.max_train:
        # Quadratic-cost scorers; keep a seeded subsample of the features.
        z = z[np.sort(rng.choice(n, size=config.max_train, replace=False))]
        n = config.max_train

    psi = min(config.subsample, n)
    height_limit = math.ceil(math.log2(psi)) if psi > 1 else 0
    trees = []
    for _ in range(config.n_trees):
        rows = np.sort(rng.choice(n, size=psi, replace=False))
        trees.append(_grow_tree(z[rows], rng, height_limit))
    # c < 1 for psi < 2 would make the score ill-defined.
    forest_c = average_path_length(psi) if psi >= 2 else 1.0

    sq = sq_distances(z, z)
    off = sq[np.triu_indices(n, 1)]
    sigma = float(np.median(np.sqrt(off))) if off.size else 1.0
    if sigma == 0.0:
        sigma = 1.0
    kmat = np.exp(-sq / (2.0 * sigma**2))
    alpha, converged, gap = solve_ocsvm_dual(kmat, config.svm_tol, config.svm_max_sweeps)
    if not converged:
        msg = f"OCSVM dual did not reach tol {config.svm_tol} in {config.svm_max_sweeps} sweeps (gap {gap:.3g})"
        log.warning(msg)
        warnings.append(msg)
    alpha = np.clip(alpha, 0.0, None)
    alpha = alpha / alpha.sum()
    decision = kmat @ alpha
    m = max(1, math.ceil(config.nu * n))
    rho = float(np.sort(decision)[m - 1])

    return OutlierModels(z.copy(), _scott_h(z), trees, forest_c, alpha, rho, sigma, config.k, config, warnings)


def _batch(models: OutlierModels, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != models.dim:
        raise OutlierError(f"features of shape {z.shape} do not match fitted dim {models.dim}")
    return z


def kde_scores(models: OutlierModels, z) -> np.ndarray:
    sq = sq_distances(_batch(models, z), models.train_features)
    return np.mean(np.exp(-sq / models.kde_h), axis=1)


def iforest_scores(models: OutlierModels, z) -> np.ndarray:
    z = _batch(models, z)
    total = np.zeros(len(z))
    for tree in models.trees:
        total += tree.path_lengths(z)
    return 2.0 ** (-total / (len(models.trees) * models.forest_c))


def ocsvm_scores(models: OutlierModels, z) -> np.ndarray:
    sq = sq_distances(_batch(models, z), models.train_features)
    return models.svm_kernel(sq) @ models.svm_alpha - models.svm_rho


def knn_scores(models: OutlierModels, z, k: int | None = None) -> np.ndarray:
    k = models.k if k is None else k
    if not 1 <= k <= len(models.train_features):
        raise OutlierError(f"k={k} must lie in [1, {len(models.train_features)}]")
    sq = sq_distances(_batch(models, z), models.train_features)
    return np.sqrt(np.sort(sq, axis=1, kind="stable")[:, k - 1])


def kde_score(models, z) -> float:
    return float(kde_scores(models, z)[0])


def iforest_score(models, z) -> float:
    return float(iforest_scores(models, z)[0])


def ocsvm_score(models, z) -> float:
    return float(ocsvm_scores(models, z)[0])


def knn_score(models, z, k: int | None = None) -> float:
    return float(knn_scores(models, z, k)[0])


def score_matrix(models: OutlierModels, z) -> np.ndarray:
    """(N, 4) matrix with columns kde, iforest, ocsvm, knn."""
    z = _batch(models, z)
    return np.stack([kde_scores(models, z), iforest_scores(models, z),
                     ocsvm_scores(models, z), knn_scores(models, z)], axis=1)


def score_vector(models: OutlierModels, z) -> OutlierScores:
    row = score_matrix(models, z)[0]
    return OutlierScores(*(float(v) for v in row))


def avg_score_matrix(models: OutlierModels, model: MlpParams | VariationalParams, x,
                     ensemble_size: int = 20, rng: np.random.Generator | None = None) -> np.ndarray:
    """Scores averaged over posterior draws, re-extracting features per draw.

    The scorers themselves stay fixed; only the features move with ``theta``.
    A point-estimate model gives its single-``theta`` scores.
    """
    model = detach(model)
    if isinstance(model, MlpParams):
        return score_matrix(models, features(model, x))
    if rng is None:
        raise OutlierError("a random generator is required for Bayesian averaging")
    if ensemble_size < 1:
        raise OutlierError("ensemble_size must be >= 1")
    total = None
    for _ in range(ensemble_size):
        s = score_matrix(models, features(sample_theta(model, rng), x))
        total = s if total is None else total + s
    return total / ensemble_size


def avg_score_vector(models, model, x, ensemble_size: int = 20, rng=None) -> OutlierScores:
    row = avg_score_matrix(models, model, np.atleast_2d(x), ensemble_size, rng)[0]
    return OutlierScores(*(float(v) for v in row))


# ---------------------------------------------------------------------------
# Serialization


def to_dict(models: OutlierModels) -> dict:
    c = models.config
    return {
        "format": OUTLIER_FORMAT,
        "config": {"k": c.k, "n_trees": c.n_trees, "subsample": c.subsample, "nu": c.nu,
                   "svm_tol": c.svm_tol, "svm_max_sweeps": c.svm_max_sweeps, "max_train": c.max_train,
                   "seed": c.seed},
        "train_features": models.train_features.tolist(),
        "kde_h": models.kde_h,
        "forest_c": models.forest_c,
        "trees": [t.to_dict() for t in models.trees],
        "svm": {"alpha": models.svm_alpha.tolist(), "rho": models.svm_rho, "sigma": models.svm_sigma},
        "k": models.k,
        "warnings": list(models.warnings),
    }


def from_dict(d: dict) -> OutlierModels:
    if d.get("format") != OUTLIER_FORMAT:
        raise OutlierError(f"unsupported outlier model format {d.get('format')!r}")
    return OutlierModels(
        np.asarray(d["train_features"], dtype=np.float64),
        float(d["kde_h"]),
        [IsolationTree.from_dict(t) for t in d["trees"]],
        float(d["forest_c"]),
        np.asarray(d["svm"]["alpha"], dtype=np.float64),
        float(d["svm"]["rho"]),
        float(d["svm"]["sigma"]),
        int(d["k"]),
        OutlierConfig(**d["config"]),
        list(d.get("warnings", [])),
    )


def save(path: str | Path, models: OutlierModels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(models)) + "\n", encoding="utf-8")
    return path


def load(path: str | Path) -> OutlierModels:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
