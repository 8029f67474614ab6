"""Confidence histograms, total-variation distance and OOD detection probability."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .metrics import bin_edges, bin_index


class OodError(ValueError):
    pass


@dataclass
class ConfidenceHistogram:
    """Normalized mass per equal-width, right-closed bin on [0, 1]."""

    edges: np.ndarray
    masses: np.ndarray
    count: int

    @property
    def n_bins(self) -> int:
        return len(self.masses)


def confidence_histogram(confidences, bins: int = 20) -> ConfidenceHistogram:
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if conf.size == 0:
        raise OodError("cannot build a histogram from no confidences")
    if np.any(conf < 0) or np.any(conf > 1):
        raise OodError("confidences must lie in [0, 1]")
    idx = bin_index(conf, bins) - 1
    counts = np.bincount(idx, minlength=bins)
    return ConfidenceHistogram(bin_edges(bins), counts / conf.size, int(conf.size))


def tv_distance(h1: ConfidenceHistogram, h2: ConfidenceHistogram) -> float:
    """Half the L1 distance between two histograms with identical edges."""
    if h1.edges.shape != h2.edges.shape or not np.array_equal(h1.edges, h2.edges):
        raise OodError("histograms must share bin edges")
    return float(0.5 * np.sum(np.abs(h1.masses - h2.masses)))


def ood_detection_probability(tv: float) -> float:
    """Optimal equal-prior detection probability ``(1 + TV) / 2``."""
    if not 0.0 <= tv <= 1.0:
        raise OodError(f"TV distance must lie in [0, 1], got {tv}")
    return 0.5 * (1.0 + tv)


def selective_tv(conf_id, accepted_id, conf_ood, accepted_ood, bins: int = 20) -> float:
    """TV between confidence distributions where rejection is its own outcome.

    Each population is histogrammed over the ``bins`` confidence bins plus one
    extra cell holding the rejected fraction.  With everything accepted this
    is exactly :func:`tv_distance` of the plain histograms.
    """

    def masses(conf, acc):
        conf = np.asarray(conf, dtype=np.float64).reshape(-1)
        acc = np.asarray(acc, dtype=bool).reshape(-1)
        if conf.size == 0:
            raise OodError("cannot build a histogram from no confidences")
        idx = bin_index(conf[acc], bins) - 1
        counts = np.bincount(idx, minlength=bins).astype(np.float64)
        return np.append(counts, conf.size - acc.sum()) / conf.size

    return float(0.5 * np.sum(np.abs(masses(conf_id, accepted_id) - masses(conf_ood, accepted_ood))))


def histogram_csv(h_id: ConfidenceHistogram, h_ood: ConfidenceHistogram) -> str:
    if not np.array_equal(h_id.edges, h_ood.edges):
        raise OodError("histograms must share bin edges")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "mass_id", "mass_ood"])
    for m in range(h_id.n_bins):
        w.writerow([repr(float(h_id.edges[m])), repr(float(h_id.edges[m + 1])),
                    repr(float(h_id.masses[m])), repr(float(h_ood.masses[m]))])
    return buf.getvalue()
