"""Selective calibration: a soft selector over (confidence, outlier scores).

The selector ``g~`` is a sigmoid-output ReLU MLP on the standardized input
``[r, s_kde, s_iforest, s_ocsvm, s_knn]``.  It is trained on records from a
frozen predictor by minimizing the unnormalized soft selective MMCE minus a
log barrier ``eta * sum log g~``; at test time an input is accepted when
``g~ >= tau`` with ``tau`` calibrated on validation outputs for a target
coverage.

Training uses the unnormalized soft objective while evaluation uses the
normalized hard selective MMCE ``sqrt(sum g_i g_j (c_i-r_i)(c_j-r_j) k_ij) /
sum g``; reports carry both names to keep them apart.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import SELECTOR_KERNEL, KernelSpec, Records, ece, kernel_matrix, quadratic_form
from .models import MlpArch, MlpParams, forward, init_mlp
from .ood import ood_detection_probability, selective_tv
from .training import AdamState, TrainingError, adam_step

log = logging.getLogger(__name__)

SELECTOR_FORMAT = "calibrate-lab/selector/v1"
N_INPUTS = 5
DEFAULT_COVERAGES = tuple(round(0.1 * i, 1) for i in range(1, 11))
# Largest double below 1; keeps g~ strictly inside (0, 1) after rounding.
_G_MAX = float(np.nextafter(1.0, 0.0))
_G_MIN = float(np.finfo(np.float64).tiny)


class SelectorError(ValueError):
    pass


@dataclass(frozen=True)
class SelectorConfig:
    """Selector training settings.

    ``iterations_per_epoch=None`` means one pass over the records in
    shuffled batches; an integer switches to that many batches sampled
    with replacement per epoch.
    """

    eta: float = 0.01
    bandwidth: float = 0.2
    coverage: float = 0.5
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    hidden: tuple[int, ...] = (64, 64)
    iterations_per_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            ("eta", self.eta, self.eta >= 0, ">= 0"),
            ("bandwidth", self.bandwidth, self.bandwidth > 0, "> 0"),
            ("coverage", self.coverage, 0 < self.coverage <= 1, "in (0, 1]"),
            ("epochs", self.epochs, self.epochs >= 0, ">= 0"),
            ("batch_size", self.batch_size, self.batch_size >= 1, ">= 1"),
            ("lr", self.lr, self.lr > 0, "> 0"),
            ("weight_decay", self.weight_decay, self.weight_decay >= 0, ">= 0"),
            ("hidden", list(self.hidden), all(h >= 1 for h in self.hidden), "a list of sizes >= 1"),
            ("iterations_per_epoch", self.iterations_per_epoch,
             self.iterations_per_epoch is None or self.iterations_per_epoch >= 1, "null or >= 1"),
        ]
        for name, value, ok, rule in checks:
            if not ok:
                raise SelectorError(f"selector.{name}: must be {rule}, got {value!r}")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.bandwidth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SelectorConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise SelectorError(f"selector.{unknown[0]}: unknown field")
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise SelectorError(f"selector: {exc}") from None

    @classmethod
    def long_regime(cls, **overrides) -> "SelectorConfig":
        """5 epochs of 50,000 resampled batches."""
        base = {"epochs": 5, "iterations_per_epoch": 50_000}
        base.update(overrides)
        return cls.from_dict(base)


@dataclass
class SelectiveRecords:
    """Per-example confidence ``r``, outlier scores ``s`` (N, 4) and correctness ``c``."""

    r: np.ndarray
    s: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if self.s.shape != (len(self.r), N_INPUTS - 1) or self.c.shape != self.r.shape:
            raise SelectorError("records need r (N,), s (N, 4) and c (N,)")
        if not np.all(np.isfinite(self.s)):
            raise SelectorError("outlier scores must be finite")
        Records(self.r, self.c)

    def __len__(self) -> int:
        return len(self.r)

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.r[:, None], self.s], axis=1)

    @property
    def records(self) -> Records:
        return Records(self.r, self.c)

    def take(self, idx) -> "SelectiveRecords":
        return SelectiveRecords(self.r[idx], self.s[idx], self.c[idx])


@dataclass
class SelectorParams:
    arch: MlpArch
    flat: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    tau: float | None = None
    meta: dict = field(default_factory=dict)


def init_selector(config: SelectorConfig, rng: np.random.Generator) -> SelectorParams:
    arch = MlpArch(N_INPUTS, config.hidden, 1)
    return SelectorParams(arch, init_mlp(arch, rng).flat)


def fit_standardization(params: SelectorParams, inputs: np.ndarray) -> SelectorParams:
    inputs = np.asarray(inputs, dtype=np.float64)
    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return SelectorParams(params.arch, params.flat, mean, std, params.tau, dict(params.meta))


def _standardize(params: SelectorParams, inputs) -> np.ndarray:
    if params.mean is None or params.std is None:
        raise SelectorError("selector standardization has not been fitted")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != N_INPUTS:
        raise SelectorError(f"selector expects {N_INPUTS} inputs, got {inputs.shape[1]}")
    return (inputs - params.mean) / params.std


def selector_logits(params: SelectorParams, inputs, flat=None) -> Tensor:
    flat = params.flat if flat is None else flat
    logits, _ = forward(MlpParams(params.arch, flat), _standardize(params, inputs))
    return logits.reshape((logits.shape[0],))


def soft_scores(params: SelectorParams, inputs) -> np.ndarray:
    """``g~`` for each row of ``inputs`` as a plain array strictly inside (0, 1)."""
    g = ad.sigmoid(selector_logits(params, inputs)).data
    return np.clip(g, _G_MIN, _G_MAX)


def soft_select(params: SelectorParams, r: float, s) -> float:
    """``g~(r, s)`` for a single input."""
    row = np.concatenate([[float(r)], np.asarray(s, dtype=np.float64).reshape(-1)])
    return float(soft_scores(params, row[None, :])[0])


def _weighted_numerator(r, c, g: Tensor, kernel: KernelSpec) -> Tensor:
    r = np.asarray(r, dtype=np.float64)
    v = g * (np.asarray(c, dtype=np.float64) - r)
    inner = quadratic_form(v, kernel_matrix(r, kernel))
    if inner.data < 0:
        # Round-off only; the quadratic form is PSD.
        inner = inner * 0.0
    return ad.sqrt(inner)


def soft_selective_mmce(params: SelectorParams | None, records: SelectiveRecords,
                        kernel: KernelSpec = SELECTOR_KERNEL, g=None) -> Tensor:
    """``sqrt(sum_ij (c_i-r_i)(c_j-r_j) g_i g_j k(r_i, r_j))``, unnormalized.

    ``g`` overrides the selector output (array or tensor), which is how the
    saturated and hand-computed cases are evaluated.
    """
    if len(records) == 0:
        raise SelectorError("soft selective MMCE needs at least one record")
    if g is None:
        g = ad.sigmoid(selector_logits(params, records.inputs))
    return _weighted_numerator(records.r, records.c, ad.as_tensor(g), kernel)


def selector_loss(params: SelectorParams, records: SelectiveRecords, eta: float,
                  kernel: KernelSpec = SELECTOR_KERNEL, flat=None) -> Tensor:
    """Soft selective MMCE minus ``eta * sum_i log g~_i``."""
    if eta < 0:
        raise SelectorError("eta must be >= 0")
    z = selector_logits(params, records.inputs, flat)
    g = ad.sigmoid(z)
    loss = _weighted_numerator(records.r, records.c, g, kernel)
    if eta:
        loss = loss - eta * ad.sum(ad.log_sigmoid(z))
    return loss


def train_selector(config: SelectorConfig, records: SelectiveRecords, params: SelectorParams | None = None
                   ) -> SelectorParams:
    """Adam training of the selector on validation records of a frozen predictor.

    Raises:
        SelectorError: on empty records.
        TrainingError: if the loss becomes non-finite.
    """
    if len(records) == 0:
        raise SelectorError("selector training needs at least one record")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    batch_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    if params is None:
        params = init_selector(config, rng)
    params = fit_standardization(params, records.inputs)
    state = AdamState()
    flat = np.array(params.flat)
    n = len(records)
    kernel = config.kernel
    for epoch in range(config.epochs):
        if config.iterations_per_epoch is None:
            perm = batch_rng.permutation(n)
            batches = [perm[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        else:
            batches = (batch_rng.integers(0, n, size=config.batch_size) for _ in range(config.iterations_per_epoch))
        for step, idx in enumerate(batches):
            leaf = Tensor(flat, requires_grad=True)
            loss = selector_loss(params, records.take(idx), config.eta, kernel, flat=leaf)
            if not math.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite selector loss at epoch {epoch} step {step}")
            grad = ad.backward(loss).get(leaf, np.zeros_like(flat))
            (flat,) = adam_step([flat], [grad], state, config.lr, weight_decay=config.weight_decay)
    return SelectorParams(params.arch, flat, params.mean, params.std, params.tau, dict(params.meta))


# ---------------------------------------------------------------------------
# Thresholding


def calibrate_threshold(g_values, coverage: float) -> float:
    """Threshold accepting ``round(coverage * N)`` of the given outputs.

    ``tau`` is the k-th largest value, so ties at ``tau`` can push the
    accepted count slightly above k.  For k = 0 the threshold sits just
    above the maximum; for k = N it is 0 so every output on any set passes.
    """
    if not 0 < coverage <= 1:
        raise SelectorError(f"coverage must lie in (0, 1], got {coverage}")
    g = np.sort(np.asarray(g_values, dtype=np.float64))[::-1]
    if g.size == 0:
        raise SelectorError("cannot calibrate a threshold on no outputs")
    k = int(round(coverage * g.size))
    if k == 0:
        return float(np.nextafter(g[0], np.inf))
    if k == g.size:
        return 0.0
    return float(g[k - 1])


def with_threshold(params: SelectorParams, tau: float) -> SelectorParams:
    return SelectorParams(params.arch, params.flat, params.mean, params.std, float(tau), dict(params.meta))


def accept(g_values, tau: float) -> np.ndarray:
    return np.asarray(g_values) >= tau


def select(params: SelectorParams, r: float, s) -> int:
    """1 iff ``g~(r, s) >= tau``."""
    if params.tau is None:
        raise SelectorError("selector threshold tau is not set")
    return int(soft_select(params, r, s) >= params.tau)


# ---------------------------------------------------------------------------
# Evaluation


def hard_selective_mmce(records, accepted, kernel: KernelSpec = SELECTOR_KERNEL) -> float:
    """Normalized selective MMCE with a binary selector.

    Equal to :func:`metrics.mmce` restricted to the accepted records.
    """
    rec = records.records if isinstance(records, SelectiveRecords) else records
    g = np.asarray(accepted, dtype=np.float64)
    total = g.sum()
    if total == 0:
        raise SelectorError("hard selective MMCE is undefined with no accepted records")
    num = _weighted_numerator(rec.r_values, rec.c, ad.as_tensor(g), kernel)
    return float(num.data) / float(total)


def selective_eval(records: SelectiveRecords, accepted, n_bins: int = 15,
                   kernel: KernelSpec = SELECTOR_KERNEL) -> dict:
    """Coverage plus accuracy, ECE and hard selective MMCE on the accepted subset.

    Conditional metrics are None when nothing is accepted.
    """
    accepted = np.asarray(accepted, dtype=bool)
    n_acc = int(accepted.sum())
    out = {"coverage": n_acc / len(records) if len(records) else 0.0, "n_accepted": n_acc}
    if n_acc == 0:
        out.update(accuracy=None, ece=None, selective_mmce=None, defined=False)
        return out
    sub = records.records.subset(accepted)
    out.update(
        accuracy=float(sub.c.mean()),
        ece=ece(sub, n_bins),
        selective_mmce=hard_selective_mmce(records, accepted, kernel),
        defined=True,
    )
    return out


def selective_classification_loss(g, log_lik) -> float:
    """Accepted-set mean negative log-likelihood ``-sum g log p / sum g``."""
    g = np.asarray(g, dtype=np.float64)
    log_lik = np.asarray(log_lik, dtype=np.float64)
    total = g.sum()
    if total <= 0:
        raise SelectorError("selective classification loss needs at least one accepted record")
    return float(-np.sum(g * log_lik) / total)


def coverage_sweep(params: SelectorParams, val: SelectiveRecords, test: SelectiveRecords,
                   coverages=DEFAULT_COVERAGES, ood: SelectiveRecords | None = None,
                   n_bins: int = 15, hist_bins: int = 20) -> list[dict]:
    """Selective metrics at each target coverage, with ``tau`` set on ``val``.

    With ``ood`` records, the OOD detection probability counts rejection as
    its own outcome besides the accepted-confidence histogram.
    """
    g_val = soft_scores(params, val.inputs)
    g_test = soft_scores(params, test.inputs)
    g_ood = soft_scores(params, ood.inputs) if ood is not None else None
    rows = []
    for xi in coverages:
        tau = calibrate_threshold(g_val, xi)
        acc = accept(g_test, tau)
        row = {"target_coverage": float(xi), "tau": tau}
        row.update(selective_eval(test, acc, n_bins))
        if ood is not None:
            tv = selective_tv(test.r, acc, ood.r, accept(g_ood, tau), hist_bins)
            row["ood_coverage"] = float(accept(g_ood, tau).mean())
            row["tv"] = tv
            row["p_d"] = ood_detection_probability(min(max(tv, 0.0), 1.0))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Benchmark


def make_poisoned_records(n: int, poison_fraction: float = 0.3, seed: int = 0,
                          poison_shift: float = 3.0) -> tuple[SelectiveRecords, np.ndarray]:
    """Clean calibrated records mixed with an overconfident, outlying block.

    Clean: ``r ~ U(0.5, 1)``, ``c ~ Bernoulli(r)``, ``s ~ N(0, I)``.
    Poisoned: ``r = 0.95``, accuracy 0.5, ``s ~ N(poison_shift, I)``.

    Returns:
        The records and a boolean mask marking the poisoned block.
    """
    if n < 1 or not 0 <= poison_fraction <= 1:
        raise SelectorError("need n >= 1 and poison_fraction in [0, 1]")
    rng = np.random.default_rng(seed)
    n_p = int(round(poison_fraction * n))
    n_c = n - n_p
    r = np.concatenate([rng.uniform(0.5, 1.0, n_c), np.full(n_p, 0.95)])
    c_clean = (rng.uniform(size=n_c) < r[:n_c]).astype(np.float64)
    c_poison = np.zeros(n_p)
    c_poison[rng.permutation(n_p)[: n_p // 2]] = 1.0
    s = np.concatenate([rng.standard_normal((n_c, 4)), poison_shift + rng.standard_normal((n_p, 4))])
    poisoned = np.concatenate([np.zeros(n_c, dtype=bool), np.ones(n_p, dtype=bool)])
    perm = rng.permutation(n)
    return SelectiveRecords(r[perm], s[perm], np.concatenate([c_clean, c_poison])[perm]), poisoned[perm]


# ---------------------------------------------------------------------------
# Serialization


def selector_to_dict(params: SelectorParams, config: SelectorConfig | None = None) -> dict:
    return {
        "format": SELECTOR_FORMAT,
        "arch": params.arch.to_dict(),
        "weights": [float(v) for v in params.flat],
        "mean": None if params.mean is None else [float(v) for v in params.mean],
        "std": None if params.std is None else [float(v) for v in params.std],
        "tau": params.tau,
        "config": None if config is None else config.to_dict(),
        "meta": params.meta,
    }


def selector_from_dict(d: dict) -> SelectorParams:
    if d.get("format") != SELECTOR_FORMAT:
        raise SelectorError(f"unsupported selector format {d.get('format')!r}")
    arch = MlpArch.from_dict(d["arch"])
    flat = np.asarray(d["weights"], dtype=np.float64)
    if flat.shape != (arch.n_params,):
        raise SelectorError("selector weights do not match the architecture")
    mean = None if d.get("mean") is None else np.asarray(d["mean"], dtype=np.float64)
    std = None if d.get("std") is None else np.asarray(d["std"], dtype=np.float64)
    return SelectorParams(arch, flat, mean, std, d.get("tau"), dict(d.get("meta") or {}))


def save_selector(path: str | Path, params: SelectorParams, config: SelectorConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(selector_to_dict(params, config), indent=1) + "\n", encoding="utf-8")
    return path


def load_selector(path: str | Path) -> SelectorParams:
    return selector_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

