"""Training objectives for the frequentist and Bayesian method families.

The raw terms follow the sum convention (:func:`cross_entropy` and
:func:`ocm_term` add over examples).  :func:`assemble` turns them into a
per-step minibatch loss::

    total = CE_sum / B + beta * KL / N_train + lam * MMCE + gamma * OCM_sum / B_u

which is the full-data objective divided by ``N_train`` for the CE and KL
parts, with the kernel calibration error (already a normalized statistic)
and the per-example OCM term weighted directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import TRAIN_KERNEL, KernelSpec, Records, mmce, weighted_mmce
from .models import MlpParams, PriorSpec, VariationalParams, log_predict, sample_theta

BASE_METHODS = ("fnn", "cfnn", "bnn", "cbnn")


class ObjectiveError(ValueError):
    """Invalid inputs to a training objective."""


@dataclass(frozen=True)
class Method:
    """One of the eight method variants, e.g. ``Method.parse("cbnn_ocm")``."""

    base: str
    ocm: bool = False

    def __post_init__(self):
        if self.base not in BASE_METHODS:
            raise ObjectiveError(f"unknown method {self.base!r}; expected one of {BASE_METHODS}")

    @classmethod
    def parse(cls, name: str) -> "Method":
        name = name.strip().lower().replace("-", "_")
        if name.endswith("_ocm"):
            return cls(name[: -len("_ocm")], True)
        return cls(name, False)

    @property
    def bayesian(self) -> bool:
        return self.base in ("bnn", "cbnn")

    @property
    def calibrated(self) -> bool:
        return self.base in ("cfnn", "cbnn")

    @property
    def name(self) -> str:
        return self.base + ("_ocm" if self.ocm else "")

    def without_ocm(self) -> "Method":
        return Method(self.base, False)


ALL_METHODS = tuple(Method(b, o).name for o in (False, True) for b in BASE_METHODS)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.00035
    lam: float = 0.0
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.beta, self.lam, self.gamma) < 0:
            raise ObjectiveError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Per-step loss terms; ``total`` is the differentiable tensor."""

    ce: float
    kl: float
    calib: float
    ocm: float
    total: Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    def as_dict(self) -> dict:
        return {"ce": self.ce, "kl": self.kl, "calib": self.calib, "ocm": self.ocm, "total": self.total_value}


def _nonempty(x, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ObjectiveError(f"{what} batch is empty")
    return x


def cross_entropy(params: MlpParams, x, y) -> Tensor:
    """Summed negative log-likelihood ``-sum_i log p(y_i | x_i, theta)``."""
    x = _nonempty(x, "training")
    y = np.asarray(y, dtype=np.int64)
    return -ad.sum(ad.pick(log_predict(params, x), y))


def kl_diag_gaussian(phi: VariationalParams, prior: PriorSpec) -> Tensor:
    """Closed-form ``KL(N(mu, diag(exp(rho))) || N(0, prior.variance I))``."""
    mu, rho = ad.as_tensor(phi.mu), ad.as_tensor(phi.rho)
    inv2 = 1.0 / (2.0 * prior.variance)
    per = (
        0.5 * math.log(prior.variance)
        - 0.5 * rho
        + (ad.exp(rho) + mu * mu) * inv2
        - 0.5
    )
    return ad.sum(per)


def kl_monte_carlo(phi: VariationalParams, prior: PriorSpec, n_samples: int, rng: np.random.Generator,
                   chunk: int = 100_000) -> float:
    """Sampling estimate of ``E_q[log q(theta) - log p(theta)]``."""
    mu = np.asarray(phi.mu.data if isinstance(phi.mu, Tensor) else phi.mu, dtype=np.float64)
    rho = np.asarray(phi.rho.data if isinstance(phi.rho, Tensor) else phi.rho, dtype=np.float64)
    var = np.exp(rho)
    total = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        eps = rng.standard_normal((m, mu.size))
        theta = mu + np.sqrt(var) * eps
        log_q = -0.5 * (np.log(2 * np.pi * var) + eps**2).sum(axis=1)
        log_p = -0.5 * (np.log(2 * np.pi * prior.variance) + theta**2 / prior.variance).sum(axis=1)
        total += float(np.sum(log_q - log_p))
        done += m
    return total / n_samples


def _draws(model, mc_samples: int, rng):
    if isinstance(model, VariationalParams):
        if mc_samples < 1:
            raise ObjectiveError("mc_samples must be >= 1")
        if rng is None:
            raise ObjectiveError("a random generator is required for variational objectives")
        return [sample_theta(model, rng) for _ in range(mc_samples)]
    return [model]


def free_energy(phi: VariationalParams, x, y, prior: PriorSpec, beta: float, mc_samples: int,
                rng: np.random.Generator) -> Tensor:
    """``E_q[CE(theta)] + beta * KL(q || p)`` with reparameterized samples."""
    draws = _draws(phi, mc_samples, rng)
    expected = ad.sum_list([cross_entropy(t, x, y) for t in draws]) * (1.0 / len(draws))
    return expected + beta * kl_diag_gaussian(phi, prior)


def ocm_term(model: MlpParams | VariationalParams, xu, mc_samples: int = 1,
             rng: np.random.Generator | None = None) -> Tensor:
    """``-sum_i sum_y log p(y | x_u[i], theta)``, averaged over q when variational."""
    xu = _nonempty(xu, "uncertainty")
    draws = _draws(model, mc_samples, rng)
    terms = [-ad.sum(log_predict(t, xu)) for t in draws]
    return ad.sum_list(terms) * (1.0 / len(terms))


def _calibration(logp: Tensor, y: np.ndarray, kernel: KernelSpec, weighted: bool) -> Tensor:
    top, idx = ad.max_with_index(logp)
    rec = Records(ad.exp(top), (idx == y).astype(np.float64))
    return weighted_mmce(rec, kernel) if weighted else mmce(rec, kernel)


def assemble(
    method: Method | str,
    model: MlpParams | VariationalParams,
    batch: tuple[np.ndarray, np.ndarray],
    weights: LossWeights,
    *,
    n_train: int,
    prior: PriorSpec | None = None,
    uncertainty: np.ndarray | None = None,
    calib_batch: tuple[np.ndarray, np.ndarray] | None = None,
    mc_samples: int = 1,
    rng: np.random.Generator | None = None,
    kernel: KernelSpec = TRAIN_KERNEL,
    weighted: bool = False,
    use_calib: bool = True,
) -> LossBreakdown:
    """Minibatch loss for ``method`` with every term reported separately.

    ``calib_batch`` switches to the split-data variant where the calibration
    error is measured on a separate batch.  ``use_calib=False`` drops the
    calibration term even for calibrated methods.
    """
    if isinstance(method, str):
        method = Method.parse(method)
    if method.bayesian != isinstance(model, VariationalParams):
        kind = "VariationalParams" if method.bayesian else "MlpParams"
        raise ObjectiveError(f"method {method.name} needs {kind}")
    if method.ocm and (uncertainty is None or len(uncertainty) == 0):
        raise ObjectiveError(f"method {method.name} requires an uncertainty batch")
    x, y = batch
    x = _nonempty(x, "training")
    y = np.asarray(y, dtype=np.int64)
    b = x.shape[0]
    prior = prior or PriorSpec()

    ce_terms, cal_terms, ocm_terms = [], [], []
    with_calib = method.calibrated and use_calib
    for theta in _draws(model, mc_samples, rng):
        logp = log_predict(theta, x)
        ce_terms.append(-ad.sum(ad.pick(logp, y)) * (1.0 / b))
        if with_calib:
            if calib_batch is None:
                cal_terms.append(_calibration(logp, y, kernel, weighted))
            else:
                cx, cy = calib_batch
                cy = np.asarray(cy, dtype=np.int64)
                cal_terms.append(_calibration(log_predict(theta, cx), cy, kernel, weighted))
        if method.ocm:
            ocm_terms.append(-ad.sum(log_predict(theta, uncertainty)) * (1.0 / len(uncertainty)))

    s = 1.0 / len(ce_terms)
    ce = ad.sum_list(ce_terms) * s
    total = ce
    kl_val = cal_val = ocm_val = 0.0
    if method.bayesian:
        kl = kl_diag_gaussian(model, prior) * (1.0 / n_train)
        kl_val = float(kl.data)
        total = total + weights.beta * kl
    if cal_terms:
        cal = ad.sum_list(cal_terms) * s
        cal_val = float(cal.data)
        # a zero-weight branch in the graph would reorder gradient accumulation
        if weights.lam != 0:
            total = total + weights.lam * cal
    if ocm_terms:
        oc = ad.sum_list(ocm_terms) * s
        ocm_val = float(oc.data)
        if weights.gamma != 0:
            total = total + weights.gamma * oc
    return LossBreakdown(float(ce.data), kl_val, cal_val, ocm_val, total, weights)
