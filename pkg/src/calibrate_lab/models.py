"""MLP predictor, diagonal-Gaussian variational family, and checkpoints.

All weights of a network live in one flat vector laid out layer by layer as
``W_1 (fan_in x fan_out, row-major), b_1, W_2, b_2, ...``.  Keeping a flat
vector makes the mean-field posterior a pair of plain vectors ``(mu, rho)``
with per-weight variance ``exp(rho)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "calibrate-lab/checkpoint/v1"


class ModelError(ValueError):
    """Invalid model construction, input, or checkpoint."""


@dataclass(frozen=True)
class MlpArch:
    """Layer sizes of a ReLU MLP with ``n_classes`` output logits."""

    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.n_classes < 1 or any(h < 1 for h in self.hidden):
            raise ModelError(f"invalid architecture {self}")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.n_classes]

    def layer_slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """``(weight_slice, weight_shape, bias_slice)`` per layer."""
        out = []
        offset = 0
        sizes = self.sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            out.append((w, (fan_in, fan_out), b))
        return out

    @property
    def n_params(self) -> int:
        sizes = self.sizes
        return sum((i + 1) * o for i, o in zip(sizes[:-1], sizes[1:]))

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArch":
        return cls(int(d["input_dim"]), tuple(d.get("hidden", ())), int(d["n_classes"]))


@dataclass
class MlpParams:
    """A point estimate of the weights (``flat`` may be a Tensor)."""

    arch: MlpArch
    flat: np.ndarray | Tensor

    def __post_init__(self):
        if tuple(self.flat.shape) != (self.arch.n_params,):
            raise ModelError(f"expected {self.arch.n_params} weights, got shape {self.flat.shape}")


@dataclass
class VariationalParams:
    """Mean-field Gaussian posterior ``q(theta) = N(mu, diag(exp(rho)))``."""

    arch: MlpArch
    mu: np.ndarray | Tensor
    rho: np.ndarray | Tensor

    def __post_init__(self):
        n = self.arch.n_params
        if tuple(self.mu.shape) != (n,) or tuple(self.rho.shape) != (n,):
            raise ModelError(f"mu/rho must both have shape ({n},)")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(_raw(self.rho))

    def mean_params(self) -> MlpParams:
        return MlpParams(self.arch, self.mu)


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean isotropic Gaussian prior over the flat weight vector."""

    variance: float = 1e-3

    def __post_init__(self):
        if not self.variance > 0:
            raise ModelError("prior variance must be positive")


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# Initialization


def init_mlp(arch: MlpArch, rng: np.random.Generator, dtype=np.float64) -> MlpParams:
    """He-normal weights, zero biases."""
    flat = np.zeros(arch.n_params, dtype=dtype)
    for w, (fan_in, fan_out), _ in arch.layer_slices():
        flat[w] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=fan_in * fan_out)
    return MlpParams(arch, flat)


def init_variational(
    arch: MlpArch, rng: np.random.Generator, init_std: float = 0.05, dtype=np.float64
) -> VariationalParams:
    """Means as in :func:`init_mlp`; every weight starts with std ``init_std``."""
    mu = init_mlp(arch, rng, dtype).flat
    rho = np.full(arch.n_params, 2.0 * math.log(init_std), dtype=dtype)
    return VariationalParams(arch, mu, rho)


# ---------------------------------------------------------------------------
# Forward passes


def _as_batch(arch: MlpArch, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ModelError(f"input of shape {np.shape(x)} does not match input_dim={arch.input_dim}")
    return x, single


def forward(params: MlpParams, x) -> tuple[Tensor, Tensor]:
    """Logits and last-hidden-layer features for a batch ``x`` of shape (N, d).

    With no hidden layers the features are the inputs themselves.
    """
    arch = params.arch
    xb, _ = _as_batch(arch, x)
    flat = ad.as_tensor(params.flat)
    h = ad.as_tensor(xb.astype(flat.dtype, copy=False))
    features = h
    layers = arch.layer_slices()
    for i, (w, shape, b) in enumerate(layers):
        h = ad.matmul(h, flat[w].reshape(shape)) + flat[b]
        if i < len(layers) - 1:
            h = ad.relu(h)
            features = h
    return h, features


def log_predict(params: MlpParams, x) -> Tensor:
    """Per-class log-probabilities, shape (N, K)."""
    logits, _ = forward(params, x)
    return ad.log_softmax(logits)


def predict(params: MlpParams, x) -> Tensor:
    """Class probabilities ``p(y|x, theta)``.

    Returns shape (K,) for a single input vector and (N, K) for a batch; the
    result is differentiable with respect to ``params.flat``.
    """
    _, single = _as_batch(params.arch, x)
    probs = ad.exp(log_predict(params, x))
    return probs[0] if single else probs


def features(params: MlpParams, x) -> np.ndarray:
    """Last-hidden-layer activations as a plain array, shape (N, feature_dim)."""
    _, z = forward(params, x)
    return z.data


def hard_decision(p) -> tuple[int, float]:
    """Argmax class (lowest index on ties) and its probability."""
    p = np.asarray(_raw(p))
    if p.ndim != 1 or p.size == 0:
        raise ModelError("hard_decision expects a non-empty probability vector")
    k = int(np.argmax(p))
    return k, float(p[k])


def hard_decisions(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`hard_decision` for an (N, K) array."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] == 0:
        raise ModelError("hard_decisions expects an (N, K) array")
    idx = np.argmax(probs, axis=1)
    return idx, probs[np.arange(len(idx)), idx]


# ---------------------------------------------------------------------------
# Variational sampling


def sample_theta(phi: VariationalParams, rng: np.random.Generator) -> MlpParams:
    """Reparameterized draw ``theta = mu + exp(rho / 2) * eps``.

    Stays on the autodiff graph when ``mu``/``rho`` are tensors.
    """
    eps = rng.standard_normal(phi.arch.n_params)
    mu, rho = phi.mu, phi.rho
    if isinstance(mu, Tensor) or isinstance(rho, Tensor):
        rho_t = ad.as_tensor(rho)
        eps = eps.astype(rho_t.dtype)
        return MlpParams(phi.arch, ad.as_tensor(mu) + ad.exp(rho_t * 0.5) * eps)
    mu = np.asarray(mu)
    return MlpParams(phi.arch, mu + np.exp(np.asarray(rho) * 0.5) * eps.astype(mu.dtype))


def ensemble_predict(phi: VariationalParams, x, ensemble_size: int, rng: np.random.Generator) -> np.ndarray:
    """Average of ``predict`` over ``ensemble_size`` posterior draws."""
    if ensemble_size < 1:
        raise ModelError("ensemble_size must be >= 1")
    phi = detach(phi)
    total = None
    for _ in range(ensemble_size):
        p = predict(sample_theta(phi, rng), x).data
        total = p if total is None else total + p
    return total / ensemble_size


def predict_proba(model: MlpParams | VariationalParams, x, ensemble_size: int = 20, rng=None) -> np.ndarray:
    """Plain-array predictive distribution for either model family."""
    if isinstance(model, VariationalParams):
        if rng is None:
            raise ModelError("a random generator is required for Bayesian prediction")
        return ensemble_predict(model, x, ensemble_size, rng)
    return predict(detach(model), x).data


def detach(model):
    """Copy of ``model`` with plain arrays instead of tensors."""
    if isinstance(model, VariationalParams):
        return VariationalParams(model.arch, np.array(_raw(model.mu)), np.array(_raw(model.rho)))
    return MlpParams(model.arch, np.array(_raw(model.flat)))


def param_count(params) -> int:
    """Number of scalar parameters (``mu`` and ``rho`` both count)."""
    if isinstance(params, VariationalParams):
        return 2 * params.arch.n_params
    if isinstance(params, MlpParams):
        return params.arch.n_params
    if isinstance(params, MlpArch):
        return params.n_params
    raise TypeError(f"cannot count parameters of {type(params).__name__}")


# ---------------------------------------------------------------------------
# Checkpoints
#
# Key order: format, kind, arch, then mu/rho (variational) or weights (point).


def checkpoint_dict(model: MlpParams | VariationalParams, extra: dict | None = None) -> dict:
    model = detach(model)
    out: dict = {"format": CHECKPOINT_FORMAT}
    if isinstance(model, VariationalParams):
        out["kind"] = "variational"
        out["arch"] = model.arch.to_dict()
        out["mu"] = [float(v) for v in model.mu]
        out["rho"] = [float(v) for v in model.rho]
    else:
        out["kind"] = "point"
        out["arch"] = model.arch.to_dict()
        out["weights"] = [float(v) for v in model.flat]
    if extra:
        out["meta"] = extra
    return out


def model_from_dict(d: dict) -> MlpParams | VariationalParams:
    if "arch" not in d:
        raise ModelError("checkpoint is missing 'arch'")
    arch = MlpArch.from_dict(d["arch"])
    try:
        if "mu" in d:
            return VariationalParams(arch, np.asarray(d["mu"], dtype=np.float64), np.asarray(d["rho"], dtype=np.float64))
        if "weights" in d:
            return MlpParams(arch, np.asarray(d["weights"], dtype=np.float64))
    except KeyError as exc:
        raise ModelError(f"checkpoint is missing {exc}") from None
    raise ModelError("checkpoint has neither 'mu'/'rho' nor 'weights'")


def save_checkpoint(path: str | Path, model: MlpParams | VariationalParams, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(model, extra), indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> MlpParams | VariationalParams:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read checkpoint {path}: {exc}") from None
    return model_from_dict(d)


def check_input_dim(model: MlpParams | VariationalParams, d: int) -> None:
    if model.arch.input_dim != d:
        raise ModelError(f"checkpoint expects input_dim={model.arch.input_dim}, data has {d} features")

