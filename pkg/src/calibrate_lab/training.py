"""Optimizers, training loops for the eight method variants, and OCM fine-tuning.

Randomness is split into independent streams derived from the run seed
(initialization, minibatch order, reparameterization noise, evaluation
ensembles) so that changing one consumer of randomness does not shift the
others.  In particular a calibrated method with ``lam=0`` follows exactly the
same trajectory as its uncalibrated counterpart.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .metrics import ece, score_records
from .models import (
    MlpArch,
    MlpParams,
    PriorSpec,
    VariationalParams,
    detach,
    init_mlp,
    init_variational,
    predict_proba,
)
from .objectives import LossWeights, Method, assemble

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
MAX_ACCURACY_DROP = 0.015


class TrainingError(RuntimeError):
    """Training diverged or was configured inconsistently."""


class ConfigError(ValueError):
    """Invalid training configuration; the message names the field."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class OcmFinetuneConfig:
    epochs: int = 10
    lr: float = 0.001
    id_batch: int = 32
    ood_batch: int = 64
    momentum: float = 0.9
    keep_calib: bool = True


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the data.

    ``lr`` is divided by ``lr_decay`` every ``decay_every`` epochs.  For
    ``*_ocm`` methods the base method is trained first (unless a pretrained
    model is supplied) and then fine-tuned per ``ocm_finetune``.
    """

    method: str = "cbnn"
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.05
    lr_decay: float = 5.0
    decay_every: int = 20
    momentum: float = 0.9
    beta: float = 0.00035
    lam: float = 0.0
    gamma: float = 0.5
    mc_train_samples: int = 1
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    prior_variance: float = 1e-3
    init_std: float = 0.05
    grad_clip: float = 10.0
    weighted_mmce: bool = False
    eval_ensemble: int = 20
    eval_every: int = 1
    dtype: str = "float64"
    ocm_finetune: OcmFinetuneConfig = field(default_factory=OcmFinetuneConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        try:
            Method.parse(self.method)
        except ValueError as exc:
            raise ConfigError(f"train.method: {exc}") from None
        ft = self.ocm_finetune
        checks = [
            ("epochs", self.epochs, self.epochs >= 0, ">= 0"),
            ("batch_size", self.batch_size, self.batch_size >= 1, ">= 1"),
            ("lr", self.lr, self.lr > 0, "> 0"),
            ("lr_decay", self.lr_decay, self.lr_decay > 0, "> 0"),
            ("decay_every", self.decay_every, self.decay_every >= 1, ">= 1"),
            ("momentum", self.momentum, 0 <= self.momentum < 1, "in [0, 1)"),
            ("beta", self.beta, self.beta >= 0, ">= 0"),
            ("lam", self.lam, self.lam >= 0, ">= 0"),
            ("gamma", self.gamma, self.gamma >= 0, ">= 0"),
            ("mc_train_samples", self.mc_train_samples, self.mc_train_samples >= 1, ">= 1"),
            ("prior_variance", self.prior_variance, self.prior_variance > 0, "> 0"),
            ("init_std", self.init_std, self.init_std > 0, "> 0"),
            ("grad_clip", self.grad_clip, self.grad_clip > 0, "> 0"),
            ("eval_ensemble", self.eval_ensemble, self.eval_ensemble >= 1, ">= 1"),
            ("eval_every", self.eval_every, self.eval_every >= 1, ">= 1"),
            ("dtype", self.dtype, self.dtype in ("float32", "float64"), "float32 or float64"),
            ("hidden", list(self.hidden), all(h >= 1 for h in self.hidden), "widths >= 1"),
            ("ocm_finetune.epochs", ft.epochs, ft.epochs >= 0, ">= 0"),
            ("ocm_finetune.lr", ft.lr, ft.lr > 0, "> 0"),
            ("ocm_finetune.id_batch", ft.id_batch, ft.id_batch >= 1, ">= 1"),
            ("ocm_finetune.ood_batch", ft.ood_batch, ft.ood_batch >= 1, ">= 1"),
            ("ocm_finetune.momentum", ft.momentum, 0 <= ft.momentum < 1, "in [0, 1)"),
        ]
        for name, value, ok, rule in checks:
            if not ok:
                raise ConfigError(f"train.{name}: must be {rule}, got {value!r}")

    @property
    def parsed_method(self) -> Method:
        return Method.parse(self.method)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.lam, self.gamma)

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"train.{unknown[0]}: unknown field")
        ft = d.get("ocm_finetune", {})
        if isinstance(ft, Mapping):
            ft_known = {f.name for f in fields(OcmFinetuneConfig)}
            bad = sorted(set(ft) - ft_known)
            if bad:
                raise ConfigError(f"train.ocm_finetune.{bad[0]}: unknown field")
            d["ocm_finetune"] = OcmFinetuneConfig(**ft)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None

    @classmethod
    def image_scale_schedule(cls, **overrides) -> "TrainConfig":
        """The image-scale recipe: 100 epochs, lr divided by 5 every 30, weighted MMCE."""
        base = {"epochs": 100, "lr": 0.1, "decay_every": 30, "lr_decay": 5.0, "weighted_mmce": True}
        base.update(overrides)
        return cls.from_dict(base)


# ---------------------------------------------------------------------------
# Optimizers


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter shape {np.shape(p)} does not match gradient shape {np.shape(g)}")


@dataclass
class SgdState:
    velocity: list[np.ndarray] | None = None


def sgd_momentum_step(params, grads, state: SgdState, lr: float, momentum: float) -> list[np.ndarray]:
    """One heavy-ball step: ``v <- m*v + g``; ``p <- p - lr*v``.

    Args:
        params: list of parameter arrays.
        grads: matching list of gradients.
        state: velocity buffers, created on the first call.

    Returns:
        New parameter arrays; ``state`` is updated in place.
    """
    params = [np.asarray(p) for p in params]
    grads = [np.asarray(g) for g in grads]
    _check_shapes(params, grads)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    _check_shapes(params, state.velocity)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        v = momentum * state.velocity[i] + g
        state.velocity[i] = v
        out.append(p - lr * v)
    return out


@dataclass
class AdamState:
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> list[np.ndarray]:
    """Bias-corrected Adam with decoupled weight decay."""
    params = [np.asarray(p) for p in params]
    grads = [np.asarray(g) for g in grads]
    _check_shapes(params, grads)
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    _check_shapes(params, state.m)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        step = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append(p - lr * (step + weight_decay * p))
    return out


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    # scaled by the largest entry so that squaring large finite values cannot overflow
    peak = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    if peak == 0.0:
        return grads, 0.0
    norm = peak * math.sqrt(sum(float(np.sum((g.astype(np.float64) / peak) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


def step_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr / config.lr_decay ** (epoch // config.decay_every)


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    loss: dict
    val_accuracy: float | None
    val_ece: float | None


@dataclass
class TrainReport:
    method: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    finetune: list[EpochRecord] = field(default_factory=list)
    n_params: int = 0
    checkpoint: str | None = None

    @property
    def final_val_accuracy(self) -> float | None:
        rows = self.finetune or self.epochs
        return rows[-1].val_accuracy if rows else None

    @property
    def final_val_ece(self) -> float | None:
        rows = self.finetune or self.epochs
        return rows[-1].val_ece if rows else None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "n_params": self.n_params,
            "checkpoint": self.checkpoint,
            "epochs": [asdict(e) for e in self.epochs],
            "finetune": [asdict(e) for e in self.finetune],
            "final": {"val_accuracy": self.final_val_accuracy, "val_ece": self.final_val_ece},
        }


# ---------------------------------------------------------------------------
# Training


@dataclass
class RngStreams:
    init: np.random.Generator
    batches: np.random.Generator
    noise: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        kids = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(k) for k in kids))


def evaluate(model, dataset: Dataset, ensemble_size: int, rng: np.random.Generator, n_bins: int = 15) -> dict:
    """Accuracy and ECE of ``model`` on a labelled dataset."""
    probs = predict_proba(model, dataset.inputs, ensemble_size, rng)
    rec = score_records(probs, dataset.labels)
    return {"accuracy": float(rec.c.mean()), "ece": ece(rec, n_bins), "records": rec, "probs": probs}


def _leaves(model) -> list[ad.Tensor]:
    if isinstance(model, VariationalParams):
        return [ad.Tensor(model.mu, requires_grad=True), ad.Tensor(model.rho, requires_grad=True)]
    return [ad.Tensor(model.flat, requires_grad=True)]


def _rebuild(model, arrays):
    if isinstance(model, VariationalParams):
        return VariationalParams(model.arch, arrays[0], arrays[1])
    return MlpParams(model.arch, arrays[0])


def _arrays(model) -> list[np.ndarray]:
    if isinstance(model, VariationalParams):
        return [model.mu, model.rho]
    return [model.flat]


def init_model(config: TrainConfig, input_dim: int, n_classes: int, rng: np.random.Generator):
    arch = MlpArch(input_dim, config.hidden, n_classes)
    dtype = np.dtype(config.dtype)
    if config.parsed_method.bayesian:
        return init_variational(arch, rng, config.init_std, dtype)
    return init_mlp(arch, rng, dtype)


class _Stepper:
    """Shared gradient step: loss, backward, finiteness check, clipping, SGD."""

    def __init__(self, config: TrainConfig, method: Method, n_train: int, weights: LossWeights,
                 momentum: float, use_calib: bool = True):
        self.config = config
        self.method = method
        self.n_train = n_train
        self.weights = weights
        self.momentum = momentum
        self.use_calib = use_calib
        self.prior = PriorSpec(config.prior_variance)
        self.state = SgdState()

    def __call__(self, model, xb, yb, xu, lr, noise_rng, where: str):
        leaves = _leaves(model)
        live = _rebuild(model, leaves)
        br = assemble(
            self.method, live, (xb, yb), self.weights,
            n_train=self.n_train, prior=self.prior, uncertainty=xu,
            mc_samples=self.config.mc_train_samples, rng=noise_rng,
            weighted=self.config.weighted_mmce, use_calib=self.use_calib,
        )
        if not math.isfinite(br.total_value):
            raise TrainingError(f"non-finite loss at {where}: {br.as_dict()}")
        grads = ad.backward(br.total)
        gl = [grads.get(t, np.zeros_like(t.data)) for t in leaves]
        if not all(np.all(np.isfinite(g)) for g in gl):
            raise TrainingError(f"non-finite gradient at {where}: {br.as_dict()}")
        gl, _ = clip_global_norm(gl, self.config.grad_clip)
        new = sgd_momentum_step(_arrays(model), gl, self.state, lr, self.momentum)
        return _rebuild(model, new), br.as_dict()


def _mean_breakdown(rows: list[dict]) -> dict:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _validate(model, val: Dataset | None, config: TrainConfig, rng, epoch: int, last: int):
    # Intermediate epochs are skipped unless they fall on the eval interval.
    if val is None or len(val) == 0 or ((epoch + 1) % config.eval_every and epoch != last):
        return None, None
    res = evaluate(model, val, config.eval_ensemble, rng)
    return res["accuracy"], res["ece"]


def train(
    config: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    uncertainty: Dataset | None = None,
    pretrained: MlpParams | VariationalParams | None = None,
) -> tuple[MlpParams | VariationalParams, TrainReport]:
    """Train ``config.method`` on ``train_set``; returns the final model and report.

    OCM methods run the base objective for ``config.epochs`` epochs (skipped
    when ``pretrained`` is given) followed by OCM fine-tuning.

    Raises:
        TrainingError: on a non-finite loss or missing uncertainty data.
    """
    method = config.parsed_method
    if train_set.labels is None or len(train_set) == 0:
        raise TrainingError("training set must be non-empty and labelled")
    if method.ocm and (uncertainty is None or len(uncertainty) == 0):
        raise TrainingError(f"method {method.name} requires an uncertainty set")
    streams = RngStreams.from_seed(config.seed)
    n_classes = max(train_set.n_classes, val_set.n_classes if val_set is not None else 0)
    if pretrained is not None:
        model = detach(pretrained)
        if model.arch.input_dim != train_set.dim:
            raise TrainingError("pretrained model input_dim does not match the data")
        if method.bayesian != isinstance(model, VariationalParams):
            raise TrainingError(f"pretrained model kind does not match method {method.name}")
    else:
        model = init_model(config, train_set.dim, n_classes, streams.init)
    report = TrainReport(method.name, config.seed, n_params=2 * model.arch.n_params
                         if isinstance(model, VariationalParams) else model.arch.n_params)
    x = train_set.inputs.astype(config.dtype)
    y = train_set.labels
    n = len(train_set)

    if pretrained is None:
        stepper = _Stepper(config, method.without_ocm(), n, config.weights, config.momentum)
        for epoch in range(config.epochs):
            lr = step_lr(config, epoch)
            perm = streams.batches.permutation(n)
            rows = []
            for step, start in enumerate(range(0, n, config.batch_size)):
                idx = perm[start:start + config.batch_size]
                model, row = stepper(model, x[idx], y[idx], None, lr, streams.noise,
                                     f"epoch {epoch} step {step}")
                rows.append(row)
            acc, e = _validate(model, val_set, config, streams.eval, epoch, config.epochs - 1)
            report.epochs.append(EpochRecord(epoch, "train", lr, _mean_breakdown(rows), acc, e))
            log.debug("%s epoch %d loss %.5f val_acc %s", method.name, epoch, rows[-1]["total"], acc)

    if method.ocm:
        model = _finetune(config, method, model, x, y, uncertainty.inputs.astype(config.dtype),
                          val_set, streams, report)
    return detach(model), report


def _finetune(config, method, model, x, y, xu, val_set, streams, report):
    ft = config.ocm_finetune
    n = len(y)
    steps_per_epoch = math.ceil(n / ft.id_batch)
    total = ft.epochs * steps_per_epoch
    stepper = _Stepper(config, method, n, config.weights, ft.momentum, use_calib=ft.keep_calib)
    it = 0
    for epoch in range(ft.epochs):
        perm = streams.batches.permutation(n)
        rows = []
        lr = ft.lr
        for step in range(steps_per_epoch):
            idx = perm[step * ft.id_batch:(step + 1) * ft.id_batch]
            uidx = streams.batches.integers(0, len(xu), size=ft.ood_batch)
            lr = cosine_lr(ft.lr, it, total)
            model, row = stepper(model, x[idx], y[idx], xu[uidx], lr, streams.noise,
                                 f"finetune epoch {epoch} step {step}")
            rows.append(row)
            it += 1
        acc, e = _validate(model, val_set, config, streams.eval, epoch, ft.epochs - 1)
        report.finetune.append(EpochRecord(epoch, "ocm_finetune", lr, _mean_breakdown(rows), acc, e))
    return model


# ---------------------------------------------------------------------------
# Model selection


def select_lambda(results: Mapping[float, tuple[float, float]], baseline_accuracy: float,
                  max_drop: float = MAX_ACCURACY_DROP) -> float | None:
    """Lowest-ECE ``lam`` whose accuracy is within ``max_drop`` of the baseline.

    Args:
        results: ``{lam: (accuracy, ece)}`` measured on validation data.
        baseline_accuracy: validation accuracy at ``lam = 0``.

    Returns:
        The chosen ``lam``, or None when no candidate satisfies the rule.
        Ties in ECE go to the smaller ``lam``.
    """
    ok = [(e, lam) for lam, (acc, e) in results.items() if acc >= baseline_accuracy - max_drop - 1e-12]
    if not ok:
        return None
    return min(ok)[1]
