"""Config-driven command line front-end.

    calibrate-lab {train, eval, ood-eval, selector, coverage-sweep, sweep}
                  --config FILE [--seed N] [--out DIR] [--dry-run]

Every command validates the whole configuration (including loading data and
checkpoints) before computing anything.  Exit codes: 0 success, 1 invalid
configuration or inputs, 2 failure while running.  Relative paths in the
config resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import data as data_mod
from . import models, ood, outlier, selective
from .metrics import ece, reliability_diagram, score_records
from .objectives import Method
from .training import TrainConfig, evaluate, train

log = logging.getLogger("calibrate_lab")

COMMANDS = ("train", "eval", "ood-eval", "selector", "coverage-sweep", "sweep")
VERSION = f"calibrate-lab {__version__}"


class ValidationError(ValueError):
    """Configuration or input problem detected before any compute."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class OodSource:
    mode: str = "shift"
    n: int = 1000
    magnitude: float = 1.0
    csv: Path | None = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n": self.n, "magnitude": self.magnitude,
                "csv": None if self.csv is None else str(self.csv)}


@dataclass(frozen=True)
class DataConfig:
    task: str = "two_moons"
    n: int = 2000
    noise: float = 0.2
    n_classes: int = 2
    seed: int | None = None
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    train_csv: Path | None = None
    val_csv: Path | None = None
    test_csv: Path | None = None
    uncertainty: OodSource | None = None
    ood_test: OodSource | None = None

    def to_dict(self) -> dict:
        def p(v):
            return None if v is None else str(v)

        return {
            "task": self.task, "n": self.n, "noise": self.noise, "n_classes": self.n_classes,
            "seed": self.seed, "fractions": list(self.fractions),
            "train_csv": p(self.train_csv), "val_csv": p(self.val_csv), "test_csv": p(self.test_csv),
            "uncertainty": None if self.uncertainty is None else self.uncertainty.to_dict(),
            "ood_test": None if self.ood_test is None else self.ood_test.to_dict(),
        }


@dataclass(frozen=True)
class MetricConfig:
    bins: int = 15
    hist_bins: int = 20
    min_count: int = 0
    ensemble: int = 20


@dataclass(frozen=True)
class SweepGrid:
    methods: tuple[str, ...] = ("cbnn",)
    lams: tuple[float, ...] = (0.0,)
    gammas: tuple[float, ...] = (0.5,)
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    base_dir: Path
    data: DataConfig
    train: TrainConfig
    selector: selective.SelectorConfig
    outlier: outlier.OutlierConfig
    metrics: MetricConfig
    output_dir: Path
    seeds: tuple[int, ...]
    sweep: SweepGrid
    checkpoint: Path | None = None
    pretrained: Path | None = None
    selector_checkpoint: Path | None = None
    coverages: tuple[float, ...] = selective.DEFAULT_COVERAGES
    source: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def resolved(self) -> dict:
        def p(v):
            return None if v is None else str(v)

        return {
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "selector": self.selector.to_dict(),
            "outlier": {k: getattr(self.outlier, k) for k in self.outlier.__dataclass_fields__},
            "metrics": {k: getattr(self.metrics, k) for k in self.metrics.__dataclass_fields__},
            "output_dir": str(self.output_dir),
            "seeds": list(self.seeds),
            "sweep": {"methods": list(self.sweep.methods), "lams": list(self.sweep.lams),
                      "gammas": list(self.sweep.gammas), "workers": self.sweep.workers},
            "checkpoint": p(self.checkpoint),
            "pretrained": p(self.pretrained),
            "selector_checkpoint": p(self.selector_checkpoint),
            "coverages": list(self.coverages),
        }


_TOP_KEYS = {"data", "train", "selector", "outlier", "metrics", "output_dir", "seeds", "sweep",
             "checkpoint", "pretrained", "selector_checkpoint", "coverages"}


def _section(raw: dict, key: str) -> dict:
    val = raw.get(key, {})
    if val is None:
        return {}
    if not isinstance(val, dict):
        raise ValidationError(f"{key}: expected an object")
    return val


def _take(d: dict, allowed: set[str], where: str) -> dict:
    bad = sorted(set(d) - allowed)
    if bad:
        raise ValidationError(f"{where}.{bad[0]}: unknown field")
    return d


def _path(base: Path, v, where: str, must_exist: bool = True) -> Path | None:
    if v is None:
        return None
    if not isinstance(v, str) or not v:
        raise ValidationError(f"{where}: expected a path string")
    p = Path(v)
    p = p if p.is_absolute() else (base / p)
    p = p.resolve()
    if must_exist and not p.exists():
        raise ValidationError(f"{where}: file not found: {p}")
    return p


def _ood_source(base: Path, d, where: str, default_mode: str, default_mag: float) -> OodSource | None:
    if d is None:
        return None
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected an object or null")
    _take(d, {"mode", "n", "magnitude", "csv"}, where)
    src = OodSource(str(d.get("mode", default_mode)), int(d.get("n", 1000)),
                    float(d.get("magnitude", default_mag)), _path(base, d.get("csv"), f"{where}.csv"))
    if src.mode not in data_mod.OOD_MODES:
        raise ValidationError(f"{where}.mode: unknown mode {src.mode!r}; expected one of {data_mod.OOD_MODES}")
    if src.n < 1:
        raise ValidationError(f"{where}.n: must be >= 1")
    if not src.magnitude > 0:
        raise ValidationError(f"{where}.magnitude: must be positive")
    return src


def parse_config(raw: dict, base_dir: Path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Validate a raw JSON config; field-level problems raise ValidationError."""
    if not isinstance(raw, dict):
        raise ValidationError("config: expected a JSON object")
    _take(raw, _TOP_KEYS, "config")
    base_dir = base_dir.resolve()

    d = dict(_section(raw, "data"))
    _take(d, {"task", "n", "noise", "n_classes", "seed", "fractions", "train_csv", "val_csv", "test_csv",
              "uncertainty", "ood_test"}, "data")
    try:
        fractions = tuple(float(f) for f in d.get("fractions", (0.6, 0.2, 0.2)))
        data_cfg = DataConfig(
            task=str(d.get("task", "two_moons")),
            n=int(d.get("n", 2000)),
            noise=float(d.get("noise", 0.2)),
            n_classes=int(d.get("n_classes", 2)),
            seed=None if d.get("seed") is None else int(d["seed"]),
            fractions=fractions,
            train_csv=_path(base_dir, d.get("train_csv"), "data.train_csv"),
            val_csv=_path(base_dir, d.get("val_csv"), "data.val_csv"),
            test_csv=_path(base_dir, d.get("test_csv"), "data.test_csv"),
            uncertainty=_ood_source(base_dir, d.get("uncertainty"), "data.uncertainty", "shift", 1.0),
            ood_test=_ood_source(base_dir, d.get("ood_test"), "data.ood_test", "ring", 3.0),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"data: {exc}") from None
    if data_cfg.train_csv is None:
        if data_cfg.task not in data_mod.TASKS:
            raise ValidationError(f"data.task: unknown task {data_cfg.task!r}; expected one of {data_mod.TASKS}")
        if data_cfg.n < 3:
            raise ValidationError("data.n: must be >= 3")
        if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
            raise ValidationError("data.fractions: three non-negative numbers summing to 1")

    seeds_raw = raw.get("seeds", [0])
    if seed is not None:
        seeds_raw = [seed]
    if not isinstance(seeds_raw, list) or not seeds_raw or not all(isinstance(s, int) and s >= 0 for s in seeds_raw):
        raise ValidationError("seeds: expected a non-empty list of non-negative integers")
    seeds = tuple(seeds_raw)

    try:
        train_cfg = TrainConfig.from_dict({**_section(raw, "train"), "seed": seeds[0]})
    except (ValueError, TypeError) as exc:
        raise ValidationError(str(exc)) from None
    try:
        sel_cfg = selective.SelectorConfig.from_dict({"seed": seeds[0], **_section(raw, "selector")})
    except (ValueError, TypeError) as exc:
        raise ValidationError(str(exc)) from None
    try:
        out_cfg = outlier.OutlierConfig(**_take(dict(_section(raw, "outlier")),
                                                set(outlier.OutlierConfig.__dataclass_fields__), "outlier"))
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"outlier: {exc}") from None

    m = _take(dict(_section(raw, "metrics")), {"bins", "hist_bins", "min_count", "ensemble"}, "metrics")
    try:
        metrics_cfg = MetricConfig(**{k: int(v) for k, v in m.items()})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"metrics: {exc}") from None
    for name in ("bins", "hist_bins", "ensemble"):
        if getattr(metrics_cfg, name) < 1:
            raise ValidationError(f"metrics.{name}: must be >= 1")
    if metrics_cfg.min_count < 0:
        raise ValidationError("metrics.min_count: must be >= 0")

    s = _take(dict(_section(raw, "sweep")), {"methods", "lams", "gammas", "workers"}, "sweep")
    try:
        grid = SweepGrid(tuple(str(x) for x in s.get("methods", [train_cfg.method])),
                         tuple(float(x) for x in s.get("lams", [train_cfg.lam])),
                         tuple(float(x) for x in s.get("gammas", [train_cfg.gamma])),
                         int(s.get("workers", 1)))
        for name in grid.methods:
            Method.parse(name)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"sweep: {exc}") from None
    if grid.workers < 1 or not grid.methods or not grid.lams or not grid.gammas:
        raise ValidationError("sweep: methods, lams and gammas must be non-empty and workers >= 1")
    if min(grid.lams) < 0 or min(grid.gammas) < 0:
        raise ValidationError("sweep: lams and gammas must be non-negative")

    try:
        cov = tuple(float(x) for x in raw.get("coverages", selective.DEFAULT_COVERAGES))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"coverages: {exc}") from None
    if not cov or any(not 0 < x <= 1 for x in cov):
        raise ValidationError("coverages: values must lie in (0, 1]")

    out_dir = out if out is not None else raw.get("output_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ValidationError("output_dir: expected a path string")
    output_dir = Path(out_dir)
    output_dir = (output_dir if output_dir.is_absolute() else Path.cwd() / output_dir) if out is not None \
        else (output_dir if output_dir.is_absolute() else base_dir / output_dir)

    return ExperimentConfig(
        base_dir=base_dir, data=data_cfg, train=train_cfg, selector=sel_cfg, outlier=out_cfg,
        metrics=metrics_cfg, output_dir=output_dir.resolve(), seeds=seeds, sweep=grid,
        checkpoint=_path(base_dir, raw.get("checkpoint"), "checkpoint", must_exist=False),
        pretrained=_path(base_dir, raw.get("pretrained"), "pretrained"),
        selector_checkpoint=_path(base_dir, raw.get("selector_checkpoint"), "selector_checkpoint", must_exist=False),
        coverages=cov, source=raw,
    )


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(raw, path.parent, seed, out)


# ---------------------------------------------------------------------------
# Data


@dataclass
class Splits:
    train: data_mod.Dataset
    val: data_mod.Dataset
    test: data_mod.Dataset
    uncertainty: data_mod.Dataset | None
    ood_test: data_mod.Dataset | None


def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _ood(cfg: DataConfig, src: OodSource | None, seed: int, tag: str, dim: int, stream: int):
    if src is None:
        return None
    if src.csv is not None:
        ds = data_mod.load_csv(src.csv, data_mod.CsvSchema(dim, "optional"), tag)
        return data_mod.Dataset(ds.inputs, None, tag)
    if dim != 2:
        raise ValidationError(f"data.{tag}: synthetic OOD sets need 2-D data; supply a csv")
    return data_mod.make_ood(cfg.task, src.mode, src.n, src.magnitude, _sub_seed(seed, stream),
                             base_noise=cfg.noise, tag=tag)


def build_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    d = cfg.data
    data_seed = seed if d.seed is None else d.seed
    try:
        if d.train_csv is not None:
            schema = data_mod.CsvSchema(None, "required")
            tr = data_mod.load_csv(d.train_csv, schema, "train")
            schema = data_mod.CsvSchema(tr.dim, "required")
            va = data_mod.load_csv(d.val_csv, schema, "val") if d.val_csv else data_mod.Dataset(
                np.zeros((0, tr.dim)), np.zeros(0, dtype=np.int64), "val")
            te = data_mod.load_csv(d.test_csv, schema, "test") if d.test_csv else data_mod.Dataset(
                np.zeros((0, tr.dim)), np.zeros(0, dtype=np.int64), "test")
        else:
            full = data_mod.make_synthetic(d.task, d.n, d.noise, _sub_seed(data_seed, 0), d.n_classes)
            tr, va, te = data_mod.split(full, d.fractions, _sub_seed(data_seed, 1))
        unc = _ood(d, d.uncertainty, data_seed, "uncertainty", tr.dim, 2)
        oot = _ood(d, d.ood_test, data_seed, "ood_test", tr.dim, 3)
    except data_mod.DataError as exc:
        raise ValidationError(str(exc)) from None
    return Splits(tr, va, te, unc, oot)


def _need(ds: data_mod.Dataset | None, what: str) -> data_mod.Dataset:
    if ds is None or len(ds) == 0:
        raise ValidationError(f"{what} is empty or not configured")
    return ds


# ---------------------------------------------------------------------------
# Outputs


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n", encoding="utf-8")
    return path


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        out = []
        for c in columns:
            v = row.get(c)
            if isinstance(v, np.generic):
                v = v.item()
            if v is None or (isinstance(v, float) and not math.isfinite(v)):
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(v)
        w.writerow(out)
    return buf.getvalue()


def _envelope(cfg: ExperimentConfig, command: str, seed: int, body: dict) -> dict:
    return {"command": command, "version": VERSION, "seed": seed, "config": cfg.resolved(), **body}


# ---------------------------------------------------------------------------
# Shared evaluation helpers


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, purpose]))


def predictive(model, x, cfg: ExperimentConfig, seed: int, purpose: int) -> np.ndarray:
    """Predictive distribution with a stream fixed by ``(seed, purpose)``.

    The same purpose code always yields the same draws, so ``eval`` and the
    coverage sweep see identical test confidences.
    """
    return models.predict_proba(model, x, cfg.metrics.ensemble, _rng(seed, purpose))


_TEST, _OOD, _VAL, _SCORES = 1, 2, 3, 4


def _checkpoint_in(cfg: ExperimentConfig) -> Path:
    return cfg.checkpoint if cfg.checkpoint is not None else cfg.output_dir / "checkpoint.json"


def _load_model(cfg: ExperimentConfig, dim: int):
    path = _checkpoint_in(cfg)
    if not path.exists():
        raise ValidationError(f"checkpoint: file not found: {path}")
    try:
        m = models.load_checkpoint(path)
        models.check_input_dim(m, dim)
    except models.ModelError as exc:
        raise ValidationError(f"checkpoint: {exc}") from None
    return m


def _confidences(probs: np.ndarray) -> np.ndarray:
    return probs.max(axis=1)


def _ood_payload(cfg, model, splits: Splits, seed: int, id_set: data_mod.Dataset) -> tuple[dict, str]:
    hb = cfg.metrics.hist_bins
    p_id = predictive(model, id_set.inputs, cfg, seed, _TEST)
    p_ood = predictive(model, splits.ood_test.inputs, cfg, seed, _OOD)
    h_id = ood.confidence_histogram(_confidences(p_id), hb)
    h_ood = ood.confidence_histogram(_confidences(p_ood), hb)
    tv = ood.tv_distance(h_id, h_ood)
    body = {"hist_bins": hb, "tv": tv, "p_d": ood.ood_detection_probability(min(tv, 1.0)),
            "n_id": len(id_set), "n_ood": len(splits.ood_test),
            "mean_conf_id": float(_confidences(p_id).mean()), "mean_conf_ood": float(_confidences(p_ood).mean())}
    return body, ood.histogram_csv(h_id, h_ood)


# ---------------------------------------------------------------------------
# Commands.  Each returns a callable that does the compute, so that the whole
# validation happens before anything runs.


def plan_train(cfg: ExperimentConfig):
    seed = cfg.seed
    splits = build_splits(cfg, seed)
    _need(splits.train, "training data")
    method = cfg.train.parsed_method
    if method.ocm and (splits.uncertainty is None or len(splits.uncertainty) == 0):
        raise ValidationError(f"train.method: {method.name} requires data.uncertainty")
    pretrained = None
    if cfg.pretrained is not None:
        try:
            pretrained = models.load_checkpoint(cfg.pretrained)
            models.check_input_dim(pretrained, splits.train.dim)
        except models.ModelError as exc:
            raise ValidationError(f"pretrained: {exc}") from None
        if method.bayesian != isinstance(pretrained, models.VariationalParams):
            raise ValidationError(f"pretrained: checkpoint kind does not match method {method.name}")

    def run():
        val = splits.val if len(splits.val) else None
        model, report = train(cfg.train, splits.train, val, splits.uncertainty, pretrained)
        ck = models.save_checkpoint(cfg.output_dir / "checkpoint.json", model,
                                    {"method": method.name, "seed": seed, "version": VERSION})
        report.checkpoint = ck.name
        body = {"train_report": report.to_dict(), "param_count": models.param_count(model)}
        write_json(cfg.output_dir / "train_report.json", _envelope(cfg, "train", seed, body))
        return body

    return run


def plan_eval(cfg: ExperimentConfig):
    seed = cfg.seed
    splits = build_splits(cfg, seed)
    test = _need(splits.test, "test data")
    model = _load_model(cfg, test.dim)
    k = model.arch.n_classes
    if test.labels.size and test.labels.max() >= k:
        raise ValidationError(f"test data: label {int(test.labels.max())} outside the model's {k} classes")

    def run():
        probs = predictive(model, test.inputs, cfg, seed, _TEST)
        rec = score_records(probs, test.labels)
        diag = reliability_diagram(rec, cfg.metrics.bins, cfg.metrics.min_count)
        body = {"n": len(test), "n_bins": cfg.metrics.bins, "accuracy": float(rec.c.mean()),
                "ece": ece(rec, cfg.metrics.bins), "ensemble_size": cfg.metrics.ensemble,
                "reliability_csv": "reliability.csv", "checkpoint": str(_checkpoint_in(cfg))}
        write_text(cfg.output_dir / "reliability.csv", diag.to_csv())
        write_json(cfg.output_dir / "eval_report.json", _envelope(cfg, "eval", seed, body))
        return body

    return run


def plan_ood_eval(cfg: ExperimentConfig):
    seed = cfg.seed
    splits = build_splits(cfg, seed)
    test = _need(splits.test, "test data")
    _need(splits.ood_test, "data.ood_test")
    model = _load_model(cfg, test.dim)

    def run():
        body, hist = _ood_payload(cfg, model, splits, seed, test)
        body["histogram_csv"] = "ood_histogram.csv"
        write_text(cfg.output_dir / "ood_histogram.csv", hist)
        write_json(cfg.output_dir / "ood_report.json", _envelope(cfg, "ood-eval", seed, body))
        return body

    return run


def selective_records(cfg, model, fitted: outlier.OutlierModels, ds: data_mod.Dataset, seed: int,
                      purpose: int, labels: bool = True) -> selective.SelectiveRecords:
    """Average confidence, average outlier scores and correctness for ``ds``."""
    probs = predictive(model, ds.inputs, cfg, seed, purpose)
    scores = outlier.avg_score_matrix(fitted, model, ds.inputs, cfg.metrics.ensemble,
                                      _rng(seed, _SCORES * 10 + purpose))
    pred = probs.argmax(axis=1)
    r = probs[np.arange(len(pred)), pred]
    c = (pred == ds.labels).astype(np.float64) if labels else np.zeros(len(pred))
    return selective.SelectiveRecords(r, scores, c)


def _fit_outliers(cfg, model, splits: Splits) -> outlier.OutlierModels:
    mean_model = model.mean_params() if isinstance(model, models.VariationalParams) else model
    return outlier.fit(models.features(mean_model, splits.train.inputs), cfg.outlier)


def _selector_paths(cfg: ExperimentConfig) -> tuple[Path, Path]:
    sel = cfg.selector_checkpoint if cfg.selector_checkpoint is not None else cfg.output_dir / "selector.json"
    return sel, sel.with_name(sel.stem + "_outlier.json")


def plan_selector(cfg: ExperimentConfig):
    seed = cfg.seed
    splits = build_splits(cfg, seed)
    val = _need(splits.val, "validation data")
    model = _load_model(cfg, val.dim)
    if len(splits.train) < cfg.outlier.k + 1:
        raise ValidationError(f"outlier.k: needs at least k+1={cfg.outlier.k + 1} training inputs")

    def run():
        fitted = _fit_outliers(cfg, model, splits)
        rec = selective_records(cfg, model, fitted, val, seed, _VAL)
        params = selective.train_selector(cfg.selector, rec)
        g = selective.soft_scores(params, rec.inputs)
        tau = selective.calibrate_threshold(g, cfg.selector.coverage)
        params = selective.with_threshold(params, tau)
        sel_path, out_path = _selector_paths(cfg)
        sel_path = cfg.output_dir / sel_path.name
        out_path = cfg.output_dir / out_path.name
        selective.save_selector(sel_path, params, cfg.selector)
        outlier.save(out_path, fitted)
        acc = selective.accept(g, tau)
        body = {"selector": sel_path.name, "outlier_models": out_path.name, "tau": tau,
                "target_coverage": cfg.selector.coverage, "val": selective.selective_eval(rec, acc, cfg.metrics.bins),
                "objective": "soft selective MMCE (unnormalized) - eta * sum log g",
                "eval_metric": "hard selective MMCE (normalized by accepted count)",
                "outlier_warnings": fitted.warnings}
        write_json(cfg.output_dir / "selector_report.json", _envelope(cfg, "selector", seed, body))
        return body

    return run


SWEEP_COLUMNS = ["target_coverage", "tau", "coverage", "n_accepted", "accuracy", "ece", "selective_mmce",
                 "ood_coverage", "p_d"]


def plan_coverage_sweep(cfg: ExperimentConfig):
    seed = cfg.seed
    splits = build_splits(cfg, seed)
    val = _need(splits.val, "validation data")
    test = _need(splits.test, "test data")
    model = _load_model(cfg, test.dim)
    sel_path, out_path = _selector_paths(cfg)
    for p, what in ((sel_path, "selector_checkpoint"), (out_path, "outlier models")):
        if not p.exists():
            raise ValidationError(f"{what}: file not found: {p}")
    try:
        params = selective.load_selector(sel_path)
        fitted = outlier.load(out_path)
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"selector_checkpoint: {exc}") from None
    if fitted.dim != model.arch.feature_dim:
        raise ValidationError("selector_checkpoint: outlier models do not match the checkpoint's features")

    def run():
        vrec = selective_records(cfg, model, fitted, val, seed, _VAL)
        trec = selective_records(cfg, model, fitted, test, seed, _TEST)
        orec = None
        if splits.ood_test is not None and len(splits.ood_test):
            orec = selective_records(cfg, model, fitted, splits.ood_test, seed, _OOD, labels=False)
        rows = selective.coverage_sweep(params, vrec, trec, cfg.coverages, orec, cfg.metrics.bins,
                                        cfg.metrics.hist_bins)
        write_text(cfg.output_dir / "coverage_sweep.csv", rows_to_csv(rows, SWEEP_COLUMNS))
        body = {"rows": rows, "csv": "coverage_sweep.csv", "hist_bins": cfg.metrics.hist_bins,
                "n_bins": cfg.metrics.bins}
        write_json(cfg.output_dir / "coverage_sweep_report.json", _envelope(cfg, "coverage-sweep", seed, body))
        return body

    return run


CELL_METRICS = ["val_accuracy", "val_ece", "test_accuracy", "test_ece", "p_d"]


def _cell_name(method: str, lam: float, gamma: float, seed: int) -> str:
    return f"{method}_lam{lam:g}_gamma{gamma:g}_seed{seed}"


def plan_sweep(cfg: ExperimentConfig):
    grid = cfg.sweep
    cells = [(m, lam, g, s) for m in grid.methods for lam in grid.lams for g in grid.gammas for s in cfg.seeds]
    prepared = {}
    for seed in cfg.seeds:
        prepared[seed] = build_splits(cfg, seed)
        _need(prepared[seed].train, "training data")
    for m in grid.methods:
        if Method.parse(m).ocm and any(prepared[s].uncertainty is None for s in cfg.seeds):
            raise ValidationError(f"sweep.methods: {m} requires data.uncertainty")
    configs = []
    for m, lam, g, s in cells:
        try:
            configs.append(cfg.train.replace(method=m, lam=lam, gamma=g, seed=s))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None

    def run_cell(i: int) -> dict:
        m, lam, g, s = cells[i]
        name = _cell_name(m, lam, g, s)
        row: dict[str, Any] = {"cell": name, "method": m, "lam": lam, "gamma": g, "seed": s}
        splits = prepared[s]
        try:
            model, report = train(configs[i], splits.train, splits.val if len(splits.val) else None,
                                  splits.uncertainty)
            row["val_accuracy"] = report.final_val_accuracy
            row["val_ece"] = report.final_val_ece
            if len(splits.test):
                res = evaluate(model, splits.test, cfg.metrics.ensemble, _rng(s, _TEST), cfg.metrics.bins)
                row["test_accuracy"], row["test_ece"] = res["accuracy"], res["ece"]
            if splits.ood_test is not None and len(splits.test):
                payload, _ = _ood_payload(cfg, model, splits, s, splits.test)
                row["p_d"] = payload["p_d"]
            cell_dir = cfg.output_dir / "cells" / name
            models.save_checkpoint(cell_dir / "checkpoint.json", model, {"cell": name, "version": VERSION})
            write_json(cell_dir / "report.json", {"cell": name, "version": VERSION, "seed": s,
                                                  "train": configs[i].to_dict(), "train_report": report.to_dict(),
                                                  "metrics": {k: row.get(k) for k in CELL_METRICS}})
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.error("sweep cell %s failed: %s", name, exc)
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    def run():
        if grid.workers > 1:
            with ThreadPoolExecutor(max_workers=grid.workers) as pool:
                rows = list(pool.map(run_cell, range(len(cells))))
        else:
            rows = [run_cell(i) for i in range(len(cells))]
        agg = aggregate_cells(rows)
        cell_cols = ["cell", "method", "lam", "gamma", "seed", "status", *CELL_METRICS, "error"]
        write_text(cfg.output_dir / "sweep_cells.csv", rows_to_csv(rows, cell_cols))
        agg_cols = ["method", "lam", "gamma", "n_ok", "n_failed"]
        for k in CELL_METRICS:
            agg_cols += [f"{k}_mean", f"{k}_std"]
        write_text(cfg.output_dir / "sweep.csv", rows_to_csv(agg, agg_cols))
        body = {"cells": rows, "aggregate": agg, "n_failed": sum(r["status"] != "ok" for r in rows)}
        write_json(cfg.output_dir / "sweep_report.json", _envelope(cfg, "sweep", cfg.seed, body))
        if body["n_failed"] == len(rows):
            raise RuntimeError("every sweep cell failed")
        return body

    return run


def aggregate_cells(rows: list[dict]) -> list[dict]:
    """Mean and sample std per (method, lam, gamma) over successful seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["lam"], r["gamma"]), []).append(r)
    out = []
    for (m, lam, g), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        row = {"method": m, "lam": lam, "gamma": g, "n_ok": len(ok), "n_failed": len(rs) - len(ok)}
        for k in CELL_METRICS:
            vals = [r[k] for r in ok if r.get(k) is not None]
            row[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{k}_std"] = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
        out.append(row)
    return out


PLANS = {
    "train": plan_train,
    "eval": plan_eval,
    "ood-eval": plan_ood_eval,
    "selector": plan_selector,
    "coverage-sweep": plan_coverage_sweep,
    "sweep": plan_sweep,
}


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calibrate-lab", description="Calibration-aware Bayesian learning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed list with one seed")
    p.add_argument("--out", default=None, help="override output_dir")
    p.add_argument("--dry-run", action="store_true", help="validate the config and inputs, write nothing")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        run = PLANS[args.command](cfg)
    except ValidationError as exc:
        print(f"calibrate-lab: invalid configuration: {exc}", file=sys.stderr)
        return 1
    if args.dry_run:
        print(f"calibrate-lab: {args.command}: configuration valid (dry run, nothing written)")
        return 0
    try:
        run()
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure exit code
        log.debug("failure", exc_info=True)
        print(f"calibrate-lab: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"calibrate-lab: {args.command}: wrote outputs to {cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
