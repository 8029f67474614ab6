from __future__ import annotations

import math

import numpy as np
import pytest

from calibrate_lab import data, models, training
from calibrate_lab.objectives import ALL_METHODS
from calibrate_lab.training import AdamState, SgdState, TrainConfig
from experiments import lambda_sweep, ocm_runs


def small_task(seed=0, n=400):
    full = data.make_synthetic("two_moons", n, noise=0.15, seed=seed)
    return data.split(full, (0.6, 0.4, 0.0), seed=seed)


def test_sgd_plain_step():
    (p,) = training.sgd_momentum_step([np.array([1.0])], [np.array([1.0])], SgdState(), 0.1, 0.0)
    assert p[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_momentum_recursion():
    state = SgdState()
    p = [np.array([0.0])]
    for _ in range(2):
        p = training.sgd_momentum_step(p, [np.array([1.0])], state, 1.0, 0.9)
    assert p[0][0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_zero_gradient_leaves_params():
    p0 = np.array([1.5, -2.0])
    (p,) = training.sgd_momentum_step([p0], [np.zeros(2)], SgdState(), 0.1, 0.9)
    np.testing.assert_array_equal(p, p0)


@pytest.mark.parametrize("step", ["sgd", "adam"])
def test_optimizer_shape_mismatch(step):
    with pytest.raises(ValueError):
        if step == "sgd":
            training.sgd_momentum_step([np.zeros(2)], [np.zeros(3)], SgdState(), 0.1, 0.9)
        else:
            training.adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


def test_adam_first_step_magnitude_is_lr():
    g = np.array([3.0, -0.02, 1e-3])
    (p,) = training.adam_step([np.zeros(3)], [g], AdamState(), lr=0.01)
    np.testing.assert_allclose(np.abs(p), 0.01, rtol=1e-4)


def test_adam_zero_gradient_no_decay_is_identity():
    p0 = np.array([0.3, -1.0])
    (p,) = training.adam_step([p0], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p, p0)


def test_adam_weight_decay_is_decoupled():
    p0 = np.array([2.0])
    (p,) = training.adam_step([p0], [np.zeros(1)], AdamState(), lr=0.1, weight_decay=0.5)
    assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_clip_global_norm():
    grads, norm = training.clip_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate(grads), [0.6, 0.8], rtol=1e-15)
    same, _ = training.clip_global_norm([np.array([0.3])], 1.0)
    assert same[0][0] == 0.3


def test_lr_schedules():
    cfg = TrainConfig(lr=0.05, lr_decay=5, decay_every=20)
    assert [training.step_lr(cfg, e) for e in (0, 19, 20, 45)] == pytest.approx([0.05, 0.05, 0.01, 0.002])
    assert training.cosine_lr(0.001, 0, 10) == 0.001
    assert training.cosine_lr(0.001, 5, 10) == pytest.approx(0.0005)
    assert training.cosine_lr(0.001, 10, 10) == pytest.approx(0.0, abs=1e-18)


def test_config_defaults_and_presets():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.lr_decay, cfg.decay_every, cfg.momentum) == (50, 0.05, 5.0, 20, 0.9)
    assert (cfg.beta, cfg.gamma, cfg.grad_clip, cfg.eval_ensemble) == (0.00035, 0.5, 10.0, 20)
    ft = cfg.ocm_finetune
    assert (ft.epochs, ft.lr, ft.id_batch, ft.ood_batch) == (10, 0.001, 32, 64)
    preset = TrainConfig.image_scale_schedule()
    assert (preset.epochs, preset.lr, preset.decay_every, preset.lr_decay) == (100, 0.1, 30, 5.0)


@pytest.mark.parametrize("field, value", [("lr", 0.0), ("batch_size", 0), ("lam", -1.0), ("beta", -0.1),
                                          ("gamma", -0.5), ("method", "svm"), ("momentum", 1.0)])
def test_config_validation(field, value):
    with pytest.raises(training.ConfigError) as exc:
        TrainConfig(**{field: value})
    assert f"train.{field}" in str(exc.value)


def test_config_round_trip_and_unknown_fields():
    cfg = TrainConfig(method="cfnn_ocm", lam=2.0, hidden=(8,))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(training.ConfigError, match="train.colour"):
        TrainConfig.from_dict({"colour": 1})


def test_zero_epochs_returns_initial_params():
    tr, va, _ = small_task()
    cfg = TrainConfig(method="bnn", epochs=0, seed=3)
    model, report = training.train(cfg, tr, va)
    init = training.init_model(cfg, tr.dim, 2, training.RngStreams.from_seed(3).init)
    np.testing.assert_array_equal(model.mu, init.mu)
    np.testing.assert_array_equal(model.rho, init.rho)
    assert report.epochs == []


def test_cbnn_separable_blobs_reaches_high_accuracy():
    full = data.make_synthetic("gaussian_blobs", 600, noise=0.3, seed=1)
    tr, va, _ = data.split(full, (0.7, 0.3, 0.0), seed=1)
    _, report = training.train(TrainConfig(method="cbnn", lam=1.0, epochs=30, eval_every=30), tr, va)
    assert report.final_val_accuracy > 0.95


def test_training_is_deterministic(tmp_path):
    tr, va, _ = small_task()
    cfg = TrainConfig(method="cbnn", lam=1.0, epochs=3)
    paths = []
    for i in range(2):
        model, _ = training.train(cfg, tr, va)
        paths.append(models.save_checkpoint(tmp_path / f"{i}.json", model))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_report_records_every_epoch():
    tr, va, _ = small_task()
    u = data.make_ood("two_moons", "shift", 100, 1.0, seed=0)
    cfg = TrainConfig(method="cfnn_ocm", lam=1.0, epochs=4, eval_every=2,
                      ocm_finetune=training.OcmFinetuneConfig(epochs=3))
    _, report = training.train(cfg, tr, va, u)
    assert [e.epoch for e in report.epochs] == [0, 1, 2, 3]
    assert [e.val_accuracy is not None for e in report.epochs] == [False, True, False, True]
    assert len(report.finetune) == 3 and report.finetune[-1].val_ece is not None
    d = report.to_dict()
    assert d["final"]["val_accuracy"] == report.finetune[-1].val_accuracy


def test_pretrained_model_skips_base_training():
    tr, va, _ = small_task()
    u = data.make_ood("two_moons", "ring", 100, 3.0, seed=0)
    base, _ = training.train(TrainConfig(method="bnn", epochs=2), tr, va)
    _, report = training.train(TrainConfig(method="bnn_ocm", epochs=2), tr, va, u, pretrained=base)
    assert report.epochs == [] and len(report.finetune) == 10


def test_pretrained_kind_must_match():
    tr, va, _ = small_task()
    u = data.make_ood("two_moons", "ring", 50, 3.0, seed=0)
    fnn, _ = training.train(TrainConfig(method="fnn", epochs=1), tr, va)
    with pytest.raises(training.TrainingError):
        training.train(TrainConfig(method="bnn_ocm"), tr, va, u, pretrained=fnn)


def test_ocm_without_uncertainty_set_raises():
    tr, va, _ = small_task()
    with pytest.raises(training.TrainingError):
        training.train(TrainConfig(method="fnn_ocm", epochs=1), tr, va)


def test_non_finite_loss_names_the_step():
    tr, va, _ = small_task()
    bad = data.Dataset(np.where(tr.inputs > 0, np.nan, tr.inputs), tr.labels, "train")
    with pytest.raises(training.TrainingError, match=r"epoch 0 step 0"):
        training.train(TrainConfig(method="fnn", epochs=1), bad, va)


@pytest.mark.parametrize("method", ALL_METHODS)
def test_loss_decreases_for_every_method(method):
    for seed in range(5):
        full = data.make_synthetic("two_moons", 600, noise=0.2, seed=seed)
        tr, va, _ = data.split(full, (0.8, 0.2, 0.0), seed=seed)
        u = data.make_ood("two_moons", "shift", 200, 1.0, seed=seed)
        cfg = TrainConfig(method=method, lam=1.0, epochs=15, seed=seed, eval_every=100)
        _, report = training.train(cfg, tr, va, u if "ocm" in method else None)
        assert report.epochs[-1].loss["total"] < report.epochs[0].loss["total"]
        if report.finetune:
            assert report.finetune[-1].loss["total"] < report.finetune[0].loss["total"]


def test_select_lambda_rule():
    results = {0.2: (0.90, 0.05), 1.0: (0.885, 0.03), 2.0: (0.80, 0.01), 3.0: (0.886, 0.03)}
    assert training.select_lambda(results, 0.90) == 1.0
    assert training.select_lambda({2.0: (0.5, 0.01)}, 0.9) is None
    assert training.select_lambda({0.4: (0.886, 0.02)}, 0.90) == 0.4


def test_lambda_grid():
    assert training.LAMBDA_GRID == (0.2, 0.4, 0.6, 0.8, 1.0, 2, 3, 4, 5, 6, 7, 8, 9, 10)
    assert training.MAX_ACCURACY_DROP == 0.015


def test_calibrated_fnn_beats_fnn_at_selected_lambda():
    sweep = lambda_sweep("cfnn")
    assert sweep.selected is not None
    acc, e = sweep.mean[sweep.selected]
    assert e < sweep.baseline[1]
    assert acc >= sweep.baseline[0] - 0.015


def test_ocm_lowers_confidence_on_held_out_ood():
    runs = ocm_runs()
    assert np.mean([r.ood_conf_after for r in runs]) < np.mean([r.ood_conf_before for r in runs])
    assert np.mean([r.acc_before - r.acc_after for r in runs]) <= 0.05
    assert not math.isnan(runs[0].p_d_after)
