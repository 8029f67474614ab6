from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibrate_lab import autodiff as ad
from calibrate_lab import metrics
from calibrate_lab import selective as sel
from calibrate_lab.selective import SelectiveRecords, SelectorConfig
from experiments import poisoned_sweeps
from oracles import gradient_check, hard_selective_mmce_loop, mmce_loop, selective_numerator_loop


def calibrated_records(n=500, seed=0):
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.0, n)
    c = (rng.uniform(size=n) < r).astype(float)
    return SelectiveRecords(r, rng.standard_normal((n, 4)), c)


def fitted_selector(seed=0, records=None):
    records = records or calibrated_records(50, seed)
    params = sel.init_selector(SelectorConfig(hidden=(6, 6)), np.random.default_rng(seed))
    return sel.fit_standardization(params, records.inputs)


def test_zero_weight_selector_outputs_half():
    params = fitted_selector()
    params.flat = np.zeros_like(params.flat)
    assert sel.soft_select(params, 0.7, [0.1, 2.0, -3.0, 4.0]) == 0.5
    np.testing.assert_array_equal(sel.soft_scores(params, calibrated_records(20).inputs), 0.5)


def test_outputs_strictly_inside_unit_interval():
    params = fitted_selector()
    huge = np.array([[1.0, 1e6, -1e6, 1e6, -1e6], [0.5, -1e6, 1e6, -1e6, 1e6]])
    g = sel.soft_scores(params, huge)
    assert np.all((g > 0) & (g < 1))


def test_standardization_required():
    params = sel.init_selector(SelectorConfig(), np.random.default_rng(0))
    with pytest.raises(sel.SelectorError):
        sel.soft_select(params, 0.9, [0, 0, 0, 0])


def test_config_defaults_and_validation():
    cfg = SelectorConfig()
    assert (cfg.eta, cfg.bandwidth, cfg.hidden) == (0.01, 0.2, (64, 64))
    preset = SelectorConfig.long_regime()
    assert (preset.epochs, preset.iterations_per_epoch) == (5, 50_000)
    with pytest.raises(sel.SelectorError, match=r"selector\.coverage"):
        SelectorConfig(coverage=0.0)
    with pytest.raises(sel.SelectorError, match=r"selector\.eta"):
        SelectorConfig(eta=-1.0)
    with pytest.raises(sel.SelectorError, match=r"selector\.colour"):
        SelectorConfig.from_dict({"colour": 1})


def test_soft_selective_mmce_hand_cases():
    two = SelectiveRecords([0.9, 0.9], np.zeros((2, 4)), [0, 0])
    assert float(sel.soft_selective_mmce(None, two, g=[0.5, 0.5]).data) == pytest.approx(0.9, abs=1e-15)
    assert float(sel.soft_selective_mmce(None, two, g=[1e-300, 1e-300]).data) == pytest.approx(0.0, abs=1e-200)
    with pytest.raises(sel.SelectorError):
        sel.soft_selective_mmce(None, SelectiveRecords([], np.zeros((0, 4)), []), g=[])


@pytest.mark.parametrize("seed", range(5))
def test_recovery_identities(seed):
    rec = calibrated_records(120, seed)
    n = len(rec)
    pairs = list(zip(rec.r.tolist(), rec.c.astype(int).tolist()))
    saturated = float(sel.soft_selective_mmce(None, rec, g=np.ones(n)).data)
    assert abs(saturated - n * mmce_loop(pairs, 0.2)) < 1e-12
    hard = sel.hard_selective_mmce(rec, np.ones(n, dtype=bool))
    assert abs(hard - float(metrics.mmce(rec.records, metrics.SELECTOR_KERNEL).data)) < 1e-12


@pytest.mark.parametrize("n", [1, 7, 200])
def test_matches_double_loop(n):
    rng = np.random.default_rng(n)
    rec = calibrated_records(n, n)
    g = rng.uniform(0.01, 1.0, n)
    triples = list(zip(rec.r.tolist(), rec.c.tolist(), g.tolist()))
    assert abs(float(sel.soft_selective_mmce(None, rec, g=g).data) - selective_numerator_loop(triples)) < 1e-12
    acc = rng.uniform(size=n) < 0.6
    acc[0] = True
    hard_triples = [(r, c, float(a)) for r, c, a in zip(rec.r, rec.c, acc)]
    assert abs(sel.hard_selective_mmce(rec, acc) - hard_selective_mmce_loop(hard_triples)) < 1e-12


def test_hard_selective_mmce_needs_acceptance():
    with pytest.raises(sel.SelectorError):
        sel.hard_selective_mmce(calibrated_records(5), np.zeros(5, bool))


def test_loss_barrier_arithmetic():
    rec = calibrated_records(30)
    params = fitted_selector(records=rec)
    params.flat = np.zeros_like(params.flat)
    pure = float(sel.selector_loss(params, rec, 0.0).data)
    assert pure == pytest.approx(float(sel.soft_selective_mmce(params, rec).data), abs=1e-15)
    with_barrier = float(sel.selector_loss(params, rec, 0.3).data)
    assert with_barrier - pure == pytest.approx(-0.3 * 30 * math.log(0.5), rel=1e-12)
    with pytest.raises(sel.SelectorError):
        sel.selector_loss(params, rec, -0.1)


def test_loss_gradient_matches_finite_differences():
    rec = calibrated_records(40, 3)
    params = fitted_selector(3, rec)
    assert gradient_check(lambda w: sel.selector_loss(params, rec, 0.05, flat=ad.as_tensor(w)),
                          params.flat, n_coords=25) < 1e-5


def test_zero_epochs_returns_initial_selector():
    rec = calibrated_records(50)
    cfg = SelectorConfig(epochs=0, seed=4)
    init = sel.init_selector(cfg, np.random.default_rng(np.random.SeedSequence(4).spawn(2)[0]))
    np.testing.assert_array_equal(sel.train_selector(cfg, rec).flat, init.flat)


def test_training_is_deterministic():
    rec = calibrated_records(100)
    cfg = SelectorConfig(epochs=3, hidden=(8,))
    a, b = sel.train_selector(cfg, rec), sel.train_selector(cfg, rec)
    assert a.flat.tobytes() == b.flat.tobytes()


def test_resampled_epoch_regime_runs():
    rec = calibrated_records(60)
    p = sel.train_selector(SelectorConfig(epochs=2, iterations_per_epoch=5, hidden=(4,)), rec)
    assert np.all(np.isfinite(p.flat))


def test_large_barrier_keeps_everything():
    rec = calibrated_records()
    p = sel.train_selector(SelectorConfig(eta=10.0, epochs=10, hidden=(8,), lr=1e-2), rec)
    assert sel.soft_scores(p, rec.inputs).mean() > 0.99


def test_calibrated_records_are_kept():
    rec = calibrated_records()
    p = sel.train_selector(SelectorConfig(eta=0.2, epochs=20), rec)
    assert sel.soft_scores(p, rec.inputs).mean() > 0.9


def test_poisoned_block_is_down_weighted():
    for run in poisoned_sweeps():
        assert run.poisoned_g < run.clean_g


def test_records_are_validated():
    with pytest.raises(sel.SelectorError):
        SelectiveRecords([0.9], [[0.0, np.nan, 0.0, 0.0]], [1])
    with pytest.raises(sel.SelectorError):
        SelectiveRecords([0.9, 0.8], np.zeros((2, 3)), [1, 0])
    with pytest.raises(metrics.MetricError):
        SelectiveRecords([1.5], np.zeros((1, 4)), [1])


def test_threshold_cases():
    g = np.linspace(0.01, 0.99, 1000)
    assert np.all(sel.accept(g, sel.calibrate_threshold(g, 1.0)))
    assert not np.any(sel.accept(g, sel.calibrate_threshold(g, 1e-6)))
    tied = np.round(np.random.default_rng(0).uniform(size=1000), 2)
    count = int(sel.accept(tied, sel.calibrate_threshold(tied, 0.4)).sum())
    assert 380 <= count <= 420
    assert int(sel.accept(g, sel.calibrate_threshold(g, 0.4)).sum()) == 400
    with pytest.raises(sel.SelectorError):
        sel.calibrate_threshold(g, 0.0)
    with pytest.raises(sel.SelectorError):
        sel.calibrate_threshold([], 0.5)


def test_select_extreme_thresholds():
    params = fitted_selector()
    s = [0.3, -1.0, 2.0, 0.0]
    assert sel.select(sel.with_threshold(params, 0.0), 0.8, s) == 1
    assert sel.select(sel.with_threshold(params, 1.0), 0.8, s) == 0
    with pytest.raises(sel.SelectorError):
        sel.select(params, 0.8, s)


@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=80),
       st.lists(st.floats(0.0, 1.0), min_size=2, max_size=10))
def test_coverage_non_increasing_in_tau(g, taus):
    taus = sorted(taus)
    counts = [int(sel.accept(g, t).sum()) for t in taus]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=80), st.floats(0.01, 1.0))
def test_calibrated_threshold_accepts_at_least_target(g, xi):
    accepted = int(sel.accept(g, sel.calibrate_threshold(g, xi)).sum())
    assert accepted >= round(xi * len(g))


def test_selective_eval_all_accepted_recovers_plain_metrics():
    rec = calibrated_records(300, 2)
    out = sel.selective_eval(rec, np.ones(300, bool))
    assert out["coverage"] == 1.0 and out["defined"]
    assert out["ece"] == metrics.ece(rec.records, 15)
    assert out["selective_mmce"] == pytest.approx(float(metrics.mmce(rec.records, metrics.SELECTOR_KERNEL).data),
                                                  abs=1e-12)


def test_selective_eval_perfect_subset_and_empty():
    rec = SelectiveRecords([1.0, 0.8, 1.0], np.zeros((3, 4)), [1, 0, 1])
    out = sel.selective_eval(rec, [True, False, True])
    assert out["ece"] == 0.0 and out["accuracy"] == 1.0
    none = sel.selective_eval(rec, [False] * 3)
    assert none["coverage"] == 0.0 and none["defined"] is False and none["ece"] is None


def test_accepting_only_clean_matches_clean_ece():
    rec, poisoned = sel.make_poisoned_records(400, poison_fraction=0.5, seed=1)
    out = sel.selective_eval(rec, ~poisoned)
    assert out["ece"] == metrics.ece(rec.records.subset(~poisoned), 15)
    assert out["coverage"] == 0.5


def test_selective_classification_loss():
    assert sel.selective_classification_loss([1, 1], [0.0, -1.0]) == pytest.approx(0.5, abs=1e-15)
    assert sel.selective_classification_loss([0, 1], [-5.0, 0.0]) == 0.0
    assert sel.selective_classification_loss([1, 1, 1], [-0.3, -0.6, -0.9]) == pytest.approx(0.6)
    with pytest.raises(sel.SelectorError):
        sel.selective_classification_loss([0, 0], [-1.0, -1.0])


def test_coverage_sweep_rows():
    val, test = calibrated_records(200, 0), calibrated_records(200, 1)
    ood = calibrated_records(100, 2)
    p = sel.train_selector(SelectorConfig(epochs=2, hidden=(8,)), val)
    rows = sel.coverage_sweep(p, val, test, ood=ood)
    assert [r["target_coverage"] for r in rows] == list(sel.DEFAULT_COVERAGES)
    cov = [r["coverage"] for r in rows]
    assert all(a <= b for a, b in zip(cov, cov[1:]))
    assert rows[-1]["coverage"] == 1.0 and rows[-1]["ood_coverage"] == 1.0
    assert all(0.5 <= r["p_d"] <= 1.0 for r in rows)


def test_poisoned_records_construction():
    rec, mask = sel.make_poisoned_records(1000, seed=0)
    assert mask.sum() == 300
    assert np.all(rec.r[mask] == 0.95) and rec.c[mask].mean() == 0.5
    assert rec.s[mask].mean() > 2.5 and abs(rec.s[~mask].mean()) < 0.2


def test_selector_serialization_round_trip(tmp_path):
    rec = calibrated_records(30)
    p = sel.with_threshold(sel.train_selector(SelectorConfig(epochs=1, hidden=(4,)), rec), 0.37)
    again = sel.load_selector(sel.save_selector(tmp_path / "s.json", p, SelectorConfig(hidden=(4,))))
    assert again.tau == 0.37
    np.testing.assert_array_equal(sel.soft_scores(again, rec.inputs), sel.soft_scores(p, rec.inputs))
    with pytest.raises(sel.SelectorError):
        sel.selector_from_dict({"format": "nope"})
