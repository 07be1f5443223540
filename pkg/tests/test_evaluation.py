import csv
import math

import numpy as np
import pytest

from deflow import data
from deflow.conditioning import ConditionSpec
from deflow.data import DegradationOracle, synth_corpus
from deflow.evaluation import (
    ResidualStats,
    compute_residual_stats,
    emit_report,
    heldout_nll,
    ks_statistic,
    residual_stats,
)
from deflow.model import DeFlowModel
from deflow.rng import RandomStream

LN_2PI = math.log(2.0 * math.pi)


def _model(shift_factor=0.0, seed=0, levels=1, in_channels=1):
    spec = ConditionSpec(down_factor=1, noise_sigma=0.0, disabled=True)
    model = DeFlowModel(in_channels=in_channels, levels=levels, flow_steps=1,
                        hidden_width=4, cond_spec=spec, seed=seed)
    stream = RandomStream(seed).spawn("rand")
    for name, t in model.flow_parameters():
        t.data[...] = stream.spawn(name).normal(t.shape, std=0.1)
    for steps in model.level_steps:
        for step in steps:
            step.actnorm.initialized = True
    if shift_factor:
        for s in model.shifts:
            s.cov_factor.data[...] = shift_factor * np.eye(s.channels)
    return model


def test_residual_stats_invariants():
    rng = np.random.default_rng(0)
    stats = compute_residual_stats([rng.normal(size=(3, 8, 8)) for _ in range(4)])
    assert np.allclose(stats.covariance, stats.covariance.T)
    assert np.abs(np.diag(stats.covariance) - stats.variance).max() < 1e-10
    assert stats.count == 4 * 64


def test_residual_stats_validation():
    with pytest.raises(ValueError, match="symmetric"):
        ResidualStats(np.zeros(2), np.ones(2),
                      np.array([[1.0, 0.5], [0.0, 1.0]]), 0.0, 10)


def test_zero_shift_model_residual_moments_zero():
    model = _model(shift_factor=0.0)
    clean = [np.random.default_rng(1).uniform(0.2, 0.8, size=(1, 8, 8))
             for _ in range(3)]
    stats = residual_stats(model, clean, tau=1.0, n_samples=6,
                           stream=RandomStream(2))
    assert np.abs(stats.mean).max() < 1e-8
    assert np.abs(stats.variance).max() < 1e-8
    assert np.abs(stats.covariance).max() < 1e-8


def test_residual_variance_grows_with_temperature():
    model = _model(shift_factor=0.3, seed=3)
    clean = [np.random.default_rng(4).uniform(0.2, 0.8, size=(1, 8, 8))
             for _ in range(3)]
    variances = []
    for tau in (0.66, 1.33):
        stats = residual_stats(model, clean, tau=tau, n_samples=40,
                               stream=RandomStream(5))
        variances.append(stats.variance.mean())
    assert variances[1] >= variances[0]


def test_residual_stats_deterministic():
    model = _model(shift_factor=0.2, seed=6)
    clean = [np.full((1, 8, 8), 0.5)]
    a = residual_stats(model, clean, 1.0, 5, RandomStream(7))
    b = residual_stats(model, clean, 1.0, 5, RandomStream(7))
    assert np.array_equal(a.mean, b.mean)
    assert a.lag1_autocorr == b.lag1_autocorr


def test_heldout_nll_identity_on_standard_normal_data():
    model = _model()
    # identity parameters: zero flow params, unit permutation
    for name, t in model.flow_parameters():
        t.data[...] = 0.0
    for steps in model.level_steps:
        for step in steps:
            step.inv_conv._perm_matrix = np.eye(step.inv_conv.channels)
            step.inv_conv._diag_sign = np.ones(step.inv_conv.channels)
    rng = np.random.default_rng(8)
    imgs = [rng.normal(size=(1, 8, 8)) for _ in range(6)]
    corpus = data.Corpus(imgs, [rng.normal(size=(1, 8, 8)) for _ in range(6)])
    nll_x, nll_y = heldout_nll(model, corpus, RandomStream(9), dequantize=False)
    expect = 0.5 * LN_2PI + 0.5
    assert abs(nll_x - expect) < 0.1
    assert abs(nll_y - expect) < 0.1


def test_heldout_nll_deterministic():
    model = _model(seed=10)
    oracle = DegradationOracle(data.WHITE_NOISE, sigma=0.04)
    corpus = synth_corpus(oracle, 2, 2, seed=11, size=16, channels=1)
    a = heldout_nll(model, corpus, RandomStream(12))
    b = heldout_nll(model, corpus, RandomStream(12))
    assert a == b


def test_ks_statistic_identical_and_disjoint():
    x = np.random.default_rng(13).normal(size=500)
    assert ks_statistic(x, x) == 0.0
    assert ks_statistic(np.zeros(10), np.ones(10) + 5.0) == 1.0


def test_ks_statistic_same_distribution_small():
    stream = RandomStream(14)
    a = stream.spawn("a").normal((10_000,))
    b = stream.spawn("b").normal((10_000,))
    assert ks_statistic(a, b) < 0.03


def test_ks_statistic_rejects_empty():
    with pytest.raises(ValueError, match="nonempty"):
        ks_statistic(np.zeros(0), np.ones(3))


def test_emit_report_round_trip_and_truth_columns(tmp_path):
    rng = np.random.default_rng(15)
    stats = compute_residual_stats([rng.normal(size=(2, 6, 6)) * 0.05
                                    for _ in range(3)])
    truth = (np.array([0.01, -0.02]), 0.0025 * np.eye(2), 0.0)
    res_path, nll_path = emit_report(stats, truth, (1.4, 1.3), tmp_path)
    with open(res_path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["metric", "estimate", "truth", "rel_error"]
    by_metric = {r[0]: r for r in rows[1:]}
    # truth columns populated, and rel_error recomputes exactly
    row = by_metric["mean_c0"]
    est, tr, rel = float(row[1]), float(row[2]), float(row[3])
    assert abs(rel - abs(est - tr) / abs(tr)) < 1e-12
    # lag1 truth is 0 -> relative error column is blank
    assert by_metric["lag1_autocorr"][3] == ""
    with open(nll_path, newline="") as f:
        nll_rows = list(csv.reader(f))
    assert nll_rows[0] == ["domain", "nats_per_dim"]
    assert float(nll_rows[1][1]) == 1.4


def test_emit_report_no_truth_columns_without_oracle(tmp_path):
    rng = np.random.default_rng(16)
    stats = compute_residual_stats([rng.normal(size=(1, 4, 4))])
    res_path, _ = emit_report(stats, None, None, tmp_path)
    with open(res_path, newline="") as f:
        rows = list(csv.reader(f))
    assert all(r[2] == "" for r in rows[1:])
