import math

import numpy as np
import pytest

from deflow.gauss1d import (
    CONSTANT_SHIFT,
    NOISIER_TARGET,
    AffineFlow1D,
    Gauss1DSolution,
    SampleSets1D,
    fit_affine_flow,
    fit_closed_form,
    joint_marginal_nll_1d,
    sample_pairs_1d,
    stationarity_residuals,
    to_standard_base,
)
from deflow.rng import RandomStream

LN_2PI = math.log(2.0 * math.pi)


def _sets_with_moments(mean_x, var_x, mean_y, var_y):
    # two-point sets realize any (mean, biased variance) pair exactly
    sx, sy = math.sqrt(var_x), math.sqrt(var_y)
    return SampleSets1D([mean_x - sx, mean_x + sx], [mean_y - sy, mean_y + sy])


def test_cached_moments_match_recomputation():
    rng = np.random.default_rng(0)
    s = SampleSets1D(rng.normal(size=50), rng.normal(size=70))
    assert abs(s.mean_x - s.xs.mean()) < 1e-12
    assert abs(s.var_x - s.xs.var()) < 1e-12
    assert abs(s.var_y - s.ys.var()) < 1e-12


def test_fit_noisier_target_case():
    s = _sets_with_moments(0.0, 1.0, 1.0, 3.0)
    sol = fit_closed_form(s)
    assert sol.case == NOISIER_TARGET
    assert abs(sol.mu_x - 0.0) < 1e-12
    assert abs(sol.var_x - 1.0) < 1e-12
    assert abs(sol.mu_u - 1.0) < 1e-12
    assert abs(sol.var_u - 2.0) < 1e-12


def test_fit_constant_shift_case():
    s = _sets_with_moments(0.0, 2.0, 0.0, 1.0)
    sol = fit_closed_form(s)
    assert sol.case == CONSTANT_SHIFT
    assert abs(sol.var_x - 1.5) < 1e-12
    assert sol.var_u == 0.0


def test_fit_boundary_cases_coincide():
    s = _sets_with_moments(0.3, 1.7, -0.2, 1.7)
    sol = fit_closed_form(s)
    assert sol.var_u == 0.0
    assert abs(sol.var_x - 1.7) < 1e-12


def test_case_selection_is_variance_predicate():
    for vy in (0.5, 0.99, 1.0, 1.01, 2.0):
        sol = fit_closed_form(_sets_with_moments(0.0, 1.0, 0.0, vy))
        assert (sol.case == NOISIER_TARGET) == (vy >= 1.0)


def test_fit_rejects_degenerate_and_tiny_sets():
    with pytest.raises(ValueError, match="zero variance"):
        fit_closed_form(SampleSets1D([1.0, 1.0], [2.0, 2.0]))
    with pytest.raises(ValueError, match="at least 2"):
        fit_closed_form(SampleSets1D([1.0], [2.0, 3.0]))


def test_nll_single_sample_at_mean():
    s = SampleSets1D([0.5], [])
    val = joint_marginal_nll_1d(Gauss1DSolution(0.5, 1.0, 0.0, 0.0), s)
    assert abs(val - 0.5 * LN_2PI) < 1e-12


def test_nll_permutation_invariant():
    rng = np.random.default_rng(1)
    xs = rng.normal(size=20)
    ys = rng.normal(size=30)
    sol = Gauss1DSolution(0.1, 1.2, 0.3, 0.5)
    a = joint_marginal_nll_1d(sol, SampleSets1D(xs, ys))
    b = joint_marginal_nll_1d(sol, SampleSets1D(xs[::-1], rng.permutation(ys)))
    assert abs(a - b) < 1e-12


def test_nll_rejects_nonpositive_variance():
    s = SampleSets1D([0.0, 1.0], [0.0, 1.0])
    with pytest.raises(ValueError, match="variance"):
        joint_marginal_nll_1d(Gauss1DSolution(0.0, 0.0, 0.0, 0.0), s)


def test_closed_form_beats_1000_random_perturbations():
    stream = RandomStream(2024)
    truth = Gauss1DSolution(0.5, 1.0, 0.3, 0.64)
    s = sample_pairs_1d(truth, 4000, 4000, stream)
    sol = fit_closed_form(s)
    best = joint_marginal_nll_1d(sol, s)
    pert = stream.spawn("pert")
    for _ in range(1000):
        d = pert.normal((4,), std=0.05)
        cand = Gauss1DSolution(
            sol.mu_x + d[0], abs(sol.var_x + d[1]),
            sol.mu_u + d[2], abs(sol.var_u + d[3]),
        )
        assert joint_marginal_nll_1d(cand, s) >= best - 1e-12


def test_stationarity_residuals_interior_case():
    s = _sets_with_moments(0.2, 1.0, 0.9, 2.5)
    sol = fit_closed_form(s)
    assert sol.var_u > 0
    res = stationarity_residuals(sol, s)
    assert np.abs(res).max() <= 1e-10


def test_closed_form_is_local_minimum_second_differences():
    s = _sets_with_moments(0.2, 1.0, 0.9, 2.5)
    sol = fit_closed_form(s)
    base = np.array([sol.mu_x, sol.var_x, sol.mu_u, sol.var_u])
    h = 1e-4
    f0 = joint_marginal_nll_1d(sol, s)
    for i in range(4):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        fp = joint_marginal_nll_1d(Gauss1DSolution(*plus), s)
        fm = joint_marginal_nll_1d(Gauss1DSolution(*minus), s)
        assert fp + fm - 2.0 * f0 >= -1e-9


def test_to_standard_base_frozen_values():
    sol = Gauss1DSolution(mu_x=1.0, var_x=4.0, mu_u=0.5, var_u=1.0)
    a, b, mu_t, var_t = to_standard_base(sol)
    assert (a, b, mu_t, var_t) == (0.5, -0.5, 0.25, 0.25)


def test_to_standard_base_identity_when_already_standard():
    a, b, mu_t, var_t = to_standard_base(Gauss1DSolution(0.0, 1.0, 0.3, 0.7))
    assert (a, b) == (1.0, 0.0)
    assert (mu_t, var_t) == (0.3, 0.7)


def test_to_standard_base_rejects_zero_variance():
    with pytest.raises(ValueError, match="var_x"):
        to_standard_base(Gauss1DSolution(0.0, 0.0, 0.1, 0.0,
                                         case=CONSTANT_SHIFT))


def test_standard_base_nll_matches_original():
    s = _sets_with_moments(0.4, 2.0, 1.1, 3.0)
    sol = fit_closed_form(s)
    a, b, mu_t, var_t = to_standard_base(sol)
    model = AffineFlow1D()
    model.log_scale.data[()] = math.log(a)
    model.bias.data[()] = b
    model.shift_mu.data[()] = mu_t
    model.shift_factor.data[()] = math.sqrt(var_t)
    from deflow.autodiff import Tensor

    flow_nll = model.nll(Tensor(s.xs), Tensor(s.ys)).item()
    assert abs(flow_nll - joint_marginal_nll_1d(sol, s)) < 1e-10


def test_sampling_degenerate_truth():
    truth = Gauss1DSolution(2.0, 0.0, -1.0, 0.0, case=CONSTANT_SHIFT)
    s = sample_pairs_1d(truth, 10, 10, RandomStream(0))
    assert np.allclose(s.xs, 2.0)
    assert np.allclose(s.ys, 1.0)


def test_sampling_deterministic_under_seed():
    truth = Gauss1DSolution(0.0, 1.0, 0.5, 0.25)
    s1 = sample_pairs_1d(truth, 100, 50, RandomStream(7))
    s2 = sample_pairs_1d(truth, 100, 50, RandomStream(7))
    assert np.array_equal(s1.xs, s2.xs)
    assert np.array_equal(s1.ys, s2.ys)


def test_sampling_rejects_empty():
    with pytest.raises(ValueError, match="positive"):
        sample_pairs_1d(Gauss1DSolution(0, 1, 0, 1), 0, 5, RandomStream(0))


def test_monte_carlo_recovery_within_2_percent():
    truth = Gauss1DSolution(0.5, 1.0, 0.3, 0.64)
    s = sample_pairs_1d(truth, 100_000, 100_000, RandomStream(7))
    sol = fit_closed_form(s)
    for est, ref in ((sol.mu_x, truth.mu_x), (sol.var_x, truth.var_x),
                     (sol.mu_u, truth.mu_u), (sol.var_u, truth.var_u)):
        assert abs(est - ref) / abs(ref) < 0.02


def test_trained_affine_flow_matches_closed_form():
    truth = Gauss1DSolution(0.5, 1.0, 0.3, 0.64)
    s = sample_pairs_1d(truth, 20_000, 20_000, RandomStream(11))
    sol = fit_closed_form(s)
    best = joint_marginal_nll_1d(sol, s)
    model, history = fit_affine_flow(s, iterations=3000, lr=0.05, seed=1)
    assert history[-1] - best < 1e-3
    a, b, mu_t, var_t = to_standard_base(sol)
    assert abs(model.shift_mu.item() - mu_t) / abs(mu_t) < 0.05
    assert abs(model.shift_factor.item() ** 2 - var_t) / var_t < 0.05
