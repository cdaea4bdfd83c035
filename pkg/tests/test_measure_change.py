import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from girsanov_lab.girsanov import LogWeightLedger
from girsanov_lab.measure_change import (
    STANDARD_FUNCTIONALS,
    WeightedEnsemble,
    compare_direct_vs_weighted,
    effective_sample_size,
    estimate_under_target,
    integral_of_square,
    l1_cauchy_diagnostic,
    martingale_test,
    simulate_reference,
    sup_abs,
    terminal_value,
    weighted_ensemble,
    weighted_estimate,
)
from girsanov_lab.models import brownian_shift, ou_shift, path_dependent
from girsanov_lab.sde_core import SamplePath, make_uniform_grid

finite_logs = arrays(np.float64, st.integers(1, 50), elements=st.floats(-30, 30))


def ensemble(values, log_weights):
    grid = make_uniform_grid(0, 1, 1)
    v = np.asarray(values, dtype=float)
    paths = SamplePath(grid, np.stack([np.zeros_like(v), v], axis=-1)[..., None])
    return WeightedEnsemble(paths, np.asarray(log_weights, dtype=float))


# -- functionals -----------------------------------------------------------


def test_standard_functionals():
    grid = make_uniform_grid(0, 1, 4)
    path = SamplePath(grid, np.array([0.0, -2.0, 1.0, 3.0, 0.5])[:, None])
    assert terminal_value(path) == 0.5
    assert sup_abs(path) == 3.0
    assert integral_of_square(path) == pytest.approx(0.25 * (0 + 4 + 1 + 9))
    assert list(STANDARD_FUNCTIONALS) == ["X(T)", "sup|X|", "int X^2 dt"]


# -- estimators ------------------------------------------------------------


def test_unit_weights_give_plain_mean():
    ens = ensemble([1.0, 2.0, 6.0], [0.0, 0.0, 0.0])
    for mode in ("unnormalized", "self_normalized"):
        rep = estimate_under_target(terminal_value, ens, mode)
        assert rep.estimate == pytest.approx(3.0)
        assert rep.ess == pytest.approx(3.0)


def test_constant_one_unnormalized_is_mean_weight():
    lw = np.log([0.5, 1.0, 1.5])
    rep = weighted_estimate(np.ones(3), lw, "unnormalized")
    assert rep.estimate == pytest.approx(1.0)
    assert rep.normalization == pytest.approx(1.0)


@given(finite_logs)
def test_self_normalized_constant_is_exactly_one(lw):
    assert weighted_estimate(np.ones(lw.size), lw, "self_normalized").estimate == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50)
@given(finite_logs, st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_unnormalized_linearity(lw, alpha, seed):
    gen = np.random.default_rng(seed)
    f = gen.standard_normal(lw.size)
    g = gen.standard_normal(lw.size)
    lhs = weighted_estimate(alpha * f + g, lw, "unnormalized").estimate
    rhs = alpha * weighted_estimate(f, lw, "unnormalized").estimate + weighted_estimate(g, lw, "unnormalized").estimate
    scale = np.exp(np.max(lw)) * (1 + abs(alpha)) * 10
    assert abs(lhs - rhs) <= 1e-12 * scale


def test_estimator_rejects_empty_and_bad_mode():
    with pytest.raises(ValueError):
        weighted_estimate([], [])
    with pytest.raises(ValueError):
        weighted_estimate([1.0], [0.0], "other")


def test_estimator_report_invariants():
    gen = np.random.default_rng(0)
    lw = gen.standard_normal(500)
    rep = weighted_estimate(gen.standard_normal(500), lw)
    assert rep.stderr >= 0
    assert 1 <= rep.ess <= 500


def test_huge_log_weights_do_not_overflow():
    rep = weighted_estimate([1.0, 3.0], [1000.0, 1000.0])
    assert rep.estimate == pytest.approx(2.0)


# -- effective sample size -------------------------------------------------


def test_ess_examples():
    assert effective_sample_size(np.zeros(7)) == pytest.approx(7.0)
    assert effective_sample_size([0.0, 0.0, -np.inf, -np.inf]) == pytest.approx(2.0)
    assert effective_sample_size([0.0, -800.0, -800.0]) == pytest.approx(1.0)


@given(finite_logs, st.floats(-500, 500))
def test_ess_is_shift_invariant(lw, c):
    assert effective_sample_size(lw + c) == pytest.approx(effective_sample_size(lw), rel=1e-10)


def test_ess_exact_shift_bit_identity():
    # dyadic log-weights: the shift and the max subtraction are both exact
    lw = np.random.default_rng(1).integers(-4096, 4096, 100) / 1024.0
    assert effective_sample_size(lw).hex() == effective_sample_size(lw + 64.0).hex()


# -- martingale test -------------------------------------------------------


def test_martingale_zero_gamma():
    mt = martingale_test(np.zeros(100))
    assert mt.mean == 1.0 and mt.z_score == 0.0 and mt.passed


def test_martingale_lognormal_weights_pass():
    # log rho = theta W(T) - theta^2 T / 2 has mean exactly 1
    theta = 0.3
    wT = np.random.default_rng(2).standard_normal(100_000)
    assert martingale_test(theta * wT - 0.5 * theta**2).passed


def test_martingale_biased_weights_fail():
    theta = 0.3
    wT = np.random.default_rng(2).standard_normal(100_000)
    assert not martingale_test(theta * wT - 0.5 * theta**2 + np.log(1.1)).passed


def test_martingale_accepts_ensembles_and_ledgers():
    lw = np.array([0.1, -0.1])
    grid = make_uniform_grid(0, 1, 1)
    ledger = LogWeightLedger(grid, lw[:, None], np.zeros((2, 1)))
    assert martingale_test(ledger).mean == martingale_test(lw).mean
    assert martingale_test(ensemble([0, 0], lw)).mean == martingale_test(lw).mean


# -- L1-Cauchy diagnostic --------------------------------------------------


def const_ledger(theta2, n_paths=50, n_steps=10):
    gen = np.random.default_rng(3)
    grid = make_uniform_grid(0, 1, n_steps)
    quad = np.full((n_paths, n_steps), theta2 / n_steps)
    stoch = gen.standard_normal((n_paths, n_steps)) * np.sqrt(quad)
    return LogWeightLedger(grid, stoch, quad)


def test_l1_cauchy_zero_above_sup_quad():
    out = l1_cauchy_diagnostic(const_ledger(0.5), [1.0, 2.0, 4.0])
    np.testing.assert_array_equal(out, [0.0, 0.0])


def test_l1_cauchy_constant_gamma_between_levels():
    out = l1_cauchy_diagnostic(const_ledger(1.5), [1.0, 2.0, 4.0])
    assert out[0] > 0 and out[1] == 0.0


def test_l1_cauchy_argument_checks():
    with pytest.raises(ValueError):
        l1_cauchy_diagnostic(const_ledger(1.0), [1.0])
    with pytest.raises(ValueError):
        l1_cauchy_diagnostic(const_ledger(1.0), [2.0, 1.0])


def test_l1_cauchy_decreases_on_path_dependent_model():
    model = path_dependent()
    grid = make_uniform_grid(0, 1, 64)
    # the sequence only settles once levels pass the bulk of the quad law
    levels = [1.0, 2.0, 4.0, 8.0]
    res = simulate_reference(model, grid, model.params["x0"], 4000, 0, levels=levels)
    out = l1_cauchy_diagnostic(res["truncated"], levels)
    assert np.all(out >= 0) and np.all(np.diff(out) <= 0)


# -- ensemble simulations --------------------------------------------------


def test_reference_simulation_is_chunking_invariant():
    model = path_dependent()
    grid = make_uniform_grid(0, 1, 16)
    a = simulate_reference(model, grid, model.params["x0"], 50, 7, STANDARD_FUNCTIONALS, levels=[1.0], chunk_size=50)
    b = simulate_reference(
        model, grid, model.params["x0"], 50, 7, STANDARD_FUNCTIONALS, levels=[1.0], chunk_size=7, workers=3
    )
    for key in a:
        assert a[key].tobytes() == b[key].tobytes()


def test_brownian_shift_target_mean():
    # under the shifted law X(T) = x + theta T
    model = brownian_shift(theta=0.5)
    ens = weighted_ensemble(model, make_uniform_grid(0, 1, 8), [0.0], 20_000, 11)
    rep = estimate_under_target(terminal_value, ens)
    assert abs(rep.estimate - 0.5) <= 3 * rep.stderr


def test_equal_drifts_give_unit_weights():
    model = ou_shift(theta=0.0)
    rows = compare_direct_vs_weighted(model, STANDARD_FUNCTIONALS, make_uniform_grid(0, 1, 16), 2000, 5)
    for r in rows:
        assert r.weighted.ess == pytest.approx(2000)
        assert r.passed()


def test_compare_brownian_shift_terminal_value():
    model = brownian_shift(theta=0.5)
    rows = compare_direct_vs_weighted(model, {"X(T)": terminal_value}, make_uniform_grid(0, 1, 8), 20_000, 1)
    (row,) = rows
    assert row.passed()
    assert abs(row.direct.estimate - 0.5) <= 3 * row.direct.stderr
