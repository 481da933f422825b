import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from orthoz.diagnostics import (
    check_E_bound,
    decompose,
    ks_statistic,
    ks_threshold,
    normality_check,
    term_trajectories,
)
from orthoz.errors import ContractViolation
from orthoz.firststage import LearnerSpec, fit
from orthoz.moments import PlrMoment, estimate_bounds
from orthoz.montecarlo import PlrDgp
from orthoz.numerics import rng_stream

PLR = PlrMoment()
DGP = PlrDgp()


def kernel_fit(Z_aux, model, bw_scale=1.06):
    return fit(LearnerSpec("kernel", bandwidth_scale=bw_scale, bandwidth_rate=0.2), model.x(Z_aux), model.nuisance_targets(Z_aux))


def test_zero_nuisance_error_gives_zero_D_and_E():
    Z = DGP.sample(rng_stream(1), 300)
    h0 = DGP.h0(PLR)
    dec = decompose(PLR, Z, DGP.theta0, [1.05], h0, h0, lambda_star=2.5)
    assert np.all(dec.D == 0.0) and np.all(dec.E == 0.0)
    assert np.array_equal(dec.B, dec.C)
    assert dec.E_bound == 0.0
    assert check_E_bound(dec).passed


def test_naive_moment_has_zero_remainder():
    model = DGP.model("plr-naive")
    Z_aux, Z = DGP.sample(rng_stream(2), 200), DGP.sample(rng_stream(3), 300)
    h_hat = kernel_fit(Z_aux, model, 2.5)
    dec = decompose(model, Z, DGP.theta0, DGP.theta0, h_hat, DGP.h0(model), lambda_star=0.0)
    assert np.all(dec.E == 0.0)
    assert np.any(dec.D != 0.0)
    assert dec.identity_error < 1e-12


@settings(max_examples=100, deadline=None)
@given(*[st.floats(-5, 5, allow_nan=False)] * 7)
def test_single_observation_offset_remainder(y, w, x, theta, dy, dw, g):
    Z = np.array([[y, w, x]])
    G0 = np.array([[g, 0.5 * g]])
    dec = decompose(PLR, Z, [theta], [theta], G0 + [dy, dw], G0, lambda_star=0.0)
    # 0.5 (dy, dw) [[0, 1], [1, -2 theta]] (dy, dw)^T
    quad = 0.5 * np.array([dy, dw]) @ np.array([[0.0, 1.0], [1.0, -2.0 * theta]]) @ np.array([dy, dw])
    assert dec.E[0] == pytest.approx(quad, rel=1e-12, abs=1e-12)
    assert dec.E[0] == pytest.approx(dy * dw - theta * dw * dw, rel=1e-12, abs=1e-12)
    assert dec.B[0] - dec.C[0] - dec.D[0] == pytest.approx(dec.E[0], rel=1e-9, abs=1e-9)


def test_identity_holds_on_kernel_fits():
    for rep in range(20):
        rng = rng_stream(4, rep)
        Z_aux, Z = DGP.sample(rng, 500), DGP.sample(rng, 500)
        dec = decompose(PLR, Z, DGP.theta0, DGP.theta0, kernel_fit(Z_aux, PLR), DGP.h0(PLR), 2.5)
        assert dec.identity_error <= 1e-10


def test_E_bound_constant_offset_closed_form():
    Z = DGP.sample(rng_stream(5), 400)
    h0 = DGP.h0(PLR)
    delta = np.array([0.2, -0.3])
    G0 = h0(Z[:, 2:])
    lam = estimate_bounds(PLR, Z, (DGP.theta0, DGP.theta0), (G0.min(0), G0.max(0)), 4, rng_stream(6)).lambda_hat
    assert lam == pytest.approx(1 + math.sqrt(2), abs=1e-10)
    dec = decompose(PLR, Z, DGP.theta0, DGP.theta0, lambda X: h0(X) + delta, h0, lam)
    n = Z.shape[0]
    E_closed = math.sqrt(n) * (delta[0] * delta[1] - 1.0 * delta[1] ** 2)
    bound_closed = 0.5 * lam * math.sqrt(n) * float(delta @ delta)
    assert dec.E[0] == pytest.approx(E_closed, rel=1e-12)
    assert dec.E_bound == pytest.approx(bound_closed, rel=1e-12)
    check = check_E_bound(dec)
    assert check.passed and check.E_abs[0] < check.E_bound


def test_E_bound_is_honest_with_zero_lambda():
    Z = DGP.sample(rng_stream(7), 50)
    h0 = DGP.h0(PLR)
    dec = decompose(PLR, Z, DGP.theta0, DGP.theta0, lambda X: h0(X) + [0.3, -0.2], h0, lambda_star=0.0)
    assert dec.E[0] == pytest.approx(math.sqrt(50) * (0.3 * -0.2 - 0.04), rel=1e-12)
    assert not check_E_bound(dec).passed


def test_decompose_rejects_negative_lambda():
    Z = DGP.sample(rng_stream(7), 5)
    h0 = DGP.h0(PLR)
    with pytest.raises(ContractViolation):
        decompose(PLR, Z, [1.0], [1.0], h0, h0, -1.0)


def test_A_deviation_against_target():
    Z = DGP.sample(rng_stream(8), 2000)
    h0 = DGP.h0(PLR)
    J = PLR.grad_theta(Z, DGP.theta0, h0(Z[:, 2:])).mean(axis=0)
    dec = decompose(PLR, Z, DGP.theta0, DGP.theta0, h0, h0, 1.0, J_inv_target=np.linalg.inv(J))
    assert dec.A_deviation < 1e-12


# --- normality


def test_ks_statistic_matches_scipy():
    x = rng_stream(9).standard_normal(777)
    assert ks_statistic(x) == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-12)


def test_normality_passes_on_normal_draws():
    res = normality_check(rng_stream(10).standard_normal(10_000))
    assert res.ks_stat < 1.36 / 100
    assert res.threshold == pytest.approx(0.0136 + 0.03)
    assert res.passed


def test_normality_degenerate_input():
    res = normality_check(np.zeros(500))
    assert res.ks_stat == pytest.approx(0.5, abs=1e-15)
    assert not res.passed


def test_normality_rejects_uniform():
    x = rng_stream(11).uniform(-2, 2, 10_000)
    res = normality_check(x)
    # brute-force sup distance between the U(-2, 2) and normal CDFs
    grid = np.linspace(-2, 2, 400_001)
    population = float(np.max(np.abs((grid + 2) / 4 - stats.norm.cdf(grid))))
    assert population == pytest.approx(0.0915, abs=5e-4)
    assert abs(res.ks_stat - population) < 0.02
    assert not res.passed


def test_normality_needs_200_values():
    with pytest.raises(ContractViolation):
        normality_check(np.zeros(199))
    assert ks_threshold(1000) == pytest.approx(1.36 / math.sqrt(1000) + 0.03)


# --- trajectories

GRID = [250, 500, 1000, 2000]


def test_trajectories_oracle_have_no_nuisance_terms():
    rows = term_trajectories(PLR, DGP, LearnerSpec("oracle"), [200, 400], 50, seed=3)
    assert all(r.mean_D == 0.0 and r.mean_E == 0.0 for r in rows)
    assert all(r.replications == 50 for r in rows)


def test_trajectories_orthogonal_terms_decay():
    rows = term_trajectories(PLR, DGP, LearnerSpec("kernel", bandwidth_rate=0.2), GRID, 50, seed=4)
    E = [r.mean_E for r in rows]
    D = [r.mean_D for r in rows]
    top = E[len(E) // 2 :]
    assert all(b < a for a, b in zip(top, top[1:]))
    assert E[-1] < E[0] and D[-1] < D[0]
    assert rows[-1].mean_A_dev < rows[0].mean_A_dev


def test_trajectories_naive_D_does_not_decay():
    model = DGP.model("plr-naive")
    rows = term_trajectories(model, DGP, LearnerSpec("kernel", bandwidth_scale=2.5, bandwidth_rate=0.2), GRID, 50, seed=5)
    assert rows[-1].mean_D >= rows[0].mean_D
    assert all(r.mean_E == 0.0 for r in rows)


def test_trajectories_preconditions():
    with pytest.raises(ContractViolation):
        term_trajectories(PLR, DGP, LearnerSpec("oracle"), [400, 200], 50, seed=0)
    with pytest.raises(ContractViolation):
        term_trajectories(PLR, DGP, LearnerSpec("oracle"), [200, 400], 49, seed=0)
