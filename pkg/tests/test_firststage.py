import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from orthoz.errors import ContractViolation
from orthoz.firststage import (
    LearnerSpec,
    NuisanceFunction,
    default_clip_bound,
    fit,
    fit_shared,
    mse_against_truth,
    rate_certificate,
    rate_verdict,
)
from orthoz.moments import PlrMoment
from orthoz.montecarlo import PlrDgp, default_g0
from orthoz.numerics import rng_stream

ALL_KINDS = [
    LearnerSpec("kernel"),
    LearnerSpec("knn", k=3),
    LearnerSpec("series", degree=4, ridge=1e-6),
]


def test_spec_validation():
    with pytest.raises(ContractViolation, match="bandwidth"):
        LearnerSpec("kernel", bandwidth=0.0)
    with pytest.raises(ContractViolation, match="k must"):
        LearnerSpec("knn", k=0)
    with pytest.raises(ContractViolation, match="degree"):
        LearnerSpec("series", degree=-1)
    with pytest.raises(ContractViolation, match="ridge"):
        LearnerSpec("series", ridge=-1.0)
    with pytest.raises(ContractViolation, match="kind"):
        LearnerSpec("forest")


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: s.kind)
def test_constant_targets_give_constant_predictions(spec):
    X = np.linspace(-1, 1, 40)[:, None]
    h = fit(spec, X, np.full((40, 2), 3.5))
    np.testing.assert_allclose(h(np.linspace(-2, 2, 17)[:, None]), 3.5, rtol=1e-10)


def test_empty_aux_rejected():
    with pytest.raises(ContractViolation):
        fit(LearnerSpec("kernel"), np.zeros((0, 1)), np.zeros((0, 1)))


def test_knn_k_larger_than_sample_rejected():
    with pytest.raises(ContractViolation):
        fit(LearnerSpec("knn", k=5), np.zeros((3, 1)), np.zeros(3))


def test_one_nn_interpolates_and_breaks_ties_by_index():
    X = np.array([[0.0], [1.0], [2.0], [1.0]])
    T = np.array([10.0, 20.0, 30.0, 40.0])
    h = fit(LearnerSpec("knn", k=1), X, T)
    np.testing.assert_array_equal(h(np.array([[0.0], [2.0]]))[:, 0], [10.0, 30.0])
    # x = 1 appears at indices 1 and 3; the lower index wins
    assert h(np.array([[1.0]]))[0, 0] == 20.0
    # 0.5 is equidistant from rows 0 and 1
    assert h(np.array([[0.5]]))[0, 0] == 10.0


def test_kernel_symmetric_grid_predicts_zero_at_centre():
    X = np.linspace(-1, 1, 21)[:, None]
    h = fit(LearnerSpec("kernel", bandwidth=0.3), X, X[:, 0])
    assert abs(h(np.array([[0.0]]))[0, 0]) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_kernel_predictions_are_convex_combinations(seed, bw):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (30, 1))
    T = rng.standard_normal((30, 2))
    h = fit(LearnerSpec("kernel", bandwidth=bw, clip_bound=1e9), X, T)
    P = h(rng.uniform(-1.5, 1.5, (50, 1)))
    assert np.all(P >= T.min(axis=0) - 1e-12) and np.all(P <= T.max(axis=0) + 1e-12)


def test_kernel_underflow_falls_back_to_nearest_neighbour():
    X = np.array([[0.0], [10.0]])
    h = fit(LearnerSpec("kernel", bandwidth=1e-3), X, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(h(np.array([[4.0], [6.0]]))[:, 0], [1.0, 2.0])
    assert h.provenance["nn_fallback_queries"] == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_clipping_bounds_every_coordinate(seed, bound):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (25, 1))
    T = 10 * rng.standard_normal((25, 2))
    for kind in ("kernel", "knn", "series"):
        h = fit(LearnerSpec(kind, k=1, degree=5, clip_bound=bound), X, T)
        P = h(rng.uniform(-3, 3, (100, 1)))
        assert np.all(np.abs(P) <= bound)


def test_default_clip_bound_keeps_constant_targets():
    T = np.full((10, 1), 7.0)
    assert default_clip_bound(T) == 7.0
    assert fit(LearnerSpec("kernel"), np.arange(10.0)[:, None], T)(np.array([[3.0]]))[0, 0] == 7.0


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: s.kind)
def test_fit_is_deterministic(spec):
    rng = rng_stream(9)
    X = rng.uniform(-1, 1, (200, 1))
    T = np.sin(3 * X) + 0.1 * rng.standard_normal((200, 1))
    probes = np.linspace(-1, 1, 1000)[:, None]
    a, b = fit(spec, X, T), fit(spec, X, T)
    assert a(probes).tobytes() == b(probes).tobytes()
    assert a.provenance["fingerprint"] == b.provenance["fingerprint"]


def test_fit_shared_matches_separate_fits_bitwise():
    rng = rng_stream(10)
    X = rng.uniform(-1, 1, (300, 1))
    T1 = rng.standard_normal((300, 2))
    T2 = rng.standard_normal((300, 1))
    spec = LearnerSpec("kernel", bandwidth_rate=0.2)
    shared = fit_shared(spec, X, [T1, T2])
    probes = rng.uniform(-1, 1, (400, 1))
    for h, T in zip(shared, (T1, T2)):
        solo = fit(spec, X, T)
        assert h(probes).tobytes() == solo(probes).tobytes()
        assert h.clip_bound == solo.clip_bound
        assert h.provenance["fingerprint"] == solo.provenance["fingerprint"]


def test_series_recovers_a_polynomial():
    X = np.linspace(-1, 1, 50)[:, None]
    T = 1 + 2 * X - 3 * X**3
    h = fit(LearnerSpec("series", degree=3), X, T)
    np.testing.assert_allclose(h(np.array([[0.3]])), 1 + 0.6 - 3 * 0.027, rtol=1e-10)


def test_oracle_learner_needs_truth():
    with pytest.raises(ContractViolation):
        fit(LearnerSpec("oracle"), np.zeros((3, 1)), np.zeros((3, 1)))


def test_mse_against_truth():
    h0 = lambda X: np.sin(X)
    X = np.linspace(-1, 1, 101)[:, None]
    exact = mse_against_truth(h0, h0, X)
    assert exact.mse == 0.0 and exact.scaled == 0.0
    shifted = mse_against_truth(lambda X: h0(X) + 0.1, h0, X, n=400)
    assert shifted.mse == pytest.approx(0.01, abs=1e-15)
    assert shifted.scaled == pytest.approx(20 * 0.01, abs=1e-14)


def test_kernel_mse_rate_slope():
    # twice-differentiable h0 with h ~ n^-1/5: theoretical mse slope -4/5
    rng = rng_stream(12, 0, "rate")
    X_eval = rng.uniform(-1, 1, (2000, 1))
    grid = [500, 2000, 8000]
    mses = []
    for n in grid:
        vals = []
        for _ in range(20):
            X = rng.uniform(-1, 1, (n, 1))
            T = default_g0(X) + rng.standard_normal((n, 1))
            h = fit(LearnerSpec("kernel", bandwidth_rate=0.2), X, T)
            vals.append(mse_against_truth(h, default_g0, X_eval).mse)
        mses.append(np.mean(vals))
    slope = stats.linregress(np.log(grid), np.log(mses)).slope
    assert -1.0 <= slope <= -0.6


def test_rate_verdict():
    assert rate_verdict([3.0, 2.0, 1.0, 0.5]) == "rate-ok"
    assert rate_verdict([1.0, 5.0, 2.0, 1.0]) == "rate-ok"  # only the top half counts
    assert rate_verdict([1.0, 1.0, 1.0, 1.5]) == "rate-fail"


def test_rate_certificate_examples():
    dgp = PlrDgp()
    model = PlrMoment()
    grid = [250, 500, 1000, 2000]
    oracle = rate_certificate(LearnerSpec("oracle"), dgp, model, grid, 10, rng_stream(13))
    assert oracle.ok and all(row[1] == 0.0 for row in oracle.table)
    kernel = rate_certificate(LearnerSpec("kernel", bandwidth_rate=0.2), dgp, model, grid, 10, rng_stream(13))
    assert kernel.ok
    zero = rate_certificate(LearnerSpec("constant", value=0.0), dgp, model, grid, 10, rng_stream(13))
    assert zero.verdict == "rate-fail"
    scaled = [row[1] for row in zero.table]
    assert all(b > a for a, b in zip(scaled, scaled[1:]))


def test_rate_certificate_preconditions():
    with pytest.raises(ContractViolation):
        rate_certificate(LearnerSpec("oracle"), PlrDgp(), PlrMoment(), [500, 250], 10, rng_stream(0))
    with pytest.raises(ContractViolation):
        rate_certificate(LearnerSpec("oracle"), PlrDgp(), PlrMoment(), [250, 500], 9, rng_stream(0))


def test_nuisance_function_clips_raw_predictions():
    h = NuisanceFunction(lambda X: np.full((len(X), 1), 5.0), 1, clip_bound=2.0)
    assert h(np.zeros((3, 1)))[0, 0] == 2.0
