import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsched.bcp import (BrownianSpec, InfeasibleCandidate, brownian_spec, estimate_J_star,
                         feasible_dominance_check, lp_value, sample_workload_star, skorohod_map)
from mmsched.cost import CostSpec
from mmsched.model import AffineRates, NetworkModel, ScalingRegime, two_class_example

from oracles import j_star_closed_form

paths = st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=60).map(
    lambda v: np.concatenate([[abs(v[0])], v[1:]]))


def brute_force_reflection(x):
    z, y, low = [], [], 0.0
    for v in x:
        low = min(low, v)
        y.append(-low)
        z.append(v - low)
    return np.array(z), np.array(y)


def test_brownian_spec_case1_example(example):
    spec = brownian_spec(example)
    # b is a finite-n estimate at n = 1e8, accurate to O(n^-1/2)
    np.testing.assert_allclose(spec.drift, [-1.0, -2.0], atol=1e-3)
    np.testing.assert_allclose(spec.covariance, np.diag([2.0, 3.0]), rtol=1e-15)
    assert spec.case == "Case1a"
    assert spec.workload_drift == pytest.approx(-1.2, abs=1e-3)
    assert spec.workload_variance == pytest.approx(0.8, rel=1e-14)


def test_brownian_spec_case3_constant_rates():
    lam = np.tile([1.0, 0.75], (2, 1))
    mu = np.tile([2.5, 2.5], (2, 1))
    m = NetworkModel([[-2, 2], [1, -1]], AffineRates(lam, 0 * lam), AffineRates(mu, 0 * mu), [1.0, 2.0], 1.0,
                     ScalingRegime(-1 / 3, 2 / 3))
    np.testing.assert_array_equal(brownian_spec(m).covariance, 0.0)


def test_brownian_spec_case2_additive():
    m = two_class_example(0.0)
    np.testing.assert_allclose(brownian_spec(m, Lambda=np.zeros((2, 2))).covariance, np.diag([2.0, 3.0]))
    Lam = np.array([[0.5, 0.2], [0.2, 0.1]])
    np.testing.assert_allclose(brownian_spec(m, Lambda=Lam).covariance, np.diag([2.0, 3.0]) + Lam)
    # the example's limit arrival rates do not depend on the state, so the default Lambda vanishes
    np.testing.assert_allclose(brownian_spec(m).covariance, np.diag([2.0, 3.0]), atol=1e-12)


def test_brownian_spec_rejects_uncovered_regime():
    with pytest.raises(ValueError, match="covered"):
        brownian_spec(two_class_example(-1 / 3, 0.5))


def test_brownian_spec_validation():
    with pytest.raises(ValueError, match="semidefinite"):
        BrownianSpec([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], "Case1a", [1.0, 1.0])
    with pytest.raises(ValueError, match="non-finite"):
        BrownianSpec([np.nan], [[1.0]], "Case1a", [1.0])


def test_skorohod_examples():
    t = np.linspace(0, 1, 101)
    r = skorohod_map(-t)
    np.testing.assert_array_equal(r.z, 0.0)
    np.testing.assert_allclose(r.y, t)
    up = skorohod_map(t ** 2)
    np.testing.assert_array_equal(up.z, t ** 2)
    np.testing.assert_array_equal(up.y, 0.0)
    with pytest.raises(ValueError):
        skorohod_map([-1.0, 0.0])


def test_skorohod_piecewise_linear_example():
    t = np.linspace(0.0, 3.0, 3001)
    x = np.interp(t, [0, 1, 2, 3], [0, 1, -1, 0])
    r = skorohod_map(x)
    z_ref, y_ref = brute_force_reflection(x)
    np.testing.assert_allclose(r.z, z_ref, atol=1e-15)
    np.testing.assert_allclose(r.y, y_ref, atol=1e-15)
    assert r.z[2000] == pytest.approx(0.0, abs=1e-12)
    assert r.z[-1] == pytest.approx(1.0, abs=1e-12) and r.y[-1] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(paths)
def test_skorohod_complementarity_and_brute_force(x):
    r = skorohod_map(x)
    assert np.all(r.z >= 0) and r.y[0] == 0 and np.all(np.diff(r.y) >= 0)
    assert abs(r.complementarity()) <= 1e-9 * max(1.0, np.max(np.abs(x)))
    z_ref, y_ref = brute_force_reflection(x)
    np.testing.assert_allclose(r.z, z_ref, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 60).flatmap(lambda k: st.tuples(
    st.lists(st.floats(-20, 20), min_size=k, max_size=k), st.lists(st.floats(-20, 20), min_size=k, max_size=k))))
def test_skorohod_lipschitz(pair):
    a, b = (np.array(v) for v in pair)
    a[0], b[0] = abs(a[0]), abs(b[0])
    gap = np.max(np.abs(skorohod_map(a).z - skorohod_map(b).z))
    assert gap <= 2 * np.max(np.abs(a - b)) + 1e-12


@settings(max_examples=300, deadline=None)
@given(paths, st.data())
def test_feasible_candidates_dominate(x, data):
    r = skorohod_map(x)
    extra = np.cumsum(data.draw(st.lists(st.floats(0, 5), min_size=x.size, max_size=x.size)))
    y = r.y + extra
    assert feasible_dominance_check(x, x + y, y)


def test_dominance_examples():
    t = np.linspace(0, 2, 201)
    x = np.sin(5 * t)
    r = skorohod_map(x)
    assert feasible_dominance_check(x, r.z, r.y)
    y2 = r.y + t
    assert feasible_dominance_check(x, x + y2, y2)
    assert np.all((x + y2 - r.z)[1:] > 0)
    with pytest.raises(InfeasibleCandidate, match="decreases"):
        feasible_dominance_check(x, x + r.y - t + 5, r.y - t + 5)
    with pytest.raises(InfeasibleCandidate, match="negative"):
        feasible_dominance_check(x, x, np.zeros_like(x))


def test_lp_value_examples():
    assert lp_value(0.0, [20, 25], [2.5, 2.5]).value == 0.0
    v = lp_value(1.0, [20, 25], [2.5, 2.5])
    assert v.value == 50.0
    np.testing.assert_array_equal(v.q, [2.5, 0.0])
    with pytest.raises(ValueError):
        lp_value(-1.0, [1.0], [1.0])


def test_lp_value_matches_simplex_grid_search():
    rng = np.random.default_rng(17)
    res = 20
    for _ in range(100):
        K = int(rng.integers(1, 5))
        c, mu, w = rng.uniform(0.1, 10, K), rng.uniform(0.1, 10, K), rng.uniform(0, 5)
        best = np.inf
        # q_i = mu_i w p_i with p on the simplex satisfies sum q_i / mu_i = w
        for p in itertools.product(range(res + 1), repeat=K):
            if sum(p) == res:
                best = min(best, w * float(np.dot(c * mu, np.array(p) / res)))
        lp = lp_value(w, c, mu)
        assert lp.value == pytest.approx(best, rel=1e-12, abs=1e-12)
        assert np.sum(lp.q / mu) == pytest.approx(w)


def test_zero_variance_workload():
    mu = np.array([2.0, 4.0])
    neg = BrownianSpec([-1.0, -2.0], np.zeros((2, 2)), "Case1a", mu)
    s = sample_workload_star(neg, 0.01, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(s.W, 0.0, atol=1e-12)
    np.testing.assert_allclose(s.I[0], 1.0 * s.times, rtol=1e-12)
    pos = BrownianSpec([1.0, 2.0], np.zeros((2, 2)), "Case1a", mu)
    s = sample_workload_star(pos, 0.01, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(s.W[0], 1.0 * s.times, rtol=1e-12)
    np.testing.assert_array_equal(s.I, 0.0)


def test_zero_variance_J_star():
    mu = np.array([2.0, 4.0])
    cs = CostSpec([3.0, 1.0], 2.0)
    neg = BrownianSpec([-1.0, -2.0], np.zeros((2, 2)), "Case1a", mu)
    assert estimate_J_star(neg, cs, replications=4, dt=1e-2, horizon=10.0).estimate.mean <= 1e-12
    pos = BrownianSpec([1.0, 2.0], np.zeros((2, 2)), "Case1a", mu)
    est = estimate_J_star(pos, cs, replications=4, dt=1e-3, horizon=12.0)
    # slope = min c_i mu_i = 4, m = 1
    assert est.slope == 4.0
    assert est.estimate.mean == pytest.approx(4.0 * 1.0 / 4.0, rel=1e-6)


def test_bcp_solution_structure(example):
    spec = brownian_spec(example)
    s = sample_workload_star(spec, 1e-3, 1.0, np.random.default_rng(3), paths=20, costs=example.costs,
                             components=True)
    np.testing.assert_array_equal(s.Q[:, :, 1], 0.0)
    np.testing.assert_allclose(s.Q[:, :, 0], 2.5 * s.W, rtol=1e-15)
    cq = s.Q @ example.costs
    np.testing.assert_allclose(cq, [[lp_value(w, example.costs, spec.mu_star).value for w in row] for row in s.W],
                               rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(s.eta.sum(axis=2), s.I, atol=1e-12)
    assert np.all(s.W >= 0) and np.all(np.diff(s.I, axis=1) >= 0)


def test_J_star_matches_closed_form(example):
    spec = brownian_spec(example)
    est = estimate_J_star(spec, example, replications=10_000, dt=1e-3, horizon=5.0, seed=1)
    ref = j_star_closed_form(spec.workload_drift, spec.workload_variance, est.slope, example.discount)
    assert ref == pytest.approx(5.963, abs=1e-3)
    assert abs(est.estimate.mean - ref) <= 3 * est.estimate.std_error + est.estimate.truncation_bound


def test_J_star_increases_with_variance(example):
    spec = brownian_spec(example)
    wide = BrownianSpec(spec.drift, 2 * spec.covariance, spec.case, spec.mu_star)
    a = estimate_J_star(spec, example, replications=2000, dt=1e-2, seed=4).estimate
    b = estimate_J_star(wide, example, replications=2000, dt=1e-2, seed=4).estimate
    assert b.mean >= a.mean - 3 * np.hypot(a.std_error, b.std_error)


def test_J_star_thread_invariance(example):
    spec = brownian_spec(example)
    a = estimate_J_star(spec, example, replications=600, dt=1e-2, seed=8, threads=1)
    b = estimate_J_star(spec, example, replications=600, dt=1e-2, seed=8, threads=3)
    np.testing.assert_array_equal(a.estimate.values, b.estimate.values)
