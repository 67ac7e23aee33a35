import numpy as np
import pytest
from scipy import integrate

from mmsched import _kernels as kern
from mmsched.cost import (CostSpec, compare_policies, cost_curves, discounted_cost_of_trace,
                          monte_carlo_cost, table_grid_cost, truncation_bound)
from mmsched.simulator import PathTrace, SimulationRequest, simulate

from oracles import riemann_cost


def flat_trace(levels, times, n=1.0, alpha=0.5):
    """Trace whose queue vector is ``levels[k]`` on ``[times[k], times[k+1])``."""
    t = np.asarray(times, float)
    q = np.asarray(levels, np.int32)
    K = q.shape[1]
    kinds = np.full(t.size, kern.KIND_ARRIVAL, np.int8)
    kinds[0], kinds[-1] = kern.KIND_START, kern.KIND_END
    z = np.zeros((t.size, K))
    return PathTrace(time=t, kind=kinds, cls=np.zeros(t.size, np.int16), env=np.zeros(t.size, np.int32),
                     queue=q, alloc=z, busy=z, idle=t.copy(), n=float(n), alpha=alpha, pi=np.ones(1))


def test_closed_form_examples():
    spec = CostSpec([20.0, 25.0], 2.0)
    assert discounted_cost_of_trace(flat_trace([[0, 0], [0, 0]], [0, 10]), spec) == 0.0
    assert discounted_cost_of_trace(flat_trace([[1, 1], [1, 1]], [0, 1000]), spec) == pytest.approx(22.5, rel=1e-15)
    one = flat_trace([[1, 0], [0, 0], [0, 0]], [0, 1, 4])
    assert discounted_cost_of_trace(one, spec) == pytest.approx(10 * (1 - np.exp(-2)), rel=1e-14)


def test_scaling_and_horizon_checks():
    spec = CostSpec([1.0], 1.0)
    tr = flat_trace([[4], [4]], [0, 400], n=4, alpha=0.5)
    # Qhat = 4 / 2 over scaled [0, 100]
    assert discounted_cost_of_trace(tr, spec, n=4, alpha=0.5, horizon=1.0) == pytest.approx(2 * (1 - np.exp(-1)))
    with pytest.raises(ValueError, match="coverage"):
        discounted_cost_of_trace(tr, spec, horizon=101.0)
    with pytest.raises(ValueError, match="alpha"):
        discounted_cost_of_trace(tr, spec, alpha=0.6)


def test_cost_spec_validation():
    with pytest.raises(ValueError):
        CostSpec([1.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        CostSpec([1.0], 0.0)


def test_linearity_in_costs(example, cmu_star):
    tr = simulate(SimulationRequest(example, 25, cmu_star, 3.0, seed=4))
    c = example.costs
    assert discounted_cost_of_trace(tr, CostSpec(2 * c, 2.0)) == 2 * discounted_cost_of_trace(tr, CostSpec(c, 2.0))


def test_riemann_sums_converge_at_first_order(example, cmu_star):
    spec = CostSpec.of(example)
    err = {1e-2: [], 1e-3: []}
    for r in range(20):
        tr = simulate(SimulationRequest(example, 25, cmu_star, 2.0, seed=5, replication=r))
        exact = discounted_cost_of_trace(tr, spec, horizon=2.0)
        for d in err:
            err[d].append(abs(riemann_cost(tr, spec.c, spec.gamma, 2.0, d) - exact))
    coarse, fine = np.mean(err[1e-2]), np.mean(err[1e-3])
    assert coarse <= 50 * 1e-2
    assert 3 <= coarse / fine <= 30


def test_truncation_bound_against_quadrature():
    spec = CostSpec([1.0], 2.0)
    q, _ = integrate.quad(lambda t: np.exp(-2 * t) * (t + 1), 5, np.inf, epsabs=1e-15, epsrel=1e-13)
    assert abs(truncation_bound(spec, 5.0, 1.0) - q) <= 1e-12
    assert truncation_bound(spec, 5.0, 0.0) == 0.0
    assert truncation_bound(spec, 10.0, 1.0) < truncation_bound(spec, 5.0, 1.0)
    with pytest.raises(ValueError):
        truncation_bound(spec, 5.0, -1.0)


def test_large_discount_kills_mass(example, cmu_star):
    est = monte_carlo_cost(example, 25, cmu_star, CostSpec(example.costs, 1e3), replications=20, horizon=1.0, seed=1)
    assert est.mean <= 0.1
    assert 0 <= est.truncation_bound <= 1e-6


def test_same_seed_same_estimate(example, cmu_star):
    a = monte_carlo_cost(example, 25, cmu_star, replications=8, horizon=1.0, seed=3)
    b = monte_carlo_cost(example, 25, cmu_star, replications=8, horizon=1.0, seed=3, threads=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert (a.mean, a.std_error, a.truncation_bound) == (b.mean, b.std_error, b.truncation_bound)
    assert a.std_error >= 0 and a.ci95[0] <= a.mean <= a.ci95[1]


def test_table_grid_mode(example, cmu_star):
    tr = simulate(SimulationRequest(example, 25, cmu_star, 1.0, seed=2))
    spec = CostSpec.of(example)
    grid = 0.1 * np.arange(1, 11)
    idx = np.searchsorted(tr.time / tr.n, grid, side="right") - 1
    manual = np.sum(np.exp(-2 * grid) * (tr.queue[idx] @ spec.c) / 5.0)
    assert table_grid_cost(tr, spec) == pytest.approx(manual, rel=1e-14)
    est = monte_carlo_cost(example, 25, cmu_star, replications=4, horizon=1.0, seed=2, mode="table_grid")
    assert est.mode == "table_grid"


def test_identical_policies_have_zero_difference(example, cmu_star):
    cmp = compare_policies(example, 25, [cmu_star, cmu_star], replications=10, horizon=1.0, seed=5)
    d = cmp.differences[0]
    assert d.mean == 0.0 and d.std_error == 0.0
    assert list(cmp.estimates) == ["cmu*", "cmu*#1"]


def test_environment_aware_comparison_is_exact(example, cmu_star, dynamic_cmu):
    cmp = compare_policies(example, 25, [cmu_star, dynamic_cmu], replications=4, horizon=0.5, env_mode="auto")
    assert cmp.env_mode == "exact"


def test_common_random_numbers_reduce_variance(example, cmu_star, dynamic_cmu):
    means = {True: [], False: []}
    for m in range(20):
        for crn in means:
            cmp = compare_policies(example, 25, [cmu_star, dynamic_cmu], replications=20, horizon=2.0,
                                   seed=100 + m, common_random_numbers=crn)
            means[crn].append(cmp.differences[0].mean)
    assert np.var(means[True], ddof=1) <= np.var(means[False], ddof=1)


def test_cost_curves(example, cmu_star, dynamic_cmu):
    curves = cost_curves(example, 25, [cmu_star, dynamic_cmu], replications=10, horizon=1.0, seed=4)
    for s in curves:
        np.testing.assert_allclose(s.times, 0.1 * np.arange(1, 11))
        assert np.all(s.C2 <= s.C1)
        np.testing.assert_allclose(s.C2, np.exp(-2 * s.times) * s.C1, rtol=1e-14)
    flat = cost_curves(example, 25, [cmu_star], replications=10, horizon=1.0, seed=4, gamma=0.0)
    np.testing.assert_array_equal(flat[0].C1, flat[0].C2)
    np.testing.assert_array_equal(flat[0].C1, curves[0].C1)
