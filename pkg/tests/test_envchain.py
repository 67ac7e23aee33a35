import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsched.envchain import (GeneratorError, GeneratorMatrix, covariance_lambda, ergodic_phi, next_jump,
                              solve_poisson_equation, stationary_distribution)
from mmsched.simulator import SimulationRequest, simulate

from oracles import random_generator, two_state_integral_samples

# frozen from two_state_integral_samples(2, 1, (1, 2), T=1e4, 200 reps, seed 2024):
# sample variance 0.16832 with standard error 0.01687
MC_LAMBDA_VAR = 0.16832415503053852
MC_LAMBDA_SE = 0.016874655006112696


def test_generator_rejects_bad_rows():
    with pytest.raises(GeneratorError, match="row 0"):
        GeneratorMatrix([[-1.0, 2.0], [1.0, -1.0]])
    with pytest.raises(GeneratorError, match="negative off-diagonal"):
        GeneratorMatrix([[1.0, -1.0], [1.0, -1.0]])
    with pytest.raises(GeneratorError, match="square"):
        GeneratorMatrix([[0.0, 0.0]])


def test_generator_rejects_reducible():
    with pytest.raises(GeneratorError, match="communicating classes"):
        GeneratorMatrix([[-1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@pytest.mark.parametrize("rates, expected", [
    ([[-1, 1], [1, -1]], [0.5, 0.5]),
    ([[-2, 2], [1, -1]], [1 / 3, 2 / 3]),
    ([[0]], [1.0]),
])
def test_stationary_examples(rates, expected):
    pi = stationary_distribution(GeneratorMatrix(rates))
    np.testing.assert_allclose(pi.probs, expected, rtol=0, atol=1e-14)


def test_next_jump_single_state(rng):
    assert next_jump(GeneratorMatrix([[0.0]]), 0, rng) == (float("inf"), 0)


def test_next_jump_holding_mean_and_destination():
    Q = GeneratorMatrix([[-2, 2], [1, -1]])
    rng = np.random.default_rng(7)
    draws = [next_jump(Q, 0, rng) for _ in range(100_000)]
    hold = np.array([d[0] for d in draws])
    assert {d[1] for d in draws} == {1}
    se = hold.std(ddof=1) / np.sqrt(hold.size)
    assert abs(hold.mean() - 0.5) <= 3 * se


def test_next_jump_frequencies():
    Q = GeneratorMatrix([[-3, 1, 2], [1, -1, 0], [0.5, 0.5, -1]])
    rng = np.random.default_rng(11)
    counts = np.zeros(3)
    m = 100_000
    for _ in range(m):
        counts[next_jump(Q, 0, rng)[1]] += 1
    p = np.array([0, 1 / 3, 2 / 3])
    se = np.sqrt(p * (1 - p) / m)
    assert np.all(np.abs(counts / m - p) <= 4 * se + 1e-15)


def test_next_jump_rejects_out_of_range(rng):
    with pytest.raises(IndexError):
        next_jump(GeneratorMatrix([[-1, 1], [1, -1]]), 2, rng)


def test_poisson_examples():
    sol = solve_poisson_equation(GeneratorMatrix([[-1, 1], [1, -1]]), [0.0, 1.0])
    np.testing.assert_allclose(sol.hat[:, 0], [-0.25, 0.25], atol=1e-15)
    const = solve_poisson_equation(GeneratorMatrix([[-2, 2], [1, -1]]), np.full((2, 3), 4.0))
    np.testing.assert_allclose(const.hat, 0.0, atol=1e-15)


def test_poisson_dimension_mismatch():
    with pytest.raises(ValueError, match="rows"):
        solve_poisson_equation(GeneratorMatrix([[-1, 1], [1, -1]]), [1.0, 2.0, 3.0])


def test_lambda_constant_and_identical_columns():
    Q = GeneratorMatrix([[-2, 2], [1, -1]])
    np.testing.assert_array_equal(covariance_lambda(Q, np.ones((2, 2))), 0.0)
    Lam = covariance_lambda(Q, np.array([[1.0, 1.0], [2.0, 2.0]]))
    assert Lam[0, 0] == Lam[0, 1] == Lam[1, 1]


def test_lambda_two_state_closed_form():
    # 2 (f1 - f2)^2 a b / (a + b)^3 for the chain 0 <-> 1 with rates a, b
    Lam = covariance_lambda(GeneratorMatrix([[-2, 2], [1, -1]]), [1.0, 2.0])
    assert Lam[0, 0] == pytest.approx(4 / 27, rel=1e-13)


def test_lambda_matches_monte_carlo_oracle():
    Lam = covariance_lambda(GeneratorMatrix([[-2, 2], [1, -1]]), [1.0, 2.0])[0, 0]
    assert abs(Lam - MC_LAMBDA_VAR) <= 3 * MC_LAMBDA_SE


def test_monte_carlo_oracle_is_reproducible():
    s = two_state_integral_samples(2.0, 1.0, np.array([1.0, 2.0]), 1e4, 200, np.random.default_rng(2024))
    assert s.var(ddof=1) == pytest.approx(MC_LAMBDA_VAR, rel=1e-12)


@st.composite
def chains(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    L = draw(st.integers(1, 8))
    K = draw(st.integers(1, 3))
    rng = np.random.default_rng(seed)
    Q = random_generator(rng, L) if L > 1 else np.zeros((1, 1))
    return GeneratorMatrix(Q), rng.uniform(0.0, 5.0, size=(L, K))


@settings(max_examples=200, deadline=None)
@given(chains())
def test_chain_properties(chain):
    Q, f = chain
    pi = stationary_distribution(Q)
    assert np.all(pi.probs >= 0)
    assert abs(pi.probs.sum() - 1) <= 1e-12
    assert np.max(np.abs(pi.probs @ Q.rates)) <= 1e-10
    sol = solve_poisson_equation(Q, f, pi)
    assert sol.residual <= 1e-10 and sol.centering <= 1e-10
    Lam = covariance_lambda(Q, f, pi)
    np.testing.assert_array_equal(Lam, Lam.T)
    assert np.linalg.eigvalsh(Lam).min() >= -1e-10


def test_ergodic_phi_trivial_cases(example, cmu_star):
    tr = simulate(SimulationRequest(example, 25, cmu_star, 1.0, seed=3, env_mode="exact"))
    np.testing.assert_array_equal(ergodic_phi(tr, np.ones((2, 2))), 0.0)
    f = np.array([[1.0, 3.0], [2.0, 5.0]])
    phi = ergodic_phi(tr, f)
    assert phi.shape == (tr.n_events, 2)
    # classes that were never served have a flat path
    for i in range(2):
        if np.all(tr.alloc[:, i] == 0):
            np.testing.assert_array_equal(phi[:, i], 0.0)


def test_ergodic_phi_matches_direct_integration(example, cmu_star):
    tr = simulate(SimulationRequest(example, 16, cmu_star, 1.0, seed=4, env_mode="exact"))
    f = np.array([[1.0, 3.0], [2.0, 5.0]])
    fstar = tr.pi @ f
    total = np.zeros(2)
    for k in range(tr.n_events - 1):
        total += (f[tr.env[k]] - fstar) * tr.alloc[k] * (tr.time[k + 1] - tr.time[k])
    np.testing.assert_allclose(ergodic_phi(tr, f)[-1], total / 4.0, rtol=1e-10, atol=1e-12)


def test_ergodic_phi_needs_exact_environment(example, cmu_star):
    tr = simulate(SimulationRequest(example, 25, cmu_star, 1.0, seed=3, env_mode="marginal"))
    with pytest.raises(ValueError, match="exact"):
        ergodic_phi(tr, np.ones((2, 2)))
