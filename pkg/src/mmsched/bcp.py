"""Brownian control problem: reflection map, limiting spec and J*.

The optimal control keeps all work in the class with the smallest
``c_i mu*_i``; the resulting workload is the one-sided reflection of the
one-dimensional Brownian motion ``sum_i X_i / mu*_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import CostSpec, DiscountedCostEstimate, calibrate_growth_constant, run_replications, truncation_bound
from .envchain import covariance_lambda
from .model import HeavyTrafficReport, NetworkModel, cmu_star_ordering, verify_heavy_traffic

PSD_TOL = -1e-10


class InfeasibleCandidate(ValueError):
    """A candidate pair for the reflection problem violates a constraint."""


@dataclass(frozen=True, eq=False)
class BrownianSpec:
    """Drift ``theta = mu* b`` and covariance ``Sigma`` of the limiting netput."""

    drift: np.ndarray
    covariance: np.ndarray
    case: str | None
    mu_star: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.covariance, dtype=float)
        d = np.asarray(self.drift, dtype=float)
        mu = np.asarray(self.mu_star, dtype=float)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(d)) and np.all(np.isfinite(mu))):
            raise ValueError("Brownian spec has non-finite entries")
        if S.shape != (d.size, d.size) or mu.shape != d.shape:
            raise ValueError(f"inconsistent shapes: drift {d.shape}, covariance {S.shape}, mu* {mu.shape}")
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(S), initial=0.0)):
            raise ValueError("covariance is not symmetric")
        if d.size and np.linalg.eigvalsh(S).min() < PSD_TOL:
            raise ValueError("covariance is not positive semidefinite")
        for name, v in (("drift", d), ("covariance", S), ("mu_star", mu)):
            v = v.copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def workload_drift(self) -> float:
        return float(np.sum(self.drift / self.mu_star))

    @property
    def workload_variance(self) -> float:
        u = 1.0 / self.mu_star
        return float(u @ self.covariance @ u)


def brownian_spec(model: NetworkModel, Lambda=None, report: HeavyTrafficReport | None = None) -> BrownianSpec:
    """Assemble ``(theta, Sigma)`` for the model's regime.

    ``Sigma = diag(2 lambda*)`` in cases 1a/1b, ``diag(2 lambda*) + Lambda``
    in case 2 and ``Lambda`` in case 3. ``Lambda`` defaults to the
    covariance of the limiting arrival-rate function.
    """
    case = model.regime.case
    if case is None:
        raise ValueError(f"(nu={model.regime.nu:g}, alpha={model.regime.alpha:g}) is outside the covered regimes")
    report = report or verify_heavy_traffic(model)
    lam_star, mu_star, b = report.lambda_star, report.mu_star, report.b
    if b is None or not np.all(np.isfinite(b)) or not np.all(np.isfinite(lam_star)):
        raise ValueError("heavy-traffic report lacks finite lambda* or b")
    if Lambda is None:
        Lambda = covariance_lambda(model.generator, model.arrival.limit(), model.pi)
    Lambda = np.asarray(Lambda, dtype=float)
    base = np.diag(2.0 * lam_star)
    Sigma = {"Case1a": base, "Case1b": base, "Case2": base + Lambda, "Case3": Lambda}[case]
    return BrownianSpec(mu_star * b, Sigma, case, mu_star)


@dataclass(frozen=True, eq=False)
class SkorohodDecomposition:
    """``z = x + y >= 0`` with ``y`` nondecreasing from 0."""

    z: np.ndarray
    y: np.ndarray

    def complementarity(self) -> float:
        """``sum_k z_k (y_k - y_{k-1})``; zero for the reflection map."""
        return float(np.dot(self.z[1:], np.diff(self.y)))


def skorohod_map(x) -> SkorohodDecomposition:
    """One-sided reflection at 0 of a path sampled on a grid.

    ``y(t) = -min(0, min_{s<=t} x(s))`` and ``z = x + y``. On a
    piecewise-linear path the grid values are exact.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("x must be a nonempty 1-d path")
    if x[0] < 0:
        raise ValueError(f"x(0) = {x[0]} < 0")
    y = -np.minimum(0.0, np.minimum.accumulate(x))
    return SkorohodDecomposition(x + y, y)


def feasible_dominance_check(x, z_candidate, y_candidate, tol: float = 1e-12) -> bool:
    """Whether a feasible pair dominates the reflection: ``z' >= Gamma(x)``.

    Raises
    ------
    InfeasibleCandidate
        If ``z' != x + y'``, ``z' < 0``, ``y'(0) < 0`` or ``y'`` decreases.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z_candidate, dtype=float)
    y = np.asarray(y_candidate, dtype=float)
    scale = tol * max(1.0, float(np.max(np.abs(x), initial=0.0)), float(np.max(np.abs(y), initial=0.0)))
    if not (x.shape == z.shape == y.shape):
        raise InfeasibleCandidate("candidate and path lengths differ")
    if np.max(np.abs(z - (x + y))) > scale:
        raise InfeasibleCandidate("z' != x + y'")
    if np.min(z) < -scale:
        raise InfeasibleCandidate(f"z' takes the negative value {np.min(z)!r}")
    if y[0] < -scale:
        raise InfeasibleCandidate("y'(0) < 0")
    if y.size > 1 and np.min(np.diff(y)) < -scale:
        raise InfeasibleCandidate("y' decreases")
    return bool(np.all(z >= skorohod_map(x).z - scale))


@dataclass(frozen=True, eq=False)
class WorkloadSample:
    """Sampled paths, one row per path, on ``times``.

    ``Q`` and ``eta`` are ``None`` unless components were requested.
    """

    times: np.ndarray
    W: np.ndarray
    I: np.ndarray
    Q: np.ndarray | None = None
    eta: np.ndarray | None = None


def _sqrt_psd(S):
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_workload_star(spec: BrownianSpec, dt: float, horizon: float, rng: np.random.Generator,
                         paths: int = 1, costs=None, components: bool = False,
                         exact_minimum: bool = True) -> WorkloadSample:
    """Sample the optimally controlled workload and its idleness.

    The netput workload ``x = sum_i X_i / mu*_i`` is a Brownian motion
    with drift ``spec.workload_drift`` and variance
    ``spec.workload_variance``; it is sampled by exact Gaussian
    increments. With ``exact_minimum`` the running infimum also includes
    a draw of each step's Brownian-bridge minimum, which makes
    ``(W, I)`` exact in law at the grid points. Without it the reflection
    acts on the grid values only.

    Parameters
    ----------
    costs : array_like, optional
        Needed with ``components`` to locate the class with the smallest
        ``c_i mu*_i``.
    components : bool
        Also sample the full ``X`` and return ``Q*`` and ``eta*``.
    """
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be positive")
    m, s2 = spec.workload_drift, spec.workload_variance
    if not (np.isfinite(m) and np.isfinite(s2)) or s2 < 0:
        raise ValueError("workload drift/variance must be finite with variance >= 0")
    steps = int(np.ceil(horizon / dt - 1e-9))
    times = dt * np.arange(steps + 1)
    if components:
        if costs is None:
            raise ValueError("costs are required to sample components")
        K = spec.drift.size
        root = _sqrt_psd(spec.covariance)
        incr = spec.drift * dt + np.sqrt(dt) * rng.standard_normal((paths, steps, K)) @ root.T
        X = np.zeros((paths, steps + 1, K))
        np.cumsum(incr, axis=1, out=X[:, 1:])
        x = (X / spec.mu_star).sum(axis=2)
    else:
        x = np.zeros((paths, steps + 1))
        np.cumsum(m * dt + np.sqrt(s2 * dt) * rng.standard_normal((paths, steps)), axis=1, out=x[:, 1:])
    if exact_minimum:
        a, b = x[:, :-1], x[:, 1:]
        u = rng.random((paths, steps))
        low = 0.5 * (a + b - np.sqrt((b - a) ** 2 - 2.0 * s2 * dt * np.log1p(-u)))
        inf = np.empty_like(x)
        inf[:, 0] = x[:, 0]
        inf[:, 1:] = np.minimum(low, b)
        np.minimum.accumulate(inf, axis=1, out=inf)
    else:
        inf = np.minimum.accumulate(x, axis=1)
    I = -np.minimum(0.0, inf)
    W = x + I
    if not components:
        return WorkloadSample(times, W, I)
    low_cls = cmu_star_ordering(costs, spec.mu_star).lowest
    mu = spec.mu_star
    Q = np.zeros_like(X)
    Q[:, :, low_cls] = mu[low_cls] * W
    eta = -X / mu
    eta[:, :, low_cls] = W - X[:, :, low_cls] / mu[low_cls]
    return WorkloadSample(times, W, I, Q, eta)


@dataclass(frozen=True)
class LPValue:
    value: float
    q: np.ndarray


def lp_value(w: float, c, mu_star) -> LPValue:
    """``min c.q`` over ``q >= 0`` with ``sum_i q_i / mu*_i = w``.

    The minimum puts all mass on the class with the smallest ``c_i mu*_i``.
    """
    if w < 0:
        raise ValueError(f"workload must be >= 0, got {w}")
    c = np.asarray(c, dtype=float)
    mu = np.asarray(mu_star, dtype=float)
    k = cmu_star_ordering(c, mu).lowest
    q = np.zeros(c.size)
    q[k] = mu[k] * w
    return LPValue(float(c[k] * mu[k] * w), q)


@dataclass(frozen=True, eq=False)
class JStarEstimate:
    estimate: DiscountedCostEstimate
    dt: float
    workload_drift: float
    workload_variance: float
    slope: float


J_STAR_BATCH = 256


def estimate_J_star(spec: BrownianSpec, model: NetworkModel | CostSpec, replications: int = 10000,
                    dt: float = 1e-3, horizon: float = 5.0, seed: int = 0, threads: int = 1,
                    exact_minimum: bool = True, batch: int = J_STAR_BATCH) -> JStarEstimate:
    """Monte Carlo value of ``E int_0^inf exp(-gamma t) V(W*(t)) dt``.

    ``V(w) = c_k mu*_k w`` for the class ``k`` with the smallest product.
    The integral up to ``horizon`` uses the trapezoidal rule on the
    ``dt`` grid; the tail is bounded as in :func:`truncation_bound`.
    Paths are sampled in batches of ``batch``, batch ``j`` with streams
    ``(seed, j)``, so results do not depend on ``threads``.
    """
    cs = model if isinstance(model, CostSpec) else CostSpec.of(model)
    if replications < 2:
        raise ValueError("need at least 2 replications")
    slope = lp_value(1.0, cs.c, spec.mu_star).value
    nb = -(-replications // batch)
    calib = np.linspace(0.0, horizon, 51)

    def run(j):
        size = min(batch, replications - j * batch)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(j,))))
        smp = sample_workload_star(spec, dt, horizon, rng, paths=size, exact_minimum=exact_minimum)
        disc = np.exp(-cs.gamma * smp.times)
        f = smp.W * disc
        h = np.diff(smp.times)
        vals = slope * ((f[:, 1:] + f[:, :-1]) * 0.5 * h).sum(axis=1)
        idx = np.clip(np.searchsorted(smp.times, calib, side="right") - 1, 0, None)
        sup = np.maximum.accumulate(smp.W, axis=1)[:, idx]
        return vals, sup

    parts = run_replications(run, nb, threads)
    vals = np.concatenate([p[0] for p in parts])
    sups = np.concatenate([p[1] for p in parts])
    a = calibrate_growth_constant(sups, calib)
    est = DiscountedCostEstimate.from_values(vals, horizon, truncation_bound(cs, horizon, a, slope), "exact", a)
    return JStarEstimate(est, float(dt), spec.workload_drift, spec.workload_variance, slope)

