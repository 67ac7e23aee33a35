"""Discounted holding cost of simulated paths.

The cost of a path is ``int_0^H exp(-gamma t) c . Qhat(t) dt`` with
``Qhat`` the diffusion-scaled queue. ``Qhat`` is piecewise constant, so
each inter-event interval is integrated in closed form. The remainder
beyond ``H`` is bounded using a linear growth bound on the expected
running supremum of the workload.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import NetworkModel, averaged_rates
from .policies import Policy
from .simulator import PathTrace, SimulationRequest, simulate

Z95 = float(stats.norm.ppf(0.975))
COST_MODES = ("exact", "table_grid")
TABLE_GRID_STEP = 0.1


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Holding costs ``c`` (positive) and discount rate ``gamma`` (positive)."""

    c: np.ndarray
    gamma: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).copy()
        if c.ndim != 1 or c.size == 0 or np.any(~np.isfinite(c)) or np.any(c <= 0):
            raise ValueError(f"holding costs must be a nonempty positive vector, got {self.c!r}")
        if not np.isfinite(self.gamma) or self.gamma <= 0:
            raise ValueError(f"discount rate must be positive, got {self.gamma}")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def of(cls, model: NetworkModel) -> "CostSpec":
        return cls(model.costs, model.discount)


@dataclass(frozen=True, eq=False)
class DiscountedCostEstimate:
    """Monte Carlo summary; ``values`` holds one cost per replication."""

    mean: float
    std_error: float
    replications: int
    horizon: float
    truncation_bound: float
    values: np.ndarray = field(repr=False)
    mode: str = "exact"
    growth_constant: float = float("nan")

    @property
    def ci95(self) -> tuple[float, float]:
        return self.mean - Z95 * self.std_error, self.mean + Z95 * self.std_error

    @classmethod
    def from_values(cls, values, horizon, truncation_bound=0.0, mode="exact", growth_constant=float("nan")):
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
        return cls(float(v.mean()), se, int(v.size), float(horizon), float(truncation_bound), v, mode,
                   float(growth_constant))


def _check_horizon(trace: PathTrace, horizon):
    covered = trace.time[-1] / trace.n
    if horizon is None:
        return covered
    if horizon > covered * (1 + 1e-12):
        raise ValueError(f"horizon {horizon} exceeds the trace coverage {covered}")
    return float(horizon)


def _alpha(trace: PathTrace, alpha):
    if alpha is None:
        return trace.alpha
    if abs(alpha - trace.alpha) > 1e-12:
        raise ValueError(f"alpha={alpha} differs from the trace's regime alpha={trace.alpha}")
    return float(alpha)


def discounted_cost_of_trace(trace: PathTrace, spec: CostSpec, n: float | None = None,
                             alpha: float | None = None, horizon: float | None = None) -> float:
    """Exact ``int_0^horizon exp(-gamma t) c . Qhat(t) dt`` along one trace.

    Parameters
    ----------
    trace : PathTrace
    spec : CostSpec
    n, alpha : float, optional
        Checked against the trace when given.
    horizon : float, optional
        Scaled-time upper limit; defaults to the trace's full coverage.
    """
    if n is not None and not np.isclose(n, trace.n, rtol=1e-12, atol=0):
        raise ValueError(f"trace was simulated at n={trace.n}, got n={n}")
    H = _check_horizon(trace, horizon)
    a = _alpha(trace, alpha)
    t = np.minimum(trace.time / trace.n, H)
    level = (trace.queue[:-1] @ spec.c) / trace.n ** a
    g = spec.gamma
    left, right = t[:-1], t[1:]
    # exp(-g a) - exp(-g b) without cancellation
    weight = -np.exp(-g * left) * np.expm1(-g * (right - left)) / g
    return float(np.dot(level, weight))


def table_grid_cost(trace: PathTrace, spec: CostSpec, horizon: float | None = None,
                    step: float = TABLE_GRID_STEP) -> float:
    """Grid estimator ``sum_{t = step, 2 step, .., H} exp(-gamma t) c . Qhat(t)``.

    No ``step`` weight multiplies the sum, so it is about ``1/step``
    times the integral. Kept for comparison with published tables.
    """
    H = _check_horizon(trace, horizon)
    m = int(np.floor(H / step + 1e-9))
    grid = step * np.arange(1, m + 1)
    idx = np.searchsorted(trace.time / trace.n, grid, side="right") - 1
    q = trace.queue[idx] @ spec.c / trace.n ** trace.alpha
    return float(np.dot(np.exp(-spec.gamma * grid), q))


def truncation_bound(spec: CostSpec, horizon: float, growth_constant: float, cost_scale: float = 1.0) -> float:
    """Closed form of ``int_H^inf exp(-gamma t) S a (t + 1) dt``.

    With ``E sup_{s<=t} W(s) <= a (t + 1)`` and ``c . Qhat <= S W`` for
    ``S = max_i c_i mu_i``, this bounds the expected cost beyond ``H``:
    ``S a exp(-gamma H) ((H + 1)/gamma + 1/gamma^2)``.
    """
    if growth_constant < 0 or not np.isfinite(growth_constant):
        raise ValueError(f"growth constant must be finite and >= 0, got {growth_constant}")
    if cost_scale < 0:
        raise ValueError("cost scale must be >= 0")
    g, H = spec.gamma, float(horizon)
    return float(cost_scale * growth_constant * np.exp(-g * H) * ((H + 1) / g + 1 / g ** 2))


def workload_running_sup(trace: PathTrace, mu_avg, times) -> np.ndarray:
    """``sup_{s<=t} W(s)`` at scaled ``times``, ``W = sum_i Qhat_i / mu_i``."""
    w = (trace.queue / np.asarray(mu_avg)).sum(axis=1) / trace.n ** trace.alpha
    run = np.maximum.accumulate(w)
    idx = np.searchsorted(trace.time / trace.n, times, side="right") - 1
    return run[np.clip(idx, 0, None)]


def calibrate_growth_constant(sups: np.ndarray, times) -> float:
    """Smallest ``a`` with ``mean sup_{s<=t} W(s) <= a (t + 1)`` on ``times``.

    ``sups`` has one row per replication.
    """
    times = np.asarray(times, dtype=float)
    return float(np.max(np.mean(sups, axis=0) / (times + 1.0)))


def _calibration_times(horizon: float) -> np.ndarray:
    return np.linspace(0.0, horizon, 51)


def run_replications(fn, replications: int, threads: int = 1) -> list:
    """``[fn(r) for r in range(replications)]``, optionally on a thread pool.

    Results keep replication order, so aggregates do not depend on the
    number of threads.
    """
    if threads is None or threads <= 1:
        return [fn(r) for r in range(replications)]
    with ThreadPoolExecutor(max_workers=int(threads)) as ex:
        return list(ex.map(fn, range(replications)))


@dataclass(frozen=True)
class _RepResult:
    exact: float
    grid: float
    sup: np.ndarray


def _one(model, n, policy, spec, horizon, seed, r, env_mode, redecide, step, calib, mu_avg) -> _RepResult:
    tr = simulate(SimulationRequest(model, n, policy, horizon, seed=seed, replication=r,
                                    env_mode=env_mode, redecide_on_env=redecide))
    return _RepResult(discounted_cost_of_trace(tr, spec, horizon=horizon),
                      table_grid_cost(tr, spec, horizon=horizon, step=step),
                      workload_running_sup(tr, mu_avg, calib))


def _estimate(results, which, spec, horizon, step, cost_scale, calib):
    vals = [getattr(x, which) for x in results]
    a = calibrate_growth_constant(np.array([x.sup for x in results]), calib)
    bound = truncation_bound(spec, horizon, a, cost_scale)
    if which == "grid":
        # the grid sum carries no dt weight
        bound /= step
    return DiscountedCostEstimate.from_values(vals, horizon, bound, "exact" if which == "exact" else "table_grid", a)


def monte_carlo_cost(model: NetworkModel, n: float, policy: Policy, spec: CostSpec | None = None,
                     replications: int = 100, horizon: float = 5.0, seed: int = 0, mode: str = "exact",
                     env_mode: str = "auto", threads: int = 1, redecide_on_env: bool = True,
                     step: float = TABLE_GRID_STEP) -> DiscountedCostEstimate:
    """Estimate the expected discounted cost from independent replications.

    Replication ``r`` uses the streams of ``(seed, r)``. The truncation
    bound uses a growth constant calibrated on the same replications.

    Parameters
    ----------
    mode : {"exact", "table_grid"}
        Closed-form integral, or the undiscretised grid sum of
        :func:`table_grid_cost`.
    """
    if replications < 2:
        raise ValueError("need at least 2 replications")
    if mode not in COST_MODES:
        raise ValueError(f"mode must be one of {COST_MODES}, got {mode!r}")
    spec = spec or CostSpec.of(model)
    _, mu_avg = averaged_rates(model, n)
    calib = _calibration_times(horizon)
    res = run_replications(lambda r: _one(model, n, policy, spec, horizon, seed, r, env_mode,
                                          redecide_on_env, step, calib, mu_avg), replications, threads)
    scale = float(np.max(spec.c * mu_avg))
    return _estimate(res, "exact" if mode == "exact" else "grid", spec, horizon, step, scale, calib)


@dataclass(frozen=True, eq=False)
class PairedDifference:
    """``policy - baseline`` per replication, summarised."""

    policy: str
    baseline: str
    mean: float
    std_error: float

    @property
    def ci95(self) -> tuple[float, float]:
        return self.mean - Z95 * self.std_error, self.mean + Z95 * self.std_error


@dataclass(frozen=True, eq=False)
class PolicyComparison:
    estimates: dict
    grid_estimates: dict
    differences: list
    env_mode: str
    common_random_numbers: bool


def _independent_seed(seed: int, j: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7, j]).generate_state(1, np.uint64)[0])


def compare_policies(model: NetworkModel, n: float, policies, spec: CostSpec | None = None,
                     replications: int = 100, horizon: float = 5.0, seed: int = 0,
                     env_mode: str = "auto", threads: int = 1, common_random_numbers: bool = True,
                     redecide_on_env: bool = True, step: float = TABLE_GRID_STEP) -> PolicyComparison:
    """Estimate every policy's cost and the paired differences to the first.

    With common random numbers every policy sees the same environment
    path and arrival streams in replication ``r``; the environment mode is
    shared and is ``"exact"`` whenever some policy observes the
    environment.
    """
    policies = list(policies)
    if len(policies) < 1:
        raise ValueError("no policies to compare")
    if replications < 2:
        raise ValueError("need at least 2 replications")
    spec = spec or CostSpec.of(model)
    if any(p.uses_environment for p in policies):
        env_mode = "exact"
    _, mu_avg = averaged_rates(model, n)
    calib = _calibration_times(horizon)
    scale = float(np.max(spec.c * mu_avg))
    per, ests, grids = [], {}, {}
    for j, p in enumerate(policies):
        s = seed if common_random_numbers else _independent_seed(seed, j)
        res = run_replications(lambda r: _one(model, n, p, spec, horizon, s, r, env_mode, redecide_on_env,
                                              step, calib, mu_avg), replications, threads)
        label = p.name if p.name not in ests else f"{p.name}#{j}"
        ests[label] = _estimate(res, "exact", spec, horizon, step, scale, calib)
        grids[label] = _estimate(res, "grid", spec, horizon, step, scale, calib)
        per.append(label)
    base = ests[per[0]].values
    diffs = []
    for label in per[1:]:
        d = ests[label].values - base
        diffs.append(PairedDifference(label, per[0], float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))))
    return PolicyComparison(ests, grids, diffs, env_mode, common_random_numbers)


@dataclass(frozen=True, eq=False)
class CostCurveSeries:
    """Replication means of ``c . Qhat(t)`` (``C1``) and its discounted value (``C2``)."""

    policy: str
    times: np.ndarray
    C1: np.ndarray
    C2: np.ndarray


def cost_curves(model: NetworkModel, n: float, policies, spec: CostSpec | None = None,
                replications: int = 100, horizon: float = 5.0, step: float = TABLE_GRID_STEP,
                seed: int = 0, env_mode: str = "auto", threads: int = 1, gamma: float | None = None,
                redecide_on_env: bool = True) -> list[CostCurveSeries]:
    """Mean instantaneous and discounted cost on the grid ``step, 2 step, .., horizon``.

    ``gamma`` overrides the discount rate for ``C2`` and may be 0.
    Policies share random numbers as in :func:`compare_policies`.
    """
    spec = spec or CostSpec.of(model)
    g = spec.gamma if gamma is None else float(gamma)
    if g < 0:
        raise ValueError("gamma must be >= 0")
    policies = list(policies)
    if any(p.uses_environment for p in policies):
        env_mode = "exact"
    m = int(np.floor(horizon / step + 1e-9))
    grid = step * np.arange(1, m + 1)
    out = []
    for p in policies:
        def one(r, p=p):
            tr = simulate(SimulationRequest(model, n, p, horizon, seed=seed, replication=r,
                                            env_mode=env_mode, redecide_on_env=redecide_on_env))
            idx = np.searchsorted(tr.time / tr.n, grid, side="right") - 1
            return tr.queue[idx] @ spec.c / tr.n ** tr.alpha
        paths = np.array(run_replications(one, replications, threads))
        c1 = paths.mean(axis=0)
        c2 = np.exp(-g * grid) * c1
        out.append(CostCurveSeries(p.name, grid, c1, c2))
    return out
