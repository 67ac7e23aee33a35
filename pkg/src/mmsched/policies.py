"""Scheduling policies and trace-level admissibility checks.

A policy maps the observable state ``(queues, env, time)`` to an
allocation vector: the fraction of server effort given to each class.
Head-of-line priority rules also expose a per-environment priority table
so the compiled simulator can apply them without calling back into
Python.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import PriorityOrder, RateFamily, _descending_with_ties

# relative tolerance for floating identities on traces
TRACE_RTOL = 1e-9


class Policy:
    """Base class for scheduling rules.

    Subclasses implement :meth:`decide`. ``uses_environment`` is False
    when decisions ignore the environment state, which lets the simulator
    integrate the environment out (see ``env_mode="marginal"``).
    """

    name: str = "policy"
    uses_environment: bool = True

    def decide(self, queues, env: int, time: float) -> np.ndarray:
        raise NotImplementedError

    def priority_table(self, L: int) -> np.ndarray | None:
        """Row ``y`` lists classes by priority in environment state ``y``.

        ``None`` for rules that are not head-of-line priorities.
        """
        return None


def _serve_first_nonempty(order, queues) -> np.ndarray:
    q = np.asarray(queues)
    out = np.zeros(q.size)
    for i in order:
        if q[i] > 0:
            out[i] = 1.0
            break
    return out


def _check_permutation(order, K: int | None = None) -> tuple[int, ...]:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(len(order))):
        raise ValueError(f"priority order {order} is not a permutation of 0..{len(order) - 1}")
    if K is not None and len(order) != K:
        raise ValueError(f"priority order has {len(order)} classes, expected {K}")
    return order


@dataclass(frozen=True)
class StaticPriorityPolicy(Policy):
    """Serve the first nonempty class in a fixed order (preemptive)."""

    order: tuple[int, ...]
    name: str = "static"
    uses_environment: bool = field(default=False, init=False)

    def __post_init__(self):
        object.__setattr__(self, "order", _check_permutation(self.order))

    def decide(self, queues, env: int = 0, time: float = 0.0) -> np.ndarray:
        return _serve_first_nonempty(self.order, queues)

    def priority_table(self, L: int) -> np.ndarray:
        return np.tile(np.array(self.order, dtype=np.int64), (L, 1))


@dataclass(frozen=True)
class EnvironmentPriorityPolicy(Policy):
    """Priority order that depends on the environment state.

    Parameters
    ----------
    table : tuple of tuple of int
        ``table[y]`` is the priority order used in state ``y``.
    """

    table: tuple[tuple[int, ...], ...]
    name: str = "env-priority"
    uses_environment: bool = field(default=True, init=False)

    def __post_init__(self):
        rows = tuple(_check_permutation(r) for r in self.table)
        if len({len(r) for r in rows}) > 1:
            raise ValueError("priority rows have different lengths")
        object.__setattr__(self, "table", rows)

    def decide(self, queues, env: int, time: float = 0.0) -> np.ndarray:
        return _serve_first_nonempty(self.table[env], queues)

    def priority_table(self, L: int) -> np.ndarray:
        if L != len(self.table):
            raise ValueError(f"policy has {len(self.table)} environment rows, model has {L}")
        return np.array(self.table, dtype=np.int64)


def static_priority_policy(order) -> StaticPriorityPolicy:
    """Fixed preemptive priority, ``order[0]`` served first (0-based)."""
    return StaticPriorityPolicy(tuple(order))


def cmu_star_policy(order: PriorityOrder) -> StaticPriorityPolicy:
    """The c-mu-star rule: static priority by averaged ``c_i mu*_i``."""
    return StaticPriorityPolicy(tuple(order.sigma), name="cmu*")


def dynamic_cmu_policy(c, service_rates, n: float | None = None) -> EnvironmentPriorityPolicy:
    """Priority by ``c_i mu_i^n(y)`` in the current environment state.

    Parameters
    ----------
    c : array_like, shape (K,)
        Holding costs.
    service_rates : RateFamily or array_like, shape (L, K)
        Service rates; a family is evaluated at ``n``.
    n : float, optional
        Required when ``service_rates`` is a family.
    """
    if isinstance(service_rates, RateFamily):
        if n is None:
            raise ValueError("n is required to resolve a service-rate family")
        mu = service_rates.at(n)
    else:
        mu = np.asarray(service_rates, dtype=float)
    c = np.asarray(c, dtype=float)
    if mu.ndim != 2 or mu.shape[1] != c.size:
        raise ValueError(f"service rates shape {mu.shape} does not match {c.size} classes")
    table = tuple(tuple(_descending_with_ties(c * mu[y])) for y in range(mu.shape[0]))
    return EnvironmentPriorityPolicy(table, name="dynamic-cmu")


@dataclass
class AdmissibilityReport:
    """Pass/fail per admissibility condition with a short reason on failure."""

    checks: dict[str, bool]
    details: dict[str, str]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def __str__(self):
        lines = [f"{k}: {'pass' if v else 'FAIL ' + self.details.get(k, '')}" for k, v in self.checks.items()]
        return "\n".join(lines)


def validate_admissibility(trace) -> AdmissibilityReport:
    """Check the recorded trace against the admissibility conditions.

    Checks, each evaluated at every recorded event:

    * ``busy_monotone``: every ``T_i`` starts at 0 and never decreases;
    * ``idle_monotone``: ``I`` starts at 0 and never decreases;
    * ``clock_identity``: ``t = sum_i T_i(t) + I(t)``;
    * ``nonnegative``: all queue lengths are >= 0;
    * ``conservation``: ``Q = A - D`` in integer arithmetic;
    * ``allocation_bounds``: entries in [0, 1], total at most 1 and no
      effort on an empty queue;
    * ``piecewise_constant``: the increments of ``T`` between events equal
      the allocation recorded at the left endpoint times the gap.
    """
    t = np.asarray(trace.time, dtype=float)
    T = np.asarray(trace.busy, dtype=float)
    idle = np.asarray(trace.idle, dtype=float)
    Q = np.asarray(trace.queue)
    alloc = np.asarray(trace.alloc, dtype=float)
    tol = TRACE_RTOL * np.maximum(1.0, np.abs(t))
    checks, details = {}, {}

    def record(name, ok, msg=""):
        checks[name] = bool(ok)
        if not ok:
            details[name] = msg

    dT = np.diff(T, axis=0)
    bad = np.argwhere(dT < -tol[1:, None])
    record("busy_monotone", np.all(np.abs(T[0]) <= tol[0]) and bad.size == 0,
           f"T decreases at event {bad[0][0] + 1}" if bad.size else "T(0) != 0")
    dI = np.diff(idle)
    bad = np.flatnonzero(dI < -tol[1:])
    record("idle_monotone", abs(idle[0]) <= tol[0] and bad.size == 0,
           f"I decreases at event {bad[0] + 1}" if bad.size else "I(0) != 0")
    gap = np.abs(t - T.sum(axis=1) - idle)
    bad = np.flatnonzero(gap > tol)
    record("clock_identity", bad.size == 0,
           f"|t - sum T - I| = {gap[bad[0]]:.3g} at event {bad[0]}" if bad.size else "")
    bad = np.argwhere(Q < 0)
    record("nonnegative", bad.size == 0,
           f"Q_{bad[0][1]} = {Q[tuple(bad[0])]} at event {bad[0][0]}" if bad.size else "")
    diff = np.asarray(trace.arrivals) - np.asarray(trace.departures) - Q
    bad = np.argwhere(diff != 0)
    record("conservation", bad.size == 0, f"Q != A - D at event {bad[0][0]}" if bad.size else "")
    atol = TRACE_RTOL
    over = (alloc < -atol) | (alloc > 1 + atol)
    over_total = alloc.sum(axis=1) > 1 + atol
    on_empty = (Q == 0) & (alloc > atol)
    bad = np.flatnonzero(over.any(axis=1) | over_total | on_empty.any(axis=1))
    record("allocation_bounds", bad.size == 0, f"invalid allocation at event {bad[0]}" if bad.size else "")
    expected = alloc[:-1] * np.diff(t)[:, None]
    err = np.abs(dT - expected)
    bad = np.argwhere(err > tol[1:, None])
    record("piecewise_constant", bad.size == 0,
           f"T increment differs from allocation at event {bad[0][0] + 1}" if bad.size else "")
    return AdmissibilityReport(checks, details)
