"""Event-level simulation of the Markov-modulated multiclass queue.

:func:`simulate` produces a :class:`PathTrace`: one row per event with the
queue vector, the allocation in force until the next event, cumulative
busy times ``T``, idle time ``I`` and (in exact mode) the internal
arrival/service clocks. The scaled views (fluid, diffusion, netput) are
computed from a trace without re-simulation.

Time in a trace is unscaled; scaled time is ``t = tau / n``.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels as kern
from .model import NetworkModel, averaged_rates, limit_averages
from .policies import Policy

KIND_NAMES = ("start", "arrival", "service", "env", "end")
ENV_MODES = ("exact", "marginal", "auto")
# marginal mode is chosen by "auto" when environment jumps outnumber
# queue events by at least this factor
AUTO_MARGINAL_RATIO = 10.0


class SimulationError(RuntimeError):
    """Raised when a simulation cannot be run as requested."""


class PolicyError(SimulationError):
    """A policy returned an inadmissible allocation."""


@dataclass(frozen=True, eq=False)
class SimulationRequest:
    """Everything that determines one simulated path.

    Parameters
    ----------
    model : NetworkModel
    n : float
        Scaling index.
    policy : Policy
    horizon : float
        Length in scaled time; the simulated interval is ``[0, n * horizon]``.
    seed : int
        Master seed; streams are derived from ``(seed, replication)``.
    replication : int
        Replication index.
    initial_env : int, optional
        Starting environment state (0-based); drawn from the stationary
        law when omitted.
    env_mode : {"exact", "marginal", "auto"}
        ``"marginal"`` integrates the environment out between queue
        events. It requires a policy that ignores the environment and
        records no environment jumps or clocks.
    redecide_on_env : bool
        Re-evaluate the policy at environment jumps. When False the
        allocation only changes at arrivals and service completions.
    force_python : bool
        Run the event loop in the interpreter, calling ``policy.decide``
        at every event even for priority rules.
    """

    model: NetworkModel
    n: float
    policy: Policy
    horizon: float
    seed: int = 0
    replication: int = 0
    initial_env: int | None = None
    env_mode: str = "auto"
    redecide_on_env: bool = True
    force_python: bool = False

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if not self.n >= 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.env_mode not in ENV_MODES:
            raise ValueError(f"env_mode must be one of {ENV_MODES}, got {self.env_mode!r}")
        if self.initial_env is not None and not 0 <= self.initial_env < self.model.L:
            raise ValueError(f"initial_env {self.initial_env} outside 0..{self.model.L - 1}")
        if int(self.seed) < 0 or int(self.replication) < 0:
            raise ValueError("seed and replication must be nonnegative")


@dataclass(frozen=True, eq=False)
class PathTrace:
    """Event record of one path.

    Row ``k`` describes the state just after event ``k``; ``alloc[k]`` is
    in force on ``[time[k], time[k+1])``. Row 0 is the start (kind
    ``start``) and the last row the horizon (kind ``end``).
    """

    time: np.ndarray
    kind: np.ndarray
    cls: np.ndarray
    env: np.ndarray
    queue: np.ndarray
    alloc: np.ndarray
    busy: np.ndarray
    idle: np.ndarray
    arrival_clock: np.ndarray | None = None
    service_clock: np.ndarray | None = None
    n: float = 1.0
    nu: float = 0.0
    alpha: float = 0.5
    pi: np.ndarray | None = None
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None
    env_mode: str = "exact"
    policy: str = ""
    seed: int = 0
    replication: int = 0
    horizon: float | None = None

    @property
    def K(self) -> int:
        return self.queue.shape[1]

    @property
    def L(self) -> int:
        return 1 if self.pi is None else len(self.pi)

    @property
    def n_events(self) -> int:
        return self.time.size

    def _counts(self, kind: int) -> np.ndarray:
        hit = np.zeros((self.time.size, self.K), dtype=np.int64)
        rows = np.flatnonzero(self.kind == kind)
        hit[rows, self.cls[rows]] = 1
        return np.cumsum(hit, axis=0)

    @cached_property
    def arrivals(self) -> np.ndarray:
        """Cumulative arrivals ``A`` per class, counted from the event log."""
        return self._counts(kern.KIND_ARRIVAL)

    @cached_property
    def departures(self) -> np.ndarray:
        """Cumulative service completions ``D`` per class."""
        return self._counts(kern.KIND_SERVICE)

    def fingerprint(self) -> str:
        """SHA-256 over all recorded arrays, for determinism checks."""
        h = hashlib.sha256()
        for a in (self.time, self.kind, self.cls, self.env, self.queue, self.alloc,
                  self.busy, self.idle, self.arrival_clock, self.service_clock):
            if a is not None:
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _streams(seed: int, replication: int, ids) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(replication), s))))
            for s in ids]


def _resolve_env_mode(req: SimulationRequest, lam, mu, env_exit) -> str:
    mode = req.env_mode
    if mode == "marginal":
        if req.policy.uses_environment:
            raise SimulationError(f"policy {req.policy.name!r} observes the environment; "
                                  "env_mode='marginal' cannot be used")
        return mode
    if mode == "exact" or req.policy.uses_environment or req.model.L == 1:
        return "exact"
    queue_rate = float(np.max(lam.sum(axis=1) + mu.max(axis=1)))
    env_jumps = float(np.max(env_exit)) * req.n ** req.model.regime.nu
    return "marginal" if env_jumps >= AUTO_MARGINAL_RATIO * max(queue_rate, 1e-300) else "exact"


def _python_decide(policy: Policy, K: int):
    def decide(prio, q, y, t, out):
        a = np.asarray(policy.decide(q.copy(), int(y), float(t)), dtype=float)
        if a.shape != (K,) or not np.all(np.isfinite(a)):
            raise PolicyError(f"policy {policy.name!r} returned allocation of shape {a.shape}")
        if np.any(a < 0) or np.any(a > 1) or a.sum() > 1 + 1e-12:
            raise PolicyError(f"policy {policy.name!r} returned allocation {a} outside the simplex")
        if np.any((q == 0) & (a > 0)):
            raise PolicyError(f"policy {policy.name!r} serves an empty queue: q={q}, alloc={a}")
        out[:] = a
    return decide


class _Buffers:
    def __init__(self, cap: int, K: int, clocks: bool):
        self.cap = cap
        self.arrays = [
            np.empty(cap), np.empty(cap, np.int8), np.empty(cap, np.int16), np.empty(cap, np.int32),
            np.empty((cap, K), np.int32), np.empty((cap, K)), np.empty((cap, K)), np.empty(cap),
            np.empty((cap if clocks else 0, K)), np.empty((cap if clocks else 0, K)),
        ]

    def grow(self, used: int):
        new = max(int(self.cap * 1.5), self.cap + 1024)
        out = []
        for a in self.arrays:
            if a.shape[0] == 0:
                out.append(a)
                continue
            b = np.empty((new,) + a.shape[1:], a.dtype)
            b[:used] = a[:used]
            out.append(b)
        self.arrays = out
        self.cap = new

    def trimmed(self, used: int):
        return [a[:used] if a.shape[0] else None for a in self.arrays]


def simulate(req: SimulationRequest) -> PathTrace:
    """Simulate one path of the ``n``-th system under ``req.policy``.

    The system starts empty. Identical requests give identical traces.

    Raises
    ------
    SimulationError
        Non-finite rates, or marginal mode with an environment-aware policy.
    PolicyError
        A Python policy returned an inadmissible allocation.
    """
    model, n, policy = req.model, float(req.n), req.policy
    K, L = model.K, model.L
    lam, mu = model.rates_at(n)
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
        raise SimulationError(f"non-finite rates at n={n}")
    lam = np.ascontiguousarray(lam, dtype=float)
    mu = np.ascontiguousarray(mu, dtype=float)
    Q = model.generator
    speed = n ** model.regime.nu
    env_exit = Q.exit_rates()
    mode = _resolve_env_mode(req, lam, mu, env_exit)
    pi = model.pi.probs

    init = _streams(req.seed, req.replication, [0])[0]
    if req.initial_env is None:
        y0 = min(int(np.searchsorted(np.cumsum(pi), init.random(), side="right")), L - 1)
    else:
        y0 = int(req.initial_env)

    prio = None if req.force_python else policy.priority_table(L)
    if prio is None:
        decide = _python_decide(policy, K)
        prio = np.zeros((L, K), dtype=np.int64)
        python = True
    else:
        decide = kern.priority_decide
        prio = np.ascontiguousarray(prio, dtype=np.int64)
        python = False

    horizon_u = n * float(req.horizon)
    queue_rate = float(np.max(lam.sum(axis=1)) + np.max(mu))
    fstate = np.zeros(4)
    istate = np.array([y0, 0, 0], dtype=np.int64)
    q = np.zeros(K, dtype=np.int64)
    alloc = np.zeros(K)
    busy = np.zeros(K)

    if mode == "exact":
        env_rate = speed * env_exit
        if not np.all(np.isfinite(env_rate)):
            raise SimulationError(f"environment jump rates overflow at n={n}")
        env_cdf = np.cumsum(Q.jump_probabilities(), axis=1)
        env_cdf[:, -1] = 1.0
        gens = tuple(_streams(req.seed, req.replication, range(1, 2 + 2 * K)))
        expected = horizon_u * (queue_rate + float(np.max(env_rate)))
        bufs = _Buffers(int(1.1 * expected) + 1024, K, clocks=True)
        ta, ts, pa, ps = (np.zeros(K) for _ in range(4))
        loop = kern.exact_loop.py_func if python else kern.exact_loop
        args = (decide, prio, lam, mu, env_rate, env_cdf, bool(req.redecide_on_env), horizon_u, gens,
                fstate, istate, q, alloc, busy, ta, ts, pa, ps)
    else:
        G = speed * Q.rates
        if L > 1:
            vals, vecs = np.linalg.eig(G)
            if np.linalg.cond(vecs) > 1e10:
                raise SimulationError("environment generator is not diagonalisable; use env_mode='exact'")
            inv = np.linalg.inv(vecs)
        else:
            vals, vecs, inv = np.zeros(1), np.ones((1, 1)), np.ones((1, 1))
        vals = vals.astype(complex)
        vecs = vecs.astype(complex)
        inv = inv.astype(complex)
        bound = float(np.max(lam.sum(axis=1) + mu.max(axis=1)))
        if bound <= 0:
            bound = 1.0
        gens = tuple(_streams(req.seed, req.replication, (1001, 1002, 1003)))
        bufs = _Buffers(int(1.1 * horizon_u * queue_rate) + 1024, K, clocks=False)
        loop = kern.marginal_loop.py_func if python else kern.marginal_loop
        args = (decide, prio, lam, mu, vecs, vals, inv, bound, horizon_u, gens,
                fstate, istate, q, alloc, busy, np.zeros(L))

    pos = 0
    while True:
        pos = loop(*args, *bufs.arrays, pos)
        if istate[kern.I_DONE]:
            break
        bufs.grow(pos)
    t_, k_, c_, e_, q_, a_, b_, i_, ta_, ts_ = bufs.trimmed(pos)
    return PathTrace(time=t_, kind=k_, cls=c_, env=e_, queue=q_, alloc=a_, busy=b_, idle=i_,
                     arrival_clock=ta_, service_clock=ts_, n=n, nu=model.regime.nu,
                     alpha=model.regime.alpha, pi=pi.copy(), lam=lam, mu=mu, env_mode=mode,
                     policy=policy.name, seed=int(req.seed), replication=int(req.replication),
                     horizon=float(req.horizon))


@dataclass(frozen=True, eq=False)
class ScaledPath:
    """Fluid or diffusion view of a trace on (possibly decimated) times.

    ``sup_abs`` is ``max |values|`` per class over the full event grid
    up to ``sup_horizon``, taken before any decimation.
    """

    kind: str
    times: np.ndarray
    values: np.ndarray
    idle: np.ndarray
    busy: np.ndarray
    sup_abs: np.ndarray

    def at(self, t) -> np.ndarray:
        """Right-continuous step evaluation at scaled times ``t``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.values[np.clip(idx, 0, None)]


def _check_n(trace: PathTrace, n):
    if n is not None and not np.isclose(float(n), trace.n, rtol=1e-12, atol=0):
        raise ValueError(f"trace was simulated at n={trace.n}, got n={n}")


def _decimate(times, grid, horizon):
    if grid is None:
        return None
    if grid <= 0:
        raise ValueError("grid spacing must be positive")
    g = np.arange(0.0, horizon + 0.5 * grid, grid)
    g = g[g <= horizon + 1e-12 * max(1.0, horizon)]
    return np.clip(np.searchsorted(times, g, side="right") - 1, 0, None), g


def _scaled(trace: PathTrace, kind: str, space: float, grid, sup_horizon) -> ScaledPath:
    times = trace.time / trace.n
    values = trace.queue / space
    idle = trace.idle / space
    busy = trace.busy / trace.n
    upto = times.size if sup_horizon is None else int(np.searchsorted(times, sup_horizon, side="right"))
    sup = np.abs(values[:max(upto, 1)]).max(axis=0)
    dec = _decimate(times, grid, times[-1])
    if dec is not None:
        idx, g = dec
        times, values, idle, busy = g, values[idx], idle[idx], busy[idx]
    return ScaledPath(kind, times, values, idle, busy, sup)


def fluid_scale(trace: PathTrace, n: float | None = None, grid: float | None = None,
                sup_horizon: float | None = None) -> ScaledPath:
    """``Q(n t) / n``, ``I(n t) / n`` and ``T(n t) / n`` on the event grid."""
    _check_n(trace, n)
    return _scaled(trace, "fluid", trace.n, grid, sup_horizon)


def diffusion_scale(trace: PathTrace, n: float | None = None, alpha: float | None = None,
                    grid: float | None = None, sup_horizon: float | None = None) -> ScaledPath:
    """``Q(n t) / n^alpha`` and ``I(n t) / n^alpha``; ``busy`` is fluid scaled."""
    _check_n(trace, n)
    if alpha is not None and abs(alpha - trace.alpha) > 1e-12:
        raise ValueError(f"alpha={alpha} differs from the trace's regime alpha={trace.alpha}")
    return _scaled(trace, "diffusion", trace.n ** trace.alpha, grid, sup_horizon)


@dataclass(frozen=True, eq=False)
class DiffusionNetput:
    """Diffusion-scaled netput decomposition on the event grid.

    ``components`` holds the five additive parts of ``xhat``: arrival and
    service Poisson noise, the centred arrival- and service-rate
    integrals, and the deterministic drift.
    """

    times: np.ndarray
    xhat: np.ndarray
    etahat: np.ndarray
    workload: np.ndarray
    qhat: np.ndarray
    components: dict
    identity_error: float
    reflected: np.ndarray
    workload_identity_error: float


def diffusion_netput(trace: PathTrace, model: NetworkModel, n: float | None = None) -> DiffusionNetput:
    """Netput ``X``, idleness split ``eta`` and workload in diffusion scale.

    ``Q = X + mu^{n,*} eta`` is checked at every event
    (``identity_error``). ``reflected`` is the one-sided reflection of
    ``sum_i X_i / mu_i^{n,*}`` evaluated on the event grid together with
    the left limits just before each event, where the running infimum
    of a path with upward and downward jumps is attained;
    ``workload_identity_error`` compares it with the workload on the
    same doubled grid. Only work-conserving policies make that error
    vanish.
    """
    _check_n(trace, n)
    if trace.arrival_clock is None or trace.env_mode != "exact":
        raise ValueError("diffusion_netput needs a trace with environment occupation data (env_mode='exact')")
    nn = trace.n
    scale = nn ** trace.alpha
    lam_n, mu_n = averaged_rates(model, nn)
    lam_s, mu_s = limit_averages(model)
    tau = trace.time[:, None]
    A, D = trace.arrivals, trace.departures
    Ta, Ts, T = trace.arrival_clock, trace.service_clock, trace.busy
    comps = {
        "arrival_noise": (A - Ta) / scale,
        "service_noise": -(D - Ts) / scale,
        "arrival_rate": (Ta - lam_n * tau) / scale,
        "service_rate": -(Ts - mu_n * T) / scale,
        "drift": mu_n * (lam_n / mu_n - lam_s / mu_s) * tau / scale,
    }
    xhat = sum(comps.values())
    etahat = (lam_s / mu_s * tau - T) / scale
    qhat = trace.queue / scale
    ident = float(np.max(np.abs(qhat - (xhat + mu_n * etahat)))) if qhat.size else 0.0
    workload = (qhat / mu_n).sum(axis=1)
    x = (xhat / mu_n).sum(axis=1)
    # jump of x (and of the workload) at each event
    jump = np.zeros(trace.time.size)
    arr = trace.kind == kern.KIND_ARRIVAL
    srv = trace.kind == kern.KIND_SERVICE
    jump[arr] = 1.0 / (mu_n[trace.cls[arr]] * scale)
    jump[srv] = -1.0 / (mu_n[trace.cls[srv]] * scale)
    x2 = np.empty(2 * x.size)
    x2[0::2] = x - jump
    x2[1::2] = x
    w2 = np.empty_like(x2)
    w2[0::2] = workload - jump
    w2[1::2] = workload
    refl = x2 - np.minimum(0.0, np.minimum.accumulate(x2))
    werr = float(np.max(np.abs(refl - w2))) if w2.size else 0.0
    return DiffusionNetput(times=trace.time / nn, xhat=xhat, etahat=etahat, workload=workload, qhat=qhat,
                           components=comps, identity_error=ident, reflected=refl[1::2],
                           workload_identity_error=werr)


TRACE_FLOAT_FMT = "{:.17g}"


def trace_columns(K: int) -> list[str]:
    return (["time", "kind", "class", "env"] + [f"Q{i + 1}" for i in range(K)]
            + [f"alloc{i + 1}" for i in range(K)] + [f"T{i + 1}" for i in range(K)] + ["I"])


def write_trace(trace: PathTrace, out, delimiter: str = ",") -> None:
    """Write one row per event; classes and states are 1-based, 0 = none.

    ``out`` is a path or a text stream.
    """
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            write_trace(trace, fh, delimiter)
        return
    w = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    w.writerow(trace_columns(trace.K))
    fmt = TRACE_FLOAT_FMT.format
    for k in range(trace.time.size):
        row = [fmt(trace.time[k]), KIND_NAMES[trace.kind[k]], int(trace.cls[k]) + 1, int(trace.env[k]) + 1]
        row += [int(v) for v in trace.queue[k]]
        row += [fmt(v) for v in trace.alloc[k]]
        row += [fmt(v) for v in trace.busy[k]]
        row.append(fmt(trace.idle[k]))
        w.writerow(row)


def trace_to_text(trace: PathTrace, delimiter: str = ",") -> str:
    buf = io.StringIO()
    write_trace(trace, buf, delimiter)
    return buf.getvalue()
