"""Finite-state environment chain.

Generator validation, stationary law, single-jump sampling, the centred
Poisson equation ``Q h = pi(f) - f`` and the FCLT covariance of the
integrated centred rates built from it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

ROW_SUM_TOL = 1e-12


class GeneratorError(ValueError):
    """Raised for malformed or reducible rate matrices."""


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Rate matrix of an irreducible continuous-time Markov chain.

    Parameters
    ----------
    rates : array_like, shape (L, L)
        Off-diagonal jump rates (per unit of environment time) and a
        diagonal making every row sum to zero.
    """

    rates: np.ndarray

    def __post_init__(self):
        q = np.array(self.rates, dtype=float, copy=True)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] == 0:
            raise GeneratorError(f"generator must be a non-empty square matrix, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise GeneratorError("generator has non-finite entries")
        L = q.shape[0]
        off = q[~np.eye(L, dtype=bool)]
        if np.any(off < 0):
            r, c = np.argwhere((q < 0) & ~np.eye(L, dtype=bool))[0]
            raise GeneratorError(f"negative off-diagonal rate at row {r}, column {c}")
        scale = max(1.0, float(np.max(np.abs(q))))
        sums = q.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums) > ROW_SUM_TOL * scale)
        if bad.size:
            raise GeneratorError(f"row {bad[0]} sums to {sums[bad[0]]!r}, expected 0")
        if L > 1:
            adj = (q > 0) & ~np.eye(L, dtype=bool)
            ncomp, labels = connected_components(adj, directed=True, connection="strong")
            if ncomp != 1:
                classes = [np.flatnonzero(labels == k).tolist() for k in range(ncomp)]
                raise GeneratorError(f"generator is reducible; communicating classes {classes}")
        q.setflags(write=False)
        object.__setattr__(self, "rates", q)

    @property
    def L(self) -> int:
        return self.rates.shape[0]

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates).copy()

    def jump_probabilities(self) -> np.ndarray:
        """Row-stochastic matrix of the embedded jump chain."""
        out = np.zeros_like(self.rates)
        ex = self.exit_rates()
        for y in range(self.L):
            if ex[y] > 0:
                out[y] = self.rates[y] / ex[y]
                out[y, y] = 0.0
            else:
                out[y, y] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).copy()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def mean(self, f) -> np.ndarray:
        """pi(f) for f of shape (L,) or (L, K)."""
        return np.asarray(f, dtype=float).T @ self.probs


def stationary_distribution(Q: GeneratorMatrix) -> StationaryDistribution:
    """Solve ``pi Q = 0``, ``sum(pi) = 1`` by a dense direct solve."""
    L = Q.L
    if L == 1:
        return StationaryDistribution(np.ones(1))
    # replace one balance equation by the normalisation
    A = Q.rates.T.copy()
    A[-1, :] = 1.0
    rhs = np.zeros(L)
    rhs[-1] = 1.0
    pi = linalg.solve(A, rhs)
    pi = np.where(np.abs(pi) < 1e-15, 0.0, pi)
    if np.any(pi < 0):
        raise GeneratorError(f"stationary solve produced negative mass {pi.min()!r}")
    pi = pi / pi.sum()
    return StationaryDistribution(pi)


def next_jump(Q: GeneratorMatrix, y: int, rng: np.random.Generator) -> tuple[float, int]:
    """Holding time in ``y`` and the state entered afterwards.

    A single-state chain never jumps: returns ``(inf, y)``.
    """
    if not 0 <= y < Q.L:
        raise IndexError(f"state {y} outside 0..{Q.L - 1}")
    rate = -Q.rates[y, y]
    if rate <= 0:
        if Q.L == 1:
            return float("inf"), y
        raise RuntimeError(f"state {y} is absorbing in a chain declared irreducible")
    hold = rng.standard_exponential() / rate
    probs = Q.rates[y].copy()
    probs[y] = 0.0
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    nxt = int(np.searchsorted(cdf, u, side="right"))
    return float(hold), min(nxt, Q.L - 1)


@dataclass(frozen=True, eq=False)
class PoissonEquationSolution:
    """Centred solution ``hat`` (L, K) of ``Q hat = pi(f) 1 - f``."""

    hat: np.ndarray
    residual: float = field(default=0.0)
    centering: float = field(default=0.0)


def _as_rate_matrix(f, L: int) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != L:
        raise ValueError(f"rate function has {f.shape[0]} rows, generator has {L} states")
    return f


def solve_poisson_equation(Q: GeneratorMatrix, f, pi: StationaryDistribution | None = None) -> PoissonEquationSolution:
    """Unique solution of the Poisson equation with ``pi(hat) = 0``.

    Uses ``(Q - 1 pi)^{-1}``, which is invertible for irreducible ``Q``;
    applied to ``pi(f) 1 - f`` it returns the centred solution directly.

    Parameters
    ----------
    Q : GeneratorMatrix
    f : array_like, shape (L,) or (L, K)
        One column per function.
    pi : StationaryDistribution, optional
        Computed from ``Q`` when omitted.
    """
    if pi is None:
        pi = stationary_distribution(Q)
    f = _as_rate_matrix(f, Q.L)
    p = pi.probs
    rhs = p @ f - f
    M = Q.rates - np.outer(np.ones(Q.L), p)
    try:
        hat = linalg.solve(M, rhs)
    except linalg.LinAlgError as exc:  # pragma: no cover - irreducible Q is never singular here
        raise GeneratorError("augmented Poisson system is singular") from exc
    resid = float(np.max(np.abs(Q.rates @ hat - rhs))) if hat.size else 0.0
    cent = float(np.max(np.abs(p @ hat))) if hat.size else 0.0
    return PoissonEquationSolution(hat=hat, residual=resid, centering=cent)


def covariance_lambda(Q: GeneratorMatrix, lam, pi: StationaryDistribution | None = None) -> np.ndarray:
    """Asymptotic covariance of ``t^{-1/2} int_0^t (lam(Y_s) - pi(lam)) ds``.

    ``Lambda_ij = sum_y pi(y) [(lam_i(y) - lam*_i) hat_j(y) + (lam_j(y) - lam*_j) hat_i(y)]``
    where ``hat`` solves the centred Poisson equation for ``lam``. The
    matrix is symmetrised by construction (``M + M.T``).
    """
    if pi is None:
        pi = stationary_distribution(Q)
    lam = _as_rate_matrix(lam, Q.L)
    hat = solve_poisson_equation(Q, lam, pi).hat
    centred = lam - pi.probs @ lam
    half = (centred * pi.probs[:, None]).T @ hat
    return half + half.T


def ergodic_phi(trace, f, fstar=None) -> np.ndarray:
    """Diagnostic path ``n^{-1/2} int_0^{ns} (f_i(Y_u) - f*_i) Tdot_i(u) du``.

    Evaluated at every recorded event of an exact-environment trace; the
    integrand is piecewise constant between events, so the values are
    exact and the path's supremum is attained on this grid.

    Parameters
    ----------
    trace : PathTrace
        Must carry the full environment path (``env_mode == "exact"``).
    f : array_like, shape (L, K)
        Per-state, per-class function.
    fstar : array_like, shape (K,), optional
        Centring constants; defaults to ``pi^n(f)``.

    Returns
    -------
    ndarray, shape (n_events, K)
    """
    if trace.env_mode != "exact":
        raise ValueError("ergodic_phi needs the exact environment path; trace was simulated with "
                         f"env_mode={trace.env_mode!r}")
    f = np.asarray(f, dtype=float)
    if f.shape != (trace.L, trace.K):
        raise ValueError(f"f must have shape {(trace.L, trace.K)}, got {f.shape}")
    if fstar is None:
        fstar = trace.pi @ f
    dt = np.diff(trace.time)
    env = trace.env[:-1]
    incr = (f[env] - fstar) * trace.alloc[:-1] * dt[:, None]
    phi = np.zeros((trace.time.size, trace.K))
    np.cumsum(incr, axis=0, out=phi[1:])
    return phi / np.sqrt(trace.n)
