"""Network configuration: rate families indexed by n, scaling regimes,
averaged rates, the heavy-traffic report and the c-mu* priority order."""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .envchain import GeneratorMatrix, StationaryDistribution, stationary_distribution

REGIME_TOL = 1e-12
CASES = ("Case1a", "Case1b", "Case2", "Case3")


class RateFamily:
    """Per-state, per-class rates ``r^n(y, i)`` for every scaling index ``n``."""

    L: int
    K: int

    def at(self, n: float) -> np.ndarray:
        raise NotImplementedError

    def limit(self) -> np.ndarray:
        raise NotImplementedError

    def state_independent(self) -> bool:
        raise NotImplementedError


def _matrix(values, name) -> np.ndarray:
    a = np.array(values, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d (states x classes) table, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AffineRates(RateFamily):
    """``r^n(y, i) = base[y, i] + slope[y, i] / sqrt(n)``."""

    base: np.ndarray
    slope: np.ndarray = None

    def __post_init__(self):
        base = _matrix(self.base, "base")
        slope = np.zeros_like(base) if self.slope is None else _matrix(self.slope, "slope")
        if slope.shape != base.shape:
            raise ValueError(f"slope shape {slope.shape} does not match base shape {base.shape}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "slope", slope)

    @property
    def L(self) -> int:
        return self.base.shape[0]

    @property
    def K(self) -> int:
        return self.base.shape[1]

    def at(self, n: float) -> np.ndarray:
        if n <= 0:
            raise ValueError(f"scaling index must be positive, got {n}")
        return self.base + self.slope / math.sqrt(n)

    def limit(self) -> np.ndarray:
        return self.base

    def state_independent(self) -> bool:
        return bool(np.all(self.base == self.base[0]) and np.all(self.slope == self.slope[0]))


@dataclass(frozen=True, eq=False)
class TabulatedRates(RateFamily):
    """Rates given on a finite set of ``n``; the limit is the largest-n table
    unless supplied explicitly."""

    table: Mapping[float, np.ndarray]
    limit_table: np.ndarray | None = None

    def __post_init__(self):
        if not self.table:
            raise ValueError("tabulated rates need at least one n")
        tab = {float(k): _matrix(v, f"table[{k}]") for k, v in self.table.items()}
        shapes = {v.shape for v in tab.values()}
        if len(shapes) != 1:
            raise ValueError(f"tabulated rates have inconsistent shapes {sorted(shapes)}")
        object.__setattr__(self, "table", dict(sorted(tab.items())))
        if self.limit_table is not None:
            object.__setattr__(self, "limit_table", _matrix(self.limit_table, "limit"))

    @property
    def L(self) -> int:
        return next(iter(self.table.values())).shape[0]

    @property
    def K(self) -> int:
        return next(iter(self.table.values())).shape[1]

    def at(self, n: float) -> np.ndarray:
        try:
            return self.table[float(n)]
        except KeyError:
            raise KeyError(f"n={n} not tabulated; available {list(self.table)}") from None

    def limit(self) -> np.ndarray:
        if self.limit_table is not None:
            return self.limit_table
        return self.table[max(self.table)]

    def state_independent(self) -> bool:
        return all(bool(np.all(v == v[0])) for v in self.table.values())


def classify_regime(nu: float, alpha: float) -> str | None:
    """Case label for ``(nu, alpha)``, or None outside every covered regime.

    Case1a/Case1b are separated by ``nu`` only; the constant-service
    requirement of Case1b, Case2 and Case3 is a model property checked by
    :func:`validate_regime`.
    """
    half = abs(alpha - 0.5) <= REGIME_TOL
    if nu > 0.5 and half:
        return "Case1a"
    if 0 < nu <= 0.5 and half:
        return "Case1b"
    if nu == 0 and half:
        return "Case2"
    if -1 < nu < 0 and abs(alpha - (1 - nu) / 2) <= REGIME_TOL:
        return "Case3"
    return None


def auto_alpha(nu: float) -> float:
    if nu >= 0:
        return 0.5
    if nu > -1:
        return (1 - nu) / 2
    raise ValueError(f"no diffusion scaling defined for nu={nu} <= -1")


@dataclass(frozen=True)
class ScalingRegime:
    """Environment speed ``nu`` and diffusion exponent ``alpha``.

    ``case`` is inferred; passing it explicitly asserts consistency. Pairs
    outside every case are allowed (``case is None``) so uncovered
    configurations can still be simulated and labelled.
    """

    nu: float
    alpha: float
    case: str | None = None

    def __post_init__(self):
        inferred = classify_regime(self.nu, self.alpha)
        if self.case is not None:
            if self.case not in CASES:
                raise ValueError(f"unknown regime case {self.case!r}")
            if self.case != inferred:
                raise ValueError(f"(nu={self.nu}, alpha={self.alpha}) does not satisfy {self.case}")
        object.__setattr__(self, "case", inferred)

    @classmethod
    def auto(cls, nu: float) -> "ScalingRegime":
        return cls(nu, auto_alpha(nu))

    @property
    def covered(self) -> bool:
        return self.case is not None


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Markov-modulated single-server multiclass network, indexed by ``n``.

    The environment generator is the same for every ``n``.
    """

    generator: GeneratorMatrix
    arrival: RateFamily
    service: RateFamily
    costs: np.ndarray
    discount: float
    regime: ScalingRegime
    name: str = "model"
    _pi: StationaryDistribution = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.generator, GeneratorMatrix):
            object.__setattr__(self, "generator", GeneratorMatrix(self.generator))
        c = np.array(self.costs, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "costs", c)
        L, K = self.generator.L, c.size
        for fam, label in ((self.arrival, "arrival"), (self.service, "service")):
            if (fam.L, fam.K) != (L, K):
                raise ValueError(f"{label} rates have shape {(fam.L, fam.K)}, expected {(L, K)}")
        if np.any(c <= 0):
            raise ValueError("holding costs must be strictly positive")
        if not self.discount > 0:
            raise ValueError("discount factor must be positive")
        object.__setattr__(self, "_pi", stationary_distribution(self.generator))

    @property
    def K(self) -> int:
        return self.costs.size

    @property
    def L(self) -> int:
        return self.generator.L

    @property
    def pi(self) -> StationaryDistribution:
        return self._pi

    def rates_at(self, n: float) -> tuple[np.ndarray, np.ndarray]:
        lam = np.asarray(self.arrival.at(n), dtype=float)
        mu = np.asarray(self.service.at(n), dtype=float)
        if np.any(lam < 0) or np.any(mu < 0):
            raise ValueError(f"rates must be nonnegative at n={n}")
        return lam, mu

    def limit_rates(self) -> tuple[np.ndarray, np.ndarray]:
        return self.arrival.limit(), self.service.limit()

    def with_regime(self, regime: ScalingRegime) -> "NetworkModel":
        return NetworkModel(self.generator, self.arrival, self.service, self.costs,
                            self.discount, regime, self.name)


def averaged_rates(model: NetworkModel, n: float) -> tuple[np.ndarray, np.ndarray]:
    """``(pi(lambda^n), pi(mu^n))``."""
    lam, mu = model.rates_at(n)
    return model.pi.mean(lam), model.pi.mean(mu)


def limit_averages(model: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """``(lambda*, mu*)`` from the limit rate tables."""
    lam, mu = model.limit_rates()
    return model.pi.mean(lam), model.pi.mean(mu)


@dataclass(frozen=True, eq=False)
class HeavyTrafficReport:
    lambda_star: np.ndarray
    mu_star: np.ndarray
    traffic_sum: float
    b: np.ndarray
    b_estimates: list[tuple[float, np.ndarray]]
    tolerance: float = 1e-9

    @property
    def deviation(self) -> float:
        return self.traffic_sum - 1.0

    @property
    def flagged(self) -> bool:
        return abs(self.deviation) > self.tolerance


DEFAULT_PROBES = (1e2, 1e4, 1e6, 1e8)


def default_probes(model: NetworkModel) -> tuple[float, ...]:
    """Tabulated sizes shared by both rate families, else ``DEFAULT_PROBES``."""
    sets = [set(f.table) for f in (model.arrival, model.service) if isinstance(f, TabulatedRates)]
    if not sets:
        return DEFAULT_PROBES
    return tuple(sorted(set.intersection(*sets)))


def verify_heavy_traffic(model: NetworkModel, probe_sizes: Sequence[float] | None = None,
                         tolerance: float = 1e-9) -> HeavyTrafficReport:
    """Averaged traffic sum and finite-n drift estimates.

    ``b_i`` is estimated as ``n^{1-alpha} (lambda^{n,*}_i / mu^{n,*}_i - lambda*_i / mu*_i)``
    at each probe; the largest probe gives the headline value. A traffic
    sum away from one is flagged, never fatal.
    """
    lam_star, mu_star = limit_averages(model)
    if np.any(model.arrival.limit() <= 0):
        warnings.warn("limit arrival rates are not strictly positive in every state", stacklevel=2)
    if np.any(mu_star <= 0):
        raise ValueError("averaged limit service rates must be positive")
    ratio_star = lam_star / mu_star
    alpha = model.regime.alpha
    if probe_sizes is None:
        probe_sizes = default_probes(model)
    estimates = []
    for n in sorted(probe_sizes):
        lam_n, mu_n = averaged_rates(model, n)
        estimates.append((float(n), n ** (1 - alpha) * (lam_n / mu_n - ratio_star)))
    b = estimates[-1][1] if estimates else np.full(model.K, np.nan)
    return HeavyTrafficReport(lambda_star=lam_star, mu_star=mu_star,
                              traffic_sum=float(math.fsum(ratio_star)), b=b,
                              b_estimates=estimates, tolerance=tolerance)


@dataclass(frozen=True)
class PriorityOrder:
    """Classes listed from highest to lowest priority (0-based)."""

    sigma: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise ValueError(f"sigma {self.sigma} is not a permutation")

    @property
    def lowest(self) -> int:
        return self.sigma[-1]


def _descending_with_ties(values: np.ndarray, rtol: float = 1e-12) -> list[int]:
    def cmp(i, j):
        vi, vj = values[i], values[j]
        if abs(vi - vj) <= rtol * max(abs(vi), abs(vj)):
            return i - j
        return -1 if vi > vj else 1

    return sorted(range(values.size), key=functools.cmp_to_key(cmp))


def cmu_star_ordering(c, mu_star) -> PriorityOrder:
    """Descending ``c_i mu*_i``; equal products keep ascending class index."""
    c = np.asarray(c, dtype=float)
    mu = np.asarray(mu_star, dtype=float)
    if c.shape != mu.shape:
        raise ValueError(f"cost and rate vectors differ in length: {c.size} vs {mu.size}")
    if np.any(c <= 0) or np.any(mu <= 0):
        raise ValueError("costs and averaged service rates must be strictly positive")
    prod = c * mu
    sigma = _descending_with_ties(prod)
    return PriorityOrder(tuple(sigma), tuple(float(prod[i]) for i in sigma))


@dataclass(frozen=True)
class RegimeDiagnostics:
    case: str | None
    nu: float
    alpha: float
    violations: list[str]

    @property
    def valid(self) -> bool:
        return not self.violations


def validate_regime(model: NetworkModel) -> RegimeDiagnostics:
    r = model.regime
    violations = []
    if r.case is None:
        violations.append(f"(nu={r.nu:g}, alpha={r.alpha:g}) matches no covered regime")
    elif r.case in ("Case1b", "Case2", "Case3") and not model.service.state_independent():
        violations.append(f"{r.case} requires state-independent service rates")
    return RegimeDiagnostics(r.case, r.nu, r.alpha, violations)


# Generator with stationary law (1/3, 2/3) used for the two-class example.
EXAMPLE_GENERATOR = ((-2.0, 2.0), (1.0, -1.0))


def two_class_example(nu: float = 1.0, alpha: float | None = None, discount: float = 2.0) -> NetworkModel:
    """Two classes, two environment states, costs (20, 25).

    ``lambda_1 = 1 + 3y/(5 sqrt n)``, ``mu_1 = 5/2 + 3y/sqrt n``,
    ``lambda_2 = 3/2 + 3y/(5 sqrt n)``, ``mu_2 = 3y/2 + 3y/sqrt n`` for
    ``y in {1, 2}`` (rows 0 and 1).
    """
    y = np.array([1.0, 2.0])[:, None]
    arrival = AffineRates(base=np.hstack([np.ones((2, 1)), 1.5 * np.ones((2, 1))]),
                          slope=np.hstack([0.6 * y, 0.6 * y]))
    service = AffineRates(base=np.hstack([2.5 * np.ones((2, 1)), 1.5 * y]),
                          slope=np.hstack([3 * y, 3 * y]))
    regime = ScalingRegime.auto(nu) if alpha is None else ScalingRegime(nu, alpha)
    return NetworkModel(GeneratorMatrix(np.array(EXAMPLE_GENERATOR)), arrival, service,
                        np.array([20.0, 25.0]), discount, regime, name="two-class")
