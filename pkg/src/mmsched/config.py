"""JSON experiment configuration.

Three blocks: ``model`` (generator, rate families, costs, discount),
``regime`` (one object or a list of ``{"nu", "alpha"}``, with
``"alpha": "auto"``) and ``run`` (sizes, policies, replication counts,
horizons, seed). Numbers may be written as fraction strings such as
``"2/3"``. Classes and environment states are 1-based in the file.

Errors raise :class:`ConfigError` carrying the JSON path of the offending
entry and, where it can be located, its line number.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .envchain import GeneratorError, GeneratorMatrix
from .model import AffineRates, NetworkModel, ScalingRegime, TabulatedRates, auto_alpha, classify_regime

POLICY_NAMES = ("cmu*", "dynamic-cmu", "static")
RUN_DEFAULTS = {
    "n": [25],
    "policies": [{"name": "cmu*"}, {"name": "dynamic-cmu"}],
    "replications": 2000,
    "horizon": 5.0,
    "dt": 1e-3,
    "dt_check": None,
    "bcp_replications": 10000,
    "seed": 0,
    "grid": 0.1,
    "env_mode": "auto",
    "redecide_on_env": True,
    "initial_env": None,
    "trace": 0,
    "compare_bcp": False,
}


class ConfigError(ValueError):
    """Malformed configuration; ``path`` is the JSON location."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        self.path = path
        self.line = line
        where = f"line {line}: " if line else ""
        at = f"{path}: " if path else ""
        super().__init__(f"{where}{at}{message}")


@dataclass
class ExperimentConfig:
    model: NetworkModel
    regimes: list
    run: dict
    raw_model: dict = field(repr=False, default_factory=dict)

    def models(self):
        """``(regime, model)`` for every configured regime."""
        return [(r, self.model.with_regime(r)) for r in self.regimes]

    def resolved(self) -> dict:
        """Fully explicit config; parsing it yields an equivalent experiment."""
        regimes = [{"nu": r.nu, "alpha": r.alpha} for r in self.regimes]
        return {"model": self.raw_model, "regime": regimes, "run": dict(self.run)}


class _Ctx:
    def __init__(self, text: str | None):
        self.text = text

    def line_of(self, path: list) -> int | None:
        # best effort: follow the keys of the path through the source text
        if not self.text:
            return None
        pos = 0
        for key in path:
            if isinstance(key, str):
                m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(self.text, pos)
                if not m:
                    break
                pos = m.start()
        return self.text.count("\n", 0, pos) + 1

    def error(self, msg, path):
        return ConfigError(msg, _fmt(path), self.line_of(path))


def _fmt(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else p)
    return out


def _number(v, ctx, path, positive=False, nonneg=False) -> float:
    if isinstance(v, bool):
        raise ctx.error("expected a number, got a boolean", path)
    if isinstance(v, (int, float)):
        x = float(v)
    elif isinstance(v, str):
        try:
            x = float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError):
            raise ctx.error(f"cannot read {v!r} as a number", path) from None
    else:
        raise ctx.error(f"expected a number, got {type(v).__name__}", path)
    if not math.isfinite(x):
        raise ctx.error("number must be finite", path)
    if positive and x <= 0:
        raise ctx.error(f"must be > 0, got {x}", path)
    if nonneg and x < 0:
        raise ctx.error(f"must be >= 0, got {x}", path)
    return x


def _matrix(v, ctx, path, shape) -> np.ndarray:
    if not isinstance(v, list) or len(v) != shape[0]:
        raise ctx.error(f"expected {shape[0]} rows", path)
    rows = []
    for i, row in enumerate(v):
        if not isinstance(row, list) or len(row) != shape[1]:
            raise ctx.error(f"expected {shape[1]} entries", path + [i])
        rows.append([_number(x, ctx, path + [i, j]) for j, x in enumerate(row)])
    return np.array(rows, dtype=float)


def _int(v, ctx, path, minimum=None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ctx.error("expected an integer", path)
    if minimum is not None and v < minimum:
        raise ctx.error(f"must be >= {minimum}", path)
    return v


def _rates(v, ctx, path, L, K):
    if not isinstance(v, dict):
        raise ctx.error("expected an object with 'base'/'slope' or 'table'", path)
    if "table" in v:
        tab = v["table"]
        if not isinstance(tab, dict) or not tab:
            raise ctx.error("table must map n to an L x K matrix", path + ["table"])
        table = {}
        for key, mat in tab.items():
            n = _number(key, ctx, path + ["table", key], positive=True)
            table[n] = _matrix(mat, ctx, path + ["table", key], (L, K))
        limit = _matrix(v["limit"], ctx, path + ["limit"], (L, K)) if "limit" in v else None
        return TabulatedRates(table, limit)
    if "base" not in v:
        raise ctx.error("missing 'base'", path)
    base = _matrix(v["base"], ctx, path + ["base"], (L, K))
    slope = _matrix(v["slope"], ctx, path + ["slope"], (L, K)) if "slope" in v else None
    unknown = set(v) - {"base", "slope"}
    if unknown:
        raise ctx.error(f"unknown keys {sorted(unknown)}", path)
    return AffineRates(base, slope)


def _regime(v, ctx, path) -> ScalingRegime:
    if not isinstance(v, dict) or "nu" not in v:
        raise ctx.error("expected an object with 'nu'", path)
    nu = _number(v["nu"], ctx, path + ["nu"])
    a = v.get("alpha", "auto")
    if a == "auto":
        try:
            alpha = auto_alpha(nu)
        except ValueError as exc:
            raise ctx.error(str(exc), path + ["nu"]) from None
    else:
        alpha = _number(a, ctx, path + ["alpha"], positive=True)
    return ScalingRegime(nu, alpha, classify_regime(nu, alpha))


def _policy(v, ctx, path, K) -> dict:
    if isinstance(v, str):
        v = {"name": v}
    if not isinstance(v, dict) or v.get("name") not in POLICY_NAMES:
        raise ctx.error(f"policy name must be one of {POLICY_NAMES}", path)
    out = {"name": v["name"]}
    if v["name"] == "static":
        order = v.get("order")
        if not isinstance(order, list) or sorted(order) != list(range(1, K + 1)):
            raise ctx.error(f"static policy needs 'order', a permutation of 1..{K}", path + ["order"])
        out["order"] = list(order)
    if "label" in v:
        out["label"] = str(v["label"])
    return out


def parse_config(data: dict, text: str | None = None) -> ExperimentConfig:
    """Validate a decoded JSON document and build the experiment."""
    ctx = _Ctx(text)
    if not isinstance(data, dict):
        raise ctx.error("top level must be an object", [])
    for key in ("model", "regime"):
        if key not in data:
            raise ctx.error(f"missing block '{key}'", [])
    m = data["model"]
    if not isinstance(m, dict):
        raise ctx.error("expected an object", ["model"])
    for key in ("generator", "arrival", "service", "costs", "discount"):
        if key not in m:
            raise ctx.error(f"missing '{key}'", ["model"])
    gen = m["generator"]
    if not isinstance(gen, list) or not gen:
        raise ctx.error("expected a nonempty list of rows", ["model", "generator"])
    L = _int(m.get("L", len(gen)), ctx, ["model", "L"], 1)
    costs_raw = m["costs"]
    if not isinstance(costs_raw, list) or not costs_raw:
        raise ctx.error("expected a nonempty list", ["model", "costs"])
    K = _int(m.get("K", len(costs_raw)), ctx, ["model", "K"], 1)
    G = _matrix(gen, ctx, ["model", "generator"], (L, L))
    for y in range(L):
        if G[y, y] > 0:
            raise ctx.error(f"diagonal entry {G[y, y]} is positive", ["model", "generator", y, y])
    try:
        Q = GeneratorMatrix(G)
    except GeneratorError as exc:
        raise ctx.error(str(exc), ["model", "generator"]) from None
    if len(costs_raw) != K:
        raise ctx.error(f"expected {K} costs", ["model", "costs"])
    costs = np.array([_number(x, ctx, ["model", "costs", i], positive=True) for i, x in enumerate(costs_raw)])
    discount = _number(m["discount"], ctx, ["model", "discount"], positive=True)
    arrival = _rates(m["arrival"], ctx, ["model", "arrival"], L, K)
    service = _rates(m["service"], ctx, ["model", "service"], L, K)
    reg_raw = data["regime"]
    reg_list = reg_raw if isinstance(reg_raw, list) else [reg_raw]
    if not reg_list:
        raise ctx.error("at least one regime is required", ["regime"])
    path0 = ["regime"]
    regimes = [_regime(r, ctx, path0 + ([i] if isinstance(reg_raw, list) else [])) for i, r in enumerate(reg_list)]
    try:
        model = NetworkModel(Q, arrival, service, costs, discount, regimes[0], name=str(m.get("name", "model")))
    except ValueError as exc:
        raise ctx.error(str(exc), ["model"]) from None

    r = data.get("run", {})
    if not isinstance(r, dict):
        raise ctx.error("expected an object", ["run"])
    unknown = set(r) - set(RUN_DEFAULTS)
    if unknown:
        raise ctx.error(f"unknown keys {sorted(unknown)}", ["run"])
    run = dict(RUN_DEFAULTS)
    run.update(r)
    ns = run["n"] if isinstance(run["n"], list) else [run["n"]]
    run["n"] = [_number(x, ctx, ["run", "n", i]) for i, x in enumerate(ns)]
    if not run["n"] or any(x < 1 for x in run["n"]):
        raise ctx.error("every n must be >= 1", ["run", "n"])
    if not isinstance(run["policies"], list) or not run["policies"]:
        raise ctx.error("expected a nonempty list", ["run", "policies"])
    run["policies"] = [_policy(p, ctx, ["run", "policies", i], K) for i, p in enumerate(run["policies"])]
    run["replications"] = _int(run["replications"], ctx, ["run", "replications"], 2)
    run["bcp_replications"] = _int(run["bcp_replications"], ctx, ["run", "bcp_replications"], 2)
    run["horizon"] = _number(run["horizon"], ctx, ["run", "horizon"], positive=True)
    run["dt"] = _number(run["dt"], ctx, ["run", "dt"], positive=True)
    if run["dt_check"] is not None:
        run["dt_check"] = _number(run["dt_check"], ctx, ["run", "dt_check"], positive=True)
    run["grid"] = _number(run["grid"], ctx, ["run", "grid"], positive=True)
    run["seed"] = _int(run["seed"], ctx, ["run", "seed"], 0)
    run["trace"] = _int(run["trace"], ctx, ["run", "trace"], 0)
    if run["env_mode"] not in ("auto", "exact", "marginal"):
        raise ctx.error("must be 'auto', 'exact' or 'marginal'", ["run", "env_mode"])
    for key in ("redecide_on_env", "compare_bcp"):
        if not isinstance(run[key], bool):
            raise ctx.error("expected true or false", ["run", key])
    if run["initial_env"] is not None:
        run["initial_env"] = _int(run["initial_env"], ctx, ["run", "initial_env"], 1)
        if run["initial_env"] > L:
            raise ctx.error(f"state must be in 1..{L}", ["run", "initial_env"])

    raw_model = {"name": model.name, "K": K, "L": L, "generator": G.tolist(),
                 "arrival": _rates_dict(arrival), "service": _rates_dict(service),
                 "costs": costs.tolist(), "discount": discount}
    return ExperimentConfig(model, regimes, run, raw_model)


def _rates_dict(r) -> dict:
    if isinstance(r, AffineRates):
        return {"base": r.base.tolist(), "slope": r.slope.tolist()}
    out = {"table": {repr(float(n)): m.tolist() for n, m in sorted(r.table.items())}}
    if r.limit_table is not None:
        out["limit"] = np.asarray(r.limit_table).tolist()
    return out


def load_config(path) -> ExperimentConfig:
    """Read and parse a JSON config file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from None
    return parse_config(data, text)
