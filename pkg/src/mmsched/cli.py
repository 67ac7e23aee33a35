"""Command-line harness.

Subcommands ``verify``, ``simulate``, ``compare``, ``bcp`` and ``curves``
read a JSON config (see :mod:`mmsched.config`) and write delimited
tables with a header row into ``--out``. Floats are written with 17
significant digits; the same config and seed give byte-identical files.

Exit codes: 0 success, 2 config error, 3 failed invariant, 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .bcp import brownian_spec, estimate_J_star
from .config import ConfigError, ExperimentConfig, load_config
from .cost import CostSpec, compare_policies, cost_curves, discounted_cost_of_trace, monte_carlo_cost
from .envchain import covariance_lambda, solve_poisson_equation
from .model import cmu_star_ordering, validate_regime, verify_heavy_traffic
from .policies import cmu_star_policy, dynamic_cmu_policy, static_priority_policy, validate_admissibility
from .simulator import SimulationRequest, diffusion_scale, diffusion_netput, simulate, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_RUNTIME = 0, 2, 3, 4
COST_COLUMNS = ["policy", "n", "nu", "alpha", "replications", "mean", "stdError", "truncationBound",
                "ciLow95", "ciHigh95", "case"]
INVARIANT_TOL = 1e-10


class InvariantError(RuntimeError):
    """A hard invariant failed on computed output."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return "" if v is None else str(v)


def write_table(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header {len(header)}")
            w.writerow([fmt(v) for v in row])


def _tag(x: float) -> str:
    return f"{x:.6g}".replace("-", "m").replace(".", "p")


def _case(model) -> str:
    return model.regime.case or "uncovered"


def build_policies(cfg: ExperimentConfig, model, n: float) -> list:
    mu_star = verify_heavy_traffic(model).mu_star
    out = []
    for p in cfg.run["policies"]:
        if p["name"] == "cmu*":
            pol = cmu_star_policy(cmu_star_ordering(model.costs, mu_star))
        elif p["name"] == "dynamic-cmu":
            pol = dynamic_cmu_policy(model.costs, model.service, n)
        else:
            pol = static_priority_policy([i - 1 for i in p["order"]])
        if "label" in p:
            pol = dataclasses.replace(pol, name=p["label"])
        out.append(pol)
    return out


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    rows = []
    failed = []
    for regime, model in cfg.models():
        tag = (regime.nu, regime.alpha)
        rep = verify_heavy_traffic(model)
        diag = validate_regime(model)
        pi = model.pi.probs
        resid = float(np.max(np.abs(pi @ model.generator.rates)))
        rows.append((*tag, "traffic_sum", None, None, rep.traffic_sum))
        rows.append((*tag, "traffic_deviation", None, None, rep.deviation))
        rows.append((*tag, "traffic_flagged", None, None, rep.flagged))
        for i in range(model.K):
            rows.append((*tag, "lambda_star", None, i + 1, rep.lambda_star[i]))
            rows.append((*tag, "mu_star", None, i + 1, rep.mu_star[i]))
            rows.append((*tag, "b", None, i + 1, rep.b[i]))
        for n, est in rep.b_estimates:
            for i in range(model.K):
                rows.append((*tag, "b_estimate", n, i + 1, est[i]))
        rows.append((*tag, "case", None, None, _case(model)))
        for v in diag.violations:
            rows.append((*tag, "violation", None, None, v))
        for y in range(model.L):
            rows.append((*tag, "pi", None, y + 1, pi[y]))
        rows.append((*tag, "pi_residual", None, None, resid))
        lam_lim = model.arrival.limit()
        sol = solve_poisson_equation(model.generator, lam_lim, model.pi)
        Lam = covariance_lambda(model.generator, lam_lim, model.pi)
        rows.append((*tag, "poisson_residual", None, None, sol.residual))
        for i in range(model.K):
            for j in range(model.K):
                rows.append((*tag, "Lambda_limit", None, f"{i + 1}:{j + 1}", Lam[i, j]))
        for n in cfg.run["n"]:
            lam_n, _ = model.rates_at(n)
            Ln = covariance_lambda(model.generator, lam_n, model.pi)
            for i in range(model.K):
                for j in range(model.K):
                    rows.append((*tag, "Lambda_at_n", n, f"{i + 1}:{j + 1}", Ln[i, j]))
        if resid > INVARIANT_TOL or sol.residual > INVARIANT_TOL or sol.centering > INVARIANT_TOL:
            failed.append(f"stationary/Poisson residual above {INVARIANT_TOL} at nu={regime.nu:g}")
        print(f"nu={regime.nu:g} alpha={regime.alpha:g} [{_case(model)}] traffic_sum={rep.traffic_sum:.17g} "
              f"b={np.array2string(rep.b, precision=6)}"
              + ("" if diag.valid else f" violations: {'; '.join(diag.violations)}"))
    write_table(os.path.join(args.out, "verify.csv"), ["nu", "alpha", "quantity", "n", "index", "value"], rows)
    if failed:
        raise InvariantError("; ".join(failed))
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    run = cfg.run
    reps = run["replications"]
    rows, bad = [], []
    K = cfg.model.K
    init = None if run["initial_env"] is None else run["initial_env"] - 1
    for regime, model in cfg.models():
        spec = CostSpec.of(model)
        for n in run["n"]:
            for pol in build_policies(cfg, model, n):
                env_mode = "exact" if pol.uses_environment else run["env_mode"]
                for r in range(reps):
                    tr = simulate(SimulationRequest(model, n, pol, run["horizon"], seed=run["seed"],
                                                    replication=r, initial_env=init, env_mode=env_mode,
                                                    redecide_on_env=run["redecide_on_env"]))
                    adm = validate_admissibility(tr)
                    ident = diffusion_netput(tr, model).identity_error if tr.env_mode == "exact" else float("nan")
                    cost = discounted_cost_of_trace(tr, spec)
                    sup = diffusion_scale(tr).sup_abs
                    rows.append((pol.name, n, regime.nu, regime.alpha, r, tr.env_mode, tr.n_events, cost,
                                 adm.ok, *sup, ident))
                    if not adm.ok:
                        bad.append(f"{pol.name} n={n:g} r={r}: {adm}")
                    if r < run["trace"]:
                        name = f"trace_{pol.name.replace('*', '-star')}_n{_tag(n)}_nu{_tag(regime.nu)}" \
                               f"_alpha{_tag(regime.alpha)}_r{r}.csv"
                        write_trace(tr, os.path.join(args.out, name))
    header = ["policy", "n", "nu", "alpha", "replication", "env_mode", "events", "cost", "admissible"] \
        + [f"supQhat{i + 1}" for i in range(K)] + ["identityError"]
    write_table(os.path.join(args.out, "simulate.csv"), header, rows)
    print(f"simulated {len(rows)} paths")
    if bad:
        raise InvariantError("inadmissible traces: " + " | ".join(bad[:3]))
    return EXIT_OK


def _cost_row(label, n, regime, est, case):
    lo, hi = est.ci95
    return (label, n, regime.nu, regime.alpha, est.replications, est.mean, est.std_error,
            est.truncation_bound, lo, hi, case)


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    run = cfg.run
    if len(run["policies"]) < 2:
        raise ConfigError("compare needs at least two policies", "run.policies")
    rows, grid_rows, diff_rows = [], [], []
    for regime, model in cfg.models():
        for n in run["n"]:
            pols = build_policies(cfg, model, n)
            res = compare_policies(model, n, pols, replications=run["replications"], horizon=run["horizon"],
                                   seed=run["seed"], env_mode=run["env_mode"], threads=args.threads,
                                   redecide_on_env=run["redecide_on_env"], step=run["grid"])
            for label, est in res.estimates.items():
                rows.append(_cost_row(label, n, regime, est, _case(model)))
                grid_rows.append(_cost_row(label, n, regime, res.grid_estimates[label], _case(model)))
            for d in res.differences:
                lo, hi = d.ci95
                diff_rows.append((d.policy, d.baseline, n, regime.nu, regime.alpha, run["replications"],
                                  d.mean, d.std_error, lo, hi, _case(model)))
                print(f"n={n:g} nu={regime.nu:.4g} alpha={regime.alpha:.4g} [{_case(model)}] "
                      f"{d.baseline}={res.estimates[d.baseline].mean:.4f} {d.policy}={res.estimates[d.policy].mean:.4f} "
                      f"diff={d.mean:.4f} CI95=({lo:.4f}, {hi:.4f})")
    write_table(os.path.join(args.out, "compare.csv"), COST_COLUMNS, rows)
    write_table(os.path.join(args.out, "compare_table_grid.csv"), COST_COLUMNS, grid_rows)
    write_table(os.path.join(args.out, "compare_diff.csv"),
                ["policy", "baseline", "n", "nu", "alpha", "replications", "diffMean", "diffStdError",
                 "ciLow95", "ciHigh95", "case"], diff_rows)
    return EXIT_OK


def cmd_bcp(cfg: ExperimentConfig, args) -> int:
    run = cfg.run
    rows, spec_rows, gap_rows = [], [], []
    for regime, model in cfg.models():
        if regime.case is None:
            print(f"nu={regime.nu:g} alpha={regime.alpha:g}: outside the covered regimes, skipped")
            continue
        spec = brownian_spec(model)
        tag = (regime.nu, regime.alpha)
        for i in range(model.K):
            spec_rows.append((*tag, "drift", i + 1, spec.drift[i]))
            for j in range(model.K):
                spec_rows.append((*tag, "covariance", f"{i + 1}:{j + 1}", spec.covariance[i, j]))
        spec_rows.append((*tag, "workload_drift", None, spec.workload_drift))
        spec_rows.append((*tag, "workload_variance", None, spec.workload_variance))
        dts = [run["dt"]] + ([run["dt_check"]] if run["dt_check"] else [])
        ests = []
        for dt in dts:
            js = estimate_J_star(spec, model, replications=run["bcp_replications"], dt=dt, horizon=run["horizon"],
                                 seed=run["seed"], threads=args.threads)
            ests.append(js)
            rows.append((*_cost_row("BCP", "inf", regime, js.estimate, regime.case), dt))
            print(f"nu={regime.nu:g} alpha={regime.alpha:g} [{regime.case}] dt={dt:g} "
                  f"J*={js.estimate.mean:.6f} (se {js.estimate.std_error:.2g})")
        if len(ests) == 2:
            a, b = ests[0].estimate, ests[1].estimate
            se = np.hypot(a.std_error, b.std_error)
            gap = abs(a.mean - b.mean)
            z = gap / se if se > 0 else (0.0 if gap == 0 else float("inf"))
            spec_rows.append((*tag, "dt_refinement_z", None, z))
            print(f"  dt refinement: |difference| = {z:.3f} combined standard errors")
        if run["compare_bcp"]:
            n = max(run["n"])
            pol = cmu_star_policy(cmu_star_ordering(model.costs, verify_heavy_traffic(model).mu_star))
            est = monte_carlo_cost(model, n, pol, replications=run["replications"], horizon=run["horizon"],
                                   seed=run["seed"], env_mode=run["env_mode"], threads=args.threads)
            J = ests[-1].estimate.mean
            gap_rows.append((*tag, n, J, est.mean, est.mean - J, (est.mean - J) / J if J else float("nan")))
            print(f"  cmu* at n={n:g}: {est.mean:.6f}, relative gap {(est.mean - J) / J:+.4f}")
    write_table(os.path.join(args.out, "bcp.csv"), COST_COLUMNS + ["dt"], rows)
    write_table(os.path.join(args.out, "bcp_spec.csv"), ["nu", "alpha", "quantity", "index", "value"], spec_rows)
    if gap_rows:
        write_table(os.path.join(args.out, "bcp_gap.csv"),
                    ["nu", "alpha", "n", "Jstar", "Jn_cmu_star", "gap", "relativeGap"], gap_rows)
    return EXIT_OK


def cmd_curves(cfg: ExperimentConfig, args) -> int:
    run = cfg.run
    for regime, model in cfg.models():
        rows = []
        for n in run["n"]:
            pols = build_policies(cfg, model, n)
            series = cost_curves(model, n, pols, replications=run["replications"], horizon=run["horizon"],
                                 step=run["grid"], seed=run["seed"], env_mode=run["env_mode"],
                                 threads=args.threads, redecide_on_env=run["redecide_on_env"])
            for s in series:
                for t, c1, c2 in zip(s.times, s.C1, s.C2):
                    rows.append((s.policy, n, regime.nu, regime.alpha, t, c1, c2))
        name = f"curves_nu{_tag(regime.nu)}_alpha{_tag(regime.alpha)}.csv"
        write_table(os.path.join(args.out, name), ["policy", "n", "nu", "alpha", "t", "C1", "C2"], rows)
        print(f"wrote {name}")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "simulate": cmd_simulate, "compare": cmd_compare,
            "bcp": cmd_bcp, "curves": cmd_curves}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides run.seed)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("--reps", type=int, default=argparse.SUPPRESS,
                        help="replications (overrides run.replications)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    p = argparse.ArgumentParser(prog="mmsched", parents=[common],
                                description="Markov-modulated multiclass queue experiments")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"verify": "heavy-traffic, regime and environment checks",
             "simulate": "simulate paths and check trace invariants",
             "compare": "paired policy cost comparison",
             "bcp": "Brownian control problem benchmark J*",
             "curves": "mean cost curves on a time grid"}
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    args.out = getattr(args, "out", ".")
    args.threads = max(1, getattr(args, "threads", 1))
    if not hasattr(args, "config"):
        parser.error("--config is required")
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            if args.seed < 0:
                raise ConfigError("seed must be >= 0", "--seed")
            cfg.run["seed"] = args.seed
        if getattr(args, "reps", None) is not None:
            if args.reps < 2:
                raise ConfigError("need at least 2 replications", "--reps")
            cfg.run["replications"] = args.reps
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "resolved_config.json"), "w") as fh:
            json.dump(cfg.resolved(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
