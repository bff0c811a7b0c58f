"""Command-line entry point: solve, evaluate, sweep, oracle-check, soc-solve, horizon-solve.

Exit codes: 0 success, 2 configuration error, 3 numeric or solver error,
4 oracle-check violation. Outputs are written atomically; identical
inputs and seed give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile

import numpy as np

from . import oracle
from .errors import ConfigError, RiskDPError, UnsupportedFamilyError
from .horizon import (ValueSurface, bellman_residual_opt, horizon_for, residual_bound,
                      truncate_at, truncate_soc, truncation_bound)
from .mdp import (AugPolicy, XGrid, dp_evaluate, dp_optimize, eval_modulus, lipschitz_excess,
                  opt_modulus, optimal_risk, policy_risk)
from .problem_io import (finite, infinite_from_json, is_soc, load_json, mdp_from_json,
                         parse_risk, parse_theta_grid, parse_xgrid, policy_from_json,
                         policy_to_json, soc_from_json, xgrid_to_json)
from .risk import RiskFamily
from .sampling import GenerativeModel, sample_size_opt, sweep_eval, sweep_opt
from .soc import SocGrid, refinement_bound, soc_dp_optimize, soc_moduli, soc_optimal_risk, to_mdp

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4
MAX_LATTICE_K = 1024
DEFAULT_H = 1.0 / 64

log = logging.getLogger("riskdp")


# ---------------------------------------------------------------------------
# output helpers


def write_atomic(path: str, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise ConfigError(f"output directory does not exist: {directory}")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".riskdp-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    # json uses repr for floats: the shortest string that round-trips exactly
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def emit(obj, out: str | None) -> None:
    text = dumps(obj)
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, float).ravel()]


# ---------------------------------------------------------------------------
# configuration


def resolve_family(file_spec, args) -> RiskFamily:
    """Risk family from the problem file, overridden by ``--risk`` and ``--alpha``."""
    spec = dict(file_spec) if file_spec else None
    if args.risk:
        if args.risk.lstrip().startswith("{"):
            try:
                spec = json.loads(args.risk)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"--risk is not valid JSON: {exc}") from None
        elif args.risk == "cvar":
            spec = {"kind": "cvar", "alpha": (spec or {}).get("alpha", 0.5)}
        else:
            spec = {"kind": "phi", "phi": args.risk, "tau": 0.1, "L": 10.0}
    if spec is None:
        spec = {"kind": "cvar", "alpha": 0.5}
    if args.alpha is not None:
        if spec.get("kind") != "cvar":
            raise ConfigError("--alpha applies to the cvar family only")
        spec["alpha"] = args.alpha
    if getattr(args, "tau", None) is not None:
        spec["tau"] = args.tau
    if getattr(args, "trunc_L", None) is not None:
        spec["L"] = args.trunc_L
    return parse_risk(spec)


def lattice_for(costs) -> int | None:
    """Smallest K <= MAX_LATTICE_K putting every cost on the 1/K lattice."""
    vals = np.unique(np.concatenate([np.ravel(c) for c in costs]))
    for K in range(1, MAX_LATTICE_K + 1):
        if np.all(np.abs(vals * K - np.round(vals * K)) <= 1e-9):
            return K
    return None


def resolve_xgrid(file_grid: XGrid | None, args, costs) -> XGrid:
    if args.xgrid:
        return parse_xgrid(args.xgrid)
    if file_grid is not None:
        return file_grid
    K = lattice_for(costs)
    return XGrid.lattice(K) if K is not None else XGrid.uniform(DEFAULT_H)


def resolve_theta(file_spec, args, family: RiskFamily, cost_bound: float):
    spec = args.theta_grid if args.theta_grid is not None else file_spec
    return parse_theta_grid(spec, family, cost_bound) or family.default_grid(cost_bound)


def theta_grid_json(grid) -> dict:
    return {"box": [list(map(float, b)) for b in grid.box], "points": [int(a.size) for a in grid.axes],
            "step": float(grid.max_step)}


def parse_n_list(text: str) -> list[int]:
    """``64,128,256`` or a doubling range ``2^6..2^14``."""
    try:
        if ".." in text:
            lo, hi = (t.strip() for t in text.split(".."))

            def val(s):
                b, _, e = s.partition("^")
                return int(b) ** int(e) if e else int(b)

            lo, hi = val(lo), val(hi)
            out = []
            n = lo
            while n <= hi:
                out.append(n)
                n *= 2
            return out
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse --n-list {text!r}") from None


def _header(command: str, family: RiskFamily) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "risk_spec": family.to_json()}


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    data = load_json(args.problem)
    if is_soc(data):
        raise ConfigError("control problems are solved with soc-solve")
    run = mdp_from_json(data)
    family = resolve_family(data.get("risk"), args)
    grid = resolve_xgrid(run.xgrid, args, run.mdp.costs)
    tgrid = resolve_theta(run.theta_spec, args, family, run.mdp.cost_bound())
    risk, theta, policy = optimal_risk(run.mdp, family, tgrid, run.s0, grid, refine=args.refine)
    out = _header("solve", family)
    out.update(risk=float(risk), theta_star=_floats(theta), s0=run.s0, xgrid=xgrid_to_json(grid),
               theta_grid=theta_grid_json(tgrid), policy=policy_to_json(policy))
    emit(out, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = load_json(args.problem)
    run = mdp_from_json(data)
    family = resolve_family(data.get("risk"), args)
    pol_data = load_json(args.policy)
    policy = policy_from_json(pol_data)
    file_grid = parse_xgrid(pol_data["xgrid"]) if "xgrid" in pol_data else run.xgrid
    grid = resolve_xgrid(file_grid, args, run.mdp.costs)
    policy.check(run.mdp, grid.nodes(run.mdp))
    tgrid = resolve_theta(run.theta_spec, args, family, run.mdp.cost_bound())
    risk, theta = policy_risk(run.mdp, policy, family, tgrid, run.s0, grid, refine=args.refine)
    out = _header("evaluate", family)
    out.update(risk=float(risk), theta_star=_floats(theta), s0=run.s0, xgrid=xgrid_to_json(grid),
               theta_grid=theta_grid_json(tgrid))
    emit(out, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    data = load_json(args.problem)
    n_list = parse_n_list(args.n_list)
    if is_soc(data):
        run = soc_from_json(data)
        family = resolve_family(data.get("risk"), args)
        if run.grid is None:
            raise ConfigError("control problem needs grids for a sweep")
        grid = run.grid
        if args.xgrid:
            grid = SocGrid(grid.hS, grid.hA, parse_xgrid(args.xgrid))
        bound = to_mdp(run.problem, grid).cost_bound()
        truth, s0, policy = run.problem, run.s0, None
        S = A = None
    else:
        run = mdp_from_json(data)
        family = resolve_family(data.get("risk"), args)
        grid = resolve_xgrid(run.xgrid, args, run.mdp.costs)
        bound = run.mdp.cost_bound()
        truth, s0 = run.mdp, run.s0
        policy = policy_from_json(load_json(args.policy)) if args.policy else None
        S = max(run.mdp.n_states(t) for t in range(run.mdp.T + 1))
        A = max(run.mdp.n_actions(t) for t in range(run.mdp.T + 1))
    tgrid = resolve_theta(run.theta_spec, args, family, bound)
    model = GenerativeModel(truth, args.seed)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if policy is not None:
        policy.check(run.mdp, grid.nodes(run.mdp))
        res = sweep_eval(model, policy, family, tgrid, n_list, args.reps, s0, grid, jobs, args.timing)
    else:
        res = sweep_opt(model, family, tgrid, n_list, args.reps, s0, grid, jobs, args.timing)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "rep", "error", "seconds"])
    for n, rep, err, secs in res.rows:
        writer.writerow([n, rep, repr(float(err)), "" if secs is None else repr(float(secs))])
    write_atomic(args.out, buf.getvalue())

    summary = _header("sweep", family)
    summary.update(
        mode="eval" if policy is not None else "opt", seed=args.seed, reps=args.reps,
        n_list=n_list, truth=float(res.truth), slope=res.slope, intercept=res.intercept,
        slope_ci=None if res.slope_ci is None else [float(v) for v in res.slope_ci],
        medians=[{"n": n, "median_error": m} for n, m in res.medians.items()], partial=res.partial)
    if args.eps is not None and S is not None:
        T = truth.T
        summary["sample_size"] = {
            "calibration": "proof-calibrated", "eps": args.eps, "delta": args.delta,
            "n": sample_size_opt(T, family.L_C, family.L_Theta, family.theta_dim, S, A,
                                 float(np.max(np.abs(tgrid.box))), args.eps, args.delta)}
    summary_path = args.summary or os.path.splitext(args.out)[0] + ".summary.json"
    write_atomic(summary_path, dumps(summary))
    return EXIT_NUMERIC if res.partial else EXIT_OK


def _check(name, error, tol, detail=None) -> dict:
    ok = bool(error <= tol)
    return {"name": name, "passed": ok, "max_error": finite(error), "tolerance": tol,
            "detail": detail or ""}


def cmd_oracle_check(args) -> int:
    data = load_json(args.problem)
    if is_soc(data):
        raise ConfigError("oracle-check takes a finite MDP problem file")
    run = mdp_from_json(data)
    mdp, s0 = run.mdp, run.s0
    family = resolve_family(data.get("risk"), args)
    grid = resolve_xgrid(run.xgrid, args, mdp.costs)
    if grid.mode != "lattice":
        K = lattice_for(mdp.costs)
        if K is None:
            raise ConfigError("oracle-check needs costs on a 1/K lattice")
        grid = XGrid.lattice(K)
    grid.validate(mdp)
    tgrid = resolve_theta(run.theta_spec, args, family, mdp.cost_bound())
    checks = []

    risk, theta, greedy = optimal_risk(mdp, family, tgrid, s0, grid)
    o_risk, _ = oracle.oracle_optimal_risk(mdp, family, tgrid, s0)
    checks.append(_check("optimal_risk_matches_enumeration", abs(risk - o_risk), 1e-9,
                         f"dp={risk!r} oracle={o_risk!r}"))
    if family.kind == "cvar":
        exact, _ = oracle.oracle_optimal_risk(mdp, family, None, s0)
        tol = float(tgrid.max_step) * family.L_Theta + 1e-9
        checks.append(_check("optimal_risk_within_grid_error", abs(risk - exact), tol,
                             f"dp={risk!r} closed_form={exact!r}"))

    # telescoping: augmented value plus f(0) equals E f(total cost)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, 2])))
    policies = [greedy] + [AugPolicy.random(mdp, grid, rng, randomized=bool(i % 2))
                           for i in range(args.policies)]
    f0 = float(family.values(theta[None, :], 0.0)[0])
    worst = 0.0
    for pol in policies:
        table = dp_evaluate(mdp, pol, family, theta, grid)
        dist = oracle.exact_total_cost_distribution(mdp, pol, s0)
        direct = dist.expect(lambda z: family.values(theta[None, :], z)[0])
        worst = max(worst, abs(table.values[0][s0, 0] + f0 - direct))
    checks.append(_check("telescoping_identity", worst, 1e-12, f"{len(policies)} policies"))

    opt_table, _ = dp_optimize(mdp, family, theta, grid)
    greedy_table = dp_evaluate(mdp, greedy, family, theta, grid)
    gap = max(float(np.max(np.abs(a - b))) for a, b in zip(opt_table.values, greedy_table.values))
    checks.append(_check("greedy_consistency", gap, 1e-12))

    L_C = family.L_C
    excess = lipschitz_excess(opt_table, [opt_modulus(mdp.T, t, L_C) for t in range(mdp.T + 1)])
    checks.append(_check("lipschitz_optimal_values", max(excess, 0.0), 1e-9))
    uni = AugPolicy.uniform_random(mdp, grid)
    uni_table = dp_evaluate(mdp, uni, family, theta, grid)
    excess = lipschitz_excess(uni_table, [eval_modulus(mdp.T, t, L_C, 0.0) for t in range(mdp.T + 1)])
    checks.append(_check("lipschitz_policy_values", max(excess, 0.0), 1e-9))
    bound_gap = max(float(np.max(np.abs(V))) - (mdp.T - t + 1) * L_C
                    for t, V in enumerate(opt_table.values))
    checks.append(_check("value_bound", max(bound_gap, 0.0), 1e-12))

    report = _header("oracle-check", family)
    violations = [c["name"] for c in checks if not c["passed"]]
    report.update(risk=float(risk), theta_star=_floats(theta), checks=checks, violations=violations)
    emit(report, args.out)
    for name in violations:
        print(f"riskdp: oracle check failed: {name}", file=sys.stderr)
    return EXIT_ORACLE if violations else EXIT_OK


def _soc_grid(run, args) -> SocGrid:
    if run.grid is None:
        raise ConfigError("control problem needs grids {hS, hA, xgrid}")
    if args.xgrid:
        return SocGrid(run.grid.hS, run.grid.hA, parse_xgrid(args.xgrid))
    return run.grid


def cmd_soc_solve(args) -> int:
    data = load_json(args.problem)
    run = soc_from_json(data)
    problem = run.problem
    family = resolve_family(data.get("risk"), args)
    grid = _soc_grid(run, args)
    if problem.L is not None:
        problem.validate_lipschitz()
    mdp = to_mdp(problem, grid)
    tgrid = resolve_theta(run.theta_spec, args, family, mdp.cost_bound())
    risk, theta = soc_optimal_risk(problem, family, tgrid, run.s0, grid, mdp=mdp)
    _, policy = soc_dp_optimize(problem, family, theta, grid)
    out = _header("soc-solve", family)
    out.update(risk=float(risk), theta_star=_floats(theta), s0=_floats(run.s0),
               grid={"hS": grid.hS, "hA": grid.hA, "xgrid": xgrid_to_json(grid.xgrid)},
               theta_grid=theta_grid_json(tgrid),
               state_nodes=[_floats(a) for a in grid.state_axes(problem)],
               action_nodes=[_floats(a) for a in grid.action_axes(problem)],
               policy=policy_to_json(policy))
    if problem.L is not None:
        L_X, L_S = soc_moduli(problem.T, 0, family.L_C, problem.L)
        out.update(moduli={"L_X": L_X, "L_S": L_S},
                   refinement_bound=refinement_bound(problem, family, grid))
    emit(out, args.out)
    return EXIT_OK


def _residual(inf, family, grid, T, theta):
    """Optimality-operator residual at theta* on x in [0, 1], or None if not applicable."""
    if grid.mode != "uniform":
        return None
    window = XGrid.uniform(grid.h, (0.0, (1.0 + float(inf.costs.max())) / inf.gamma))
    surface = ValueSurface(inf, family, T, window)
    try:
        rep = bellman_residual_opt(inf, family, surface, np.linspace(0.0, 1.0, 5), [theta])
    except UnsupportedFamilyError as exc:
        log.info("residual skipped: %s", exc)
        return None
    return {"value": rep.residual, "bound": residual_bound(family, inf.gamma, T),
            "points": rep.points, "extrapolated": rep.extrapolated}


def cmd_horizon_solve(args) -> int:
    data = load_json(args.problem)
    gamma = args.gamma if args.gamma is not None else data.get("gamma")
    if gamma is None:
        raise ConfigError("discounted problem needs --gamma or a gamma field")
    eps = args.eps_trunc if args.eps_trunc is not None else data.get("eps_trunc", 1e-2)
    family = resolve_family(data.get("risk"), args)
    T = horizon_for(float(gamma), family.L_C, float(eps))
    out = _header("horizon-solve", family)
    if is_soc(data):
        run = soc_from_json(data)
        grid = _soc_grid(run, args)
        problem = truncate_soc(run.problem, float(gamma), T)
        mdp = to_mdp(problem, grid)
        tgrid = resolve_theta(run.theta_spec, args, family, mdp.cost_bound())
        risk, theta = soc_optimal_risk(problem, family, tgrid, run.s0, grid, mdp=mdp)
        residual = None
        s0 = _floats(run.s0)
    else:
        inf, run = infinite_from_json(data, float(gamma))
        grid = parse_xgrid(args.xgrid) if args.xgrid else (run.xgrid or XGrid.uniform(DEFAULT_H))
        mdp = truncate_at(inf, T)
        tgrid = resolve_theta(run.theta_spec, args, family, mdp.cost_bound())
        risk, theta, _ = optimal_risk(mdp, family, tgrid, run.s0, grid)
        residual = None if args.skip_residual else _residual(inf, family, grid, T, theta)
        s0 = run.s0
    out.update(risk=float(risk), theta_star=_floats(theta), s0=s0, gamma=float(gamma), T=T,
               epsilon_trunc=truncation_bound(float(gamma), family.L_C, T),
               eps_trunc_requested=float(eps), theta_grid=theta_grid_json(tgrid),
               residual=residual)
    emit(out, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("problem", help="problem JSON file")
        p.add_argument("--out", required=out_required, help="output path (default: stdout)")
        p.add_argument("--risk", help="cvar, kl, chi2, tv or a JSON risk object")
        p.add_argument("--alpha", type=float, help="CVaR level in (0, 1]")
        p.add_argument("--tau", type=float, help="divergence budget")
        p.add_argument("--trunc-L", dest="trunc_L", type=float, help="density truncation level")
        p.add_argument("--theta-grid", help="points per axis (129) or step=0.01")
        p.add_argument("--xgrid", help="lattice:K or uniform:h")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--refine", action="store_true", help="refine theta beyond the grid")

    p = sub.add_parser("solve", help="optimal risk and greedy policy of a finite MDP")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="risk of a stored policy")
    common(p)
    p.add_argument("--policy", required=True, help="policy JSON (e.g. a solve output)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="empirical error against sample size")
    common(p, out_required=True)
    p.add_argument("--n-list", default="2^6..2^14", help="64,128,... or 2^6..2^14")
    p.add_argument("--reps", type=int, default=32)
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    p.add_argument("--policy", help="sweep the risk of this policy instead of the optimum")
    p.add_argument("--summary", help="summary JSON path (default: <out>.summary.json)")
    p.add_argument("--timing", action="store_true", help="fill the seconds column")
    p.add_argument("--eps", type=float, help="also report the proof-calibrated sample size")
    p.add_argument("--delta", type=float, default=0.05)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check", help="compare the DP against brute-force enumeration")
    common(p)
    p.add_argument("--policies", type=int, default=20, help="random policies for the identity check")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("soc-solve", help="optimal risk of a control problem on a grid")
    common(p)
    p.set_defaults(func=cmd_soc_solve)

    p = sub.add_parser("horizon-solve", help="discounted problem via truncation")
    common(p)
    p.add_argument("--gamma", type=float, help="discount factor in [0, 1)")
    p.add_argument("--eps-trunc", type=float, help="truncation error budget")
    p.add_argument("--skip-residual", action="store_true", help="do not compute the fixed-point residual")
    p.set_defaults(func=cmd_horizon_solve)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("RISKDP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"riskdp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RiskDPError, ArithmeticError, MemoryError) as exc:
        print(f"riskdp: solver error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
