"""Command-line interface.

Subcommands wire problem files to the solvers, verifiers, and simulator.
Every run writes its outputs plus a ``manifest.json`` (inputs, flags,
package version, seed) under the output directory; manifests carry no
timestamps so reruns are byte-identical. Exit codes: 0 success, 1
verification or solver failure, 2 usage/input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import (KarmaAllocError, NoKeFoundError, NotNashBalancedError,
                     SolverError, StructuralError)
from .ke import (check_nash_balance, compare_coupling, construct_ke_from_mlnw,
                 find_ke, verify_ke)
from .mlnw import kkt_residuals, single_shot_nash_welfare, solve_mlnw, utilitarian
from .model import rush_hour_scenario, validate
from .oracle import TwoShotGameSpec, two_shot_check
from .sim import SimConfig, default_mean_karma, run, write_stats_csv

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2


def _writer(outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def write_json(name: str, doc) -> Path:
        path = outdir / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(io.dumps_canonical(doc))
        written.append(name)
        return path

    return write_json, written


def _manifest(write_json, written, args, inputs):
    doc = {
        "command": args.command,
        "version": __version__,
        "inputs": inputs,
        "flags": {
            k: v for k, v in sorted(vars(args).items())
            if k not in ("command", "func") and v is not None
        },
        "outputs": sorted(written),
    }
    write_json("manifest.json", doc)


def _load_problem(path: str):
    try:
        return io.load_problem(path)
    except FileNotFoundError:
        raise StructuralError(f"problem file not found: {path}")


def _residual_doc(report):
    return {
        "stationarity": report.stationarity,
        "primal_feasibility": report.primal_feasibility,
        "dual_feasibility": report.dual_feasibility,
        "complementary_slackness": report.complementary_slackness,
        "max_residual": report.max_residual,
        "worst_index": [str(w) for w in report.worst_index],
    }


def _verification_doc(report):
    return {
        "passed": report.passed,
        "checks": [
            {"name": c.name, "ok": c.ok, "value": c.value,
             "tolerance": c.tolerance, "detail": c.detail}
            for c in report.checks
        ],
    }


def cmd_scenario(args) -> int:
    if args.name != "rush-hour":
        print(f"unknown scenario {args.name!r}; available: rush-hour",
              file=sys.stderr)
        return EXIT_USAGE
    problem = rush_hour_scenario()
    outdir = Path(args.output_dir)
    write_json, written = _writer(outdir)
    path = outdir / "problem.json"
    io.save_problem(problem, path)
    written.append("problem.json")
    report = validate(problem)
    write_json("validation.json", {
        "passed": report.passed,
        "checks": [{"assumption": c.assumption, "ok": c.ok,
                    "severity": c.severity, "message": c.message,
                    "indices": list(c.indices)} for c in report.checks],
    })
    _manifest(write_json, written, args, {})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_solve_mlnw(args) -> int:
    problem = _load_problem(args.problem)
    sol = solve_mlnw(problem, tol=args.tol)
    write_json, written = _writer(Path(args.output_dir))
    write_json("mlnw.json", io.mlnw_solution_to_dict(problem, sol))
    io.write_allocation_csv(problem, sol.chi, Path(args.output_dir) / "chi.csv")
    written.append("chi.csv")
    _manifest(write_json, written, args, {"problem": args.problem})
    print(f"objective {sol.objective:.9f}, "
          f"max KKT residual {sol.residuals.max_residual:.3e}")
    return EXIT_OK


def cmd_baselines(args) -> int:
    problem = _load_problem(args.problem)
    single = single_shot_nash_welfare(problem, tol=args.tol)
    util = utilitarian(problem)
    outdir = Path(args.output_dir)
    write_json, written = _writer(outdir)
    io.write_allocation_csv(problem, single, outdir / "single_shot_chi.csv")
    io.write_allocation_csv(problem, util, outdir / "utilitarian_chi.csv")
    written += ["single_shot_chi.csv", "utilitarian_chi.csv"]
    from .model import reward_improvements
    write_json("baselines.json", {
        "single_shot_improvements": reward_improvements(problem, single).tolist(),
        "utilitarian_improvements": reward_improvements(problem, util).tolist(),
    })
    _manifest(write_json, written, args, {"problem": args.problem})
    return EXIT_OK


def cmd_solve_ke(args) -> int:
    problem = _load_problem(args.problem)
    ke = find_ke(problem, tol=args.tol, max_iter=args.max_iter)
    outdir = Path(args.output_dir)
    write_json, written = _writer(outdir)
    io.save_ke(ke, outdir / "ke.json")
    written.append("ke.json")
    io.write_allocation_csv(problem, ke.chi, outdir / "chi.csv")
    written.append("chi.csv")
    report = verify_ke(problem, ke, tol=args.tol)
    write_json("verification.json", _verification_doc(report))
    _manifest(write_json, written, args, {"problem": args.problem})
    print(f"bids {np.array2string(np.asarray(ke.bids), precision=6)}")
    return EXIT_OK


def cmd_verify_ke(args) -> int:
    problem = _load_problem(args.problem)
    ke = io.load_ke(args.ke)
    report = verify_ke(problem, ke, tol=args.tol)
    write_json, written = _writer(Path(args.output_dir))
    write_json("verification.json", _verification_doc(report))
    _manifest(write_json, written, args,
              {"problem": args.problem, "ke": args.ke})
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_check_nb(args) -> int:
    problem = _load_problem(args.problem)
    sol = solve_mlnw(problem, tol=args.tol)
    nb = check_nash_balance(problem, sol, tol=args.nb_tol)
    write_json, written = _writer(Path(args.output_dir))
    write_json("nash_balance.json", {
        "balanced": nb.balanced,
        "constant_c": nb.constant_c,
        "max_deviation": nb.max_deviation,
        "per_type_ratio": nb.per_type_ratio.tolist(),
        "tolerance": nb.tolerance,
    })
    _manifest(write_json, written, args, {"problem": args.problem})
    print(f"balanced={nb.balanced} C={nb.constant_c:.3e} "
          f"max deviation {nb.max_deviation:.3e}")
    return EXIT_OK


def cmd_construct_ke(args) -> int:
    problem = _load_problem(args.problem)
    sol = solve_mlnw(problem, tol=args.tol)
    try:
        ke = construct_ke_from_mlnw(problem, sol, alpha=args.alpha,
                                    tol=args.tol)
    except NotNashBalancedError as exc:
        print(f"not Nash-balanced: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    outdir = Path(args.output_dir)
    write_json, written = _writer(outdir)
    io.save_ke(ke, outdir / "ke.json")
    written.append("ke.json")
    report = verify_ke(problem, ke, tol=args.tol)
    write_json("verification.json", _verification_doc(report))
    _manifest(write_json, written, args, {"problem": args.problem})
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_couple(args) -> int:
    first = _load_problem(args.problem_a)
    second = _load_problem(args.problem_b)
    report = compare_coupling(first, second, tol=args.tol,
                              max_iter=args.max_iter)
    outdir = Path(args.output_dir)
    write_json, written = _writer(outdir)
    io.write_coupling_csv(report, outdir / "coupling.csv")
    written.append("coupling.csv")
    write_json("coupling.json", {
        "separate_sum": report.separate_sum.tolist(),
        "combined": report.combined.tolist(),
        "slack": report.slack.tolist(),
        "min_slack": report.min_slack,
    })
    _manifest(write_json, written, args,
              {"problem_a": args.problem_a, "problem_b": args.problem_b})
    print(f"min per-type slack {report.min_slack:.3e}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    problem = _load_problem(args.problem)
    if args.ke:
        ke = io.load_ke(args.ke)
    else:
        sol = solve_mlnw(problem, tol=args.tol)
        try:
            ke = construct_ke_from_mlnw(problem, sol, alpha=args.alpha,
                                        tol=args.tol)
        except NotNashBalancedError:
            ke = find_ke(problem, tol=args.tol, max_iter=args.max_iter)
    report = verify_ke(problem, ke, tol=max(args.tol, 1e-5))
    if not report.passed:
        print("policy failed verification:\n" + report.summary(),
              file=sys.stderr)
        return EXIT_VERIFY
    mean_karma = (default_mean_karma(ke) if args.mean_karma is None
                  else args.mean_karma)
    config = SimConfig(
        horizon=args.horizon, seed=args.seed, mean_karma=mean_karma,
        policy=ke, shortfall_rule=args.shortfall,
        burn_in=args.burn_in, trace_every=args.trace_every,
    )
    stats = run(problem, config)
    outdir = Path(args.output_dir)
    write_json, written = _writer(outdir)
    write_stats_csv(problem, stats, outdir / "frequencies.csv",
                    outdir / "traces.csv", ke=ke)
    written += ["frequencies.csv", "traces.csv"]
    write_json("simulation.json", {
        "backend": stats.backend,
        "horizon": stats.horizon,
        "recorded_steps": stats.recorded_steps,
        "mean_karma": mean_karma,
        "shortfall_count": stats.shortfall_count,
        "shortfall_rate": stats.shortfall_rate,
        "karma_total": stats.karma_total,
        "payments_by_type": stats.payments_by_type.tolist(),
        "redistributions_by_type": stats.redistributions_by_type.tolist(),
    })
    _manifest(write_json, written, args, {"problem": args.problem,
                                          "ke": args.ke or ""})
    print(f"simulated {stats.horizon} steps on the {stats.backend} backend; "
          f"shortfall rate {stats.shortfall_rate:.4%}")
    return EXIT_OK


def cmd_two_shot(args) -> int:
    spec = TwoShotGameSpec(n=args.n, capacity=args.capacity,
                           u_low=args.u_low, u_high=args.u_high,
                           p_high=args.p_high)
    report = two_shot_check(spec)
    write_json, written = _writer(Path(args.output_dir))
    write_json("two_shot.json", {
        "dominant": report.dominant,
        "equilibrium": report.equilibrium,
        "min_margin_dominance": str(report.min_margin_dominance),
        "min_margin_equilibrium": str(report.min_margin_equilibrium),
        "worst_profile": [list(s) for s in (report.worst_profile or ())],
    })
    _manifest(write_json, written, args, {})
    print(f"truthful day-1 bidding dominant: {report.dominant}; "
          f"equilibrium: {report.equilibrium}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="karma-alloc",
        description="Long-run Nash welfare allocation and karma equilibria.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem=True):
        if problem:
            p.add_argument("problem", help="problem JSON file")
        p.add_argument("-o", "--output-dir", default="out",
                       help="directory for outputs (default: ./out)")
        p.add_argument("--tol", type=float, default=1e-6,
                       help="verification tolerance (default 1e-6)")

    p = sub.add_parser("scenario", help="write a built-in scenario file")
    p.add_argument("name", help="scenario name (rush-hour)")
    p.add_argument("-o", "--output-dir", default="out")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("solve-mlnw", help="solve the welfare program")
    common(p)
    p.set_defaults(func=cmd_solve_mlnw)

    p = sub.add_parser("baselines",
                       help="single-shot Nash welfare and utilitarian baselines")
    common(p)
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("solve-ke", help="search for a karma equilibrium")
    common(p)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.set_defaults(func=cmd_solve_ke)

    p = sub.add_parser("verify-ke", help="verify a karma equilibrium file")
    common(p)
    p.add_argument("--ke", required=True, help="equilibrium JSON file")
    p.set_defaults(func=cmd_verify_ke)

    p = sub.add_parser("check-nb", help="check the Nash-balance condition")
    common(p)
    p.add_argument("--nb-tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_check_nb)

    p = sub.add_parser("construct-ke",
                       help="build a KE from the welfare optimum")
    common(p)
    p.add_argument("--alpha", type=float, default=1.0,
                   help="bid scale (any positive value)")
    p.set_defaults(func=cmd_construct_ke)

    p = sub.add_parser("couple", help="compare separate vs merged economies")
    p.add_argument("problem_a")
    p.add_argument("problem_b")
    p.add_argument("-o", "--output-dir", default="out")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.set_defaults(func=cmd_couple)

    p = sub.add_parser("simulate", help="run the agent-based simulator")
    common(p)
    p.add_argument("--ke", help="equilibrium JSON (default: derive from MLNW)")
    p.add_argument("--horizon", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--mean-karma", type=float, default=None,
                   help="default: 10 x the largest stationary bid")
    p.add_argument("--shortfall", choices=("cap", "skip"), default="cap")
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--trace-every", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=100_000)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("two-shot", help="two-day token game enumeration")
    p.add_argument("-o", "--output-dir", default="out")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--capacity", type=int, default=2)
    p.add_argument("--u-low", type=float, default=1.0)
    p.add_argument("--u-high", type=float, default=4.0)
    p.add_argument("--p-high", type=float, default=0.5)
    p.set_defaults(func=cmd_two_shot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except StructuralError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, NoKeFoundError, NotNashBalancedError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except KarmaAllocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
