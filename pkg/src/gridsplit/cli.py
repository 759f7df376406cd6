"""Command-line entry point: ``gridsplit solve|partition|admm|sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .acopf import OpfError, OpfOptions, kkt_jacobian, solve_centralized_opf
from .admm import AdmmOptions
from .harness import (
    ExperimentConfig,
    resolve_line_limits,
    run_experiment,
    sweep_regions,
)
from .network import build_admittance, load_case
from .partitioning import (
    affinity_matrix,
    electrical_distance_partition,
    partition_quality,
    spectral_partition,
    write_partition,
)


def _add_case(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", required=True, help="MATPOWER .m / JSON case file, or a bundled name (case14, case30, case118)")
    p.add_argument("--line-limits", default="none", help="none | all | file of 'from_bus to_bus' lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridsplit", description="Partitioned distributed AC OPF.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="centralized AC OPF")
    _add_case(p)
    p.add_argument("--out", help="write the solution summary as JSON here")

    p = sub.add_parser("partition", help="partition the buses into regions")
    _add_case(p)
    p.add_argument("--method", choices=("sp", "ep"), default="sp")
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="partition file to write")

    p = sub.add_parser("admm", help="distributed OPF on a partition")
    _add_case(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--partition", help="partition file ('bus_id region_id' lines)")
    src.add_argument("--method", choices=("sp", "ep"))
    p.add_argument("--regions", type=int)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    d = AdmmOptions()
    p.add_argument("--start", choices=("warm", "flat"), default=d.start)
    p.add_argument("--rho0", type=float, default=d.rho0)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--beta-plus", type=float, default=d.beta_plus)
    p.add_argument("--beta-minus", type=float, default=d.beta_minus)
    p.add_argument("--tol-primal", type=float, default=d.tol_primal)
    p.add_argument("--tol-mismatch-mva", type=float, default=d.tol_mismatch_mva)
    p.add_argument("--max-iters", type=int, default=d.max_iterations)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sweep", help="run an experiment file over its region counts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the output directory")
    return parser


def cmd_solve(args) -> int:
    case = load_case(args.case)
    limits = resolve_line_limits(case, args.line_limits)
    try:
        sol = solve_centralized_opf(case, OpfOptions(line_limits=limits))
    except OpfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {
        "case": case.name,
        "status": sol.status,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "kkt_error": sol.kkt_error,
        "solve_time_s": sol.solve_time,
    }
    print(f"{case.name}: objective {sol.objective:.6f} ({sol.status}, {sol.iterations} iterations)")
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_partition(args) -> int:
    case = load_case(args.case)
    if args.method == "ep":
        part = electrical_distance_partition(case, args.regions, seed=args.seed)
        H = None
    else:
        limits = resolve_line_limits(case, args.line_limits)
        adm = build_admittance(case)
        sol = solve_centralized_opf(case, OpfOptions(line_limits=limits), adm)
        H = kkt_jacobian(case, sol)
        part, _ = spectral_partition(affinity_matrix(H, adm), args.regions, args.trials, args.seed, case.bus_ids)
    write_partition(part, args.out)
    q = partition_quality(case, part, H)
    print(f"{args.regions} regions, sizes {part.sizes().tolist()}, {q.tie_line_count} tie lines -> {args.out}")
    return 0


def cmd_admm(args) -> int:
    if args.method and not args.regions:
        print("error: --method needs --regions", file=sys.stderr)
        return 2
    opts = AdmmOptions(
        rho0=args.rho0,
        tau=args.tau,
        gamma=args.gamma,
        beta_plus=args.beta_plus,
        beta_minus=args.beta_minus,
        tol_primal=args.tol_primal,
        tol_mismatch_mva=args.tol_mismatch_mva,
        max_iterations=args.max_iters,
        start=args.start,
        workers=args.workers,
    )
    config = ExperimentConfig(
        case=args.case,
        method="file" if args.partition else args.method,
        regions=[args.regions or 1],
        partition_file=args.partition,
        trials=args.trials,
        seed=args.seed,
        line_limits=args.line_limits,
        admm=opts,
        out_dir=args.out,
    )
    rep = run_experiment(config)
    return _print_report(rep)


def _print_report(rep) -> int:
    if rep.failed_stage:
        print(f"K={rep.regions}: failed at {rep.failed_stage}: {rep.error}", file=sys.stderr)
        return 1
    print(
        f"K={rep.regions}: {rep.status} after {rep.iterations} iterations, "
        f"gap {rep.gap_percent:.4f}%, est. parallel time {rep.est_parallel_time:.2f} s"
    )
    return 0 if rep.converged else 3


def cmd_sweep(args) -> int:
    overrides = {"out_dir": args.out} if args.out else {}
    config = ExperimentConfig.from_file(args.config, **overrides)
    codes = [_print_report(rep) for rep in sweep_regions(config)]
    return max(codes, default=0)


COMMANDS = {"solve": cmd_solve, "partition": cmd_partition, "admm": cmd_admm, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
