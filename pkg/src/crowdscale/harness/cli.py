"""``crowdscale`` command line.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 a comparison
threshold was exceeded.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..kernels import cached_table, table_cache_dir, table_name
from ..params import CutoffParams
from .compare import METRICS, IncompatibleGrids, compare
from .moments import ibm_ensemble_moments, write_moments
from .runner import SolverError, run
from .scenario import MODELS, ScenarioError, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_THRESHOLD = 0, 2, 3, 4


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _threshold(text: str):
    name, _, value = text.partition("=")
    if name not in METRICS or not value:
        raise argparse.ArgumentTypeError(f"expected METRIC=VALUE with METRIC in {METRICS}")
    return name, float(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdscale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write CSV outputs")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--until", type=float)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("validate", help="check a scenario and list every problem")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--model", choices=MODELS)

    p = sub.add_parser("moments", help="bin IBM trajectories into snapshot fields")
    p.add_argument("trajectories", nargs="+", type=Path)
    p.add_argument("--config", required=True, type=Path, help="scenario giving the grid and targets")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--t-min", type=float, default=float("-inf"))
    p.add_argument("--t-max", type=float, default=float("inf"))
    p.add_argument("--pool", action="store_true", help="average over the time window as well")

    p = sub.add_parser("compare", help="distances between two snapshot files")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=_threshold, action="append", default=[])

    p = sub.add_parser("kernel-table", help="build (or reuse) a cached kernel table")
    p.add_argument("--config", type=Path, help="take kappa, delta and cut-offs from a scenario")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--kappa", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--ell", type=float)
    p.add_argument("--big-l", type=float)
    p.add_argument("--R", type=float)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--out", type=Path, help=f"table directory (default {table_cache_dir()})")
    return parser


def _kernel_table(args) -> int:
    kappa, delta, cut = 0.0, None, CutoffParams()
    if args.config is not None:
        s = load_scenario(args.config)
        p = s.params(args.model)
        kappa, delta, cut = p.kappa, p.delta, p.cut
        args.resolution = s.data["solver"].get("kernel_table", {}).get("resolution", args.resolution)
    kappa = kappa if args.kappa is None else args.kappa
    delta = delta if args.delta is None else args.delta
    cut = CutoffParams(cut.ell if args.ell is None else args.ell,
                       cut.big_l if args.big_l is None else args.big_l,
                       cut.R if args.R is None else args.R)
    problems = cut.problems()
    if delta is None or not delta > 0:
        problems.append("a table needs a positive interaction radius: pass --delta or set params.delta")
    if not -1.0 <= kappa <= 1.0:
        problems.append(f"kappa must lie in [-1, 1] (got {kappa})")
    if problems:
        raise ScenarioError(problems)
    directory = args.out if args.out is not None else table_cache_dir()
    cached_table(kappa, delta, cut, args.resolution, directory)
    print(Path(directory) / table_name(kappa, delta, cut, args.resolution))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            result = run(load_scenario(args.config), args.model, args.out, seed=args.seed,
                         until=args.until, threads=args.threads)
            print(f"{result.steps} steps to t={result.t:.6g}; outputs in {result.out}")
        elif args.command == "validate":
            load_scenario(args.config).validate(args.model)
            print("ok")
        elif args.command == "moments":
            s = load_scenario(args.config)
            frames = ibm_ensemble_moments(args.trajectories, s.grid, s.targets,
                                          float(s.data["ibm"]["walkers_per_mass"]),
                                          args.t_min, args.t_max, args.pool)
            args.out.mkdir(parents=True, exist_ok=True)
            write_moments(args.out / "snapshots.csv", s.grid, frames)
        elif args.command == "compare":
            report = compare(args.a, args.b, dict(args.threshold))
            report.write(args.out)
            sys.stdout.write(report.summary())
            if report.breaches:
                return EXIT_THRESHOLD
        else:
            return _kernel_table(args)
    except ScenarioError as err:
        print(err, file=sys.stderr)
        return EXIT_INVALID
    except (IncompatibleGrids, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as err:
        print(f"solver error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
