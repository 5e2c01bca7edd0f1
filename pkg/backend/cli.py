"""Command-line front end: solve, simulate, sweep, compare, slice, verify.

Exit codes: 0 ok, 1 input error, 2 non-convergence, 3 missing prerequisite fields.
"""
import argparse
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config import config
from engagement_sim import classify_outcome, write_trajectory_csv
from engagement_suite import EngagementSuite, heading_label, report_json
from exceptions import MissingDependencyError, OutputExistsError, WezError
from models import Outcome, Pose, RunConfig, SolverVariant
from policy_store import write_slice_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_MISSING_DEPENDENCY = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wez", description="Time-optimal WEZ engagement solver and simulator")
    parser.add_argument("--config", type=Path, help="JSON run configuration (sections agent, target, grid, solver, sim, sweep)")
    parser.add_argument("--output-dir", help="artifact directory (default: WEZ_OUTPUT_DIR)")
    parser.add_argument("--threads", type=int, help="worker threads for solver sweeps and simulation fan-out")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="logging level (default: %(default)s)")
    parser.add_argument("--grid", type=int, help="points per dimension of the final grid")
    parser.add_argument("--r-max", type=float, help="outer range of the grid")
    parser.add_argument("--sigma", type=float, help="heading-noise intensity of the solve")
    parser.add_argument("--tolerance", type=float, help="mean |dV| convergence tolerance")
    parser.add_argument("--max-iterations", type=int, help="value-iteration cap per stage")
    parser.add_argument("--schedule", type=int, nargs="*", help="coarse upsampling stages, e.g. --schedule 25 50")
    parser.add_argument("--dt", type=float, help="simulation time step")
    parser.add_argument("--t-max", type=float, help="stalemate timeout")
    parser.add_argument("--seed", type=int, help="simulation noise seed")

    commands = parser.add_subparsers(dest="command", required=True)

    solve = commands.add_parser("solve", help="compute a controller field")
    solve.add_argument("--variant", required=True, choices=[v.value for v in SolverVariant])
    solve.add_argument("--with-deps", action="store_true", help="solve missing prerequisite fields first")

    simulate = commands.add_parser("simulate", help="simulate one engagement")
    simulate.add_argument("--agent-pose", type=float, nargs=3, metavar=("X", "Y", "THETA"), default=[0.0, 0.0, math.pi / 2])
    simulate.add_argument("--target-pose", type=float, nargs=3, metavar=("X", "Y", "THETA"), required=True)
    simulate.add_argument("--agent-ctrl", default="policy:baseline-agent",
                          help="constant:<u> | pursuit | policy:<variant or path>")
    simulate.add_argument("--target-ctrl", default="constant:0")
    simulate.add_argument("--out", type=Path, help="trajectory CSV (default: <output-dir>/trajectory.csv)")

    sweep = commands.add_parser("sweep", help="outcome of every initial Target position and heading")
    sweep.add_argument("--agent-ctrl", default="policy:baseline-agent")
    sweep.add_argument("--target-ctrl", default="policy:baseline-target")
    sweep.add_argument("--headings", type=float, nargs="+", help="Target headings (default: sweep section)")
    sweep.add_argument("--nx", type=int)
    sweep.add_argument("--ny", type=int)

    compare = commands.add_parser("compare", help="capture-time differences between two Agent controllers")
    compare.add_argument("--first", default="policy:baseline-agent")
    compare.add_argument("--second", default="policy:adversarial")
    compare.add_argument("--target-ctrl", default="constant:0")
    compare.add_argument("--heading", type=float, default=math.pi)
    compare.add_argument("--nx", type=int)
    compare.add_argument("--ny", type=int)

    slice_ = commands.add_parser("slice", help="value/policy plane of constant xi_A")
    slice_.add_argument("--field", required=True, help="field file or variant name")
    slice_.add_argument("--xi-a", type=float, default=math.pi)
    slice_.add_argument("--out", type=Path)

    commands.add_parser("verify", help="run the oracle suites and print a JSON report")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied, validated as a whole"""
    base = RunConfig.model_validate_json(args.config.read_text(encoding="utf-8")) if args.config else RunConfig()
    data = base.model_dump()

    if args.output_dir is not None:
        data["output_dir"] = args.output_dir
    if args.grid is not None:
        data["grid"].update(n_r=args.grid, n_xi_a=args.grid, n_xi_t=args.grid)
    if args.r_max is not None:
        data["grid"]["r_max"] = args.r_max
    solver_overrides = {
        "sigma": args.sigma,
        "tolerance": args.tolerance,
        "max_iterations": args.max_iterations,
        "upsample_schedule": args.schedule,
    }
    sim_overrides = {"dt": args.dt, "t_max": args.t_max, "seed": args.seed}
    threads = args.threads if args.threads is not None else (None if args.config else config.THREADS)
    solver_overrides["thread_count"] = threads
    data["solver"].update({k: v for k, v in solver_overrides.items() if v is not None})
    data["sim"].update({k: v for k, v in sim_overrides.items() if v is not None})

    sweep_overrides = {
        "headings": getattr(args, "headings", None),
        "nx": getattr(args, "nx", None),
        "ny": getattr(args, "ny", None),
    }
    data["sweep"].update({k: v for k, v in sweep_overrides.items() if v is not None})
    return RunConfig.model_validate(data)


def cmd_solve(suite: EngagementSuite, args) -> int:
    result = suite.solve(SolverVariant(args.variant), with_dependencies=args.with_deps)
    final = result.traces[-1]
    print(f"{args.variant}: {'converged' if result.converged else 'NOT converged'} "
          f"after {final.iterations} iterations on {final.grid.n_r}x{final.grid.n_xi_a}x{final.grid.n_xi_t} "
          f"(mean dV {final.final_delta:.3e})")
    print(f"field: {suite.field_path(SolverVariant(args.variant))}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_simulate(suite: EngagementSuite, args) -> int:
    out = args.out or suite.output_dir / "trajectory.csv"
    if out.exists() and not suite.force:
        raise_exists(out)
    trajectory = suite.simulate(Pose(*args.agent_pose), Pose(*args.target_pose), args.agent_ctrl, args.target_ctrl)
    outcome = classify_outcome(trajectory)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(trajectory, out)
    print(f"outcome: {outcome.label}")
    print(f"t_f: {trajectory.t_f!r}")
    print(f"trajectory: {out} ({len(trajectory.samples)} samples)")
    return EXIT_OK


def cmd_sweep(suite: EngagementSuite, args) -> int:
    grid = suite.sweep(args.agent_ctrl, args.target_ctrl)
    for h, heading in enumerate(grid.headings):
        counts = {o.label: int((grid.outcomes[h] == o).sum()) for o in Outcome}
        print(f"heading {heading_label(heading)}: " + ", ".join(f"{k}={v}" for k, v in counts.items() if v))
    if grid.errors:
        print(f"{len(grid.errors)} cells failed; see log")
    return EXIT_OK


def cmd_compare(suite: EngagementSuite, args) -> int:
    comparison = suite.compare(args.first, args.second, args.target_ctrl, args.heading)
    print(f"winning cells: {comparison.winning_cells}, excluded: {comparison.excluded}, "
          f"mean delta t_f: {comparison.mean_delta():.4f}")
    return EXIT_OK


def cmd_slice(suite: EngagementSuite, args) -> int:
    path = suite.resolve_spec(f"policy:{args.field}").partition(":")[2]
    out = args.out or suite.output_dir / f"slice_{heading_label(args.xi_a)}.csv"
    if out.exists() and not suite.force:
        raise_exists(out)
    rows = suite.slice(path, args.xi_a)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_slice_csv(rows, out)
    print(f"slice: {out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_verify(suite: EngagementSuite, args) -> int:
    reports = suite.verify()
    print(report_json(reports))
    return EXIT_OK if all(report.passed for report in reports) else EXIT_INPUT_ERROR


def raise_exists(path: Path):
    raise OutputExistsError(f"{path} exists; pass --force to overwrite")


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "slice": cmd_slice,
    "verify": cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        run = load_run_config(args)
    except (ValidationError, ValueError, OSError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    suite = EngagementSuite(run, force=args.force)
    try:
        return COMMANDS[args.command](suite, args)
    except MissingDependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_DEPENDENCY
    except (WezError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
