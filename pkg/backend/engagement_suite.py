import csv
import json
import logging
import math
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from config import Config, config as default_settings
from controllers import Controller, ControllerManager
from dynamics import drift, reduction_residual
from engagement_sim import (
    CaptureComparison,
    OutcomeGrid,
    Trajectory,
    compare_capture_times,
    simulate,
    sweep,
    write_capture_csv,
    write_outcome_csv,
    write_outcome_legend,
)
from exceptions import (
    ConfigurationError,
    FieldChecksumError,
    MissingDependencyError,
    OutputExistsError,
    TruncatedPayloadError,
)
from field_cache import FieldCache
from geometry import bez_radius
from hjb_solver import (
    ConvergenceTrace,
    SolveResult,
    avoid_set,
    cell_transition,
    solve_adversarial,
    solve_avoid,
    solve_baseline,
    swap_axes,
)
from models import (
    AGENT_DEFAULTS,
    TARGET_DEFAULTS,
    GridSpec,
    Pose,
    ProblemRole,
    RunConfig,
    SolverVariant,
    ValueField,
)
from policy_store import FieldFileHeader, SliceRow, extract_slice, load_field, read_header, save_field

logger = logging.getLogger(__name__)

PREREQUISITES: Dict[SolverVariant, List[SolverVariant]] = {
    SolverVariant.BASELINE_AGENT: [],
    SolverVariant.BASELINE_TARGET: [],
    SolverVariant.AVOID: [SolverVariant.BASELINE_AGENT, SolverVariant.BASELINE_TARGET],
    SolverVariant.ADVERSARIAL: [SolverVariant.BASELINE_TARGET],
}


class SuiteReport(BaseModel):
    suite: str
    passed: bool
    detail: str


def grid_label(grid: GridSpec) -> str:
    if grid.n_r == grid.n_xi_a == grid.n_xi_t:
        return f"{grid.n_r}^3"
    return f"{grid.n_r}x{grid.n_xi_a}x{grid.n_xi_t}"


def heading_label(heading: float) -> str:
    return f"{heading:.4f}"


def write_convergence_csv(traces: Sequence[ConvergenceTrace], path: Path):
    """One row per sweep across every stage; iteration counts run on across stages"""
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["iteration", "mean_delta_v", "wall_time", "grid"])
        offset, clock = 0, 0.0
        for trace in traces:
            for row in trace.rows:
                writer.writerow([offset + row.iteration, repr(row.mean_delta_v), repr(clock + row.wall_time),
                                 grid_label(trace.grid)])
            offset += trace.iterations
            clock += trace.rows[-1].wall_time if trace.rows else 0.0


class EngagementSuite:
    """Main orchestrator: solves fields in dependency order and runs engagements against them"""

    def __init__(self, run: RunConfig, settings: Config = default_settings, force: bool = False):
        self.run = run
        self.settings = settings
        self.force = force
        self.output_dir = Path(run.output_dir or settings.OUTPUT_DIR)

        self.cache = FieldCache(settings.FIELD_CACHE_SIZE)
        self.controllers = ControllerManager(self.cache)

    # Artifact paths

    def field_path(self, variant: SolverVariant) -> Path:
        return self.output_dir / f"{variant.value}_{grid_label(self.run.grid)}.field"

    def trace_path(self, variant: SolverVariant) -> Path:
        return self.output_dir / f"{variant.value}_convergence.csv"

    def sweep_path(self, heading: float) -> Path:
        return self.output_dir / f"sweep_{heading_label(heading)}.csv"

    def _claim(self, path: Path):
        if path.exists() and not self.force:
            raise OutputExistsError(f"{path} exists; pass force to overwrite")

    # Solving

    def missing_prerequisites(self, variant: SolverVariant) -> List[str]:
        return [str(self.field_path(dep)) for dep in PREREQUISITES[variant] if not self.field_path(dep).exists()]

    def solve(self, variant: SolverVariant, with_dependencies: bool = False) -> SolveResult:
        """
        Solve one controller variant and write its field and convergence trace.

        Args:
            variant: Which field to compute
            with_dependencies: Solve missing prerequisite fields first instead of failing

        Returns:
            SolveResult; non-convergence is reported through result.converged
        """
        self._claim(self.field_path(variant))
        self._claim(self.trace_path(variant))

        missing = self.missing_prerequisites(variant)
        if missing and not with_dependencies:
            raise MissingDependencyError(missing)
        for dep in PREREQUISITES[variant]:
            if not self.field_path(dep).exists():
                logger.info("solving prerequisite %s for %s", dep.value, variant.value)
                self.solve(dep, with_dependencies=True)

        result = self._dispatch(variant)

        self.output_dir.mkdir(parents=True, exist_ok=True)
        save_field(result.field, self.field_path(variant))
        write_convergence_csv(result.traces, self.trace_path(variant))
        self.cache.put(self.field_path(variant), result.field)
        logger.info("%s: wrote %s (%s)", variant.value, self.field_path(variant),
                    "converged" if result.converged else "NOT converged")
        return result

    def _dispatch(self, variant: SolverVariant) -> SolveResult:
        run, log_every = self.run, self.settings.LOG_EVERY
        if variant == SolverVariant.BASELINE_AGENT:
            return solve_baseline(ProblemRole.AGENT_CONTROLS, run.agent, run.target, run.grid, run.solver, log_every)
        if variant == SolverVariant.BASELINE_TARGET:
            return solve_baseline(ProblemRole.TARGET_CONTROLS, run.agent, run.target, run.grid, run.solver, log_every)

        target_baseline = swap_axes(self.stored(SolverVariant.BASELINE_TARGET, ProblemRole.TARGET_CONTROLS))
        hot_start = self._hot_start()
        if variant == SolverVariant.AVOID:
            agent_baseline = self.stored(SolverVariant.BASELINE_AGENT, ProblemRole.AGENT_CONTROLS)
            mask = avoid_set(agent_baseline, target_baseline)
            return solve_avoid(run.agent, run.target, run.grid, run.solver, mask, hot_start, log_every)
        return solve_adversarial(run.agent, run.target, run.grid, run.solver, target_baseline, hot_start, log_every)

    def _hot_start(self) -> Optional[ValueField]:
        path = self.field_path(SolverVariant.BASELINE_AGENT)
        if not path.exists():
            logger.info("no agent baseline at %s; starting from zeros", path)
            return None
        return self.stored(SolverVariant.BASELINE_AGENT, ProblemRole.AGENT_CONTROLS)

    def stored(self, variant: SolverVariant, role: ProblemRole) -> ValueField:
        """Load a solved field and check it belongs to this run's vehicles and grid"""
        path = self.field_path(variant)
        if not path.exists():
            raise MissingDependencyError([str(path)])
        field = self.cache.get(path)
        own, other = (self.run.agent, self.run.target) if role == ProblemRole.AGENT_CONTROLS \
            else (self.run.target, self.run.agent)
        if field.grid != self.run.grid or field.agent != own or field.target != other:
            raise ConfigurationError(f"{path} was solved for a different grid or vehicle parameters")
        return field

    # Engagements

    def resolve_spec(self, spec: str) -> str:
        """Accept 'policy:<variant>' as shorthand for that variant's field in the output directory"""
        name, _, argument = spec.partition(":")
        if name == "policy" and argument in {v.value for v in SolverVariant}:
            return f"policy:{self.field_path(SolverVariant(argument))}"
        return spec

    def controller(self, spec: str, role: ProblemRole) -> Controller:
        own, other = (self.run.agent, self.run.target) if role == ProblemRole.AGENT_CONTROLS \
            else (self.run.target, self.run.agent)
        return self.controllers.build(self.resolve_spec(spec), role, own, other)

    def simulate(self, agent_pose: Pose, target_pose: Pose, spec_a: str, spec_t: str) -> Trajectory:
        ctrl_a = self.controller(spec_a, ProblemRole.AGENT_CONTROLS)
        ctrl_t = self.controller(spec_t, ProblemRole.TARGET_CONTROLS)
        return simulate(agent_pose, target_pose, ctrl_a, ctrl_t, self.run.sim)

    def sweep(self, spec_a: str, spec_t: str, agent_init: Pose = Pose(0.0, 0.0, math.pi / 2)) -> OutcomeGrid:
        lattice = self.run.sweep
        for heading in lattice.headings:
            self._claim(self.sweep_path(heading))
        grid = sweep(
            agent_init, lattice.x_values(), lattice.y_values(), lattice.headings,
            self.controller(spec_a, ProblemRole.AGENT_CONTROLS),
            self.controller(spec_t, ProblemRole.TARGET_CONTROLS),
            self.run.sim, workers=self.run.solver.thread_count,
        )
        self.output_dir.mkdir(parents=True, exist_ok=True)
        for h, heading in enumerate(lattice.headings):
            write_outcome_csv(grid, h, self.sweep_path(heading))
        write_outcome_legend(self.output_dir / "outcome_legend.json")
        return grid

    def compare(self, spec_first: str, spec_second: str, spec_t: str, heading: float,
                agent_init: Pose = Pose(0.0, 0.0, math.pi / 2)) -> CaptureComparison:
        path = self.output_dir / f"capture_delta_{heading_label(heading)}.csv"
        self._claim(path)
        lattice = self.run.sweep
        comparison = compare_capture_times(
            self.controller(spec_first, ProblemRole.AGENT_CONTROLS),
            self.controller(spec_second, ProblemRole.AGENT_CONTROLS),
            self.controller(spec_t, ProblemRole.TARGET_CONTROLS),
            agent_init, lattice.x_values(), lattice.y_values(), heading, self.run.sim,
            workers=self.run.solver.thread_count,
        )
        self.output_dir.mkdir(parents=True, exist_ok=True)
        write_capture_csv(comparison, path)
        return comparison

    # Inspection

    def slice(self, path, xi_a: float) -> List[SliceRow]:
        return extract_slice(self.cache.get(path), xi_a)

    def list_fields(self) -> Dict[str, FieldFileHeader]:
        if not self.output_dir.exists():
            return {}
        headers = {}
        for path in sorted(self.output_dir.glob("*.field")):
            try:
                headers[path.name] = read_header(path)
            except Exception as e:
                logger.warning("skipping unreadable field %s: %s", path, e)
        return headers

    def verify(self) -> List[SuiteReport]:
        return [
            verify_bez_golden(),
            verify_probability_simplex(self.run, seed=self.run.sim.seed),
            verify_reduction_consistency(self.run, seed=self.run.sim.seed),
            verify_persistence_roundtrip(self.run, seed=self.run.sim.seed),
        ]


def _run_suite(name: str, check) -> SuiteReport:
    try:
        passed, detail = check()
    except Exception as e:
        return SuiteReport(suite=name, passed=False, detail=f"{type(e).__name__}: {e}")
    return SuiteReport(suite=name, passed=passed, detail=detail)


def verify_bez_golden() -> SuiteReport:
    golden = [
        (AGENT_DEFAULTS.wez, 0.0, 11.0 / 6.0),
        (AGENT_DEFAULTS.wez, math.pi, 1.0 / 6.0),
        (AGENT_DEFAULTS.wez, math.pi / 2, math.sqrt(0.44) / 1.2),
        (TARGET_DEFAULTS.wez, 0.0, (0.9 / 1.1) * (1.0 + 1.05 / 0.9)),
    ]

    def check():
        errors = [abs(bez_radius(params, aspect) - expected) for params, aspect, expected in golden]
        worst = max(errors)
        return worst <= 1e-9, f"max abs error {worst:.3e} over {len(golden)} spot values"

    return _run_suite("bez_golden", check)


def verify_probability_simplex(run: RunConfig, samples: int = 100_000, seed: int = 0) -> SuiteReport:
    """Random (node, control, variant) draws; every transition must be a probability vector"""
    rng = np.random.default_rng(seed)
    grid = run.grid
    variants = list(SolverVariant)

    def check():
        worst_sum, worst_negative = 0.0, 0.0
        for _ in range(samples):
            variant = variants[rng.integers(len(variants))]
            own, other = (run.target, run.agent) if variant == SolverVariant.BASELINE_TARGET \
                else (run.agent, run.target)
            sigma = run.solver.adversarial_sigma if variant == SolverVariant.ADVERSARIAL else run.solver.sigma
            u_a = run.solver.control_levels[rng.integers(3)] * own.max_turn_rate
            u_t = rng.uniform(-other.max_turn_rate, other.max_turn_rate) \
                if variant == SolverVariant.ADVERSARIAL else 0.0
            state = grid.node_state(int(rng.integers(1, grid.n_r)), int(rng.integers(grid.n_xi_a)),
                                    int(rng.integers(grid.n_xi_t)))
            transition = cell_transition(drift(state, u_a, u_t, own, other), grid, sigma, run.solver.diffusion_axis)
            worst_sum = max(worst_sum, abs(transition.total() - 1.0))
            worst_negative = min(worst_negative, min(transition.probabilities()))
        passed = worst_sum <= 1e-12 and worst_negative >= 0.0
        return passed, f"{samples} draws; max |sum - 1| {worst_sum:.3e}, min entry {worst_negative:.3e}"

    return _run_suite("probability_simplex", check)


def verify_reduction_consistency(run: RunConfig, poses: int = 100, seed: int = 0,
                                 dt: float = 1e-3, horizon: float = 1.0) -> SuiteReport:
    """Reduced and full integrations agree to first order in dt"""
    rng = np.random.default_rng(seed)

    def check():
        worst, ratios = 0.0, []
        for _ in range(poses):
            distance = rng.uniform(2.0, 5.0)
            bearing = rng.uniform(-math.pi, math.pi)
            agent_pose = Pose(0.0, 0.0, rng.uniform(-math.pi, math.pi))
            target_pose = Pose(distance * math.cos(bearing), distance * math.sin(bearing),
                               rng.uniform(-math.pi, math.pi))
            u_a = rng.uniform(-run.agent.max_turn_rate, run.agent.max_turn_rate)
            u_t = rng.uniform(-run.target.max_turn_rate, run.target.max_turn_rate)
            coarse = reduction_residual(agent_pose, target_pose, u_a, u_t, dt, horizon, run.agent, run.target)
            fine = reduction_residual(agent_pose, target_pose, u_a, u_t, dt / 2, horizon, run.agent, run.target)
            worst = max(worst, coarse)
            if fine > 1e-12:
                ratios.append(coarse / fine)
        in_band = all(1.7 <= q <= 2.3 for q in ratios)
        detail = f"{poses} poses; max residual {worst:.3e}"
        if ratios:
            detail += f", halving ratios in [{min(ratios):.3f}, {max(ratios):.3f}]"
        return worst <= 1e-2 and in_band, detail

    return _run_suite("reduction_consistency", check)


def verify_persistence_roundtrip(run: RunConfig, trials: int = 10_000, seed: int = 0) -> SuiteReport:
    """Random small fields survive save/load bit-exactly; corruption and truncation are caught"""
    rng = np.random.default_rng(seed)

    def check():
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "roundtrip.field"
            for _ in range(trials):
                n = int(rng.integers(3, 7))
                grid = GridSpec(n_r=n, n_xi_a=n, n_xi_t=n, r_max=float(rng.uniform(1.0, 20.0)))
                field = ValueField(
                    grid=grid,
                    values=rng.uniform(0.0, run.solver.terminal_penalty, grid.shape),
                    controls=rng.choice([-1.0, 0.0, 1.0], grid.shape),
                    agent=run.agent,
                    target=run.target,
                    variant=SolverVariant.BASELINE_AGENT,
                    sigma=run.solver.sigma,
                    terminal_penalty=run.solver.terminal_penalty,
                    converged=bool(rng.integers(2)),
                    iterations=int(rng.integers(0, 20_000)),
                )
                save_field(field, path)
                loaded = load_field(path)
                if loaded.values.tobytes() != field.values.tobytes() or \
                        loaded.controls.tobytes() != field.controls.tobytes() or loaded.grid != field.grid:
                    return False, "round-trip changed the payload"

            raw = bytearray(path.read_bytes())
            raw[-1] ^= 0xFF
            path.write_bytes(bytes(raw))
            try:
                load_field(path)
                return False, "corrupted payload was accepted"
            except FieldChecksumError:
                pass

            path.write_bytes(bytes(raw[:-1]))
            try:
                load_field(path)
                return False, "truncated payload was accepted"
            except TruncatedPayloadError:
                pass
        return True, f"{trials} round-trips bit-exact; corruption and truncation detected"

    return _run_suite("persistence_roundtrip", check)


def report_json(reports: Sequence[SuiteReport]) -> str:
    return json.dumps([report.model_dump() for report in reports], indent=2)
