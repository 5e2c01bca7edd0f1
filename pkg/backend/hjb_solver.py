"""Markov chain approximation of the time-optimal HJB equation and its value iteration.

The reduced state (r, xi_A, xi_T) is discretized on a GridSpec. Upwind
differences turn the HJB operator into a controlled Markov chain whose
transition probabilities and implicit time step depend only on the node
and the candidate control, so they are tabulated once per problem and the
value iteration itself is a tight Jacobi sweep compiled with numba.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numba
import numpy as np
from numba import njit, prange

from dynamics import drift, drift_components
from exceptions import ConfigurationError, StationaryCellError
from geometry import within_bez
from models import (
    Drift,
    GridSpec,
    ProblemRole,
    SolverConfig,
    SolverVariant,
    ValueField,
    VehicleParams,
)
from policy_store import periodic_interpolator

logger = logging.getLogger(__name__)

# Node kinds, checked in this order: r boundary, then W_T (or avoid set), then W_A
INTERIOR = 0
TERMINAL_ZERO = 1
TERMINAL_M = 2
REFLECT_LOW = 3   # r index 0 copies r index 1
REFLECT_HIGH = 4  # r index n_r-1 copies r index n_r-2


def split_drift(b):
    """Upwind split b = b_plus - b_minus with both parts nonnegative."""
    return np.maximum(0.0, b), np.maximum(0.0, -b)


def _upwind_rates(b_r, b_xi_a, b_xi_t, grid: GridSpec, sigma: float, diffusion_axis: str):
    """Denominator of the implicit time step and the six unnormalized jump rates."""
    r_plus, r_minus = split_drift(b_r)
    a_plus, a_minus = split_drift(b_xi_a)
    t_plus, t_minus = split_drift(b_xi_t)

    step = grid.dxi_a if diffusion_axis == "xi_a" else grid.dxi_t
    diffusion = sigma * sigma / (step * step)
    half = 0.5 * diffusion
    diff_a = half if diffusion_axis == "xi_a" else 0.0
    diff_t = half if diffusion_axis == "xi_t" else 0.0

    denominator = (
        (r_plus + r_minus) / grid.dr
        + (a_plus + a_minus) / grid.dxi_a
        + (t_plus + t_minus) / grid.dxi_t
        + diffusion
    )
    rates = (
        r_plus / grid.dr,
        r_minus / grid.dr,
        a_plus / grid.dxi_a + diff_a,
        a_minus / grid.dxi_a + diff_a,
        t_plus / grid.dxi_t + diff_t,
        t_minus / grid.dxi_t + diff_t,
    )
    return denominator, rates


def implicit_time_step(drift: Drift, grid: GridSpec, sigma: float, diffusion_axis: str = "xi_a") -> float:
    denominator, _ = _upwind_rates(drift.b_r, drift.b_xi_a, drift.b_xi_t, grid, sigma, diffusion_axis)
    if denominator == 0.0:
        raise StationaryCellError("all drifts and the noise vanish; implicit time step is undefined")
    return float(1.0 / denominator)


@dataclass(frozen=True)
class CellTransition:
    dt: float
    p_r_plus: float
    p_r_minus: float
    p_xi_a_plus: float
    p_xi_a_minus: float
    p_xi_t_plus: float
    p_xi_t_minus: float

    def probabilities(self) -> Tuple[float, ...]:
        return (self.p_r_plus, self.p_r_minus, self.p_xi_a_plus,
                self.p_xi_a_minus, self.p_xi_t_plus, self.p_xi_t_minus)

    def total(self) -> float:
        return math.fsum(self.probabilities())


def cell_transition(drift: Drift, grid: GridSpec, sigma: float, diffusion_axis: str = "xi_a") -> CellTransition:
    denominator, rates = _upwind_rates(drift.b_r, drift.b_xi_a, drift.b_xi_t, grid, sigma, diffusion_axis)
    if denominator == 0.0:
        raise StationaryCellError("all drifts and the noise vanish; implicit time step is undefined")
    dt = 1.0 / denominator
    return CellTransition(float(dt), *(float(dt * rate) for rate in rates))


@dataclass
class EngagementProblem:
    """One value-iteration problem in solver coordinates.

    `agent` is the minimizing (controlled) vehicle and `target` its opponent.
    For ProblemRole.TARGET_CONTROLS the caller's parameter sets are exchanged,
    so the same machinery solves the Target's problem with xi_A and xi_T
    swapped relative to the Agent's coordinates.
    """
    role: ProblemRole
    variant: SolverVariant
    agent: VehicleParams
    target: VehicleParams
    grid: GridSpec
    sigma: float
    terminal_penalty: float
    control_levels: Tuple[float, ...] = (0.0, -1.0, 1.0)
    diffusion_axis: str = "xi_a"
    avoid_mask: Optional[np.ndarray] = None
    target_controls: Optional[np.ndarray] = None

    @classmethod
    def for_role(cls, role: ProblemRole, agent: VehicleParams, target: VehicleParams, grid: GridSpec,
                 config: SolverConfig, sigma: Optional[float] = None,
                 variant: Optional[SolverVariant] = None) -> "EngagementProblem":
        if role == ProblemRole.TARGET_CONTROLS:
            agent, target = target, agent
            variant = variant or SolverVariant.BASELINE_TARGET
        return cls(
            role=role,
            variant=variant or SolverVariant.BASELINE_AGENT,
            agent=agent,
            target=target,
            grid=grid,
            sigma=config.sigma if sigma is None else sigma,
            terminal_penalty=config.terminal_penalty,
            control_levels=tuple(config.control_levels),
            diffusion_axis=config.diffusion_axis,
        )

    def candidate_controls(self) -> np.ndarray:
        return np.asarray(self.control_levels, dtype=float) * self.agent.max_turn_rate


def node_kinds(problem: EngagementProblem, avoid_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Kind of every node; vectorized counterpart of classify_node."""
    grid = problem.grid
    r, xi_a, xi_t = grid.mesh()
    mask = problem.avoid_mask if avoid_mask is None else avoid_mask

    kinds = np.full(grid.shape, INTERIOR, dtype=np.int8)
    kinds[within_bez(r, xi_a, problem.agent.wez)] = TERMINAL_ZERO
    losing = within_bez(r, xi_t, problem.target.wez)
    if mask is not None:
        losing = losing | mask
    kinds[losing] = TERMINAL_M
    kinds[0, :, :] = REFLECT_LOW
    kinds[-1, :, :] = REFLECT_HIGH
    return kinds


class NodeKind(str, Enum):
    REFLECTIVE_BOUNDARY = "ReflectiveBoundary"
    TERMINAL_ZERO = "TerminalZero"
    TERMINAL_M = "TerminalM"
    INTERIOR = "Interior"


@dataclass(frozen=True)
class NodeClass:
    kind: NodeKind
    source: Optional[Tuple[int, int, int]] = None  # neighbor copied by a reflective node


def classify_node(node: Tuple[int, int, int], problem: EngagementProblem,
                  avoid_mask: Optional[np.ndarray] = None) -> NodeClass:
    i_r, i_a, i_t = node
    grid = problem.grid
    if i_r == 0:
        return NodeClass(NodeKind.REFLECTIVE_BOUNDARY, (1, i_a, i_t))
    if i_r == grid.n_r - 1:
        return NodeClass(NodeKind.REFLECTIVE_BOUNDARY, (grid.n_r - 2, i_a, i_t))

    state = grid.node_state(i_r, i_a, i_t)
    mask = problem.avoid_mask if avoid_mask is None else avoid_mask
    if bool(within_bez(state.r, state.xi_t, problem.target.wez)) or (mask is not None and bool(mask[node])):
        return NodeClass(NodeKind.TERMINAL_M)
    if bool(within_bez(state.r, state.xi_a, problem.agent.wez)):
        return NodeClass(NodeKind.TERMINAL_ZERO)
    return NodeClass(NodeKind.INTERIOR)


@dataclass
class TransitionTable:
    """Implicit time steps and transition probabilities for every node and candidate control.

    probs is indexed [control, direction, i_r, i_a, i_t] with directions
    (r+, r-, xi_a+, xi_a-, xi_t+, xi_t-); usable is False where the cell
    is stationary for that control.
    """
    dt: np.ndarray
    probs: np.ndarray
    usable: np.ndarray
    controls: np.ndarray

    @classmethod
    def build(cls, problem: EngagementProblem) -> "TransitionTable":
        grid = problem.grid
        r, xi_a, xi_t = grid.mesh()
        # r = 0 nodes are reflective and never evaluated; keep the division finite there
        r = np.where(r > 0.0, r, grid.dr)
        u_t = 0.0 if problem.target_controls is None else problem.target_controls
        controls = problem.candidate_controls()

        dt = np.zeros((len(controls),) + grid.shape)
        probs = np.zeros((len(controls), 6) + grid.shape)
        usable = np.zeros((len(controls),) + grid.shape, dtype=np.bool_)
        for c, u_a in enumerate(controls):
            b_r, b_xi_a, b_xi_t = drift_components(r, xi_a, xi_t, u_a, u_t, problem.agent, problem.target)
            denominator, rates = _upwind_rates(b_r, b_xi_a, b_xi_t, grid, problem.sigma, problem.diffusion_axis)
            moving = denominator > 0.0
            step = np.divide(1.0, denominator, out=np.zeros_like(denominator), where=moving)
            dt[c] = step
            for d, rate in enumerate(rates):
                probs[c, d] = step * rate
            usable[c] = moving
        return cls(dt=dt, probs=probs, usable=usable, controls=controls)


@njit(parallel=True, cache=True)
def _jacobi_sweep(values, controls, kinds, dt, probs, usable, levels, penalty, out_values, out_controls):
    n_r, n_a, n_t = values.shape
    n_c = levels.shape[0]
    for i in prange(n_r):
        for j in range(n_a):
            jp = j + 1 if j + 1 < n_a else 0
            jm = j - 1 if j > 0 else n_a - 1
            for k in range(n_t):
                kind = kinds[i, j, k]
                if kind == REFLECT_LOW:
                    out_values[i, j, k] = values[i + 1, j, k]
                    out_controls[i, j, k] = controls[i + 1, j, k]
                elif kind == REFLECT_HIGH:
                    out_values[i, j, k] = values[i - 1, j, k]
                    out_controls[i, j, k] = controls[i - 1, j, k]
                elif kind == TERMINAL_M:
                    out_values[i, j, k] = penalty
                    out_controls[i, j, k] = 0.0
                elif kind == TERMINAL_ZERO:
                    out_values[i, j, k] = 0.0
                    out_controls[i, j, k] = 0.0
                else:
                    kp = k + 1 if k + 1 < n_t else 0
                    km = k - 1 if k > 0 else n_t - 1
                    best = values[i, j, k]
                    best_u = controls[i, j, k]
                    found = False
                    for c in range(n_c):
                        if not usable[c, i, j, k]:
                            continue
                        rhs = (dt[c, i, j, k]
                               + probs[c, 0, i, j, k] * values[i + 1, j, k]
                               + probs[c, 1, i, j, k] * values[i - 1, j, k]
                               + probs[c, 2, i, j, k] * values[i, jp, k]
                               + probs[c, 3, i, j, k] * values[i, jm, k]
                               + probs[c, 4, i, j, k] * values[i, j, kp]
                               + probs[c, 5, i, j, k] * values[i, j, km])
                        if not found or rhs < best:
                            best = rhs
                            best_u = levels[c]
                            found = True
                    if found and best > penalty:
                        best = penalty
                    out_values[i, j, k] = best
                    out_controls[i, j, k] = best_u


def bellman_update(node: Tuple[int, int, int], value_snapshot: ValueField, problem: EngagementProblem,
                   target_control_source: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Right-hand side of the discrete Bellman equation at one interior node, minimized over controls.

    Reference (pure Python) counterpart of one cell of the Jacobi sweep.
    """
    i_r, i_a, i_t = node
    grid = problem.grid
    values = value_snapshot.values
    source = problem.target_controls if target_control_source is None else target_control_source
    u_t = 0.0 if source is None else float(source[node])
    state = grid.node_state(i_r, i_a, i_t)

    neighbours = (
        values[i_r + 1, i_a, i_t],
        values[i_r - 1, i_a, i_t],
        values[i_r, (i_a + 1) % grid.n_xi_a, i_t],
        values[i_r, (i_a - 1) % grid.n_xi_a, i_t],
        values[i_r, i_a, (i_t + 1) % grid.n_xi_t],
        values[i_r, i_a, (i_t - 1) % grid.n_xi_t],
    )

    best_value = float(values[node])
    best_control = float(value_snapshot.controls[node])
    found = False
    for u_a in problem.candidate_controls():
        b = drift(state, float(u_a), u_t, problem.agent, problem.target)
        try:
            t = cell_transition(b, grid, problem.sigma, problem.diffusion_axis)
        except StationaryCellError:
            continue
        rhs = t.dt
        for p, v in zip(t.probabilities(), neighbours):
            rhs = rhs + p * v
        if not found or rhs < best_value:
            best_value, best_control, found = rhs, float(u_a), True

    if found:
        best_value = min(best_value, problem.terminal_penalty)
    return float(best_value), best_control


@dataclass
class TraceRow:
    iteration: int
    mean_delta_v: float
    wall_time: float


@dataclass
class ConvergenceTrace:
    """Per-sweep mean |dV| of one value-iteration run"""
    grid: GridSpec
    rows: List[TraceRow] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def final_delta(self) -> float:
        return self.rows[-1].mean_delta_v if self.rows else math.inf


@dataclass
class SolveResult:
    field: ValueField
    traces: List[ConvergenceTrace]

    @property
    def converged(self) -> bool:
        return self.field.converged


def _use_threads(thread_count: int) -> int:
    threads = max(1, min(thread_count, numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(threads)
    return threads


def _sweep(problem: EngagementProblem, table: TransitionTable, kinds: np.ndarray,
           values: np.ndarray, controls: np.ndarray, out_values: np.ndarray, out_controls: np.ndarray):
    _jacobi_sweep(values, controls, kinds, table.dt, table.probs, table.usable,
                  table.controls, float(problem.terminal_penalty), out_values, out_controls)


def value_iteration(problem: EngagementProblem, init: Optional[ValueField], config: SolverConfig,
                    log_every: int = 500) -> Tuple[ValueField, ConvergenceTrace]:
    """Jacobi value iteration until the mean |dV| per cell drops below the tolerance.

    Non-convergence within max_iterations is reported through the returned
    field's `converged` flag, not raised.
    """
    grid = problem.grid
    if init is not None and init.grid != grid:
        raise ConfigurationError(f"initial field grid {init.grid.shape} does not match problem grid {grid.shape}")

    values = np.zeros(grid.shape) if init is None else np.array(init.values, dtype=float, copy=True)
    controls = np.zeros(grid.shape) if init is None else np.array(init.controls, dtype=float, copy=True)
    out_values = np.empty_like(values)
    out_controls = np.empty_like(controls)

    kinds = node_kinds(problem)
    table = TransitionTable.build(problem)
    previous_threads = numba.get_num_threads()
    threads = _use_threads(config.thread_count)
    logger.info("value iteration on %dx%dx%d grid (%s, sigma=%g, %d threads)",
                *grid.shape, problem.variant.value, problem.sigma, threads)

    trace = ConvergenceTrace(grid=grid)
    start = time.perf_counter()
    try:
        for z in range(1, config.max_iterations + 1):
            _sweep(problem, table, kinds, values, controls, out_values, out_controls)
            mean_delta = float(np.mean(np.abs(out_values - values)))
            values, out_values = out_values, values
            controls, out_controls = out_controls, controls
            trace.rows.append(TraceRow(z, mean_delta, time.perf_counter() - start))

            if log_every and z % log_every == 0:
                logger.info("iteration %d: mean dV %.3e", z, mean_delta)
            if mean_delta < config.tolerance:
                trace.converged = True
                break
    finally:
        # thread count is process-wide in numba
        numba.set_num_threads(previous_threads)

    if trace.converged:
        logger.info("converged after %d iterations", trace.iterations)
    else:
        logger.warning("not converged after %d iterations (mean dV %.3e)", trace.iterations, trace.final_delta)

    result = ValueField(
        grid=grid,
        values=values,
        controls=controls,
        agent=problem.agent,
        target=problem.target,
        variant=problem.variant,
        sigma=problem.sigma,
        terminal_penalty=problem.terminal_penalty,
        converged=trace.converged,
        iterations=trace.iterations,
    )
    return result, trace


def bellman_residual(field: ValueField, problem: EngagementProblem) -> np.ndarray:
    """|T(V) - V| per node after one more sweep; zero off the interior."""
    if field.grid != problem.grid:
        raise ConfigurationError("field and problem grids differ")
    kinds = node_kinds(problem)
    table = TransitionTable.build(problem)
    out_values = np.empty_like(field.values)
    out_controls = np.empty_like(field.controls)
    _sweep(problem, table, kinds, np.ascontiguousarray(field.values, dtype=float),
           np.ascontiguousarray(field.controls, dtype=float), out_values, out_controls)
    return np.where(kinds == INTERIOR, np.abs(out_values - field.values), 0.0)


def upsample(coarse: ValueField, target: GridSpec) -> ValueField:
    """Trilinear interpolation of a converged coarse field onto a finer grid.

    Periodic in both angle axes, clamped in r. Controls are left at zero and
    re-derived by the next value iteration.
    """
    if coarse.grid.r_max != target.r_max:
        raise ConfigurationError(f"r_max differs: {coarse.grid.r_max} vs {target.r_max}")
    if any(fine < rough for fine, rough in zip(target.shape, coarse.grid.shape)) or target == coarse.grid:
        raise ConfigurationError(f"upsample target {target.shape} is not finer than {coarse.grid.shape}")

    interpolate = periodic_interpolator(coarse.grid, coarse.values)
    r, xi_a, xi_t = target.mesh()
    points = np.stack([r.ravel(), xi_a.ravel(), xi_t.ravel()], axis=-1)
    values = interpolate(points).reshape(target.shape)
    return coarse.with_arrays(values, np.zeros(target.shape), grid=target, converged=False, iterations=0)


def swap_axes(field: ValueField) -> ValueField:
    """Exchange the two angle axes: V_T(r, xi_A, xi_T) = V~(r, xi_T, xi_A)."""
    if field.grid.n_xi_a != field.grid.n_xi_t:
        raise ConfigurationError("swap map needs n_xi_a == n_xi_t")
    grid = GridSpec(n_r=field.grid.n_r, n_xi_a=field.grid.n_xi_t, n_xi_t=field.grid.n_xi_a, r_max=field.grid.r_max)
    return field.with_arrays(
        np.ascontiguousarray(field.values.transpose(0, 2, 1)),
        np.ascontiguousarray(field.controls.transpose(0, 2, 1)),
        grid=grid,
    )


def _schedule(grid: GridSpec, config: SolverConfig) -> List[GridSpec]:
    stages = []
    for n in config.upsample_schedule:
        if n < min(grid.shape):
            stages.append(grid.cubic(n))
        else:
            logger.warning("skipping upsample stage %d: not coarser than the final grid %s", n, grid.shape)
    return stages + [grid]


def solve_baseline(role: ProblemRole, agent: VehicleParams, target: VehicleParams, grid: GridSpec,
                   config: SolverConfig, log_every: int = 500) -> SolveResult:
    """Baseline controller for either player: opponent control modeled as noise.

    Runs the coarse-to-fine schedule, hot-starting each stage from the
    trilinear upsampling of the previous one.
    """
    traces: List[ConvergenceTrace] = []
    init: Optional[ValueField] = None
    result: Optional[ValueField] = None
    for stage in _schedule(grid, config):
        if result is not None:
            init = upsample(result, stage)
            logger.info("upsampled %s -> %s", result.grid.shape, stage.shape)
        problem = EngagementProblem.for_role(role, agent, target, stage, config)
        result, trace = value_iteration(problem, init, config, log_every)
        traces.append(trace)
    return SolveResult(field=result, traces=traces)


def avoid_set(v_a: ValueField, v_t: ValueField) -> np.ndarray:
    """Nodes where the Target's time-to-go is strictly shorter than the Agent's.

    v_t must already be mapped into Agent coordinates (see swap_axes).
    """
    if v_a.grid != v_t.grid:
        raise ConfigurationError(f"avoid set needs identical grids, got {v_a.grid.shape} and {v_t.grid.shape}")
    return np.less(v_t.values, v_a.values)


def solve_avoid(agent: VehicleParams, target: VehicleParams, grid: GridSpec, config: SolverConfig,
                mask: np.ndarray, init: Optional[ValueField] = None, log_every: int = 500) -> SolveResult:
    if mask.shape != grid.shape:
        raise ConfigurationError(f"avoid mask shape {mask.shape} does not match grid {grid.shape}")
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, config,
                                         variant=SolverVariant.AVOID)
    problem.avoid_mask = np.asarray(mask, dtype=bool)
    logger.info("avoid set covers %d of %d nodes", int(problem.avoid_mask.sum()), grid.size)
    field, trace = value_iteration(problem, init, config, log_every)
    return SolveResult(field=field, traces=[trace])


def solve_adversarial(agent: VehicleParams, target: VehicleParams, grid: GridSpec, config: SolverConfig,
                      target_policy: ValueField, init: Optional[ValueField] = None,
                      log_every: int = 500) -> SolveResult:
    """Agent controller assuming the Target flies its own baseline policy.

    target_policy is the Target's baseline field already mapped into Agent
    coordinates; its control at each node is used as u_T at that node.
    """
    if target_policy.grid != grid:
        raise ConfigurationError("target policy grid does not match the solve grid")
    if target_policy.agent != target:
        raise ConfigurationError("target policy was solved for different Target parameters")
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, config,
                                         sigma=config.adversarial_sigma, variant=SolverVariant.ADVERSARIAL)
    problem.target_controls = np.ascontiguousarray(target_policy.controls, dtype=float)
    field, trace = value_iteration(problem, init, config, log_every)
    return SolveResult(field=field, traces=[trace])
