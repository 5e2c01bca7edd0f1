"""Closed-loop engagement simulation, outcome classification, sweeps, and capture-time comparisons.

Engagements are advanced in lock-step as numpy arrays, one entry per run,
with runs dropping out of the active set as they terminate. A single
recorded simulation is the one-run case.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from controllers import Controller, StoredPolicyController
from dynamics import advance_arrays, reduce_arrays, reduce_state
from exceptions import ConfigurationError
from geometry import within_bez
from models import Outcome, Pose, ProblemRole, ReducedState, SimConfig

logger = logging.getLogger(__name__)


class TerminationReason(str, Enum):
    INITIAL_STATE = "initial_state"
    ENTERED_AGENT_WEZ = "entered_agent_wez"
    ENTERED_TARGET_WEZ = "entered_target_wez"
    TIMEOUT = "timeout"


# Integer codes used inside batched runs
_ACTIVE, _INITIAL, _AGENT_WEZ, _TARGET_WEZ, _TIMEOUT = range(5)

# Sweep cell code for a pane that raised; outside the six engagement outcomes
SWEEP_ERROR = -1
SWEEP_ERROR_LABEL = "Error (failed sweep pane, not an engagement outcome)"

_REASONS = {
    _INITIAL: TerminationReason.INITIAL_STATE,
    _AGENT_WEZ: TerminationReason.ENTERED_AGENT_WEZ,
    _TARGET_WEZ: TerminationReason.ENTERED_TARGET_WEZ,
    _TIMEOUT: TerminationReason.TIMEOUT,
}


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    agent: Pose
    target: Pose
    u_a: float
    u_t: float
    state: ReducedState


@dataclass
class Trajectory:
    """Recorded engagement; samples is empty when the initial state was already terminal"""
    initial_agent: Pose
    initial_target: Pose
    initial_in_agent_wez: bool
    initial_in_target_wez: bool
    termination: TerminationReason
    t_f: float
    samples: List[TrajectorySample] = field(default_factory=list)

    @property
    def final_state(self) -> Optional[ReducedState]:
        return self.samples[-1].state if self.samples else None


@dataclass
class BatchResult:
    reasons: np.ndarray   # termination codes per run
    t_f: np.ndarray
    initial_in_agent_wez: np.ndarray
    initial_in_target_wez: np.ndarray

    def outcomes(self) -> np.ndarray:
        codes = np.full(self.reasons.shape, int(Outcome.STALEMATE), dtype=np.int8)
        initial = self.reasons == _INITIAL
        both = initial & self.initial_in_agent_wez & self.initial_in_target_wez
        codes[both] = Outcome.INITIAL_BOTH
        codes[initial & ~both & self.initial_in_target_wez] = Outcome.INITIAL_TARGET_WEZ_ONLY
        codes[initial & ~both & self.initial_in_agent_wez] = Outcome.INITIAL_AGENT_WEZ_ONLY
        codes[self.reasons == _TARGET_WEZ] = Outcome.TERMINATES_IN_TARGET_WEZ
        codes[self.reasons == _AGENT_WEZ] = Outcome.TERMINATES_IN_AGENT_WEZ
        return codes


def _check_pairing(ctrl_a: Controller, ctrl_t: Controller):
    if ctrl_a.role != ProblemRole.AGENT_CONTROLS or ctrl_t.role != ProblemRole.TARGET_CONTROLS:
        raise ConfigurationError("controllers must be assigned to the Agent and Target roles respectively")
    for ctrl, own, other in ((ctrl_a, ctrl_a.vehicle, ctrl_t.vehicle), (ctrl_t, ctrl_t.vehicle, ctrl_a.vehicle)):
        if isinstance(ctrl, StoredPolicyController) and (ctrl.field.agent != own or ctrl.field.target != other):
            raise ConfigurationError(f"stored policy {ctrl.source} does not match the simulated vehicles")


def _noise_streams(seed: int, run_ids: np.ndarray) -> List[np.random.Generator]:
    return [np.random.default_rng([seed, int(i)]) for i in run_ids]


def simulate_batch(agent_poses: np.ndarray, target_poses: np.ndarray, ctrl_a: Controller, ctrl_t: Controller,
                   cfg: SimConfig, run_ids: Optional[np.ndarray] = None, recorder=None) -> BatchResult:
    """Advance N engagements in lock-step until each enters a WEZ or reaches t_max.

    agent_poses and target_poses are (N, 3) arrays of (x, y, theta). run_ids
    seed each run's noise stream; recorder(t, index, poses, u_a, u_t, reduced)
    is called after every step when given.
    """
    _check_pairing(ctrl_a, ctrl_t)
    agent, target = ctrl_a.vehicle, ctrl_t.vehicle
    n = agent_poses.shape[0]
    run_ids = np.arange(n) if run_ids is None else np.asarray(run_ids)

    x_a, y_a, th_a = (np.array(agent_poses[:, i], dtype=float) for i in range(3))
    x_t, y_t, th_t = (np.array(target_poses[:, i], dtype=float) for i in range(3))
    r, xi_a, xi_t = reduce_arrays(x_a, y_a, th_a, x_t, y_t, th_t)
    r, xi_a, xi_t = np.atleast_1d(r), np.atleast_1d(xi_a), np.atleast_1d(xi_t)

    # r = 0 lies inside both zones for every aspect, so coincident starts classify as initial-both
    in_a0 = np.atleast_1d(within_bez(r, xi_a, agent.wez))
    in_t0 = np.atleast_1d(within_bez(r, xi_t, target.wez))
    reasons = np.where(in_a0 | in_t0, _INITIAL, _ACTIVE).astype(np.int8)
    t_f = np.zeros(n)

    streams = _noise_streams(cfg.seed, run_ids) if cfg.sigma_sim > 0 else None
    sqrt_dt = math.sqrt(cfg.dt)
    n_steps = int(round(cfg.t_max / cfg.dt))

    for step in range(1, n_steps + 1):
        idx = np.flatnonzero(reasons == _ACTIVE)
        if idx.size == 0:
            break
        u_a = ctrl_a.command(r[idx], xi_a[idx], xi_t[idx])
        u_t = ctrl_t.command(r[idx], xi_a[idx], xi_t[idx])
        if streams is None:
            dw = 0.0
        else:
            dw = np.array([streams[i].normal(0.0, sqrt_dt) for i in idx])

        x_a[idx], y_a[idx], th_a[idx], x_t[idx], y_t[idx], th_t[idx] = advance_arrays(
            x_a[idx], y_a[idx], th_a[idx], x_t[idx], y_t[idx], th_t[idx],
            u_a, u_t, cfg.dt, dw, agent, target, cfg.sigma_sim,
        )
        r[idx], xi_a[idx], xi_t[idx] = reduce_arrays(x_a[idx], y_a[idx], th_a[idx], x_t[idx], y_t[idx], th_t[idx])

        t = step * cfg.dt
        hit_t = within_bez(r[idx], xi_t[idx], target.wez)
        hit_a = within_bez(r[idx], xi_a[idx], agent.wez) & ~hit_t
        reasons[idx[hit_t]] = _TARGET_WEZ
        reasons[idx[hit_a]] = _AGENT_WEZ
        t_f[idx[hit_t | hit_a]] = t

        if recorder is not None:
            recorder(t, idx, (x_a, y_a, th_a, x_t, y_t, th_t), u_a, u_t, (r, xi_a, xi_t))

    timed_out = reasons == _ACTIVE
    reasons[timed_out] = _TIMEOUT
    t_f[timed_out] = n_steps * cfg.dt
    return BatchResult(reasons=reasons, t_f=t_f, initial_in_agent_wez=in_a0, initial_in_target_wez=in_t0)


def simulate(init_a: Pose, init_t: Pose, ctrl_a: Controller, ctrl_t: Controller, cfg: SimConfig,
             run_id: int = 0) -> Trajectory:
    """Simulate one engagement and record every step."""
    start = reduce_state(init_a, init_t)
    samples: List[TrajectorySample] = []

    def sample_at(t, poses, u_a, u_t, reduced) -> TrajectorySample:
        x_a, y_a, th_a, x_t, y_t, th_t = (float(p[0]) for p in poses)
        return TrajectorySample(
            t=t,
            agent=Pose(x_a, y_a, th_a),
            target=Pose(x_t, y_t, th_t),
            u_a=float(u_a),
            u_t=float(u_t),
            state=ReducedState(float(reduced[0][0]), float(reduced[1][0]), float(reduced[2][0])),
        )

    pending = {}

    def record(t, idx, poses, u_a, u_t, reduced):
        # The command applied over [t - dt, t] belongs to the sample at t - dt
        samples.append(sample_at(pending["t"], pending["poses"], u_a[0], u_t[0], pending["reduced"]))
        pending.update(t=t, poses=tuple(np.copy(p) for p in poses), reduced=tuple(np.copy(q) for q in reduced))

    agent_poses = np.array([[init_a.x, init_a.y, init_a.theta]])
    target_poses = np.array([[init_t.x, init_t.y, init_t.theta]])
    pending.update(
        t=0.0,
        poses=tuple(np.array([v]) for v in (init_a.x, init_a.y, init_a.theta, init_t.x, init_t.y, init_t.theta)),
        reduced=(np.array([start.r]), np.array([start.xi_a]), np.array([start.xi_t])),
    )
    result = simulate_batch(agent_poses, target_poses, ctrl_a, ctrl_t, cfg, np.array([run_id]), record)

    reason = _REASONS[int(result.reasons[0])]
    if reason != TerminationReason.INITIAL_STATE:
        r, xi_a, xi_t = pending["reduced"]
        u_a = ctrl_a.command(r, xi_a, xi_t)[0]
        u_t = ctrl_t.command(r, xi_a, xi_t)[0]
        samples.append(sample_at(pending["t"], pending["poses"], u_a, u_t, pending["reduced"]))

    return Trajectory(
        initial_agent=init_a,
        initial_target=init_t,
        initial_in_agent_wez=bool(result.initial_in_agent_wez[0]),
        initial_in_target_wez=bool(result.initial_in_target_wez[0]),
        termination=reason,
        t_f=float(result.t_f[0]),
        samples=samples,
    )


def classify_outcome(traj: Trajectory) -> Outcome:
    if traj.termination == TerminationReason.INITIAL_STATE:
        if traj.initial_in_agent_wez and traj.initial_in_target_wez:
            return Outcome.INITIAL_BOTH
        if traj.initial_in_target_wez:
            return Outcome.INITIAL_TARGET_WEZ_ONLY
        return Outcome.INITIAL_AGENT_WEZ_ONLY
    if traj.termination == TerminationReason.ENTERED_TARGET_WEZ:
        return Outcome.TERMINATES_IN_TARGET_WEZ
    if traj.termination == TerminationReason.ENTERED_AGENT_WEZ:
        return Outcome.TERMINATES_IN_AGENT_WEZ
    return Outcome.STALEMATE


def min_range(traj: Trajectory) -> float:
    return min((s.state.r for s in traj.samples), default=math.nan)


def capture_time(traj: Trajectory) -> Optional[float]:
    if classify_outcome(traj) != Outcome.TERMINATES_IN_AGENT_WEZ:
        return None
    return traj.t_f


def overtake_offset(traj: Trajectory) -> float:
    """Agent's lateral distance from the Target's track at the moment it draws abeam.

    The along-track separation (Agent minus Target, along the Target's
    heading) changes sign from behind to ahead; the offset is linearly
    interpolated at that crossing. Minimum over crossings, NaN if the Agent
    never passes abeam.
    """
    offsets = []
    previous = None
    for s in traj.samples:
        heading = np.array([math.cos(s.target.theta), math.sin(s.target.theta)])
        rel = np.array([s.agent.x - s.target.x, s.agent.y - s.target.y])
        along = float(heading @ rel)
        lateral = abs(float(heading[0] * rel[1] - heading[1] * rel[0]))
        if previous is not None and previous[0] < 0.0 <= along:
            w = -previous[0] / (along - previous[0])
            offsets.append(previous[1] + w * (lateral - previous[1]))
        previous = (along, lateral)
    return min(offsets, default=math.nan)


@dataclass
class OutcomeGrid:
    """Outcome of every initial Target position and heading; arrays are [heading, y, x]"""
    x_values: np.ndarray
    y_values: np.ndarray
    headings: List[float]
    outcomes: np.ndarray
    t_f: np.ndarray
    errors: Dict[Tuple[int, int, int], str] = field(default_factory=dict)

    def counts(self) -> Dict[Outcome, int]:
        return {o: int(np.sum(self.outcomes == o)) for o in Outcome}


def _lattice(x_values: Sequence[float], y_values: Sequence[float], heading: float) -> np.ndarray:
    xx, yy = np.meshgrid(np.asarray(x_values, dtype=float), np.asarray(y_values, dtype=float))
    return np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, heading)], axis=-1)


def _run_chunks(agent_init: Pose, targets: np.ndarray, ctrl_a: Controller, ctrl_t: Controller,
                cfg: SimConfig, first_id: int, workers: int) -> BatchResult:
    n = targets.shape[0]
    agents = np.tile([agent_init.x, agent_init.y, agent_init.theta], (n, 1))
    ids = first_id + np.arange(n)
    if workers <= 1 or n < 2 * workers:
        return simulate_batch(agents, targets, ctrl_a, ctrl_t, cfg, ids)

    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(
            lambda k: simulate_batch(agents[bounds[k]:bounds[k + 1]], targets[bounds[k]:bounds[k + 1]],
                                     ctrl_a, ctrl_t, cfg, ids[bounds[k]:bounds[k + 1]]),
            range(workers),
        ))
    return BatchResult(
        reasons=np.concatenate([p.reasons for p in parts]),
        t_f=np.concatenate([p.t_f for p in parts]),
        initial_in_agent_wez=np.concatenate([p.initial_in_agent_wez for p in parts]),
        initial_in_target_wez=np.concatenate([p.initial_in_target_wez for p in parts]),
    )


def sweep(agent_init: Pose, x_values: Sequence[float], y_values: Sequence[float], headings: Sequence[float],
          ctrl_a: Controller, ctrl_t: Controller, cfg: SimConfig, workers: int = 1) -> OutcomeGrid:
    """One engagement per (Target position, Target heading); runs are independent."""
    x_values, y_values = np.asarray(x_values, dtype=float), np.asarray(y_values, dtype=float)
    if x_values.size == 0 or y_values.size == 0 or len(headings) == 0:
        raise ConfigurationError("sweep lattice is empty")
    shape = (len(headings), y_values.size, x_values.size)
    outcomes = np.zeros(shape, dtype=np.int8)
    t_f = np.zeros(shape)
    errors: Dict[Tuple[int, int, int], str] = {}
    cells = y_values.size * x_values.size

    for h, heading in enumerate(headings):
        try:
            result = _run_chunks(agent_init, _lattice(x_values, y_values, heading), ctrl_a, ctrl_t,
                                 cfg, h * cells, workers)
        except Exception as e:
            # Record the failure for the whole pane and keep sweeping
            logger.error("sweep pane %d (heading %.4f) failed: %s", h, heading, e)
            for iy in range(y_values.size):
                for ix in range(x_values.size):
                    errors[(h, iy, ix)] = str(e)
            outcomes[h] = SWEEP_ERROR
            continue
        outcomes[h] = result.outcomes().reshape(shape[1:])
        t_f[h] = result.t_f.reshape(shape[1:])
        logger.info("sweep pane %d/%d (heading %.4f) done", h + 1, len(headings), heading)

    return OutcomeGrid(x_values=x_values, y_values=y_values, headings=list(headings),
                       outcomes=outcomes, t_f=t_f, errors=errors)


@dataclass
class CaptureComparison:
    """t_f(first) - t_f(second) over cells where both Agent controllers win; NaN elsewhere"""
    x_values: np.ndarray
    y_values: np.ndarray
    heading: float
    delta_t_f: np.ndarray
    excluded: int

    @property
    def winning_cells(self) -> int:
        return int(np.sum(~np.isnan(self.delta_t_f)))

    def mean_delta(self) -> float:
        return float(np.nanmean(self.delta_t_f)) if self.winning_cells else math.nan


def compare_capture_times(ctrl_first: Controller, ctrl_second: Controller, ctrl_t: Controller,
                          agent_init: Pose, x_values: Sequence[float], y_values: Sequence[float],
                          heading: float, cfg: SimConfig, workers: int = 1) -> CaptureComparison:
    first = sweep(agent_init, x_values, y_values, [heading], ctrl_first, ctrl_t, cfg, workers)
    second = sweep(agent_init, x_values, y_values, [heading], ctrl_second, ctrl_t, cfg, workers)
    wins = (first.outcomes[0] == Outcome.TERMINATES_IN_AGENT_WEZ) & (second.outcomes[0] == Outcome.TERMINATES_IN_AGENT_WEZ)
    delta = np.where(wins, first.t_f[0] - second.t_f[0], np.nan)
    return CaptureComparison(
        x_values=first.x_values,
        y_values=first.y_values,
        heading=heading,
        delta_t_f=delta,
        excluded=int(wins.size - wins.sum()),
    )


TRAJECTORY_COLUMNS = ["t", "x_A", "y_A", "theta_A", "x_T", "y_T", "theta_T", "u_A", "u_T", "r", "xi_A", "xi_T"]


def write_trajectory_csv(traj: Trajectory, path: Union[str, Path]):
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(TRAJECTORY_COLUMNS)
        for s in traj.samples:
            writer.writerow([
                repr(s.t), repr(s.agent.x), repr(s.agent.y), repr(s.agent.theta),
                repr(s.target.x), repr(s.target.y), repr(s.target.theta),
                repr(s.u_a), repr(s.u_t), repr(s.state.r), repr(s.state.xi_a), repr(s.state.xi_t),
            ])


def write_outcome_csv(grid: OutcomeGrid, heading_index: int, path: Union[str, Path]):
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["x", "y", "outcome"])
        for iy, y in enumerate(grid.y_values):
            for ix, x in enumerate(grid.x_values):
                writer.writerow([repr(float(x)), repr(float(y)), int(grid.outcomes[heading_index, iy, ix])])


def write_outcome_legend(path: Union[str, Path]):
    legend = {str(int(o)): o.label for o in Outcome}
    legend[str(SWEEP_ERROR)] = SWEEP_ERROR_LABEL
    with open(path, "w", encoding="utf-8") as file:
        json.dump(legend, file, indent=2)


def write_capture_csv(comparison: CaptureComparison, path: Union[str, Path]):
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["x", "y", "delta_t_f"])
        for iy, y in enumerate(comparison.y_values):
            for ix, x in enumerate(comparison.x_values):
                delta = comparison.delta_t_f[iy, ix]
                if not np.isnan(delta):
                    writer.writerow([repr(float(x)), repr(float(y)), repr(float(delta))])
