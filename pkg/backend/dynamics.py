"""Dubins kinematics for both vehicles and the reduced (r, xi_A, xi_T) representation."""
import math
from typing import Tuple

import numpy as np

from exceptions import DegenerateGeometryError
from geometry import wrap_angle
from models import Drift, Pose, ReducedState, VehicleParams


def reduce_arrays(x_a, y_a, theta_a, x_t, y_t, theta_t):
    """Vectorized reduction of full poses to (r, xi_a, xi_t); no degeneracy check."""
    dx = np.asarray(x_t, dtype=float) - np.asarray(x_a, dtype=float)
    dy = np.asarray(y_t, dtype=float) - np.asarray(y_a, dtype=float)
    r = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx)
    xi_a = wrap_angle(bearing - theta_t + math.pi)
    xi_t = wrap_angle(bearing - theta_a)
    return r, xi_a, xi_t


def reduce_state(agent: Pose, target: Pose) -> ReducedState:
    """Relative state of an engagement.

    r is the separation, lambda = atan2(y_T - y_A, x_T - x_A) the bearing of
    the Target from the Agent, xi_A = lambda - theta_T + pi and
    xi_T = lambda - theta_A, both wrapped to [-pi, pi).
    """
    r, xi_a, xi_t = reduce_arrays(agent.x, agent.y, agent.theta, target.x, target.y, target.theta)
    if float(r) == 0.0:
        raise DegenerateGeometryError("agent and target positions coincide; bearing is undefined")
    return ReducedState(r=float(r), xi_a=float(xi_a), xi_t=float(xi_t))


def drift_components(r, xi_a, xi_t, u_a, u_t, agent: VehicleParams, target: VehicleParams):
    """Vectorized drift (b_r, b_xi_a, b_xi_t); callers guarantee r > 0."""
    sin_a, cos_a = np.sin(xi_a), np.cos(xi_a)
    sin_t, cos_t = np.sin(xi_t), np.cos(xi_t)
    b_r = -(target.speed * cos_a + agent.speed * cos_t)
    bearing_rate = (target.speed * sin_a + agent.speed * sin_t) / r
    b_xi_a = -u_t + bearing_rate
    b_xi_t = -u_a + bearing_rate
    return b_r, b_xi_a, b_xi_t


def drift(state: ReducedState, u_a: float, u_t: float, agent: VehicleParams, target: VehicleParams) -> Drift:
    if state.r <= 0.0:
        raise DegenerateGeometryError(f"drift is undefined at r={state.r}")
    b_r, b_xi_a, b_xi_t = drift_components(
        np.float64(state.r), np.float64(state.xi_a), np.float64(state.xi_t), u_a, u_t, agent, target
    )
    return Drift(b_r=float(b_r), b_xi_a=float(b_xi_a), b_xi_t=float(b_xi_t))


def pure_pursuit_control(xi_t, max_turn_rate: float):
    """Full-rate turn toward the opponent's line of sight; zero when already pointing at it.

    xi_T = lambda - theta_A decreases as theta_A increases, so steering the
    line of sight onto the nose means turning with the sign of xi_T.
    Sign convention: follows the drift d(xi_T)/dt = -u + c, under which
    +u_max * sign(xi_T) closes the angle. Do not flip it.
    """
    command = max_turn_rate * np.sign(wrap_angle(xi_t))
    if np.ndim(command) == 0:
        return float(command)
    return command


def advance_arrays(x_a, y_a, theta_a, x_t, y_t, theta_t, u_a, u_t, dt: float, dw,
                   agent: VehicleParams, target: VehicleParams, sigma: float = 0.0):
    """One Euler-Maruyama step for any number of engagements at once."""
    nx_a = x_a + agent.speed * np.cos(theta_a) * dt
    ny_a = y_a + agent.speed * np.sin(theta_a) * dt
    nth_a = wrap_angle(theta_a + u_a * dt)
    nx_t = x_t + target.speed * np.cos(theta_t) * dt
    ny_t = y_t + target.speed * np.sin(theta_t) * dt
    nth_t = wrap_angle(theta_t + u_t * dt + sigma * dw)
    return nx_a, ny_a, nth_a, nx_t, ny_t, nth_t


def step_full(agent_pose: Pose, target_pose: Pose, u_a: float, u_t: float, dt: float, dw: float,
              agent: VehicleParams, target: VehicleParams, sigma: float = 0.0) -> Tuple[Pose, Pose]:
    """Advance both vehicles by dt; dw is the Target's heading-noise increment (0 when deterministic)."""
    nx_a, ny_a, nth_a, nx_t, ny_t, nth_t = advance_arrays(
        agent_pose.x, agent_pose.y, agent_pose.theta,
        target_pose.x, target_pose.y, target_pose.theta,
        u_a, u_t, dt, dw, agent, target, sigma,
    )
    return (
        Pose(x=float(nx_a), y=float(ny_a), theta=float(nth_a)),
        Pose(x=float(nx_t), y=float(ny_t), theta=float(nth_t)),
    )


def reduction_residual(agent_pose: Pose, target_pose: Pose, u_a: float, u_t: float, dt: float,
                       horizon: float, agent: VehicleParams, target: VehicleParams,
                       min_range: float = 1e-6) -> float:
    """Max-norm gap between the reduced full trajectory and the directly integrated reduced state.

    Both representations are integrated deterministically with forward
    Euler, so the gap is first order in dt.
    """
    steps = int(round(horizon / dt))
    reduced = reduce_state(agent_pose, target_pose)
    r, xi_a, xi_t = reduced.r, reduced.xi_a, reduced.xi_t
    full_a, full_t = agent_pose, target_pose
    residual = 0.0

    for _ in range(steps):
        b = drift(ReducedState(r=r, xi_a=xi_a, xi_t=xi_t), u_a, u_t, agent, target)
        r = r + b.b_r * dt
        xi_a = wrap_angle(xi_a + b.b_xi_a * dt)
        xi_t = wrap_angle(xi_t + b.b_xi_t * dt)
        full_a, full_t = step_full(full_a, full_t, u_a, u_t, dt, 0.0, agent, target)

        if r < min_range:
            raise DegenerateGeometryError("reduced trajectory passed through r = 0")
        try:
            observed = reduce_state(full_a, full_t)
        except DegenerateGeometryError:
            raise DegenerateGeometryError("full trajectory passed through r = 0") from None
        if observed.r < min_range:
            raise DegenerateGeometryError("full trajectory passed through r = 0")

        gap = max(
            abs(observed.r - r),
            abs(wrap_angle(observed.xi_a - xi_a)),
            abs(wrap_angle(observed.xi_t - xi_t)),
        )
        residual = max(residual, gap)

    return residual
