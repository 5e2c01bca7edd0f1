"""Basic engagement zone boundaries, WEZ membership, and terminal classification.

All functions accept plain floats or numpy arrays for the angle/range
arguments so the solver can classify a whole grid in one call.
"""
import math

import numpy as np

from models import ReducedState, TerminalClass, WezParams

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Map an angle (or array of angles) into [-pi, pi)."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + math.pi, TWO_PI) - math.pi
    # mod can round up to exactly 2*pi for inputs a hair below a multiple of 2*pi
    wrapped = np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def bez_radius(params: WezParams, aspect):
    """Distance from a vehicle to the boundary of its BEZ at the given aspect angle.

    rho(xi) = (R / nu) * [cos xi + sqrt(cos^2 xi - 1 + (R + r_c)^2 / R^2)]
    """
    cos_xi = np.cos(wrap_angle(aspect))
    reach = (params.weapon_range + params.capture_radius) / params.weapon_range
    radius = (params.weapon_range / params.weapon_speed_ratio) * (
        cos_xi + np.sqrt(cos_xi * cos_xi - 1.0 + reach * reach)
    )
    if np.ndim(radius) == 0:
        return float(radius)
    return radius


def within_bez(r, aspect, params: WezParams):
    """Inclusive membership r <= rho(aspect); vectorized over r and aspect."""
    return np.asarray(r) <= bez_radius(params, aspect)


def in_agent_wez(state: ReducedState, agent_wez: WezParams) -> bool:
    """True when the Target sits inside the Agent's WEZ."""
    return bool(within_bez(state.r, state.xi_a, agent_wez))


def in_target_wez(state: ReducedState, target_wez: WezParams) -> bool:
    """True when the Agent sits inside the Target's WEZ."""
    return bool(within_bez(state.r, state.xi_t, target_wez))


def classify_terminal(state: ReducedState, agent_wez: WezParams, target_wez: WezParams) -> TerminalClass:
    # Target's WEZ is tested first, so overlap counts as a loss for the Agent
    if in_target_wez(state, target_wez):
        return TerminalClass.IN_TARGET_WEZ
    if in_agent_wez(state, agent_wez):
        return TerminalClass.IN_AGENT_WEZ
    return TerminalClass.NEITHER
