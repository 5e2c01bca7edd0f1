import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class WezParams(BaseModel):
    """Basic engagement zone (BEZ) parameters of one vehicle's weapon"""
    model_config = ConfigDict(frozen=True)

    weapon_speed_ratio: float = Field(gt=1)  # nu: weapon speed relative to the opponent's speed
    weapon_range: float = Field(gt=0)        # R
    capture_radius: float = Field(gt=0)      # r_c


class VehicleParams(BaseModel):
    """Dubins vehicle: constant speed, bounded turn rate, and its weapon"""
    model_config = ConfigDict(frozen=True)

    speed: float = Field(gt=0)
    max_turn_rate: float = Field(gt=0)
    wez: WezParams


AGENT_DEFAULTS = VehicleParams(
    speed=1.0,
    max_turn_rate=1.0,
    wez=WezParams(weapon_speed_ratio=1.2, weapon_range=1.0, capture_radius=0.2),
)

TARGET_DEFAULTS = VehicleParams(
    speed=0.8,
    max_turn_rate=1.0,
    wez=WezParams(weapon_speed_ratio=1.1, weapon_range=0.9, capture_radius=0.15),
)


class GridSpec(BaseModel):
    """Node grid over [0, r_max] x [-pi, pi) x [-pi, pi); both angle axes are periodic"""
    model_config = ConfigDict(frozen=True)

    n_r: int = Field(default=100, ge=3)
    n_xi_a: int = Field(default=100, ge=3)
    n_xi_t: int = Field(default=100, ge=3)
    r_max: float = Field(default=10.0, gt=0)

    @property
    def dr(self) -> float:
        return self.r_max / (self.n_r - 1)

    @property
    def dxi_a(self) -> float:
        return 2.0 * math.pi / self.n_xi_a

    @property
    def dxi_t(self) -> float:
        return 2.0 * math.pi / self.n_xi_t

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n_r, self.n_xi_a, self.n_xi_t)

    @property
    def size(self) -> int:
        return self.n_r * self.n_xi_a * self.n_xi_t

    def r_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.r_max, self.n_r)

    def xi_a_nodes(self) -> np.ndarray:
        return -math.pi + np.arange(self.n_xi_a) * self.dxi_a

    def xi_t_nodes(self) -> np.ndarray:
        return -math.pi + np.arange(self.n_xi_t) * self.dxi_t

    def mesh(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Node coordinates broadcast to the full grid shape ('ij' indexing)"""
        return np.meshgrid(self.r_nodes(), self.xi_a_nodes(), self.xi_t_nodes(), indexing="ij")

    def node_state(self, i_r: int, i_a: int, i_t: int) -> "ReducedState":
        return ReducedState(
            r=float(self.r_nodes()[i_r]),
            xi_a=float(self.xi_a_nodes()[i_a]),
            xi_t=float(self.xi_t_nodes()[i_t]),
        )

    def cubic(self, n: int) -> "GridSpec":
        """Same domain with n points in every dimension"""
        return GridSpec(n_r=n, n_xi_a=n, n_xi_t=n, r_max=self.r_max)


class SolverConfig(BaseModel):
    """Computational parameters for value iteration"""
    sigma: float = Field(default=1.0, ge=0)                 # heading-noise intensity
    terminal_penalty: float = Field(default=100.0, gt=0)    # M, in time units
    max_iterations: int = Field(default=20_000, ge=1)
    tolerance: float = Field(default=1e-6, gt=0)            # mean |dV| per cell
    # Candidate controls as fractions of the max turn rate, in tie-break order
    control_levels: Tuple[float, ...] = (0.0, -1.0, 1.0)
    diffusion_axis: Literal["xi_a", "xi_t"] = "xi_a"
    upsample_schedule: List[int] = Field(default_factory=lambda: [25, 50])
    thread_count: int = Field(default=1, ge=1)
    adversarial_sigma: float = Field(default=0.1, ge=0)

    @field_validator("control_levels")
    @classmethod
    def _three_levels(cls, levels: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(levels) != 3:
            raise ValueError("control_levels must hold exactly three turn-rate levels")
        if any(abs(level) > 1.0 for level in levels):
            raise ValueError("control_levels are fractions of the max turn rate and must lie in [-1, 1]")
        return levels

    @field_validator("upsample_schedule")
    @classmethod
    def _schedule_sizes(cls, schedule: List[int]) -> List[int]:
        if any(n < 3 for n in schedule):
            raise ValueError("upsample stages need at least 3 points per dimension")
        if schedule != sorted(schedule):
            raise ValueError("upsample_schedule must be increasing")
        return schedule


class SimConfig(BaseModel):
    """Engagement simulator settings"""
    dt: float = Field(default=0.01, gt=0)
    t_max: float = Field(default=60.0, gt=0)  # stalemate timeout
    sigma_sim: float = Field(default=0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _timeout_exceeds_step(self) -> "SimConfig":
        if self.t_max <= self.dt:
            raise ValueError("t_max must exceed dt")
        return self


class SweepConfig(BaseModel):
    """Lattice of initial Target positions and headings; the Agent starts at the origin heading north"""
    x_min: float = -5.0
    x_max: float = 5.0
    y_min: float = -5.0
    y_max: float = 5.0
    nx: int = Field(default=41, ge=1)
    ny: int = Field(default=41, ge=1)
    headings: List[float] = Field(default_factory=lambda: [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])

    def x_values(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    def y_values(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)


class RunConfig(BaseModel):
    """Everything one CLI invocation needs; defaults reproduce the published parameter tables"""
    agent: VehicleParams = AGENT_DEFAULTS
    target: VehicleParams = TARGET_DEFAULTS
    grid: GridSpec = Field(default_factory=GridSpec)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _aligned_angle_axes(self) -> "RunConfig":
        if self.grid.n_xi_a != self.grid.n_xi_t:
            raise ValueError("n_xi_a must equal n_xi_t: the role swap map requires node alignment")
        return self


class TerminalClass(str, Enum):
    IN_AGENT_WEZ = "InAgentWez"
    IN_TARGET_WEZ = "InTargetWez"
    NEITHER = "Neither"


class ProblemRole(str, Enum):
    AGENT_CONTROLS = "AgentControls"
    TARGET_CONTROLS = "TargetControls"


class SolverVariant(str, Enum):
    BASELINE_AGENT = "baseline-agent"
    BASELINE_TARGET = "baseline-target"
    AVOID = "avoid"
    ADVERSARIAL = "adversarial"


class Outcome(IntEnum):
    STALEMATE = 0
    INITIAL_BOTH = 1
    INITIAL_TARGET_WEZ_ONLY = 2
    INITIAL_AGENT_WEZ_ONLY = 3
    TERMINATES_IN_TARGET_WEZ = 4
    TERMINATES_IN_AGENT_WEZ = 5

    @property
    def label(self) -> str:
        return "".join(part.title() for part in self.name.split("_"))


@dataclass(frozen=True)
class Pose:
    """Planar pose; theta in [-pi, pi)"""
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class ReducedState:
    """Relative state (range, aspect of T seen by A, aspect of A seen by T)"""
    r: float
    xi_a: float
    xi_t: float


@dataclass(frozen=True)
class Drift:
    b_r: float
    b_xi_a: float
    b_xi_t: float


@dataclass
class ValueField:
    """Value and optimal control at every grid node.

    `agent` is the controlled vehicle in solver coordinates, so for a
    baseline-target field it holds the Target's parameters.
    """
    grid: GridSpec
    values: np.ndarray    # (n_r, n_xi_a, n_xi_t), time units
    controls: np.ndarray  # same shape, signed turn rate
    agent: VehicleParams
    target: VehicleParams
    variant: SolverVariant
    sigma: float
    terminal_penalty: float
    converged: bool = False
    iterations: int = 0

    @classmethod
    def zeros(cls, grid: GridSpec, agent: VehicleParams, target: VehicleParams,
              variant: SolverVariant, sigma: float, terminal_penalty: float) -> "ValueField":
        return cls(
            grid=grid,
            values=np.zeros(grid.shape),
            controls=np.zeros(grid.shape),
            agent=agent,
            target=target,
            variant=variant,
            sigma=sigma,
            terminal_penalty=terminal_penalty,
        )

    def with_arrays(self, values: np.ndarray, controls: np.ndarray, **changes) -> "ValueField":
        """Copy of this field's metadata around new arrays"""
        fields = dict(
            grid=self.grid, agent=self.agent, target=self.target, variant=self.variant,
            sigma=self.sigma, terminal_penalty=self.terminal_penalty,
            converged=self.converged, iterations=self.iterations,
        )
        fields.update(changes)
        return ValueField(values=values, controls=controls, **fields)
