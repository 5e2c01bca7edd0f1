from abc import ABC, abstractmethod
from typing import Callable, Dict, List

import numpy as np

from dynamics import pure_pursuit_control
from exceptions import ConfigurationError
from field_cache import FieldCache
from models import ProblemRole, ValueField, VehicleParams
from policy_store import FieldSampler


class Controller(ABC):
    """Abstract base class for turn-rate laws.

    Commands are evaluated on reduced states expressed in the Agent's
    coordinates (r, xi_A, xi_T); a controller assigned to the Target maps
    them into its own frame.
    """

    def __init__(self, role: ProblemRole, vehicle: VehicleParams):
        self.role = role
        self.vehicle = vehicle

    @abstractmethod
    def get_spec(self) -> str:
        """Return the string this controller is built from"""
        pass

    @abstractmethod
    def _command(self, r: np.ndarray, xi_a: np.ndarray, xi_t: np.ndarray) -> np.ndarray:
        pass

    def command(self, r, xi_a, xi_t) -> np.ndarray:
        """Turn rate for every state, saturated at the vehicle's limit"""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        u = np.broadcast_to(self._command(r, np.atleast_1d(xi_a), np.atleast_1d(xi_t)), r.shape)
        return np.clip(u, -self.vehicle.max_turn_rate, self.vehicle.max_turn_rate)


class ConstantTurnController(Controller):
    """Fixed turn rate; 0 flies a straight line"""

    def __init__(self, role: ProblemRole, vehicle: VehicleParams, turn_rate: float):
        super().__init__(role, vehicle)
        if abs(turn_rate) > vehicle.max_turn_rate:
            raise ConfigurationError(f"turn rate {turn_rate} exceeds the limit {vehicle.max_turn_rate}")
        self.turn_rate = turn_rate

    def get_spec(self) -> str:
        return f"constant:{self.turn_rate!r}"

    def _command(self, r, xi_a, xi_t):
        return np.full(r.shape, self.turn_rate)


class PurePursuitController(Controller):
    """Full-rate turn toward the opponent"""

    def get_spec(self) -> str:
        return "pursuit"

    def _command(self, r, xi_a, xi_t):
        # The Target's own line-of-sight angle is xi_A
        own = xi_t if self.role == ProblemRole.AGENT_CONTROLS else xi_a
        return pure_pursuit_control(own, self.vehicle.max_turn_rate)


class StoredPolicyController(Controller):
    """Interpolated lookup into a solved field"""

    def __init__(self, role: ProblemRole, vehicle: VehicleParams, opponent: VehicleParams,
                 field: ValueField, sampler: FieldSampler, source: str = ""):
        super().__init__(role, vehicle)
        if field.agent != vehicle or field.target != opponent:
            raise ConfigurationError(
                f"stored policy {source or field.variant.value} was solved for different vehicle parameters "
                f"than the {role.value} role it is assigned to"
            )
        self.field = field
        self.sampler = sampler
        self.source = source

    def get_spec(self) -> str:
        return f"policy:{self.source}"

    def _command(self, r, xi_a, xi_t):
        if self.role == ProblemRole.AGENT_CONTROLS:
            return self.sampler.controls(r, xi_a, xi_t)
        # Target-role fields live in swapped coordinates
        return self.sampler.controls(r, xi_t, xi_a)


ControllerFactory = Callable[[str, ProblemRole, VehicleParams, VehicleParams], Controller]


class ControllerManager:
    """Builds controllers from specs such as 'constant:0', 'pursuit', 'policy:path/to.field'"""

    def __init__(self, cache: FieldCache):
        self.cache = cache
        self.factories: Dict[str, ControllerFactory] = {}
        self.register("constant", self._constant)
        self.register("pursuit", self._pursuit)
        self.register("policy", self._policy)

    def register(self, name: str, factory: ControllerFactory):
        """Register a controller factory under a spec prefix"""
        if not name:
            raise ValueError("Controller factory must have a name")
        self.factories[name] = factory

    def available(self) -> List[str]:
        return sorted(self.factories)

    def build(self, spec: str, role: ProblemRole, vehicle: VehicleParams, opponent: VehicleParams) -> Controller:
        name, _, argument = spec.partition(":")
        if name not in self.factories:
            raise ConfigurationError(f"unknown controller '{name}' (available: {', '.join(self.available())})")
        return self.factories[name](argument, role, vehicle, opponent)

    def _constant(self, argument, role, vehicle, opponent):
        try:
            turn_rate = float(argument) if argument else 0.0
        except ValueError:
            raise ConfigurationError(f"constant controller needs a numeric turn rate, got '{argument}'") from None
        return ConstantTurnController(role, vehicle, turn_rate)

    def _pursuit(self, argument, role, vehicle, opponent):
        return PurePursuitController(role, vehicle)

    def _policy(self, argument, role, vehicle, opponent):
        if not argument:
            raise ConfigurationError("policy controller needs a field path, e.g. policy:artifacts/baseline-agent_40^3.field")
        return StoredPolicyController(
            role, vehicle, opponent, self.cache.get(argument), self.cache.sampler(argument), source=argument
        )
