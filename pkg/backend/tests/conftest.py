import math

import numpy as np
import pytest

from hjb_solver import solve_baseline
from models import (
    AGENT_DEFAULTS,
    TARGET_DEFAULTS,
    GridSpec,
    ProblemRole,
    RunConfig,
    SolverConfig,
    SolverVariant,
    ValueField,
)


@pytest.fixture
def agent():
    return AGENT_DEFAULTS


@pytest.fixture
def target():
    return TARGET_DEFAULTS


@pytest.fixture
def small_grid():
    return GridSpec(n_r=12, n_xi_a=12, n_xi_t=12, r_max=6.0)


@pytest.fixture
def small_solver():
    return SolverConfig(tolerance=1e-6, max_iterations=20_000, upsample_schedule=[])


@pytest.fixture(scope="session")
def solved_small():
    """Agent and Target baselines on a 12^3 grid; shared because solving is the slow part"""
    grid = GridSpec(n_r=12, n_xi_a=12, n_xi_t=12, r_max=6.0)
    solver = SolverConfig(upsample_schedule=[])
    agent_result = solve_baseline(ProblemRole.AGENT_CONTROLS, AGENT_DEFAULTS, TARGET_DEFAULTS, grid, solver, log_every=0)
    target_result = solve_baseline(ProblemRole.TARGET_CONTROLS, AGENT_DEFAULTS, TARGET_DEFAULTS, grid, solver, log_every=0)
    return {"grid": grid, "solver": solver, "agent": agent_result.field, "target": target_result.field}


@pytest.fixture
def random_field(small_grid, agent, target):
    rng = np.random.default_rng(7)
    return ValueField(
        grid=small_grid,
        values=rng.uniform(0.0, 100.0, small_grid.shape),
        controls=rng.choice([-1.0, 0.0, 1.0], small_grid.shape),
        agent=agent,
        target=target,
        variant=SolverVariant.BASELINE_AGENT,
        sigma=1.0,
        terminal_penalty=100.0,
        converged=True,
        iterations=321,
    )


@pytest.fixture
def small_run(tmp_path):
    """Run configuration scaled down for command-level tests"""
    return RunConfig.model_validate({
        "grid": {"n_r": 10, "n_xi_a": 10, "n_xi_t": 10, "r_max": 6.0},
        "solver": {"upsample_schedule": [], "tolerance": 1e-5},
        "sim": {"dt": 0.02, "t_max": 10.0},
        "sweep": {"nx": 5, "ny": 5, "headings": [math.pi]},
        "output_dir": str(tmp_path / "artifacts"),
    })
