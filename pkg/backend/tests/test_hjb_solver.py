import math

import numba
import numpy as np
import pytest

from dynamics import drift
from exceptions import ConfigurationError, StationaryCellError
from hjb_solver import (
    INTERIOR,
    REFLECT_HIGH,
    REFLECT_LOW,
    TERMINAL_M,
    TERMINAL_ZERO,
    EngagementProblem,
    NodeKind,
    avoid_set,
    bellman_residual,
    bellman_update,
    cell_transition,
    classify_node,
    implicit_time_step,
    node_kinds,
    solve_adversarial,
    solve_avoid,
    solve_baseline,
    split_drift,
    swap_axes,
    upsample,
    value_iteration,
)
from models import (
    Drift,
    GridSpec,
    ProblemRole,
    SolverConfig,
    SolverVariant,
    ValueField,
    VehicleParams,
    WezParams,
)


@pytest.mark.parametrize("b, expected", [(-0.2, (0.0, 0.2)), (0.0, (0.0, 0.0)), (1.8, (1.8, 0.0))])
def test_split_drift(b, expected):
    plus, minus = split_drift(np.float64(b))
    assert (float(plus), float(minus)) == expected


def test_implicit_time_step_pure_diffusion():
    grid = GridSpec()
    assert implicit_time_step(Drift(0.0, 0.0, 0.0), grid, sigma=1.0) == pytest.approx(grid.dxi_a ** 2)
    assert implicit_time_step(Drift(0.0, 0.0, 0.0), grid, sigma=1.0) == pytest.approx(3.9478e-3, rel=1e-4)


def test_implicit_time_step_pure_radial_drift():
    grid = GridSpec(n_r=101, r_max=10.0)
    assert implicit_time_step(Drift(-1.8, 0.0, 0.0), grid, sigma=0.0) == pytest.approx(0.1 / 1.8)


def test_implicit_time_step_scales_with_spacing():
    fine = GridSpec(n_r=101, n_xi_a=100, n_xi_t=100, r_max=10.0)
    coarse = GridSpec(n_r=101, n_xi_a=50, n_xi_t=50, r_max=20.0)
    b = Drift(-0.7, 0.4, -1.1)
    assert implicit_time_step(b, coarse, 0.0) == pytest.approx(2 * implicit_time_step(b, fine, 0.0))


def test_adversarial_noise_level_changes_time_step():
    grid = GridSpec()
    assert implicit_time_step(Drift(0.0, 0.0, 0.0), grid, sigma=0.1) == pytest.approx(0.395, rel=1e-3)


def test_stationary_cell_is_an_error():
    with pytest.raises(StationaryCellError):
        cell_transition(Drift(0.0, 0.0, 0.0), GridSpec(), sigma=0.0)


def test_cell_transition_pure_diffusion_splits_evenly():
    t = cell_transition(Drift(0.0, 0.0, 0.0), GridSpec(), sigma=1.0)
    assert t.p_xi_a_plus == pytest.approx(0.5)
    assert t.p_xi_a_minus == pytest.approx(0.5)
    assert t.p_r_plus == t.p_r_minus == t.p_xi_t_plus == t.p_xi_t_minus == 0.0


def test_cell_transition_pure_radial_drift():
    t = cell_transition(Drift(-1.8, 0.0, 0.0), GridSpec(n_r=101), sigma=0.0)
    assert t.p_r_minus == pytest.approx(1.0)
    assert t.total() == pytest.approx(1.0, abs=1e-12)


def test_cell_transition_diffusion_on_xi_t_axis():
    t = cell_transition(Drift(0.0, 0.0, 0.0), GridSpec(), sigma=1.0, diffusion_axis="xi_t")
    assert t.p_xi_t_plus == pytest.approx(0.5)
    assert t.p_xi_a_plus == 0.0


def test_cell_transition_is_a_probability_vector():
    rng = np.random.default_rng(11)
    grid = GridSpec()
    for _ in range(2000):
        b = Drift(*rng.normal(0.0, 3.0, 3))
        t = cell_transition(b, grid, sigma=float(rng.choice([0.0, 0.1, 1.0])))
        assert min(t.probabilities()) >= 0.0
        assert abs(t.total() - 1.0) <= 1e-12


@pytest.fixture
def kinds_problem(agent, target):
    grid = GridSpec(n_r=21, n_xi_a=12, n_xi_t=12, r_max=2.0)
    return EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, SolverConfig())


def test_classify_node_examples(kinds_problem):
    half = kinds_problem.grid.n_xi_t // 2  # xi = 0
    boundary = classify_node((0, 3, 4), kinds_problem)
    assert boundary.kind == NodeKind.REFLECTIVE_BOUNDARY
    assert boundary.source == (1, 3, 4)
    assert classify_node((20, 3, 4), kinds_problem).source == (19, 3, 4)
    assert classify_node((1, 0, half), kinds_problem).kind == NodeKind.TERMINAL_M
    assert classify_node((10, half, 0), kinds_problem).kind == NodeKind.TERMINAL_ZERO
    assert classify_node((15, 0, 0), kinds_problem).kind == NodeKind.INTERIOR


def test_node_kinds_matches_classify_node(kinds_problem):
    kinds = node_kinds(kinds_problem)
    expected = {
        NodeKind.TERMINAL_M: TERMINAL_M,
        NodeKind.TERMINAL_ZERO: TERMINAL_ZERO,
        NodeKind.INTERIOR: INTERIOR,
    }
    for node in np.ndindex(kinds_problem.grid.shape):
        cls = classify_node(node, kinds_problem)
        if cls.kind == NodeKind.REFLECTIVE_BOUNDARY:
            assert kinds[node] == (REFLECT_LOW if node[0] == 0 else REFLECT_HIGH)
        else:
            assert kinds[node] == expected[cls.kind]


def test_avoid_mask_counts_as_loss(kinds_problem):
    mask = np.zeros(kinds_problem.grid.shape, dtype=bool)
    mask[15, 0, 0] = True
    assert classify_node((15, 0, 0), kinds_problem, avoid_mask=mask).kind == NodeKind.TERMINAL_M
    assert node_kinds(kinds_problem, avoid_mask=mask)[15, 0, 0] == TERMINAL_M


def test_bellman_update_on_zero_snapshot_is_smallest_time_step(kinds_problem, agent, target):
    problem = kinds_problem
    snapshot = ValueField.zeros(problem.grid, agent, target, SolverVariant.BASELINE_AGENT, 1.0, 100.0)
    node = (15, 0, 0)
    value, control = bellman_update(node, snapshot, problem)
    state = problem.grid.node_state(*node)
    steps = [cell_transition(drift(state, u, 0.0, agent, target), problem.grid, problem.sigma).dt
             for u in problem.candidate_controls()]
    assert value == pytest.approx(min(steps))
    assert control == problem.candidate_controls()[int(np.argmin(steps))]


def test_bellman_update_ties_keep_first_level(agent, target):
    grid = GridSpec(n_r=8, n_xi_a=8, n_xi_t=8, r_max=6.0)
    config = SolverConfig(control_levels=(0.5, 0.5, 0.5))
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, config)
    snapshot = ValueField.zeros(grid, agent, target, SolverVariant.BASELINE_AGENT, 1.0, 100.0)
    _, control = bellman_update((6, 1, 3), snapshot, problem)
    assert control == 0.5 * agent.max_turn_rate


@pytest.mark.parametrize("i_r", [3, 5])
def test_bellman_update_symmetric_tie_between_turns_takes_left(agent, target, i_r):
    # xi_A = -pi, xi_T = 0 with V even in xi_T: both full turns cost the same
    grid = GridSpec(n_r=8, n_xi_a=8, n_xi_t=8, r_max=6.0)
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, SolverConfig())
    _, _, xi_t = grid.mesh()
    snapshot = ValueField.zeros(grid, agent, target, SolverVariant.BASELINE_AGENT, 1.0, 100.0)
    snapshot = snapshot.with_arrays(np.cos(xi_t) + 5.0, snapshot.controls)
    node = (i_r, 0, grid.n_xi_t // 2)
    assert grid.xi_t_nodes()[node[2]] == pytest.approx(0.0, abs=1e-12)
    _, control = bellman_update(node, snapshot, problem)
    assert control == -agent.max_turn_rate


def test_bellman_update_is_bounded_by_penalty(kinds_problem, agent, target):
    full = ValueField.zeros(kinds_problem.grid, agent, target, SolverVariant.BASELINE_AGENT, 1.0, 100.0)
    full = full.with_arrays(np.full(kinds_problem.grid.shape, 100.0), full.controls)
    value, _ = bellman_update((15, 0, 0), full, kinds_problem)
    assert value <= 100.0


def test_kernel_matches_reference_update(kinds_problem, agent, target):
    rng = np.random.default_rng(5)
    grid = kinds_problem.grid
    init = ValueField.zeros(grid, agent, target, SolverVariant.BASELINE_AGENT, 1.0, 100.0)
    init = init.with_arrays(rng.uniform(0.0, 10.0, grid.shape), init.controls)
    swept, _ = value_iteration(kinds_problem, init, SolverConfig(max_iterations=1), log_every=0)
    kinds = node_kinds(kinds_problem)
    for node in zip(*np.nonzero(kinds == INTERIOR)):
        value, control = bellman_update(tuple(int(i) for i in node), init, kinds_problem)
        assert swept.values[node] == pytest.approx(value, rel=1e-12, abs=1e-12)
        assert swept.controls[node] == control


def test_all_interior_in_agent_wez_converges_in_one_sweep(agent):
    harmless = VehicleParams(speed=0.8, max_turn_rate=1.0,
                             wez=WezParams(weapon_speed_ratio=10.0, weapon_range=0.01, capture_radius=0.001))
    grid = GridSpec(n_r=3, n_xi_a=6, n_xi_t=6, r_max=0.15)
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, harmless, grid, SolverConfig())
    field, trace = value_iteration(problem, None, SolverConfig(), log_every=0)
    assert field.converged
    assert trace.iterations == 1
    assert np.all(field.values == 0.0)


def test_non_convergence_is_flagged_not_raised(small_grid, agent, target):
    config = SolverConfig(max_iterations=3, upsample_schedule=[])
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, small_grid, config)
    field, trace = value_iteration(problem, None, config, log_every=0)
    assert not field.converged
    assert trace.iterations == 3
    assert field.iterations == 3


def test_value_iteration_rejects_mismatched_init(small_grid, agent, target, random_field):
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, small_grid.cubic(6), SolverConfig())
    with pytest.raises(ConfigurationError):
        value_iteration(problem, random_field, SolverConfig(), log_every=0)


def test_baseline_field_invariants(solved_small, agent, target):
    field = solved_small["agent"]
    grid = field.grid
    assert field.converged
    assert np.all(field.values >= 0.0)
    assert np.all(field.values <= field.terminal_penalty)

    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, solved_small["solver"])
    kinds = node_kinds(problem)
    assert np.all(field.values[kinds == TERMINAL_ZERO] == 0.0)
    assert np.all(field.values[kinds == TERMINAL_M] == field.terminal_penalty)
    assert np.all(field.controls[(kinds == TERMINAL_ZERO) | (kinds == TERMINAL_M)] == 0.0)

    residual = bellman_residual(field, problem)
    assert residual.mean() < solved_small["solver"].tolerance
    assert residual[kinds == INTERIOR].max() < 10 * solved_small["solver"].tolerance
    assert np.all(residual[kinds != INTERIOR] == 0.0)


def test_baseline_trace_ends_below_tolerance(solved_small, agent, target):
    field = solved_small["agent"]
    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, field.grid, solved_small["solver"])
    kinds = node_kinds(problem)
    assert bellman_residual(field, problem)[kinds == INTERIOR].max() < 10 * solved_small["solver"].tolerance
    assert field.iterations > 1
    assert field.variant == SolverVariant.BASELINE_AGENT
    assert solved_small["target"].variant == SolverVariant.BASELINE_TARGET
    # Target-role fields record the Target as the controlled vehicle
    assert solved_small["target"].agent == field.target


def test_solve_is_deterministic_across_thread_counts(small_grid, agent, target):
    fields = []
    for threads in (1, 2, 8, 1):
        config = SolverConfig(upsample_schedule=[], thread_count=threads, tolerance=1e-4)
        fields.append(solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, small_grid, config, log_every=0).field)
    for other in fields[1:]:
        assert np.array_equal(fields[0].values, other.values)
        assert np.array_equal(fields[0].controls, other.controls)


def test_solve_restores_process_thread_count(small_grid, agent, target):
    before = numba.get_num_threads()
    config = SolverConfig(upsample_schedule=[], thread_count=2 if before != 2 else 1, max_iterations=5)
    solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, small_grid, config, log_every=0)
    assert numba.get_num_threads() == before


def _field(grid, values, agent, target):
    return ValueField(grid=grid, values=values, controls=np.zeros(grid.shape), agent=agent, target=target,
                      variant=SolverVariant.BASELINE_AGENT, sigma=1.0, terminal_penalty=100.0, converged=True)


def test_upsample_reproduces_constants_and_linear_fields(agent, target):
    coarse_grid = GridSpec(n_r=4, n_xi_a=4, n_xi_t=4, r_max=6.0)
    fine_grid = GridSpec(n_r=7, n_xi_a=8, n_xi_t=8, r_max=6.0)

    constant = upsample(_field(coarse_grid, np.full(coarse_grid.shape, 3.25), agent, target), fine_grid)
    np.testing.assert_allclose(constant.values, 3.25, rtol=0, atol=1e-12)
    assert np.all(constant.controls == 0.0)
    assert not constant.converged

    r, _, _ = coarse_grid.mesh()
    linear = upsample(_field(coarse_grid, 2.0 * r + 1.0, agent, target), fine_grid)
    fine_r, _, _ = fine_grid.mesh()
    np.testing.assert_allclose(linear.values, 2.0 * fine_r + 1.0, rtol=0, atol=1e-12)


def test_upsample_keeps_coincident_nodes(agent, target):
    coarse_grid = GridSpec(n_r=4, n_xi_a=4, n_xi_t=4, r_max=6.0)
    fine_grid = GridSpec(n_r=7, n_xi_a=8, n_xi_t=8, r_max=6.0)
    values = np.random.default_rng(2).uniform(0, 50, coarse_grid.shape)
    fine = upsample(_field(coarse_grid, values, agent, target), fine_grid)
    np.testing.assert_allclose(fine.values[::2, ::2, ::2], values, rtol=0, atol=1e-10)


def test_upsample_rejects_bad_targets(agent, target):
    coarse = _field(GridSpec(n_r=4, n_xi_a=4, n_xi_t=4, r_max=6.0), np.zeros((4, 4, 4)), agent, target)
    with pytest.raises(ConfigurationError):
        upsample(coarse, GridSpec(n_r=7, n_xi_a=8, n_xi_t=8, r_max=8.0))
    with pytest.raises(ConfigurationError):
        upsample(coarse, coarse.grid)


def test_upsampled_pipeline_matches_cold_solve_with_fewer_fine_iterations(agent, target):
    grid = GridSpec(n_r=10, n_xi_a=10, n_xi_t=10, r_max=6.0)
    warm = solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, grid,
                          SolverConfig(upsample_schedule=[5], tolerance=1e-9), log_every=0)
    cold = solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, grid,
                          SolverConfig(upsample_schedule=[], tolerance=1e-9), log_every=0)
    assert len(warm.traces) == 2
    assert warm.converged and cold.converged
    assert warm.traces[-1].iterations < cold.traces[-1].iterations
    assert np.mean(np.abs(warm.field.values - cold.field.values)) < 10 * 1e-9


def test_swap_axes_exchanges_angle_axes(random_field):
    swapped = swap_axes(random_field)
    assert swapped.values[2, 3, 7] == random_field.values[2, 7, 3]
    assert swapped.controls[5, 0, 11] == random_field.controls[5, 11, 0]
    twice = swap_axes(swapped)
    assert np.array_equal(twice.values, random_field.values)


def test_swap_axes_requires_square_angle_grid(agent, target):
    grid = GridSpec(n_r=4, n_xi_a=4, n_xi_t=6, r_max=6.0)
    with pytest.raises(ConfigurationError):
        swap_axes(_field(grid, np.zeros(grid.shape), agent, target))


def test_avoid_set_examples(small_grid, agent, target):
    v_a = _field(small_grid, np.random.default_rng(1).uniform(0, 100, small_grid.shape), agent, target)
    assert not avoid_set(v_a, v_a).any()

    v_a_max = _field(small_grid, np.full(small_grid.shape, 100.0), agent, target)
    v_t_zero = _field(small_grid, np.zeros(small_grid.shape), agent, target)
    assert avoid_set(v_a_max, v_t_zero).all()

    with pytest.raises(ConfigurationError):
        avoid_set(v_a, _field(small_grid.cubic(6), np.zeros((6, 6, 6)), agent, target))


def test_avoid_set_never_covers_agent_wez(solved_small):
    v_a = solved_small["agent"]
    v_t = swap_axes(solved_small["target"])
    mask = avoid_set(v_a, v_t)
    assert not mask[v_a.values == 0.0].any()


def test_avoid_with_empty_mask_equals_baseline(small_grid, agent, target):
    config = SolverConfig(upsample_schedule=[], tolerance=1e-4)
    baseline = solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, small_grid, config, log_every=0)
    avoid = solve_avoid(agent, target, small_grid, config, np.zeros(small_grid.shape, dtype=bool), log_every=0)
    assert avoid.field.variant == SolverVariant.AVOID
    assert np.array_equal(avoid.field.values, baseline.field.values)
    assert np.array_equal(avoid.field.controls, baseline.field.controls)


def test_avoid_with_full_mask_is_lost_outside_agent_wez(small_grid, agent, target):
    config = SolverConfig(upsample_schedule=[], tolerance=1e-4)
    mask = np.ones(small_grid.shape, dtype=bool)
    avoid = solve_avoid(agent, target, small_grid, config, mask, log_every=0)
    assert np.all(avoid.field.values[1:-1] == config.terminal_penalty)


def test_adversarial_against_idle_target_equals_baseline(small_grid, agent, target):
    config = SolverConfig(upsample_schedule=[], tolerance=1e-4, adversarial_sigma=1.0)
    baseline = solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, small_grid, config, log_every=0)
    idle = ValueField.zeros(small_grid, target, agent, SolverVariant.BASELINE_TARGET, 1.0, 100.0)
    adversarial = solve_adversarial(agent, target, small_grid, config, idle, log_every=0)
    assert adversarial.field.variant == SolverVariant.ADVERSARIAL
    assert np.array_equal(adversarial.field.values, baseline.field.values)


def test_adversarial_rejects_wrong_target_policy(small_grid, agent, target):
    wrong = ValueField.zeros(small_grid, agent, target, SolverVariant.BASELINE_TARGET, 1.0, 100.0)
    with pytest.raises(ConfigurationError):
        solve_adversarial(agent, target, small_grid, SolverConfig(), wrong, log_every=0)


def test_adversarial_uses_reduced_noise(solved_small, agent, target):
    grid = solved_small["grid"]
    config = SolverConfig(upsample_schedule=[], tolerance=1e-4)
    result = solve_adversarial(agent, target, grid, config, swap_axes(solved_small["target"]), log_every=0)
    assert result.field.sigma == pytest.approx(0.1)
    assert np.all(result.field.values <= config.terminal_penalty)


@pytest.mark.slow
def test_scaled_baseline_far_field_resembles_pursuit(agent, target):
    grid = GridSpec(n_r=40, n_xi_a=40, n_xi_t=40, r_max=10.0)
    config = SolverConfig(upsample_schedule=[20])
    result = solve_baseline(ProblemRole.AGENT_CONTROLS, agent, target, grid, config, log_every=0)
    assert result.converged
    field = result.field

    problem = EngagementProblem.for_role(ProblemRole.AGENT_CONTROLS, agent, target, grid, config)
    kinds = node_kinds(problem)
    residual = bellman_residual(field, problem)
    assert residual[kinds == INTERIOR].max() < 10 * config.tolerance

    i_a = 0  # xi_A = -pi, the same plane as +pi
    r_nodes, xi_t_nodes = grid.r_nodes(), grid.xi_t_nodes()
    matches = total = 0
    for i_r in np.nonzero(r_nodes > 5.0)[0]:
        if kinds[i_r, i_a, 0] in (REFLECT_LOW, REFLECT_HIGH):
            continue
        for i_t, xi_t in enumerate(xi_t_nodes):
            if abs(xi_t) <= 2 * grid.dxi_t:
                continue
            total += 1
            matches += field.controls[i_r, i_a, i_t] == agent.max_turn_rate * math.copysign(1.0, xi_t)
    assert matches >= 0.8 * total

    terminal = (kinds == TERMINAL_ZERO) | (kinds == TERMINAL_M)
    assert np.all(field.controls[terminal] == 0.0)
