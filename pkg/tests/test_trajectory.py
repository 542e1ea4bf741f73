import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mczone.trajectory import (CostWeights, DegenerateDerivative, InvalidHorizon, NoPositiveRoot,
                               TrajectoryPlan, eval_plan, optimal_terminal_velocity, perturb_terminal_time,
                               plan_unconstrained, replan_on_vm_change, solve_terminal_time,
                               terminal_time_residual, trajectory_params, unconstrained_cost)

import oracles

BETA = CostWeights(0.0625, 4.0).beta


def rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


def test_beta_from_alpha():
    assert BETA == pytest.approx(0.0625 * 16 / (2 * 0.9375))
    assert CostWeights(0.25, 4.0).beta == pytest.approx(8.0 / 3.0)
    assert CostWeights.from_bounds(0.25, -4.0, 3.0).beta == CostWeights(0.25, 4.0).beta


def test_constant_speed_horizon():
    assert solve_terminal_time(20, 20, 200, 0) == pytest.approx(10.0, abs=1e-12)


def test_beta_zero_matches_quadratic_formula():
    tm = solve_terminal_time(20, 10, 200, 0)
    assert tm == pytest.approx(oracles.exact_quadratic_root(20, 10, 200), rel=1e-12)
    assert tm == pytest.approx(13.128, abs=1e-3)


def test_against_five_equation_newton():
    plan = plan_unconstrained(18, 15, 200, BETA)
    a, b, c, d, tm = oracles.newton_five(18, 15, 200, BETA)
    assert rel(plan.tm, tm) < 1e-9
    for got, want in zip((plan.a, plan.b, plan.c, plan.d), (a, b, c, d)):
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


def test_no_root_when_starting_from_rest_without_time_weight():
    with pytest.raises(NoPositiveRoot):
        solve_terminal_time(0.0, 0.0, 200, 0.0)


def test_params_examples():
    assert trajectory_params(20, 20, 200, 10) == pytest.approx((0, 0, 20, 0), abs=1e-12)
    a, b, c, d = trajectory_params(0, 0, 200, 10)
    assert (a, b, c, d) == pytest.approx((-2.4, 12, 0, 0))
    plan = TrajectoryPlan(a, b, c, d, 0.0, 10.0, 0.0, 0.0, 200.0, 0.0)
    assert eval_plan(plan, 10.0) == pytest.approx((200.0, 0.0, -12.0))
    with pytest.raises(InvalidHorizon):
        trajectory_params(10, 10, 200, 0.0)


def test_eval_and_shift():
    plan = plan_unconstrained(20, 20, 200, 0, t0=5)
    assert plan.t_exit == pytest.approx(15)
    assert eval_plan(plan, 9.0) == pytest.approx((80, 20, 0))
    p0 = plan_unconstrained(17, 14, 200, BETA)
    p7 = plan_unconstrained(17, 14, 200, BETA, t0=7)
    for s in np.linspace(0, p0.tm, 13):
        assert eval_plan(p7, 7 + s) == pytest.approx(eval_plan(p0, s), abs=1e-12)
    # clamped outside the horizon
    assert eval_plan(p0, -3) == eval_plan(p0, 0)
    assert eval_plan(p0, p0.tm + 50)[:2] == pytest.approx((200, 14))


speeds = st.floats(1.0, 30.0)


@settings(max_examples=300, deadline=None)
@given(speeds, speeds, st.floats(50.0, 400.0), st.floats(0.0, 2.0))
def test_plan_satisfies_boundary_conditions(v0, vm, L, beta):
    plan = plan_unconstrained(v0, vm, L, beta)
    assert plan.tm > 0
    scale = (v0, vm, 1.0, L, max(beta, 1.0))
    for r, s in zip(plan.residuals(), scale):
        assert abs(r) <= 1e-8 * max(1.0, s)
    f = terminal_time_residual(plan.tm, v0, vm, L, beta)
    assert abs(f) <= 1e-9 * 12 * L * max(v0, 1)


@settings(max_examples=100, deadline=None)
@given(speeds, speeds, st.floats(50.0, 400.0), st.floats(0.0, 2.0))
def test_cost_closed_form_vs_quadrature(v0, vm, L, beta):
    plan = plan_unconstrained(v0, vm, L, beta)
    want = oracles.trapezoid_cost(plan.a, plan.b, plan.tm, beta)
    assert unconstrained_cost(v0, vm, L, beta) == pytest.approx(want, rel=1e-6, abs=1e-9)


def test_cost_examples():
    assert unconstrained_cost(20, 20, 200, 0) == pytest.approx(0.0, abs=1e-12)
    # cruising is admissible, so the optimum can only be cheaper
    assert unconstrained_cost(20, 20, 200, BETA) <= BETA * 10
    assert min(unconstrained_cost(20, v, 200, 0) for v in (15, 19.5, 20.5, 25)) > 0


def test_perturbation_zero_step():
    tm = solve_terminal_time(20, 10, 200, 0)
    assert perturb_terminal_time(tm, 20, 10, 0.0, 200, 0) == tm


def test_perturbation_beta_zero_example():
    tm = solve_terminal_time(20, 10, 200, 0)
    tm_new = perturb_terminal_time(tm, 20, 10, 0.5, 200, 0)
    exact = oracles.exact_quadratic_root(20, 10.5, 200)
    assert abs(tm_new - exact) <= 0.01 * 0.5


def test_perturbation_degenerate_derivative():
    # choose L so the derivative vanishes at the given tm
    tm, v0, vm = 5.0, 0.0, 0.0
    L = (3 * 0.0 * tm * tm + (4 * v0 + 2 * vm) * tm + 6 * v0 * vm + 6 * v0 * v0) / 3.0
    with pytest.raises(DegenerateDerivative):
        perturb_terminal_time(tm, v0, vm, 0.0, L, 0.0)


def test_perturbation_error_shrinks_quadratically():
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(200):
        v0, vm = rng.uniform(10, 25, 2)
        tm = solve_terminal_time(v0, vm, 200, BETA)
        errs = []
        for dv in (0.5, 0.25):
            exact = solve_terminal_time(v0, vm + dv, 200, BETA)
            errs.append(abs(perturb_terminal_time(tm, v0, vm, dv, 200, BETA) - exact))
        if errs[1] > 1e-12:
            ratios.append(errs[0] / errs[1])
    assert np.median(ratios) >= 3.5


def test_replan_unchanged_vm_from_mid_zone():
    plan = plan_unconstrained(16, 15, 200, BETA)
    t = 3.0
    x, v, _ = eval_plan(plan, t)
    new = replan_on_vm_change(v, x, t, plan, 15.0, 200)
    assert new.t0 == t and new.v0 == pytest.approx(v)
    assert new.L == pytest.approx(200 - x)
    assert max(abs(r) for r in new.residuals()) < 1e-6
    assert new.t_exit == pytest.approx(plan.t_exit, abs=0.05)


def test_replan_mid_zone_small_change():
    stats = Counter()
    plan = plan_unconstrained(16, 15, 100, BETA, t0=0.0, x0=100.0)
    new = replan_on_vm_change(16.0, 100.0, 0.0, plan, 14.0, 200, stats=stats)
    assert new.L == 100 and new.v0 == 16 and new.vm == 14
    x_end, v_end, _ = eval_plan(new, new.t_exit)
    assert abs(x_end - 100) <= 1e-6 and abs(v_end - 14) <= 1e-6
    ref = plan_unconstrained(16, 14, 100, BETA)
    assert new.tm == pytest.approx(ref.tm, abs=0.05)
    assert stats["perturbed"] == 1


def test_replan_large_change_takes_exact_path():
    stats = Counter()
    plan = plan_unconstrained(16, 15, 200, BETA)
    new = replan_on_vm_change(16.0, 0.0, 0.0, plan, 17.0, 200, threshold=1.0, stats=stats)
    assert stats == Counter(exact=1)
    assert new.tm == pytest.approx(solve_terminal_time(16, 17, 200, BETA))


def test_optimal_terminal_velocity():
    assert optimal_terminal_velocity(17.0, 200, 0.0, 0, 30) == pytest.approx(17.0, abs=2e-3)
    got = optimal_terminal_velocity(18.0, 200, BETA, 0, 30)
    assert abs(got - oracles.grid_argmin_vm(18.0, 200, BETA, 0.01, 30)) <= 0.02
    assert optimal_terminal_velocity(15, 200, 2.0, 0, 30) >= optimal_terminal_velocity(15, 200, 0.1, 0, 30)


def test_optimal_terminal_velocity_hits_bound():
    # a heavy time weight pushes the optimum to the top of the range
    assert optimal_terminal_velocity(15, 200, 50.0, 1, 20) == pytest.approx(20.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(5.0, 25.0), st.floats(0.0, 3.0))
def test_optimal_terminal_velocity_beats_neighbours(v0, beta):
    vm = optimal_terminal_velocity(v0, 200, beta, 1.0, 30.0)
    J = unconstrained_cost(v0, vm, 200, beta)
    for dv in (-0.05, 0.05):
        if 1.0 <= vm + dv <= 30.0:
            assert J <= unconstrained_cost(v0, vm + dv, 200, beta) + 1e-9
