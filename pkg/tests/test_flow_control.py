import numpy as np
import pytest

from mczone.config import (AVG_CRITICAL, AVG_OPTIMAL, CRITICAL_FEEDBACK, FEEDBACK, FIXED, MAIN, NONE,
                           ConfigError, FlowPolicy, ZoneParams)
from mczone.control_zone import CavState, ControlZone
from mczone.flow_control import (FlowController, command, compute_vb_avg_optimal, count_critical,
                                 critical_mean_speed)
from mczone.trajectory import optimal_terminal_velocity

import oracles


def zone_with(xs, speeds=None, policy=None, zid="z"):
    z = ControlZone(zid, ZoneParams(), policy or FlowPolicy(), vm_command=18.0)
    for k, x in enumerate(xs):
        cav = z.admit(CavState(k, MAIN, 0.0, 18.0 if speeds is None else speeds[k]), 0.0)
        cav.odometer += x
        cav.x = x
    return z


def test_count_critical():
    assert count_critical(zone_with([]), 50) == 0
    assert count_critical(zone_with([10, 40, 120]), 50) == 2
    z = zone_with([10, 40, 120, 199])
    assert count_critical(z, z.p.L) == z.n
    with pytest.raises(ValueError):
        count_critical(z, 0.0)


def test_critical_mean_speed():
    z = zone_with([10, 30, 80], [14.0, 18.0, 25.0])
    assert critical_mean_speed(z, 50) == pytest.approx(16.0)
    assert critical_mean_speed(z, 5) is None


def test_zero_gain_is_fixed():
    down = zone_with([10, 20, 30])
    pol = FlowPolicy(FEEDBACK, v_b=17.0, k=0.0)
    assert command(pol, down, 1.0, 30.0, 17.0) == 17.0


def test_feedback_example():
    down = zone_with([5, 20, 60, 90, 130, 180])
    assert command(FlowPolicy(FEEDBACK, v_b=18.0, k=0.5), down, 1.0, 30.0, 18.0) == pytest.approx(15.0)


def test_critical_average_speed_example():
    # four CAVs in the first quarter averaging 16 m/s, one further in
    down = zone_with([5, 15, 30, 45, 150], [15, 17, 16, 16, 30])
    pol = FlowPolicy(CRITICAL_FEEDBACK, v_b=AVG_CRITICAL, v_b_offset=2.0, k=0.5, l_frac=0.25)
    assert command(pol, down, 1.0, 30.0, 18.0) == pytest.approx(16.0)


def test_critical_average_speed_falls_back_when_empty():
    pol = FlowPolicy(CRITICAL_FEEDBACK, v_b=AVG_CRITICAL, v_b_offset=2.0, k=0.5)
    assert command(pol, zone_with([]), 1.0, 30.0, 17.3) == 17.3


def test_none_and_fixed():
    assert command(FlowPolicy(NONE), zone_with([1]), 1.0, 30.0, 0.0) is None
    assert command(FlowPolicy(FIXED, v_b=12.0), zone_with([1, 2, 3]), 1.0, 30.0, 12.0) == 12.0


def test_clamp():
    down = zone_with([float(x) for x in range(0, 200, 5)])
    pol = FlowPolicy(FEEDBACK, v_b=18.0, k=1.0, vm_min=5.0)
    assert command(pol, down, 5.0, 30.0, 18.0) == 5.0
    assert command(FlowPolicy(FIXED, v_b=50.0), None, 1.0, 30.0, 50.0) == 30.0


def test_policy_validation():
    with pytest.raises(ConfigError):
        FlowPolicy("BANG_BANG")
    with pytest.raises(ConfigError):
        FlowPolicy(FEEDBACK, k=-1)
    with pytest.raises(ConfigError):
        FlowPolicy(FEEDBACK, l_frac=0.0)
    with pytest.raises(ConfigError):
        FlowPolicy(FIXED, vm_min=20, vm_max=10)


def test_avg_optimal_baseline():
    L, beta = 200.0, ZoneParams().beta
    one = optimal_terminal_velocity(17.0, L, beta, 1.0, 30.0)
    assert compute_vb_avg_optimal([17.0, 17.0], L, beta, 1.0, 30.0) == pytest.approx(one)
    assert compute_vb_avg_optimal([12.0, 15.0, 21.0], L, 0.0, 1.0, 30.0) == pytest.approx(16.0, abs=2e-3)
    want = np.mean([oracles.grid_argmin_vm(v, L, beta, 1.0, 30.0) for v in (10.0, 20.0)])
    assert compute_vb_avg_optimal([10.0, 20.0], L, beta, 1.0, 30.0) == pytest.approx(want, abs=0.02)
    with pytest.raises(ValueError):
        compute_vb_avg_optimal([], L, beta, 1.0, 30.0)


def test_controller_replans_only_on_change():
    up = zone_with([20.0, 80.0], policy=FlowPolicy(FEEDBACK, v_b=18.0, k=0.5), zid="up")
    down = zone_with([10.0], zid="down")
    ctl = FlowController(up, down)
    ctl.initialize(0.0)
    assert up.vm_command == 17.5 and ctl.history == [(0.0, 17.5)]
    assert ctl.on_event(1.0) == 17.5
    assert len(ctl.history) == 1
    down.admit(CavState(9, MAIN, 0.0, 18.0), 2.0)
    assert ctl.on_event(2.0) == 17.0
    assert ctl.history[-1] == (2.0, 17.0)
    for cav in up.fifo:
        assert cav.vm_target == 17.0
        if cav.mode == "OCBF":
            assert cav.plan.vm == 17.0


def test_controller_avg_optimal_baseline():
    up = zone_with([], policy=FlowPolicy(FIXED, v_b=AVG_OPTIMAL))
    ctl = FlowController(up, None, entry_speed_range=(15.0, 20.0))
    ctl.initialize()
    assert 15.0 <= up.vm_command <= 20.0
