"""Event-driven terminal-speed commands for coordinating adjacent zones."""
from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import (AVG_CRITICAL, AVG_OPTIMAL, CRITICAL_FEEDBACK, FEEDBACK, FIXED, NONE,
                     FlowPolicy)
from .control_zone import ControlZone
from .trajectory import optimal_terminal_velocity


def count_critical(zone: ControlZone, l: float) -> int:
    """Number of CAVs in the first ``l`` metres of ``zone``."""
    if not 0.0 < l <= zone.p.L:
        raise ValueError(f"critical length must lie in (0, {zone.p.L}], got {l}")
    return sum(1 for c in zone.fifo if c.x <= l)


def critical_mean_speed(zone: ControlZone, l: float) -> Optional[float]:
    speeds = [c.v for c in zone.fifo if c.x <= l]
    if not speeds:
        return None
    return math.fsum(speeds) / len(speeds)


def compute_vb_avg_optimal(entry_speeds: Iterable[float], L: float, beta: float,
                           vmin: float, vmax: float) -> float:
    speeds = list(entry_speeds)
    if not speeds:
        raise ValueError("need at least one entry speed sample")
    return math.fsum(optimal_terminal_velocity(v, L, beta, vmin, vmax) for v in speeds) / len(speeds)


def entry_speed_samples(low: float, high: float, n: int = 11) -> Sequence[float]:
    """Evenly spread entry speeds covering an entry distribution's support."""
    if high <= low:
        return [low]
    return list(np.linspace(low, high, n))


def command(policy: FlowPolicy, downstream: Optional[ControlZone], vm_lo: float, vm_hi: float,
            vb_fallback: float) -> Optional[float]:
    """Terminal-speed command from the current downstream occupancy.

    ``vb_fallback`` stands in for a baseline that cannot be evaluated, i.e. an
    AVG_CRITICAL baseline while the downstream critical segment is empty.
    Returns None for the NONE policy.
    """
    kind = policy.kind
    if kind == NONE:
        return None
    if kind == FIXED or policy.k == 0.0 and not isinstance(policy.v_b, str):
        vm = vb_fallback if isinstance(policy.v_b, str) else policy.v_b
        return min(max(vm, vm_lo), vm_hi)
    if downstream is None:
        n, v_bar = 0, None
    elif kind == FEEDBACK:
        n = downstream.n
        v_bar = critical_mean_speed(downstream, downstream.p.L)
    else:
        l = policy.l_frac * downstream.p.L
        n = count_critical(downstream, l)
        v_bar = critical_mean_speed(downstream, l)
    if policy.v_b == AVG_CRITICAL:
        if v_bar is None:
            vm = vb_fallback
        else:
            vm = v_bar + policy.v_b_offset - policy.k * n
    elif policy.v_b == AVG_OPTIMAL:
        vm = vb_fallback + policy.v_b_offset - policy.k * n
    else:
        vm = policy.v_b + policy.v_b_offset - policy.k * n
    return min(max(vm, vm_lo), vm_hi)


class FlowController:
    """Upper-level controller attached to one zone."""

    def __init__(self, zone: ControlZone, downstream: Optional[ControlZone],
                 entry_speed_range=(15.0, 20.0)):
        self.zone = zone
        self.downstream = downstream
        self.policy = zone.policy
        p = zone.p
        self.vb_fallback = float("nan")
        if self.policy.kind != NONE:
            if isinstance(self.policy.v_b, str):
                samples = entry_speed_samples(*entry_speed_range)
                self.vb_fallback = compute_vb_avg_optimal(samples, p.L, p.beta, zone.vm_lo, zone.vm_hi)
            else:
                self.vb_fallback = float(self.policy.v_b)
        self.history = []  # (t, vm)

    def initialize(self, t: float = 0.0) -> None:
        vm = command(self.policy, self.downstream, self.zone.vm_lo, self.zone.vm_hi, self.vb_fallback)
        if vm is not None:
            self.zone.vm_command = vm
            self.history.append((t, vm))

    def on_event(self, t: float) -> Optional[float]:
        """Recompute the command after an arrival/departure; broadcast replans if it moved."""
        vm = command(self.policy, self.downstream, self.zone.vm_lo, self.zone.vm_hi, self.vb_fallback)
        if self.zone.set_vm_command(vm, t):
            self.history.append((t, vm))
        return self.zone.vm_command
