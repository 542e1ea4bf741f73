"""Per-zone coordinator: FIFO queue, predecessor lookup, FE/OCBF modes, exits."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import safety_filter as sf
from .config import FlowPolicy, ZoneParams
from .trajectory import (NoPositiveRoot, TrajectoryPlan, optimal_terminal_velocity,
                         plan_unconstrained, replan_on_vm_change)

log = logging.getLogger(__name__)

FE = "FE"
OCBF = "OCBF"


@dataclass
class CavState:
    id: int
    lane: str
    x: float
    v: float
    t_entry: float = 0.0
    u_last: float = 0.0
    mode: str = FE
    plan: Optional[TrajectoryPlan] = None
    fifo_index: int = 0
    fe_time: float = 0.0
    infeasible_steps: int = 0
    energy_accum: float = 0.0
    e_relax: float = 0.0
    qp_feasible: bool = True
    initial_feasibility_failed: bool = False
    fe_exits: int = 0
    vm_target: float = 0.0
    v_entry: float = 0.0
    zone_id: Optional[str] = None
    # distance travelled since network entry; positions in earlier zones derive from it
    odometer: float = 0.0
    x_prev: float = 0.0
    v_prev: float = 0.0
    zone_start: Dict[str, float] = field(default_factory=dict)

    def position_in(self, zone_id: str) -> float:
        return self.odometer - self.zone_start[zone_id]


@dataclass
class Decision:
    cav: CavState
    u: float
    e: float = 0.0
    feasible: bool = True
    mode: str = OCBF


@dataclass
class ExitRecord:
    cav_id: int
    zone: str
    lane: str
    t_entry: float
    t_exit: float
    travel_time: float
    energy: float
    obj9: float
    obj8: float
    fe_time: float
    initial_feasibility_failed: bool
    infeasible_steps: int
    v_entry: float
    v_exit: float
    vm_target: float


@dataclass
class Handoff:
    """A CAV crossing into the downstream zone at time t (interpolated).

    ``start`` is the odometer reading at the crossing; the part of the step
    after it (position, energy) already belongs to the downstream zone.
    """
    cav: CavState
    zone: str
    t: float
    v: float = 0.0
    start: float = 0.0
    energy: float = 0.0


def integrate(cav: CavState, u: float, dt: float) -> float:
    """Exact double-integrator step under constant u; speed stops at zero.

    Returns the distance travelled.
    """
    v = cav.v
    v_new = v + u * dt
    if v_new < 0.0:
        tau = v / -u if u < 0.0 else 0.0
        dx = v * tau + 0.5 * u * tau * tau
        v_new = 0.0
    else:
        dx = v * dt + 0.5 * u * dt * dt
    cav.x += dx
    cav.odometer += dx
    cav.v = v_new
    return dx


class ControlZone:
    """One merging control zone with its coordinator state."""

    def __init__(self, zid: str, params: ZoneParams, policy: Optional[FlowPolicy] = None,
                 downstream: Optional[str] = None, vm_command: Optional[float] = None):
        self.id = zid
        self.p = params
        self.policy = policy or FlowPolicy()
        self.downstream = downstream
        self.fifo: List[CavState] = []
        self.last_exited: Optional[CavState] = None
        self.last_exited_lane: Optional[str] = None  # its lane here, before any handoff
        self.vm_command = vm_command
        self.replan_stats: Counter = Counter()
        self.vm_lo, self.vm_hi = self.policy.clamp_range(params)

    # ------------------------------------------------------------ queue
    @property
    def n(self) -> int:
        return len(self.fifo)

    def position(self, cav: CavState) -> float:
        return cav.position_in(self.id)

    def target_speed(self, v_entry: float) -> float:
        if self.vm_command is not None:
            return self.vm_command
        return optimal_terminal_velocity(v_entry, self.p.L, self.p.beta, self.vm_lo, self.vm_hi)

    def admit(self, cav: CavState, t: float, handoff: Optional[Handoff] = None) -> CavState:
        """Append ``cav`` at the zone origin in FE mode and give it a reference plan.

        For a handoff, ``t`` is the crossing time and the CAV keeps the distance
        it covered past the origin during the rest of that step.
        """
        cav.zone_id = self.id
        if handoff is None:
            cav.zone_start[self.id] = cav.odometer
            v0 = cav.v
            cav.energy_accum = 0.0
        else:
            cav.zone_start[self.id] = handoff.start
            v0 = handoff.v
            cav.energy_accum = handoff.energy
        cav.x = cav.position_in(self.id)
        cav.t_entry = t
        cav.v_entry = v0
        cav.mode = FE
        cav.fe_time = 0.0
        cav.infeasible_steps = 0
        cav.initial_feasibility_failed = False
        cav.qp_feasible = True
        cav.fifo_index = len(self.fifo) + 1
        cav.vm_target = self.target_speed(v0)
        cav.plan = self._plan(v0, cav.vm_target, self.p.L, t, 0.0)
        self.fifo.append(cav)
        return cav

    def _plan(self, v0, vm, L, t, x0) -> TrajectoryPlan:
        try:
            return plan_unconstrained(v0, vm, L, self.p.beta, t, x0)
        except NoPositiveRoot:
            v = max(v0, 1.0)
            log.warning("zone %s: no terminal time for v0=%.2f vm=%.2f; constant-speed reference", self.id, v0, vm)
            return TrajectoryPlan(0.0, 0.0, v, 0.0, t, L / v, v, v, L, self.p.beta, x0)

    def predecessors(self, cav: CavState) -> Tuple[Optional[CavState], Optional[CavState]]:
        """(physical same-lane predecessor, FIFO predecessor); the FIFO one is None when redundant."""
        idx = self.fifo.index(cav)
        im1 = self.fifo[idx - 1] if idx > 0 else self.last_exited
        ip = None
        for other in reversed(self.fifo[:idx]):
            if other.lane == cav.lane:
                ip = other
                break
        if ip is None and self.last_exited is not None and self.last_exited_lane == cav.lane:
            ip = self.last_exited
        if im1 is ip:
            im1 = None
        return ip, im1

    def _neighbor(self, other: Optional[CavState]) -> Optional[sf.Neighbor]:
        if other is None:
            return None
        return sf.Neighbor(self.position(other), other.v, other.u_last)

    # ------------------------------------------------------------ control
    def _constraints(self, cav: CavState, t: float, dt: Optional[float] = None):
        p = self.p
        ip, im1 = self.predecessors(cav)
        nip, nim1 = self._neighbor(ip), self._neighbor(im1)
        _, v_ref, u_ref = sf.reference_state(cav.plan, t, cav.x, dt)
        cons = sf.build_constraints(
            cav.x, cav.v, v_ref, nip, nim1, phi=p.phi, phi2=p.phi2, delta=p.delta, k1=p.k1, k2=p.k2,
            k_v=p.k_v, v_min=p.v_min, v_max=p.v_max, eps=p.eps, u_min=p.u_min, guards=p.guards,
            dt=dt if p.sampled_cbf else None, u_abs_max=p.u_abs_max)
        barriers = sf.barrier_values(cav.x, cav.v, nip, nim1, p.phi, p.phi2, p.delta)
        qp = sf.QpInstance(u_ref, p.relax_weight, cons, (p.u_min, p.u_max))
        return qp, barriers

    def ocbf_control(self, cav: CavState, t: float, dt: Optional[float] = None) -> Decision:
        qp, _ = self._constraints(cav, t, dt)
        sol = sf.solve_qp(qp)
        if sol.feasible:
            return Decision(cav, sol.u, sol.e, True, OCBF)
        u = sf.infeasible_fallback(cav.v, self.p.u_min, self.p.k_v, self.p.v_min)
        return Decision(cav, u, 0.0, False, OCBF)

    def fe_update(self, cav: CavState, t: float, dt: float) -> Decision:
        """Keep braking until barriers are nonnegative and the QP is feasible.

        The switch to OCBF is permanent; past the FE distance limit it happens
        regardless, with the failure flagged.
        """
        qp, barriers = self._constraints(cav, t, dt)
        ready = all(b >= 0.0 for b in barriers) and sf.solve_qp(qp).feasible
        if ready or cav.x > self.p.fe_limit:
            if not ready:
                cav.initial_feasibility_failed = True
            cav.mode = OCBF
            cav.fe_exits += 1
            stale = cav.plan.vm != cav.vm_target
            if stale and self.p.L - cav.x > self.p.replan_min_distance:
                cav.plan = self._plan(cav.v, cav.vm_target, self.p.L - cav.x, t, cav.x)
            return self.ocbf_control(cav, t, dt)
        u = max(self.p.u_min, (self.p.v_min - cav.v) / dt)
        return Decision(cav, u, 0.0, True, FE)

    def decide(self, t: float, dt: float) -> List[Decision]:
        """Controls for every CAV in FIFO order; reads states, writes only mode/plan."""
        out = []
        for cav in self.fifo:
            if cav.mode == FE:
                out.append(self.fe_update(cav, t, dt))
            else:
                out.append(self.ocbf_control(cav, t, dt))
        return out

    def apply(self, decisions: List[Decision], dt: float) -> None:
        for d in decisions:
            cav = d.cav
            cav.x_prev = cav.x
            cav.v_prev = cav.v
            integrate(cav, d.u, dt)
            cav.u_last = d.u
            cav.e_relax = d.e
            cav.qp_feasible = d.feasible
            cav.energy_accum += 0.5 * d.u * d.u * dt
            if d.mode == FE:
                cav.fe_time += dt
            if not d.feasible:
                cav.infeasible_steps += 1

    # ------------------------------------------------------------ exits
    def collect_exits(self, t: float, dt: float) -> Tuple[List[ExitRecord], List[Handoff]]:
        """Remove CAVs that crossed the merging point during the step ending at t + dt."""
        records, handoffs = [], []
        while self.fifo and self.fifo[0].x >= self.p.L:
            rec, ho = self.handle_exit(self.fifo[0], t, dt)
            records.append(rec)
            if ho is not None:
                handoffs.append(ho)
        # a CAV from the other lane can reach L before the FIFO head
        for cav in [c for c in self.fifo if c.x >= self.p.L]:
            log.warning("zone %s: CAV %d crossed out of FIFO order", self.id, cav.id)
            rec, ho = self.handle_exit(cav, t, dt)
            records.append(rec)
            if ho is not None:
                handoffs.append(ho)
        return records, handoffs

    def handle_exit(self, cav: CavState, t: float, dt: float) -> Tuple[ExitRecord, Optional[Handoff]]:
        p = self.p
        x_prev = cav.x_prev
        span = cav.x - x_prev
        frac = (p.L - x_prev) / span if span > 0 else 1.0
        frac = min(max(frac, 0.0), 1.0)
        t_cross = t + frac * dt
        # energy of the overshoot part of the last step is not spent inside the zone
        carry = (1.0 - frac) * 0.5 * cav.u_last ** 2 * dt
        energy = cav.energy_accum - carry
        tt = t_cross - cav.t_entry
        v_prev = cav.v_prev
        v_cross = v_prev + frac * (cav.v - v_prev)
        rec = ExitRecord(
            cav_id=cav.id, zone=self.id, lane=cav.lane, t_entry=cav.t_entry, t_exit=t_cross,
            travel_time=tt, energy=energy, obj9=p.beta * tt + energy,
            obj8=p.alpha * tt + (1.0 - p.alpha) * energy / (0.5 * p.u_abs_max ** 2),
            fe_time=cav.fe_time, initial_feasibility_failed=cav.initial_feasibility_failed,
            infeasible_steps=cav.infeasible_steps, v_entry=cav.v_entry, v_exit=v_cross,
            vm_target=cav.vm_target)
        self.fifo.remove(cav)
        for k, other in enumerate(self.fifo):
            other.fifo_index = k + 1
        # the zone keeps watching the CAV that just left (index 0 in the FIFO convention)
        self.last_exited = cav
        self.last_exited_lane = cav.lane
        cav.zone_id = None
        handoff = None
        if self.downstream is not None:
            handoff = Handoff(cav, self.downstream, t_cross, v_cross, cav.zone_start[self.id] + p.L, carry)
        return rec, handoff

    # ------------------------------------------------------------ flow control hook
    def set_vm_command(self, vm: Optional[float], t: float) -> bool:
        """Install a new terminal-speed command; replans in-zone CAVs if it changed."""
        old = self.vm_command
        if vm is None or (old is not None and abs(vm - old) <= 1e-9):
            return False
        self.vm_command = vm
        for cav in self.fifo:
            self.replan(cav, vm, t)
        return True

    def replan(self, cav: CavState, vm: float, t: float) -> None:
        cav.vm_target = vm
        if cav.mode == FE or self.p.L - cav.x <= self.p.replan_min_distance:
            return
        try:
            cav.plan = replan_on_vm_change(cav.v, cav.x, t, cav.plan, vm, self.p.L,
                                           self.p.perturb_threshold, self.replan_stats)
        except NoPositiveRoot:
            log.warning("zone %s: replan failed for CAV %d", self.id, cav.id)


def coast(cav: CavState, dt: float) -> None:
    """Advance a CAV that has left the network at constant speed."""
    cav.x_prev = cav.x
    integrate(cav, 0.0, dt)
    cav.u_last = 0.0


def step_zone(zone: ControlZone, t: float, dt: float):
    """One standalone step of a single zone: decide, integrate, exit.

    Returns (decisions, exit records, handoffs).
    """
    decisions = zone.decide(t, dt)
    zone.apply(decisions, dt)
    ghost = zone.last_exited
    if ghost is not None and ghost.zone_id is None:
        coast(ghost, dt)
    records, handoffs = zone.collect_exits(t, dt)
    return decisions, records, handoffs
