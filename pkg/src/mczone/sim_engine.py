"""Time-stepped simulation of a network of control zones."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

import numpy as np

from .config import MAIN, ConfigError, RoadSpec, ScenarioConfig, SpeedDist
from .control_zone import (FE, OCBF, CavState, ControlZone, ExitRecord, coast)
from .flow_control import FlowController
from .safety_filter import rear_end_barrier

log = logging.getLogger(__name__)

TRACE_HEADER = ("t", "zone", "lane", "fifo_index", "x", "v", "u", "e_relax", "mode", "qp_feasible", "cav")
CAV_HEADER = tuple(ExitRecord.__dataclass_fields__)


@dataclass
class Arrival:
    t: float
    v: float
    road: int


class ArrivalProcess:
    """Arrival times and entry speeds for one external road, drawn up front."""

    def __init__(self, road: RoadSpec, rng: np.random.Generator, speed: SpeedDist,
                 deterministic: bool = False, index: int = 0, horizon: float = math.inf):
        self.road = road
        self.index = index
        times = []
        for a, b, rate in road.schedule:
            if rate <= 0 or b <= a:
                continue
            if deterministic:
                headway = 3600.0 / rate
                k = 0
                while a + k * headway < b - 1e-9:
                    times.append(a + k * headway)
                    k += 1
            else:
                t = a
                lam = rate / 3600.0
                while True:
                    t += rng.exponential(1.0 / lam)
                    if t >= b:
                        break
                    times.append(t)
        times = sorted(x for x in times if x < horizon)
        if speed.kind == "constant":
            speeds = [speed.low] * len(times)
        else:
            speeds = list(rng.uniform(speed.low, speed.high, size=len(times)))
        self.pending = deque(Arrival(t, float(v), index) for t, v in zip(times, speeds))
        self.total = len(times)

    def generate_arrivals(self, t: float, dt: float) -> List[Arrival]:
        """Arrivals with times in [t, t + dt)."""
        out = []
        while self.pending and self.pending[0].t < t + dt - 1e-12:
            out.append(self.pending.popleft())
        return out


def hold_or_admit(zone: ControlZone, lane: str, v: float) -> bool:
    """True when a CAV placed at the origin of ``lane`` at speed v keeps b1 >= 0."""
    leader = None
    for other in reversed(zone.fifo):
        if other.lane == lane:
            leader = other
            break
    if leader is None and zone.last_exited is not None and zone.last_exited_lane == lane:
        leader = zone.last_exited
    if leader is None:
        return True
    return rear_end_barrier(0.0, v, zone.position(leader), zone.p.phi, zone.p.delta) >= 0.0


@dataclass
class ZoneSummary:
    zone: str
    n: int = 0
    t: float = math.nan
    e: float = math.nan
    obj: float = math.nan
    obj8: float = math.nan
    fem_count: int = 0
    fem_time: float = 0.0
    fem_time_all: float = 0.0
    infeasible_count: int = 0
    init_fail_count: int = 0


@dataclass
class MetricsRecord:
    cavs: List[ExitRecord]
    zones: Dict[str, ZoneSummary]
    total_obj: float
    total_obj8: float
    arrivals: int = 0
    admitted: int = 0
    held_end: int = 0
    in_system_end: int = 0
    exited_network: int = 0

    def to_dict(self) -> dict:
        return {
            "zones": {k: asdict(v) for k, v in self.zones.items()},
            "total_obj": self.total_obj,
            "total_obj8": self.total_obj8,
            "arrivals": self.arrivals,
            "admitted": self.admitted,
            "held_end": self.held_end,
            "in_system_end": self.in_system_end,
            "exited_network": self.exited_network,
        }


def summarize(records: List[ExitRecord], zone_ids: List[str]) -> Tuple[Dict[str, ZoneSummary], float, float]:
    by_zone: Dict[str, List[ExitRecord]] = defaultdict(list)
    for r in records:
        by_zone[r.zone].append(r)
    out = {}
    for zid in zone_ids:
        rs = by_zone.get(zid, [])
        s = ZoneSummary(zid, len(rs))
        if rs:
            s.t = float(np.mean([r.travel_time for r in rs]))
            s.e = float(np.mean([r.energy for r in rs]))
            s.obj = float(np.mean([r.obj9 for r in rs]))
            s.obj8 = float(np.mean([r.obj8 for r in rs]))
            fem = [r.fe_time for r in rs if r.fe_time > 0]
            s.fem_count = len(fem)
            s.fem_time = float(np.mean(fem)) if fem else 0.0
            s.fem_time_all = float(np.mean([r.fe_time for r in rs]))
            s.infeasible_count = sum(1 for r in rs if r.infeasible_steps > 0)
            s.init_fail_count = sum(1 for r in rs if r.initial_feasibility_failed)
        out[zid] = s
    total = sum(s.obj for s in out.values() if s.n)
    total8 = sum(s.obj8 for s in out.values() if s.n)
    return out, total, total8


@dataclass
class RunResult:
    metrics: MetricsRecord
    events: List[tuple] = field(default_factory=list)   # (t, kind, zone, cav)
    trace: List[tuple] = field(default_factory=list)
    vm_history: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    params: Dict[str, dict] = field(default_factory=dict)  # zone -> phi, delta, L, downstream
    conservation_ok: bool = True

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            w.writerows(self.trace)

    def write_cavs(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CAV_HEADER)
            for r in self.metrics.cavs:
                w.writerow([getattr(r, k) for k in CAV_HEADER])


class Simulation:
    def __init__(self, cfg: ScenarioConfig, record_trace: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.record_trace = record_trace
        self.order = cfg.topological_order()
        self.zones: Dict[str, ControlZone] = {}
        for zs in cfg.zones:
            self.zones[zs.id] = ControlZone(zs.id, zs.params, zs.policy, zs.downstream)
        speed_range = (cfg.entry_speed.low, cfg.entry_speed.high)
        self.controllers = {
            zid: FlowController(z, self.zones.get(z.downstream) if z.downstream else None, speed_range)
            for zid, z in self.zones.items()
        }
        # zones whose commands react to membership changes in a given zone
        self.watchers: Dict[str, List[str]] = defaultdict(list)
        for zid, z in self.zones.items():
            self.watchers[zid].append(zid)
            if z.downstream:
                self.watchers[z.downstream].append(zid)
        ss = np.random.SeedSequence(cfg.seed)
        streams = ss.spawn(len(cfg.roads))
        self.arrivals = [ArrivalProcess(r, np.random.default_rng(s), cfg.entry_speed,
                                        cfg.deterministic_arrivals, k, cfg.duration)
                         for k, (r, s) in enumerate(zip(cfg.roads, streams))]
        self.held: List[Deque[Arrival]] = [deque() for _ in cfg.roads]
        self.next_id = 0
        self.records: List[ExitRecord] = []
        self.events: List[tuple] = []
        self.trace: List[tuple] = []
        self.admitted = 0
        self.exited_network = 0
        self.conservation_ok = True

    def _count_in_system(self) -> int:
        return sum(z.n for z in self.zones.values())

    def run(self) -> RunResult:
        cfg = self.cfg
        dt = cfg.dt
        for c in self.controllers.values():
            c.initialize(0.0)
        n_steps = int(round((cfg.duration + cfg.drain) / dt))
        n_arrive_steps = int(math.ceil(cfg.duration / dt - 1e-9))
        total_arrivals = sum(a.total for a in self.arrivals)
        for k in range(n_steps):
            t = k * dt
            if k >= n_arrive_steps and not any(self.held) and self._count_in_system() == 0:
                break
            changed = set()
            # arrivals and admissions at the zone origins
            for proc in self.arrivals:
                for arr in proc.generate_arrivals(t, dt):
                    self.held[arr.road].append(arr)
            for q, road in zip(self.held, cfg.roads):
                zone = self.zones[road.zone]
                while q and hold_or_admit(zone, road.lane, q[0].v):
                    arr = q.popleft()
                    cav = CavState(self.next_id, road.lane, 0.0, arr.v)
                    self.next_id += 1
                    zone.admit(cav, t)
                    self.admitted += 1
                    self.events.append((t, "enter", zone.id, cav.id))
                    changed.add(zone.id)
            if changed:
                self._dispatch(changed, t)
                changed = set()
            # controls on a frozen snapshot, then integrate
            decisions = {zid: self.zones[zid].decide(t, dt) for zid in self.order}
            if self.record_trace:
                for zid in self.order:
                    for d in decisions[zid]:
                        c = d.cav
                        self.trace.append((round(t, 10), zid, c.lane, c.fifo_index, c.x, c.v, d.u,
                                           d.e, d.mode, d.feasible, c.id))
            for zid in self.order:
                self.zones[zid].apply(decisions[zid], dt)
            ghosts = {}
            for z in self.zones.values():
                g = z.last_exited
                if g is not None and g.zone_id is None:
                    ghosts[g.id] = g
            for g in ghosts.values():
                coast(g, dt)
            # exits and handoffs
            for zid in self.order:
                zone = self.zones[zid]
                recs, handoffs = zone.collect_exits(t, dt)
                for r in recs:
                    self.records.append(r)
                    self.events.append((r.t_exit, "exit", zid, r.cav_id))
                    changed.add(zid)
                for h in handoffs:
                    h.cav.lane = MAIN  # exits feed the downstream main road
                    self.zones[h.zone].admit(h.cav, h.t, h)
                    self.events.append((h.t, "enter", h.zone, h.cav.id))
                    changed.add(h.zone)
                if zone.downstream is None:
                    self.exited_network += len(recs)
            if changed:
                self._dispatch(changed, t + dt)
            held = sum(len(q) for q in self.held)
            if self.admitted != self.exited_network + self._count_in_system():
                self.conservation_ok = False
            if total_arrivals - sum(len(a.pending) for a in self.arrivals) != self.admitted + held:
                self.conservation_ok = False
        zone_ids = [z.id for z in cfg.zones]
        summary, total, total8 = summarize(self.records, zone_ids)
        metrics = MetricsRecord(
            self.records, summary, total, total8, arrivals=total_arrivals, admitted=self.admitted,
            held_end=sum(len(q) for q in self.held), in_system_end=self._count_in_system(),
            exited_network=self.exited_network)
        return RunResult(
            metrics, self.events, self.trace,
            {zid: list(c.history) for zid, c in self.controllers.items()},
            {zid: {"phi": z.p.phi, "delta": z.p.delta, "L": z.p.L, "downstream": z.downstream}
             for zid, z in self.zones.items()},
            self.conservation_ok)

    def _dispatch(self, changed, t):
        notified = []
        for zid in changed:
            for w in self.watchers[zid]:
                if w not in notified:
                    notified.append(w)
        for w in self.order:
            if w in notified:
                before = self.zones[w].vm_command
                after = self.controllers[w].on_event(t)
                if after != before:
                    self.events.append((t, "vm", w, after))


def run(cfg: ScenarioConfig, record_trace: bool = False) -> RunResult:
    if not isinstance(cfg, ScenarioConfig):
        raise ConfigError("run() expects a ScenarioConfig")
    return Simulation(cfg, record_trace).run()


def exponential_smoothing(values, factor: float = 0.1) -> List[float]:
    """Display-only smoothing of a per-CAV series."""
    out, s = [], None
    for v in values:
        s = v if s is None else factor * v + (1.0 - factor) * s
        out.append(s)
    return out


def audit_trace(trace: List[tuple], zones: Dict[str, dict], tol: float = 1e-6,
                merge_tol: float = 1e-3) -> List[tuple]:
    """Re-check the safety constraints on a recorded trace, independently of the controller.

    ``zones`` maps zone id -> {"phi", "delta", "L", "downstream"} (RunResult.params).

    Rear-end: at every step, consecutive same-lane CAVs sorted by position; the
    follower must be in OCBF mode with a feasible QP for the pair to count.

    Merge: for each zone, CAVs are put in crossing order from their last row
    there. The crossing instant is recovered from that row by exact
    integration of the recorded control, the FIFO predecessor is propagated
    to the same instant, and the gap must cover phi * v + delta. Pairs on the
    same lane, or whose predecessor has left the traced network, are skipped.

    Returns (t, zone, kind, follower, leader, slack) tuples.
    """
    X, V, U, MODE, FEAS, CAV = 4, 5, 6, 8, 9, 10
    viol = []
    by_step = defaultdict(list)
    at = {}
    last = {}
    first_ocbf = {}
    first_bad = {}  # first OCBF step with an infeasible QP, per (zone, cav)
    for row in trace:
        t, zone = row[0], row[1]
        by_step[(t, zone, row[2])].append(row)
        at[(t, row[CAV])] = row
        key = (zone, row[CAV])
        if key not in last or last[key][0] < t:
            last[key] = row
        if row[MODE] == OCBF:
            if key not in first_ocbf or first_ocbf[key][0] > t:
                first_ocbf[key] = row
            if not row[FEAS] and (key not in first_bad or first_bad[key] > t):
                first_bad[key] = t

    def clean(zone, cav, t):
        """OCBF with feasible QPs from the FE exit up to time t."""
        return first_bad.get((zone, cav), math.inf) > t

    entry_ok = {}
    for (t, zone, lane), rows in by_step.items():
        p = zones[zone]
        rows.sort(key=lambda r: r[X])
        for f, lead in zip(rows[:-1], rows[1:]):
            if f[MODE] != OCBF or not clean(zone, f[CAV], t):
                continue
            slack = (lead[X] - f[X]) - p["phi"] * f[V] - p["delta"]
            key = (zone, f[CAV])
            if first_ocbf[key][0] == t:
                entry_ok[key] = slack >= -tol
            if slack < -tol and entry_ok.get(key, True):
                viol.append((t, zone, "rear_end", f[CAV], lead[CAV], slack))

    def crossing(row, L):
        x, v, u = row[X], row[V], row[U]
        # smallest tau >= 0 with x + v tau + u tau^2 / 2 = L
        if abs(u) < 1e-12:
            return (L - x) / v if v > 0 else math.inf
        disc = v * v + 2.0 * u * (L - x)
        if disc < 0:
            return math.inf
        r = [(-v + sgn * math.sqrt(disc)) / u for sgn in (1.0, -1.0)]
        r = [z for z in r if z >= -1e-12]
        return min(r) if r else math.inf

    def advance(row, tau):
        u = row[U]
        v_end = row[V] + u * tau
        if v_end < 0:  # stopped inside the interval
            tau_stop = -row[V] / u
            return row[X] + row[V] * tau_stop + 0.5 * u * tau_stop ** 2
        return row[X] + row[V] * tau + 0.5 * u * tau * tau

    per_zone = defaultdict(list)
    for (zone, cav), row in last.items():
        per_zone[zone].append(row)
    for zone, rows in per_zone.items():
        p = zones[zone]
        L = p["L"]
        rows.sort(key=lambda r: (r[0], -r[X]))
        for prev, cur in zip(rows[:-1], rows[1:]):
            if cur[MODE] != OCBF or not clean(zone, cur[CAV], cur[0]) or cur[2] == prev[2]:
                continue
            # a CAV that left FE mode with the merge barrier already violated failed
            # its initial feasibility; that is reported by the zone, not here
            first = first_ocbf[(zone, cur[CAV])]
            lead0 = at.get((first[0], prev[CAV]))
            if lead0 is not None:
                off0 = 0.0 if lead0[1] == zone else L if lead0[1] == p["downstream"] else None
                if off0 is not None:
                    b2 = (off0 + lead0[X] - first[X]) - p["phi"] / L * first[X] * first[V] - p["delta"]
                    if b2 < -merge_tol:
                        continue
            tau = crossing(cur, L)
            if not tau < math.inf:
                continue  # never crossed (run ended)
            lead = at.get((cur[0], prev[CAV]))
            if lead is None:
                continue
            if lead[1] == zone:
                offset = 0.0
            elif lead[1] == p["downstream"]:
                offset = L
            else:
                continue
            x_lead = offset + advance(lead, tau)
            v_cross = cur[V] + cur[U] * tau
            slack = (x_lead - L) - p["phi"] * v_cross - p["delta"]
            if slack < -merge_tol:
                viol.append((cur[0] + tau, zone, "merge", cur[CAV], prev[CAV], slack))
    return viol
