"""Scenario and zone parameter blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

MAIN = "MAIN"
MERGE = "MERGE"
LANES = (MAIN, MERGE)


class ConfigError(ValueError):
    pass


@dataclass
class ZoneParams:
    """Geometry and controller parameters of one control zone.

    Units: lengths in m, speeds in m/s, controls in m/s^2, phi in s.
    """
    L: float = 200.0
    phi: float = 1.8
    delta: float = 0.0
    v_min: float = 0.0
    v_max: float = 30.0
    u_min: float = -4.0
    u_max: float = 4.0
    alpha: float = 0.0625
    eps: float = 1.0          # CLF decay rate (1/s)
    k1: float = 1.0           # rear-end CBF gain (1/s)
    k2: float = 1.0           # merge CBF gain (1/s)
    k_v: float = 1.0          # speed-limit CBF gain (1/s)
    beta_e: Optional[float] = None  # CLF relaxation weight; None -> time weight beta
    fe_limit_frac: float = 0.25
    perturb_threshold: float = 1.0
    replan_min_distance: float = 10.0
    guards: bool = True
    sampled_cbf: bool = True  # rear-end/merge rows account for the step's second-order terms

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.L > 0:
            raise ConfigError("L must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if not self.u_min < 0.0 < self.u_max:
            raise ConfigError("need u_min < 0 < u_max")
        if not 0.0 <= self.v_min < self.v_max:
            raise ConfigError("need 0 <= v_min < v_max")
        if self.phi <= 0 or self.delta < 0:
            raise ConfigError("phi must be positive and delta nonnegative")
        for name in ("eps", "k1", "k2", "k_v"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.fe_limit_frac <= 1.0:
            raise ConfigError("fe_limit_frac must lie in (0, 1]")

    @property
    def u_abs_max(self) -> float:
        return max(abs(self.u_min), abs(self.u_max))

    @property
    def beta(self) -> float:
        return self.alpha * self.u_abs_max ** 2 / (2.0 * (1.0 - self.alpha))

    @property
    def relax_weight(self) -> float:
        w = self.beta if self.beta_e is None else self.beta_e
        return max(w, 1e-6)

    @property
    def phi2(self) -> float:
        return self.phi / self.L

    @property
    def fe_limit(self) -> float:
        return self.fe_limit_frac * self.L


NONE = "NONE"
FIXED = "FIXED"
FEEDBACK = "FEEDBACK"
CRITICAL_FEEDBACK = "CRITICAL_FEEDBACK"
POLICY_KINDS = (NONE, FIXED, FEEDBACK, CRITICAL_FEEDBACK)

AVG_OPTIMAL = "avg_optimal"
AVG_CRITICAL = "avg_critical"


@dataclass
class FlowPolicy:
    kind: str = NONE
    # a speed, or AVG_OPTIMAL / AVG_CRITICAL (the latter plus v_b_offset)
    v_b: Union[float, str] = 18.0
    v_b_offset: float = 0.0
    k: float = 0.0
    l_frac: float = 0.25
    vm_min: Optional[float] = None
    vm_max: Optional[float] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.k < 0:
            raise ConfigError("feedback gain must be nonnegative")
        if not 0.0 < self.l_frac <= 1.0:
            raise ConfigError("critical segment fraction must lie in (0, 1]")
        if isinstance(self.v_b, str) and self.v_b not in (AVG_OPTIMAL, AVG_CRITICAL):
            raise ConfigError(f"unknown baseline speed {self.v_b!r}")
        if self.vm_min is not None and self.vm_max is not None and self.vm_min > self.vm_max:
            raise ConfigError("vm_min > vm_max")

    def clamp_range(self, zone: ZoneParams) -> Tuple[float, float]:
        lo = max(zone.v_min, 1.0) if self.vm_min is None else self.vm_min
        hi = zone.v_max if self.vm_max is None else self.vm_max
        return lo, hi


@dataclass
class ZoneSpec:
    id: str
    params: ZoneParams = field(default_factory=ZoneParams)
    policy: FlowPolicy = field(default_factory=FlowPolicy)
    downstream: Optional[str] = None  # exits feed this zone's MAIN lane


@dataclass
class RoadSpec:
    """External inflow into (zone, lane): list of (t_start, t_end, rate in CAVs/h)."""
    zone: str
    lane: str
    schedule: List[Tuple[float, float, float]]

    def rate_at(self, t: float) -> float:
        for a, b, r in self.schedule:
            if a <= t < b:
                return r
        return 0.0


@dataclass
class SpeedDist:
    kind: str = "uniform"
    low: float = 15.0
    high: float = 20.0

    def __post_init__(self):
        if self.kind not in ("uniform", "constant"):
            raise ConfigError(f"unknown entry speed distribution {self.kind!r}")
        if self.kind == "uniform" and self.low > self.high:
            raise ConfigError("entry speed low > high")
        if self.low < 0:
            raise ConfigError("entry speed must be nonnegative")


@dataclass
class ScenarioConfig:
    zones: List[ZoneSpec]
    roads: List[RoadSpec]
    entry_speed: SpeedDist = field(default_factory=SpeedDist)
    dt: float = 0.1
    duration: float = 360.0
    drain: float = 300.0  # extra time after arrivals stop, for CAVs to clear
    seed: int = 0
    deterministic_arrivals: bool = False
    smoothing: float = 0.1

    def __post_init__(self):
        self.validate()

    def zone(self, zid: str) -> ZoneSpec:
        for z in self.zones:
            if z.id == zid:
                return z
        raise ConfigError(f"unknown zone {zid!r}")

    def validate(self):
        if not self.dt > 0 or not math.isfinite(self.dt):
            raise ConfigError("dt must be positive")
        if self.duration < 0 or self.drain < 0:
            raise ConfigError("duration and drain must be nonnegative")
        ids = [z.id for z in self.zones]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate zone ids")
        for z in self.zones:
            if z.downstream is not None and z.downstream not in ids:
                raise ConfigError(f"zone {z.id} feeds unknown zone {z.downstream!r}")
        # each zone has at most one downstream link, so a cycle shows up as a repeat
        for z in self.zones:
            seen, cur = set(), z.id
            while cur is not None:
                if cur in seen:
                    raise ConfigError("zone topology has a cycle")
                seen.add(cur)
                cur = self.zone(cur).downstream
        for r in self.roads:
            if r.zone not in ids:
                raise ConfigError(f"road feeds unknown zone {r.zone!r}")
            if r.lane not in LANES:
                raise ConfigError(f"unknown lane {r.lane!r}")
            for a, b, rate in r.schedule:
                if rate < 0 or b < a:
                    raise ConfigError("schedule intervals need t_end >= t_start and rate >= 0")

    def topological_order(self) -> List[str]:
        upstream_count = {z.id: 0 for z in self.zones}
        for z in self.zones:
            if z.downstream:
                upstream_count[z.downstream] += 1
        order, ready = [], [z.id for z in self.zones if upstream_count[z.id] == 0]
        while ready:
            zid = ready.pop(0)
            order.append(zid)
            d = self.zone(zid).downstream
            if d:
                upstream_count[d] -= 1
                if upstream_count[d] == 0:
                    ready.append(d)
        return order


def two_zone_scenario(rate: float = 400.0, duration: float = 360.0, *, alpha: float = 0.0625,
                      policy1: Optional[FlowPolicy] = None, policy2: Optional[FlowPolicy] = None,
                      schedule: Optional[List[Tuple[float, float, float]]] = None,
                      zone_kw: Optional[dict] = None, **kwargs) -> ScenarioConfig:
    """Two consecutive merges: CZ1 exits into CZ2's main lane; CZ2 has its own merge inflow."""
    policy1 = policy1 or FlowPolicy(NONE)
    policy2 = policy2 or FlowPolicy(FIXED, v_b=18.5)
    sched = schedule or [(0.0, duration, rate)]
    zones = [
        ZoneSpec("cz1", ZoneParams(alpha=alpha, **(zone_kw or {})), policy1, downstream="cz2"),
        ZoneSpec("cz2", ZoneParams(alpha=alpha, **(zone_kw or {})), policy2),
    ]
    roads = [RoadSpec("cz1", MAIN, list(sched)), RoadSpec("cz1", MERGE, list(sched)),
             RoadSpec("cz2", MERGE, list(sched))]
    return ScenarioConfig(zones, roads, duration=duration, **kwargs)
