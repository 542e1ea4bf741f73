"""Flat-key scenario files.

Every non-blank line is a TOML assignment ``dotted.key = value``; TOML table
headers (``[zone.cz1]``) act as key prefixes. The whole file is therefore
valid TOML, but each line is parsed on its own so errors carry a line number.

Schema (units in brackets):

    network                    "two_zone" (default) or "custom"
    dt                         step [s]
    duration                   arrival window [s]
    drain                      extra time for CAVs to clear after arrivals stop [s]
    seed                       int
    deterministic_arrivals     bool, fixed headway 3600/rate instead of Poisson
    smoothing                  display smoothing factor in (0, 1]
    entry_speed.kind           "uniform" or "constant"
    entry_speed.low            [m/s]
    entry_speed.high           [m/s]
    zone.<id>.L                zone length to the merging point [m]
    zone.<id>.phi              reaction time [s]
    zone.<id>.delta            standstill gap [m]
    zone.<id>.v_min, v_max     [m/s]
    zone.<id>.u_min, u_max     [m/s^2]
    zone.<id>.alpha            time/energy weight in [0, 1)
    zone.<id>.eps              CLF rate [1/s]
    zone.<id>.k1, k2, k_v      class-K gains [1/s]
    zone.<id>.beta_e           CLF relaxation weight (omit to use the time weight)
    zone.<id>.fe_limit_frac    FE mode distance limit as a fraction of L
    zone.<id>.perturb_threshold    largest |dv| handled by the first-order update [m/s]
    zone.<id>.replan_min_distance  no replans this close to the merging point [m]
    zone.<id>.guards           bool, add the feasibility guard rows
    zone.<id>.sampled_cbf      bool, tighten the barrier rows for the step length
    zone.<id>.downstream       id of the zone fed by this zone's exits
    zone.<id>.policy.kind      NONE | FIXED | FEEDBACK | CRITICAL_FEEDBACK
    zone.<id>.policy.v_b       [m/s], or "avg_optimal" / "avg_critical"
    zone.<id>.policy.v_b_offset  [m/s]
    zone.<id>.policy.k         [(m/s) per CAV]
    zone.<id>.policy.l_frac    critical segment length as a fraction of the downstream L
    zone.<id>.policy.vm_min, vm_max  command clamp [m/s]
    road.<name>.zone           zone id
    road.<name>.lane           MAIN or MERGE
    road.<name>.schedule       [[t_start, t_end, rate CAVs/h], ...] on one line

With ``network = "two_zone"`` the file patches the reference two-zone layout
(zones cz1 -> cz2, roads cz1_main, cz1_merge, cz2_merge at 400 CAVs/h).
"""
from __future__ import annotations

import dataclasses
import hashlib
import sys
from typing import Any, Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .config import (ConfigError, FlowPolicy, RoadSpec, ScenarioConfig, SpeedDist, ZoneParams,
                     ZoneSpec, two_zone_scenario)


class ParseError(ConfigError):
    def __init__(self, msg: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)


FLOAT, INT, BOOL, STR, SPEED, SCHEDULE, OPT_FLOAT = "float", "int", "bool", "str", "speed", "schedule", "opt_float"

TOP_KEYS = {
    "network": STR, "dt": FLOAT, "duration": FLOAT, "drain": FLOAT, "seed": INT,
    "deterministic_arrivals": BOOL, "smoothing": FLOAT,
    "entry_speed.kind": STR, "entry_speed.low": FLOAT, "entry_speed.high": FLOAT,
}
_ZONE_SPECIAL = {"guards": BOOL, "sampled_cbf": BOOL, "beta_e": OPT_FLOAT}
ZONE_KEYS = {f.name: _ZONE_SPECIAL.get(f.name, FLOAT) for f in dataclasses.fields(ZoneParams)}
ZONE_KEYS["downstream"] = STR
POLICY_KEYS = {"kind": STR, "v_b": SPEED, "v_b_offset": FLOAT, "k": FLOAT, "l_frac": FLOAT,
               "vm_min": OPT_FLOAT, "vm_max": OPT_FLOAT}
ROAD_KEYS = {"zone": STR, "lane": STR, "schedule": SCHEDULE}

NETWORKS = ("two_zone", "custom")


def _check_type(kind: str, value: Any, line, key):
    def bad(expected):
        raise ParseError(f"expected {expected}, got {value!r}", line, key)

    if kind in (FLOAT, OPT_FLOAT):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number")
        return float(value)
    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
        return value
    if kind == BOOL:
        if not isinstance(value, bool):
            bad("true/false")
        return value
    if kind == STR:
        if not isinstance(value, str):
            bad("a string")
        return value
    if kind == SPEED:
        if isinstance(value, str):
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number or a named baseline")
        return float(value)
    if kind == SCHEDULE:
        if not isinstance(value, list):
            bad("a list of [t_start, t_end, rate]")
        out = []
        for item in value:
            if (not isinstance(item, list) or len(item) != 3
                    or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in item)):
                bad("a list of [t_start, t_end, rate]")
            out.append(tuple(float(x) for x in item))
        return out
    raise AssertionError(kind)


def key_kind(key: str) -> str:
    """Schema type of a flat key; raises KeyError for unknown keys."""
    if key in TOP_KEYS:
        return TOP_KEYS[key]
    parts = key.split(".")
    if parts[0] == "zone" and len(parts) == 3 and parts[2] in ZONE_KEYS:
        return ZONE_KEYS[parts[2]]
    if parts[0] == "zone" and len(parts) == 4 and parts[2] == "policy" and parts[3] in POLICY_KEYS:
        return POLICY_KEYS[parts[3]]
    if parts[0] == "road" and len(parts) == 3 and parts[2] in ROAD_KEYS:
        return ROAD_KEYS[parts[2]]
    raise KeyError(key)


def _flatten(d: dict, prefix: str = "") -> List[Tuple[str, Any]]:
    out = []
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flatten(v, path + "."))
        else:
            out.append((path, v))
    return out


def read_flat(text: str) -> Dict[str, Tuple[Any, Optional[int]]]:
    """Flat key -> (typed value, line number)."""
    entries: Dict[str, Tuple[Any, Optional[int]]] = {}
    prefix = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            try:
                doc = tomllib.loads(line)
            except tomllib.TOMLDecodeError as exc:
                raise ParseError(f"bad table header: {exc}", lineno) from None
            keys = _flatten(doc) if doc else []
            # an empty table parses to nested empty dicts, walk them to the leaf
            path, node = [], doc
            while isinstance(node, dict) and len(node) == 1:
                (k, node), = node.items()
                path.append(k)
            if keys or not path:
                raise ParseError("bad table header", lineno)
            prefix = ".".join(path) + "."
            continue
        try:
            doc = tomllib.loads(line)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"expected 'key = value' ({exc})", lineno) from None
        for key, value in _flatten(doc):
            key = prefix + key
            try:
                kind = key_kind(key)
            except KeyError:
                raise ParseError("unknown key", lineno, key) from None
            if key in entries:
                raise ParseError("duplicate key", lineno, key)
            entries[key] = (_check_type(kind, value, lineno, key), lineno)
    return entries


def _default_network() -> ScenarioConfig:
    return two_zone_scenario()


TWO_ZONE_ROAD_NAMES = ("cz1_main", "cz1_merge", "cz2_merge")


def build(entries: Dict[str, Tuple[Any, Optional[int]]]) -> ScenarioConfig:
    """Assemble a ScenarioConfig from typed flat entries."""
    val = {k: v for k, (v, _) in entries.items()}
    lines = {k: ln for k, (_, ln) in entries.items()}

    def fail(msg, key):
        raise ParseError(msg, lines.get(key), key)

    network = val.get("network", "two_zone")
    if network not in NETWORKS:
        fail(f"network must be one of {NETWORKS}", "network")

    zone_fields: Dict[str, dict] = {}
    policy_fields: Dict[str, dict] = {}
    downstream: Dict[str, Optional[str]] = {}
    road_fields: Dict[str, dict] = {}
    if network == "two_zone":
        base = _default_network()
        for z in base.zones:
            zone_fields[z.id] = dataclasses.asdict(z.params)
            policy_fields[z.id] = dataclasses.asdict(z.policy)
            downstream[z.id] = z.downstream
        for name, r in zip(TWO_ZONE_ROAD_NAMES, base.roads):
            road_fields[name] = {"zone": r.zone, "lane": r.lane, "schedule": list(r.schedule)}
        top = {f.name: getattr(base, f.name) for f in dataclasses.fields(ScenarioConfig)
               if f.name not in ("zones", "roads", "entry_speed")}
        speed = dataclasses.asdict(base.entry_speed)
    else:
        top, speed = {}, {}

    for key, value in val.items():
        parts = key.split(".")
        if parts[0] == "zone":
            zid = parts[1]
            zone_fields.setdefault(zid, {})
            policy_fields.setdefault(zid, {})
            downstream.setdefault(zid, None)
            if parts[2] == "policy":
                policy_fields[zid][parts[3]] = value
            elif parts[2] == "downstream":
                downstream[zid] = value
            else:
                zone_fields[zid][parts[2]] = value
        elif parts[0] == "road":
            road_fields.setdefault(parts[1], {})[parts[2]] = value
        elif parts[0] == "entry_speed":
            speed[parts[1]] = value
        elif key != "network":
            top[key] = value

    def first_line(prefix):
        cands = [k for k in lines if k.startswith(prefix)]
        return min(cands, key=lambda k: lines[k]) if cands else None

    zones = []
    for zid in zone_fields:
        try:
            params = ZoneParams(**zone_fields[zid])
        except ConfigError as exc:
            fail(str(exc), first_line(f"zone.{zid}.") or f"zone.{zid}")
        try:
            policy = FlowPolicy(**policy_fields[zid])
        except ConfigError as exc:
            fail(str(exc), first_line(f"zone.{zid}.policy.") or f"zone.{zid}.policy")
        zones.append(ZoneSpec(zid, params, policy, downstream[zid]))
    roads = []
    for name, fields in road_fields.items():
        missing = [k for k in ROAD_KEYS if k not in fields]
        if missing:
            fail(f"road {name!r} is missing {', '.join(missing)}", first_line(f"road.{name}.") or f"road.{name}")
        roads.append(RoadSpec(fields["zone"], fields["lane"], list(fields["schedule"])))
    try:
        entry = SpeedDist(**speed)
    except ConfigError as exc:
        fail(str(exc), first_line("entry_speed.") or "entry_speed")
    for key in ("dt", "duration", "drain"):
        if key in top and (top[key] < 0 or key == "dt" and top[key] == 0):
            fail(f"{key} must be {'positive' if key == 'dt' else 'nonnegative'}", key)
    try:
        return ScenarioConfig(zones, roads, entry, **top)
    except ConfigError as exc:
        raise ParseError(str(exc)) from None


def parse_scenario_text(text: str) -> ScenarioConfig:
    return build(read_flat(text))


def parse_scenario(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read scenario file: {exc}") from None
    return parse_scenario_text(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value) if value == value and abs(value) != float("inf") else str(value).lower()
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def to_flat(cfg: ScenarioConfig) -> Dict[str, Any]:
    """Explicit flat-key form of a config (network = "custom")."""
    out: Dict[str, Any] = {"network": "custom"}
    for f in dataclasses.fields(ScenarioConfig):
        if f.name in ("zones", "roads", "entry_speed"):
            continue
        out[f.name] = getattr(cfg, f.name)
    for k, v in dataclasses.asdict(cfg.entry_speed).items():
        out[f"entry_speed.{k}"] = v
    for z in cfg.zones:
        for k, v in dataclasses.asdict(z.params).items():
            if v is not None:
                out[f"zone.{z.id}.{k}"] = v
        if z.downstream is not None:
            out[f"zone.{z.id}.downstream"] = z.downstream
        for k, v in dataclasses.asdict(z.policy).items():
            if v is not None:
                out[f"zone.{z.id}.policy.{k}"] = v
    for i, r in enumerate(cfg.roads):
        out[f"road.r{i}.zone"] = r.zone
        out[f"road.r{i}.lane"] = r.lane
        out[f"road.r{i}.schedule"] = [list(s) for s in r.schedule]
    return out


def serialize(cfg: ScenarioConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in to_flat(cfg).items())


def scenario_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def apply_overrides(cfg: ScenarioConfig, overrides: Dict[str, Any]) -> ScenarioConfig:
    """Copy of ``cfg`` with flat-key overrides applied (same schema as files)."""
    flat = to_flat(cfg)
    for key, value in overrides.items():
        try:
            kind = key_kind(key)
        except KeyError:
            raise ParseError("unknown key", None, key) from None
        if kind == SCHEDULE:
            value = [list(s) for s in value]
        flat[key] = value
    entries = {}
    for key, value in flat.items():
        if value is None:
            continue
        entries[key] = (_check_type(key_kind(key), value, None, key), None)
    return build(entries)
