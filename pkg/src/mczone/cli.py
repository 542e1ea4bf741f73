"""Command-line harness: scenario runs, experiment presets and reports."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, ScenarioConfig, two_zone_scenario
from .scenario_io import ParseError, apply_overrides, parse_scenario, scenario_hash
from .sim_engine import MetricsRecord, run

log = logging.getLogger("mczone")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REPORT_VERSION = 1

RUN_HEADER = ("variant", "seed", "zone", "n", "t", "e", "obj", "obj8", "fem_count", "fem_time",
              "fem_time_all", "infeasible_count", "init_fail_count", "total_obj", "total_obj8")
SWEEP_HEADER = ("vm", "obj_cz1", "obj_cz2", "obj_total")

VARYING_SCHEDULE = [(0.0, 400.0, 300.0), (400.0, 800.0, 200.0), (800.0, 1200.0, 400.0),
                    (1200.0, 1600.0, 100.0), (1600.0, 2000.0, 400.0)]

FIXED_15 = {"zone.cz1.policy.kind": "FIXED", "zone.cz1.policy.v_b": 15.0}
FIXED_12 = {"zone.cz1.policy.kind": "FIXED", "zone.cz1.policy.v_b": 12.0}
NO_CONTROL = {"zone.cz1.policy.kind": "NONE"}
FEEDBACK_CRITICAL = {"zone.cz1.policy.kind": "CRITICAL_FEEDBACK", "zone.cz1.policy.v_b": 18.0,
                     "zone.cz1.policy.k": 0.5, "zone.cz1.policy.l_frac": 0.25}
FEEDBACK_AVG_SPEED = {"zone.cz1.policy.kind": "CRITICAL_FEEDBACK", "zone.cz1.policy.v_b": "avg_critical",
                      "zone.cz1.policy.v_b_offset": 2.0, "zone.cz1.policy.k": 0.5,
                      "zone.cz1.policy.l_frac": 0.25}


@dataclass
class ExperimentPreset:
    name: str
    variants: Dict[str, Dict[str, Any]]     # label -> flat-key overrides
    overrides: Dict[str, Any] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: list(range(5)))
    sweep: Optional[Tuple[str, List[float]]] = None

    def base(self) -> ScenarioConfig:
        return apply_overrides(two_zone_scenario(), self.overrides)

    def grid(self) -> List[Tuple[str, Dict[str, Any]]]:
        """(label, overrides) for every variant, expanded over the sweep if any."""
        out = []
        for label, ov in self.variants.items():
            if self.sweep is None:
                out.append((label, dict(ov)))
                continue
            key, values = self.sweep
            for v in values:
                out.append((f"{label}@{v:g}", {**ov, key: v}))
        return out


def sweep_values(lo=12.0, hi=20.0, step=0.5) -> List[float]:
    n = int(round((hi - lo) / step))
    return [lo + k * step for k in range(n + 1)]


def make_preset(name: str, seeds: Optional[Sequence[int]] = None) -> ExperimentPreset:
    if name == "vm_sweep":
        p = ExperimentPreset(name, {"fixed": {"zone.cz1.policy.kind": "FIXED"}},
                             sweep=("zone.cz1.policy.v_b", sweep_values()))
    elif name == "fixed_vs_none":
        p = ExperimentPreset(name, {"none": NO_CONTROL, "fixed15": FIXED_15, "fixed12": FIXED_12})
    elif name == "feedback_vs_fixed_vs_none":
        p = ExperimentPreset(name, {"feedback": FEEDBACK_CRITICAL, "fixed15": FIXED_15,
                                    "none": NO_CONTROL})
    elif name == "varying_traffic":
        sched = [list(s) for s in VARYING_SCHEDULE]
        ov = {"duration": 2000.0, "zone.cz1.alpha": 0.25, "zone.cz2.alpha": 0.25}
        ov.update({f"road.{r}.schedule": sched for r in ("r0", "r1", "r2")})
        p = ExperimentPreset(name, {"feedback": FEEDBACK_AVG_SPEED, "fixed15": FIXED_15,
                                    "none": NO_CONTROL}, overrides=ov)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if seeds is not None:
        p.seeds = list(seeds)
    return p


PRESETS = ("vm_sweep", "fixed_vs_none", "feedback_vs_fixed_vs_none", "varying_traffic")


def quadratic_argmin(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Vertex of the least-squares parabola through (xs, ys); None if it opens downward."""
    c2, c1, _ = np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 2)
    if c2 <= 0:
        return None
    return float(-c1 / (2 * c2))


def _zone_means(metrics: List[MetricsRecord]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if not metrics:
        return out
    for zid in metrics[0].zones:
        rows = [m.zones[zid] for m in metrics]
        agg = {}
        for k in ("n", "t", "e", "obj", "obj8", "fem_count", "fem_time", "fem_time_all",
                  "infeasible_count", "init_fail_count"):
            vals = [getattr(r, k) for r in rows if not (isinstance(getattr(r, k), float)
                                                          and math.isnan(getattr(r, k)))]
            agg[k] = float(np.mean(vals)) if vals else None
        out[zid] = agg
    out["total_obj"] = float(np.mean([m.total_obj for m in metrics]))
    out["total_obj8"] = float(np.mean([m.total_obj8 for m in metrics]))
    return out


def _run_rows(label: str, seed: int, m: MetricsRecord) -> List[list]:
    rows = []
    for zid, z in m.zones.items():
        rows.append([label, seed, zid, z.n, z.t, z.e, z.obj, z.obj8, z.fem_count, z.fem_time,
                     z.fem_time_all, z.infeasible_count, z.init_fail_count, m.total_obj, m.total_obj8])
    return rows


def run_variants(base: ScenarioConfig, grid: List[Tuple[str, Dict[str, Any]]], seeds: Sequence[int],
                 out_dir: str, per_cav: bool = True,
                 progress: Optional[Callable[[str], None]] = None) -> Dict[str, Any]:
    """Run every (variant, seed); results are flushed as they come in."""
    os.makedirs(out_dir, exist_ok=True)
    runs_path = os.path.join(out_dir, "runs.csv")
    report: Dict[str, Any] = {"version": REPORT_VERSION, "seeds": list(seeds), "variants": {}}
    with open(runs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_HEADER)
        for label, ov in grid:
            cfg = apply_overrides(base, ov)
            ms = []
            for s in seeds:
                res = run(apply_overrides(cfg, {"seed": int(s)}))
                ms.append(res.metrics)
                w.writerows(_run_rows(label, s, res.metrics))
                fh.flush()
                if per_cav:
                    res.write_cavs(os.path.join(out_dir, f"cavs_{label}_seed{s}.csv"))
                if progress:
                    progress(f"{label} seed {s}: total obj {res.metrics.total_obj:.3f}")
            report["variants"][label] = {"scenario_hash": scenario_hash(cfg), "overrides": ov,
                                         "mean": _zone_means(ms)}
    return report


def run_preset(preset: ExperimentPreset, out_dir: str, *, dt: Optional[float] = None,
               deterministic: bool = False, duration: Optional[float] = None,
               progress=None) -> Dict[str, Any]:
    """Execute a preset and write runs.csv, aggregate.json and (for sweeps) sweep.csv."""
    extra: Dict[str, Any] = {}
    if dt is not None:
        extra["dt"] = dt
    if deterministic:
        extra["deterministic_arrivals"] = True
    if duration is not None:
        extra["duration"] = duration
    base = apply_overrides(preset.base(), extra)
    report = run_variants(base, preset.grid(), preset.seeds, out_dir, progress=progress)
    report["preset"] = preset.name
    report["scenario_hash"] = scenario_hash(base)
    if preset.sweep is not None:
        key, values = preset.sweep
        curve = []
        for (label, _), v in zip(preset.grid(), values):
            mean = report["variants"][label]["mean"]
            o1, o2 = mean["cz1"]["obj"], mean["cz2"]["obj"]
            curve.append((v, o1, o2, o1 + o2))
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_HEADER)
            w.writerows(curve)
        report["sweep"] = {"parameter": key, "values": list(values),
                           "quadratic_argmin": quadratic_argmin([c[0] for c in curve],
                                                                [c[3] for c in curve])}
    with open(os.path.join(out_dir, "aggregate.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def run_scenario(cfg: ScenarioConfig, seeds: Sequence[int], out_dir: str, trace: bool = True) -> Dict[str, Any]:
    os.makedirs(out_dir, exist_ok=True)
    ms = []
    per_seed = {}
    for s in seeds:
        res = run(apply_overrides(cfg, {"seed": int(s)}), record_trace=trace)
        if trace:
            res.write_trace(os.path.join(out_dir, f"trace_seed{s}.csv"))
        res.write_cavs(os.path.join(out_dir, f"cavs_seed{s}.csv"))
        ms.append(res.metrics)
        per_seed[str(s)] = res.metrics.to_dict()
    report = {"version": REPORT_VERSION, "scenario_hash": scenario_hash(cfg), "seeds": list(seeds),
              "mean": _zone_means(ms), "per_seed": per_seed}
    with open(os.path.join(out_dir, "aggregate.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def _seed_list(args, default_n: int) -> List[int]:
    n = args.seeds if args.seeds is not None else default_n
    if n < 1:
        raise ConfigError("--seeds must be at least 1")
    base = args.seed if args.seed is not None else 0
    return [base + k for k in range(n)]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mczone", description="Multi-zone CAV merging simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="first seed")
        p.add_argument("--seeds", type=int, default=None, help="number of consecutive seeds")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--dt", type=float, default=None, help="time step (s)")
        p.add_argument("--deterministic-arrivals", action="store_true",
                       help="fixed headways instead of Poisson arrivals")
        p.add_argument("--duration", type=float, default=None, help="arrival window (s)")
        p.add_argument("-v", "--verbose", action="store_true")

    pr = sub.add_parser("run", help="run a scenario file")
    pr.add_argument("scenario")
    pr.add_argument("--no-trace", action="store_true", help="skip the per-step trace CSV")
    common(pr)
    pp = sub.add_parser("preset", help="run one of the built-in experiments")
    pp.add_argument("name", choices=PRESETS)
    common(pp)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            cfg = parse_scenario(args.scenario)
            extra: Dict[str, Any] = {}
            if args.dt is not None:
                extra["dt"] = args.dt
            if args.deterministic_arrivals:
                extra["deterministic_arrivals"] = True
            if args.duration is not None:
                extra["duration"] = args.duration
            cfg = apply_overrides(cfg, extra)
            seeds = [cfg.seed] if args.seed is None and args.seeds is None else _seed_list(args, 1)
            report = run_scenario(cfg, seeds, args.out, trace=not args.no_trace)
            print(json.dumps({"scenario_hash": report["scenario_hash"], "seeds": seeds,
                              "total_obj": report["mean"].get("total_obj")}))
        else:
            preset = make_preset(args.name, _seed_list(args, 5))
            report = run_preset(preset, args.out, dt=args.dt, deterministic=args.deterministic_arrivals,
                                duration=args.duration,
                                progress=(lambda s: log.info(s)) if args.verbose else None)
            summary = {k: v["mean"].get("total_obj") for k, v in report["variants"].items()}
            if "sweep" in report:
                summary["quadratic_argmin"] = report["sweep"]["quadratic_argmin"]
            print(json.dumps(summary))
    except (ParseError, ConfigError) as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
