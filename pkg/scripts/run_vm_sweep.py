#!/usr/bin/env python3
"""Sweep the fixed CZ1 terminal speed and print the per-zone objective curve."""
import argparse
import logging

from mczone.cli import make_preset, run_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/vm_sweep")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--duration", type=float, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    preset = make_preset("vm_sweep", seeds=range(args.seeds))
    report = run_preset(preset, args.out, duration=args.duration, progress=logging.info)

    print(f"{'vm1':>6} {'cz1':>8} {'cz2':>8} {'total':>8}")
    for label, _ in preset.grid():
        mean = report["variants"][label]["mean"]
        o1, o2 = mean["cz1"]["obj"], mean["cz2"]["obj"]
        print(f"{label.split('@')[1]:>6} {o1:8.3f} {o2:8.3f} {o1 + o2:8.3f}")
    vstar = report["sweep"]["quadratic_argmin"]
    print("quadratic argmin:", "none" if vstar is None else f"{vstar:.2f} m/s")


if __name__ == "__main__":
    main()
