#!/usr/bin/env python3
"""Run a policy-comparison preset and print FE-mode and objective metrics per zone."""
import argparse
import logging

from mczone.cli import make_preset, run_preset

CHOICES = ("fixed_vs_none", "feedback_vs_fixed_vs_none", "varying_traffic")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("preset", choices=CHOICES)
    ap.add_argument("--out", default=None)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    preset = make_preset(args.preset, seeds=range(args.seeds))
    report = run_preset(preset, args.out or f"out/{args.preset}", progress=logging.info)

    cols = ("n", "fem_count", "fem_time", "t", "e", "obj")
    print(f"{'variant':<10} {'zone':<5}" + "".join(f"{c:>11}" for c in cols))
    for label, v in report["variants"].items():
        mean = v["mean"]
        for zone in ("cz1", "cz2"):
            print(f"{label:<10} {zone:<5}" + "".join(f"{mean[zone][c]:11.3f}" for c in cols))
        print(f"{label:<10} total obj {mean['total_obj']:.3f}")


if __name__ == "__main__":
    main()
