#!/usr/bin/env python3
"""Sweep one SLO margin with the other held fixed and print seed-averaged energy and P90 latency.

Every run stops at its trace's duration so all margins are charged over the
same window.

Usage:
    python scripts/margin_sweep.py --which prefill --qps 12
    python scripts/margin_sweep.py --which decode --qps 5 --out decode_margins.csv
"""

import argparse
import csv
import sys

from phasedvfs.experiments import margin_sweep
from phasedvfs.gpu_model import default_profile
from phasedvfs.trace import chat_lengths, gen_poisson_trace


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--which", choices=["prefill", "decode"], required=True)
    ap.add_argument("--margins", default="0.6,0.85,0.95,1.2,2.0")
    ap.add_argument("--fixed-margin", type=float, default=0.95)
    ap.add_argument("--qps", type=float, default=None, help="default: 12 for prefill, 5 for decode")
    ap.add_argument("--duration-ms", type=int, default=120_000)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    qps = args.qps if args.qps is not None else (12.0 if args.which == "prefill" else 5.0)
    margins = [float(m) for m in args.margins.split(",")]
    traces = [gen_poisson_trace(qps, args.duration_ms, chat_lengths(), s) for s in range(args.seeds)]
    points = margin_sweep(args.which, margins, traces, default_profile(), args.fixed_margin)

    latency = "p90_ttft_ms" if args.which == "prefill" else "p90_tbt_ms"
    rows = [(p.margin, f"{p.energy_j:.3f}", f"{p.latency_p90_ms:.3f}") for p in points]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["margin", f"{args.which}_energy_j", latency])
    writer.writerows(rows)
    if args.out:
        fh.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
