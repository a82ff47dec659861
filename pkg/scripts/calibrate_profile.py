#!/usr/bin/env python3
"""Derive the default synthetic GPU profile and check its calibration targets.

Power model (per GPU, F in GHz):

    P(F) = c3*F^3 - y*c3*F^2 + c1*F + k0

k0 is chosen so that the prefill energy for a fixed amount of work inside a
fixed window, ``(P(F) - p_idle) / F`` up to constants, is minimised at
``--prefill-opt`` MHz.  c1 is the smallest value keeping P strictly
increasing, plus a small slack.

Targets checked before writing:
  * prefill energy argmin (mid load, idle included) in [950, 1050] MHz
  * decode energy-per-token at fixed batch is U-shaped for every batch 1..64
    and its argmin lies strictly below the prefill argmin

Usage:
    python scripts/calibrate_profile.py [--out src/phasedvfs/profiles/default.profile]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from phasedvfs.gpu_model import (  # noqa: E402
    DecodeStepModel,
    FrequencyGrid,
    GpuProfile,
    LatencyModel,
    PowerModel,
    decode_energy_per_token,
    dump_profile,
)
from phasedvfs.prefill_opt import PrefillBatch, PrefillJob, select_frequency  # noqa: E402


def power_coefficients(prefill_opt_mhz, c3, shape, p_idle, slack=0.037):
    F = prefill_opt_mhz / 1000.0
    c2 = -shape * c3
    c1 = c3 * (shape**2 / 3.0 + slack)
    # stationarity of (P - p_idle)/F at F:  2*c3*F + c2 - K/F^2 = 0
    K = F * F * (2 * c3 * F + c2)
    if K <= 0:
        raise SystemExit("shape too steep: active power would not exceed idle at low clocks")
    return PowerModel(k3=c3 / 1e9, k2=c2 / 1e6, k1=c1 / 1e3, k0=p_idle + K, p_idle=p_idle)


def build(args):
    grid = FrequencyGrid(210, 1410, 15, 1410)
    return GpuProfile(
        grid=grid,
        prefill=LatencyModel(a=1.0e-5, b=0.06, c=10.0, f_ref=grid.f_ref),
        decode=DecodeStepModel(alpha0=30.0, alpha1=0.35, beta0=10.0, beta1=0.35, f_ref=grid.f_ref),
        power=power_coefficients(args.prefill_opt, args.c3, args.shape, args.p_idle),
        name="synthetic-a100-dense14b",
    )


def check(profile):
    grid = profile.grid
    ok = True
    # mid load: 2 s of reference work inside a 6 s window
    batch = PrefillBatch([PrefillJob(i, 640, 6000.0) for i in range(38)])
    choice = select_frequency(batch, 6000.0, profile)
    print(f"prefill argmin at mid load: {choice.freq} MHz (T_ref={batch.t_ref_total(profile.prefill):.0f} ms)")
    ok &= 950 <= choice.freq <= 1050
    for b in (1, 8, 16, 32, 64):
        e = [(decode_energy_per_token(profile, b, f), f) for f in grid.freqs]
        e_min, f_min = min(e)
        interior = grid.f_min < f_min < grid.f_max
        print(f"decode batch {b:2d}: energy/token argmin {f_min} MHz, "
              f"E(f_min)/E* = {e[0][0] / e_min:.3f}, E(f_max)/E* = {e[-1][0] / e_min:.3f}")
        ok &= interior and f_min < choice.freq
    for f in (210, 450, 750, 1005, 1410):
        print(f"P({f}) = {profile.power(f):.1f} W")
    return ok


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--prefill-opt", type=float, default=1000.0, help="target prefill energy argmin (MHz)")
    ap.add_argument("--c3", type=float, default=300.0, help="cubic coefficient (W/GHz^3)")
    ap.add_argument("--shape", type=float, default=1.7, help="negative quadratic weight (dimensionless)")
    ap.add_argument("--p-idle", type=float, default=50.0)
    ap.add_argument("--out", type=Path,
                    default=Path(__file__).resolve().parents[1] / "src/phasedvfs/profiles/default.profile")
    ap.add_argument("--check-only", action="store_true")
    args = ap.parse_args()

    profile = build(args)
    if not check(profile):
        print("calibration targets not met", file=sys.stderr)
        return 1
    if not args.check_only:
        dump_profile(profile, args.out)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
