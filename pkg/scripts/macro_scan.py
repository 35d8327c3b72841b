"""Phase-averaged drift of a free packet and the N-scaling table.

Prints the closed-form average drift next to the level sum and a Monte
Carlo estimate, then tau, N lambda tau and the spread ratio over N.

    python3 scripts/macro_scan.py --samples 4000
"""
import argparse

import numpy as np

from dualist import macro


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigma-mu", type=float, nargs="+", default=[0.0, 1.0, 3.0])
    ap.add_argument("--r", type=float, nargs="+", default=[-3.0, -1.0, 0.0, 1.0, 3.0])
    ap.add_argument("--samples", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=4)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)

    print("sigma M U/hbar   R/sigma    closed    levels        mc (se)")
    for smu in args.sigma_mu:
        spec = macro.GaussianPacketSpec(1.0, smu, 1.0)
        sys = macro.build_gaussian_packet(spec)
        for r in args.r:
            closed = float(macro.mean_drift_closed(spec, r))
            levels = float(macro.mean_drift_levels(sys, r))
            est, se = macro.mean_drift_mc(sys, r, args.samples, rng)
            print(f"{smu:14.1f} {r:9.1f} {closed:9.4f} {levels:9.4f} {est:9.4f} ({se:.4f})")
        print(f"{'':14} max |<b> - U| over R: "
              f"{np.max(np.abs(macro.mean_drift_closed(spec, np.linspace(-8, 8, 1601)) - spec.U)):.4f}"
              f"  bound {macro.deviation_bound(spec):.4f}")

    print("\n      N        tau    lambda  N lambda tau   spread/L(1)^2 N^-1")
    for N in (1, 10, 100, 1000, 10_000):
        tau = float(macro.tau(N, 1.0, 1.0))
        lam = 10.0 / (N * tau)
        sp = macro.spread_between_events(N, 1.0, lam, L1=1.0)
        print(f"{N:7d} {tau:10.3g} {lam:9.3g} {N * lam * tau:13.3g} {sp.ratio:20.3g}")

    print("\nphysical units:")
    for k, v in macro.physical_scales().items():
        print(f"  {k:28s} {v:.3g}")


if __name__ == "__main__":
    main()
