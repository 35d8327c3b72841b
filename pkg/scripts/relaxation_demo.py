"""Relaxation of a uniform ensemble towards |psi|^2 in a box.

Runs the Langevin ensemble and the Fokker-Planck oracle from the same
uniform start and prints the distances at a few times.

    python3 scripts/relaxation_demo.py --members 4000 --levels 1 2 --out out/relax
"""
import argparse

import numpy as np

from dualist import quantum
from dualist.cli import csv_text, write_bundle
from dualist.dynamics import IntegratorConfig, fp_oracle, psi_density_field, qe_distance, uniform_field
from dualist.ensemble import EnsembleSpec, run_ensemble
from dualist.quantum import LevelSelection, ModelSpec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", type=int, nargs="+", default=[1])
    ap.add_argument("--members", type=int, default=4000)
    ap.add_argument("--taus", type=float, default=3.0, help="horizon in equilibrium times")
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--samples", type=int, default=6)
    ap.add_argument("--cells", type=int, default=512)
    ap.add_argument("--seed", type=int, default=12)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default=None, help="optional directory for density CSVs")
    args = ap.parse_args(argv)

    sys = quantum.build_model(ModelSpec("box", [LevelSelection(n, (1.0,)) for n in args.levels]))
    tau = quantum.equilibrium_timescale(sys)
    horizon = args.taus * tau
    n_steps = int(round(horizon / args.dt))
    stride = max(1, n_steps // args.samples)
    rho0 = uniform_field(sys, args.cells)
    spec = EnsembleSpec(sys, args.members, horizon, IntegratorConfig(dt=args.dt), init="custom", rho0=rho0,
                        stride=stride, seed=args.seed, record_phases=False)
    res = run_ensemble(spec, args.threads)
    theta = sys.initial_phases
    fields = fp_oracle(sys, theta, rho0, horizon, args.dt, diffusion=sys.hbar / float(sys.masses[0]),
                       sample_times=res.times)

    print(f"{'t/tau':>7} {'oracle L1':>10} {'KS to oracle':>13} {'band':>7} {'CDF-L1 to oracle':>17}")
    rows = []
    for k, f in enumerate(fields):
        ref = psi_density_field(sys, theta, f.t, args.cells)
        d = qe_distance(res.q[k], f)
        print(f"{f.t / tau:7.3f} {f.l1(ref):10.2e} {d.ks:13.4f} {d.ks_threshold:7.4f} {d.cdf_l1:17.5f}")
        hist, edges = np.histogram(np.ravel(res.q[k]), bins=args.cells, range=f.bounds[0], density=True)
        rows.append(np.stack([np.full(args.cells, f.t), f.axes[0], hist, f.values, ref.values], 1))
    if args.out:
        write_bundle(args.out, {"relaxation.csv": csv_text(["t", "x", "empirical", "oracle", "psi2"],
                                                           np.concatenate(rows))})
        print(f"wrote {args.out}/relaxation.csv")


if __name__ == "__main__":
    main()
