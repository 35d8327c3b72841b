"""Command-line entry point and byte-stable result emission.

Usage: ``dualist <subcommand> --config PATH [--out DIR] [--seed N] [--threads N]``.
Exit codes: 0 success, 1 validation failure, 2 runtime failure,
3 statistical-test failure.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import sys as _sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import grw, macro, quantum, ste
from .config import SimConfig, config_to_dict, dump_config, load_config
from .dynamics import fp_oracle, psi_density_field, qe_distance, uniform_field
from .ensemble import EnsembleResult, EnsembleSpec, dqe_stationarity_test, mean_evolution_check, run_ensemble
from .errors import ConfigError, DualistError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_STAT = 0, 1, 2, 3
FLOAT_FMT = "%.17g"


# ---------------------------------------------------------------------------
# serialisation helpers
# ---------------------------------------------------------------------------

def csv_text(header, rows) -> str:
    """CSV with every numeric field at 17 significant digits."""
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header))
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    if len(rows):
        np.savetxt(buf, rows, fmt=FLOAT_FMT, delimiter=",")
    return buf.getvalue()


def read_csv(path):
    """Header and float rows of a file written by :func:`csv_text`."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, len(header))
    return header, rows


def _plain(obj):
    """Recursively convert numpy values into JSON-ready Python types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def json_text(doc) -> str:
    return json.dumps(_plain(doc), sort_keys=True, indent=2) + "\n"


def write_bundle(out_dir, files: dict) -> dict:
    """Write ``{relative path: text}`` plus ``manifest.json`` with SHA-256 hashes."""
    out = Path(out_dir)
    manifest = {}
    for rel in sorted(files):
        path = out / rel
        data = files[rel].encode("utf-8")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as err:
            raise OSError(f"cannot write {path}: {err}") from err
        manifest[rel] = hashlib.sha256(data).hexdigest()
    try:
        (out / "manifest.json").write_text(json_text({"files": manifest}))
    except OSError as err:
        raise OSError(f"cannot write {out / 'manifest.json'}: {err}") from err
    return manifest


# ---------------------------------------------------------------------------
# ensemble outputs
# ---------------------------------------------------------------------------

def summarize(result: EnsembleResult) -> dict:
    """Plain-data statistics of an ensemble run (what ``summary.json`` holds)."""
    spec = result.spec
    doc = {"config_hash": result.config_hash, "seed": int(result.seed), "spec": spec.describe(),
           "members": int(spec.members), "n_events": result.n_events, "deferred_events": int(result.deferred),
           "failures": list(result.failures), "effective_rate": float(result.rate),
           "times": result.times.tolist()}
    if result.mu is not None:
        doc["mean"] = result.mean_series().to_dict()
        doc["variance"] = result.variance_series().to_dict()
        if result.n_events or result.rate == 0:
            try:
                fit = mean_evolution_check(result)
                doc["mean_fit"] = {"lam_hat": fit.lam_hat, "se": fit.se, "ci": list(fit.ci),
                                   "n_events": fit.n_events, "degenerate": fit.degenerate, "note": fit.note}
            except ValueError as err:
                doc["mean_fit"] = {"error": str(err)}
    if result.n_events:
        tr = result.events["trials"]
        doc["acceptance"] = {"mean_trials": float(tr.mean()), "max_trials": int(tr.max())}
    return _plain(doc)


def _trajectory_rows(result: EnsembleResult):
    sys = result.spec.sys
    d, K = sys.dim, sys.K
    header = ["t", "member"] + [f"q{i}" for i in range(d)] + [f"theta{k + 1}" for k in range(K)]
    if result.q is None or not len(result.member_ids):
        return header, np.zeros((0, len(header)))
    n_t, n_m = result.q.shape[:2]
    q = result.q.reshape(n_t, n_m, d)
    cols = [np.repeat(result.times, n_m)[:, None], np.tile(result.member_ids, n_t)[:, None], q.reshape(-1, d)]
    if result.theta is not None:
        cols.append(result.theta.reshape(-1, K))
    else:
        cols.append(np.full((n_t * n_m, K), np.nan))
    return header, np.concatenate(cols, axis=1)


def _event_rows(result: EnsembleResult):
    sys = result.spec.sys
    d, K = sys.dim, sys.K
    ev = result.events
    header = (["member", "block", "t", "trials"] + [f"q{i}" for i in range(d)]
              + [f"theta_before{k + 1}" for k in range(K)] + [f"theta_after{k + 1}" for k in range(K)]
              + [f"mu_before{i}" for i in range(d)] + [f"mu_after{i}" for i in range(d)]
              + [f"var_before{i}" for i in range(d)] + [f"var_after{i}" for i in range(d)])
    n = ev["t"].size
    if n == 0:
        return header, np.zeros((0, len(header)))
    cols = [ev["member"][:, None], ev["block"][:, None], ev["t"][:, None], ev["trials"][:, None], ev["q"],
            ev["theta_before"].reshape(n, K), ev["theta_after"].reshape(n, K), ev["mu_before"],
            ev["mu_after"], ev["var_before"], ev["var_after"]]
    return header, np.concatenate([np.asarray(c, dtype=float).reshape(n, -1) for c in cols], axis=1)


def _plotdata(result: EnsembleResult, bins=128) -> dict:
    sys = result.spec.sys
    files = {}
    q = result.q_final.reshape(len(result.q_final), sys.dim)
    t = float(result.times[-1])
    lo, hi = sys.lower[0], sys.upper[0]
    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    hist = np.histogram(q[:, 0], bins=edges, density=False)[0].astype(float)
    hist = hist / (max(len(q), 1) * (edges[1] - edges[0]))
    if sys.dim == 1 and len(q):
        Phi = quantum.level_values(sys, centers[:, None])[0]
        rho = np.zeros(bins)
        for s in range(0, len(q), 1024):
            a = quantum.phase_factors(sys, result.theta_final[s:s + 1024], np.full(min(1024, len(q) - s), t))
            rho += (np.abs(a @ Phi.T) ** 2).sum(0)
        rho /= len(q)
    else:
        rho = np.full(bins, np.nan)
    empty = len(q) == 0
    files["plotdata/density.csv"] = csv_text(["x", "empirical", "psi2_mean"],
                                             np.empty((0, 3)) if empty else np.stack([centers, hist, rho], 1))
    pb = 32
    pedges = np.linspace(0, 2 * np.pi, pb + 1)
    cols = [0.5 * (pedges[1:] + pedges[:-1])]
    for k in range(sys.K):
        cols.append(np.histogram(np.mod(result.theta_final[:, k], 2 * np.pi), bins=pedges)[0].astype(float))
    files["plotdata/phase_hist.csv"] = csv_text(["theta"] + [f"count{k + 1}" for k in range(sys.K)],
                                                np.empty((0, len(cols))) if empty else np.stack(cols, 1))
    theta0 = result.spec.initial_theta()
    pts = centers if sys.dim == 1 else np.stack([centers, np.full(bins, 0.5 * (sys.lower[1] + sys.upper[1]))], 1)
    b = np.asarray(quantum.drift(sys, theta0, t, pts)).reshape(bins, -1)
    files["plotdata/drift_scan.csv"] = csv_text(["x"] + [f"b{i}" for i in range(sys.dim)],
                                                np.concatenate([centers[:, None], b], 1))
    return files


def emit_outputs(result: EnsembleResult, out_dir, config_echo: str | None = None, extra: dict | None = None):
    """Write the ensemble bundle and return the manifest ``{path: sha256}``."""
    files = {}
    files["trajectories.csv"] = csv_text(*_trajectory_rows(result))
    files["events.csv"] = csv_text(*_event_rows(result))
    summary = summarize(result)
    if extra:
        summary.update(_plain(extra))
    files["summary.json"] = json_text(summary)
    files.update(_plotdata(result))
    if config_echo is not None:
        files["config.yaml"] = config_echo
    return write_bundle(out_dir, files)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def ensemble_spec(cfg: SimConfig, sys=None, **changes) -> EnsembleSpec:
    sys = sys or cfg.build_system()
    es = cfg.ensemble
    init, rho0 = es.init, None
    if init == "uniform":
        init, rho0 = "custom", uniform_field(sys, t=es.t0)
    spec = EnsembleSpec(sys, es.members, es.horizon, cfg.effective_integrator(), cfg.rate, init,
                        None if es.theta0 is None else np.asarray(es.theta0, dtype=float), rho0,
                        stride=es.stride, seed=cfg.seed, block_size=es.block_size, t0=es.t0,
                        record_trajectories=es.record_trajectories, record_phases=es.record_phases)
    return replace(spec, **changes) if changes else spec


def cmd_run(cfg: SimConfig, out, threads):
    result = run_ensemble(ensemble_spec(cfg), threads)
    emit_outputs(result, out, dump_config(cfg))
    if result.failures:
        for f in result.failures:
            print(f"failure: {f}", file=_sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_oracle(cfg: SimConfig, out, threads):
    sys = cfg.build_system()
    es, oc, icfg = cfg.ensemble, cfg.oracle, cfg.effective_integrator()
    theta = np.asarray(es.theta0 if es.theta0 is not None else sys.initial_phases, dtype=float)
    n_cells = oc.cells if sys.dim == 1 else min(oc.cells, 128)
    rho0 = (uniform_field(sys, n_cells, es.t0) if oc.initial == "uniform"
            else psi_density_field(sys, theta, es.t0, n_cells))
    n_steps = int(round(es.horizon / icfg.dt))
    stride = max(1, n_steps // oc.samples)
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    times = es.t0 + idx * icfg.dt
    fields = fp_oracle(sys, theta, rho0, es.horizon, icfg.dt, scheme=oc.scheme,
                       diffusion=sys.hbar / float(sys.masses[0]), sample_times=times)
    rows, series = [], []
    for f in fields:
        ref = psi_density_field(sys, theta, f.t, n_cells)
        series.append({"t": f.t, "l1_to_psi2": f.l1(ref), "mass": f.mass()})
        if sys.dim == 1:
            rows.append(np.stack([np.full(n_cells, f.t), f.axes[0], f.values, ref.values], 1))
    files = {"plotdata/oracle_density.csv": csv_text(["t", "x", "rho", "psi2"],
                                                     np.concatenate(rows) if rows else np.zeros((0, 4)))}
    summary = {"seed": cfg.seed, "scheme": oc.scheme, "initial": oc.initial, "cells": n_cells,
               "series": series}
    status = EXIT_OK
    if oc.compare:
        init = "custom" if oc.initial == "uniform" else "pure"
        spec = ensemble_spec(cfg, sys, rate=ste.RateModel(lam=0.0), init=init, rho0=rho0,
                             theta0=theta, stride=stride,
                             record_phases=False)
        result = run_ensemble(spec, threads)
        comp = []
        for f in fields:
            k = int(np.argmin(np.abs(result.times - f.t)))
            d = qe_distance(result.q[k], f)
            comp.append({"t": float(result.times[k]), "ks": d.ks, "ks_threshold": d.ks_threshold,
                         "cdf_l1": d.cdf_l1, "hist_l1": d.hist_l1, "hist_l1_floor": d.hist_l1_floor,
                         "within_band": d.within_band})
        summary["comparison"] = comp
        summary["n_paths"] = result.spec.members
        if result.failures:
            summary["failures"] = result.failures
            status = EXIT_RUNTIME
        elif not all(c["within_band"] for c in comp):
            status = EXIT_STAT
    files["summary.json"] = json_text(summary)
    files["config.yaml"] = dump_config(cfg)
    write_bundle(out, files)
    return status


def cmd_ste_test(cfg: SimConfig, out, threads):
    sys = cfg.build_system()
    st, alpha = cfg.ste_test, cfg.overrides.significance
    if sys.K == 0:
        raise DualistError("sampler test needs at least two levels")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, 2)))
    tests = []
    tau = quantum.equilibrium_timescale(sys)
    for i in range(st.points):
        theta0 = 2 * np.pi * rng.random(sys.K)
        t = float(rng.random() * tau)
        q = quantum.sample_positions(sys, theta0, t, rng)
        q = q if sys.dim > 1 else float(np.asarray(q).reshape(-1)[0])
        qs = np.broadcast_to(np.asarray(q, dtype=float), (st.draws,) + np.shape(q))
        draw = ste.sample_ste(sys, t, qs, rng)
        keep = tuple(range(min(sys.K, 2)))
        probs = ste.cell_probabilities(sys, t, q, st.bins, axes=keep)
        res = ste.sampler_chi2(draw.theta, probs)
        tests.append({"point": i, "q": np.ravel(q).tolist(), "t": t, "chi2": res.statistic, "dof": res.dof,
                      "pvalue": res.pvalue, "mean_trials": float(np.mean(draw.trials)),
                      "passed": res.pvalue > alpha})
    failures = sum(not r["passed"] for r in tests)
    summary = {"seed": cfg.seed, "significance": alpha, "tests": tests, "failures": failures,
               "max_failures": st.max_failures, "passed": failures <= st.max_failures}
    write_bundle(out, {"summary.json": json_text(summary), "config.yaml": dump_config(cfg)})
    return EXIT_OK if summary["passed"] else EXIT_STAT


def cmd_dqe(cfg: SimConfig, out, threads):
    sys = cfg.build_system()
    d = cfg.dqe
    theta0 = None if cfg.ensemble.theta0 is None else np.asarray(cfg.ensemble.theta0, dtype=float)
    rep = dqe_stationarity_test(sys, d.members, cfg.seed, d.init, cfg.ensemble.t0, d.phase_bins,
                                cfg.overrides.significance, theta0)
    summary = {"seed": cfg.seed, "init": d.init, "members": d.members, "passed": rep.passed,
               "ks_pass": rep.ks_pass, "bin_ks": rep.bin_ks, "bin_pvalues": rep.bin_pvalues,
               "bin_thresholds": rep.bin_thresholds,
               "bin_counts": rep.bin_counts, "pooled_ks": rep.pooled_ks, "l1_gap": rep.l1_gap, "note": rep.note}
    files = {}
    if rep.phase is not None:
        summary["phase"] = {"pvalues": rep.phase.pvalues, "min_p": rep.phase.min_p, "passed": rep.phase.passed}
        pedges = np.linspace(0, 2 * np.pi, 33)
        cols = [0.5 * (pedges[1:] + pedges[:-1])]
        cols += [np.histogram(np.mod(rep.theta_after[:, k], 2 * np.pi), bins=pedges)[0] for k in range(sys.K)]
        files["plotdata/phase_hist.csv"] = csv_text(["theta"] + [f"count{k + 1}" for k in range(sys.K)],
                                                    np.stack(cols, 1))
    files["summary.json"] = json_text(summary)
    files["config.yaml"] = dump_config(cfg)
    write_bundle(out, files)
    if d.init == "pure":
        return EXIT_OK
    return EXIT_OK if rep.passed else EXIT_STAT


def cmd_grw(cfg: SimConfig, out, threads):
    g = cfg.grw
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, 3)))
    x = np.linspace(g.x_min, g.x_max, g.n)
    hbar, mass = cfg.model.hbar, float(np.ravel(cfg.model.mass)[0])
    wf = grw.gaussian_state(x, g.center, g.width)
    z = grw.hit_grid(wf, g.alpha)
    F = grw.hit_density(wf, g.alpha, z)
    integral = float(np.sum(0.5 * (F[1:] + F[:-1]) * np.diff(z)))
    draws = grw.sample_hit_center(wf, g.alpha, rng, g.draws)
    expected = wf.variance() + 1 / (2 * g.alpha)
    var = float(draws.var(ddof=1))
    m4 = float(np.mean((draws - draws.mean()) ** 4))
    var_se = math.sqrt(max(m4 - var**2, 0.0) / g.draws)
    final, records = grw.run_hits(wf, grw.HitConfig(g.alpha, g.lam), g.horizon, rng, mass, hbar)
    rows = [[r.index, r.t, r.z, r.var_before, r.var_after, r.energy_before, r.energy_after] for r in records]
    files = {"grw_hits.csv": csv_text(["index", "t", "z", "var_before", "var_after", "energy_before",
                                       "energy_after"], rows if rows else np.zeros((0, 7))),
             "plotdata/hit_density.csv": csv_text(["z", "F"], np.stack([z, F], 1))}
    var_ok = abs(var - expected) <= 3 * var_se
    summary = {"seed": cfg.seed, "alpha": g.alpha, "lam": g.lam, "hit_density_integral": integral,
               "center_variance": var, "center_variance_se": var_se, "center_variance_expected": expected,
               "center_variance_ok": var_ok, "n_hits": len(records), "final_norm": final.norm(),
               "final_variance": final.variance()}
    files["summary.json"] = json_text(summary)
    files["config.yaml"] = dump_config(cfg)
    write_bundle(out, files)
    return EXIT_OK if var_ok and abs(integral - 1) < 1e-6 else EXIT_STAT


def cmd_macro(cfg: SimConfig, out, threads):
    mc = cfg.macro
    hbar = cfg.model.hbar
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, 4)))
    scan = []
    for N in mc.N:
        t = float(macro.tau(N, mc.m, mc.L1, mc.chi, hbar))
        for nlt in mc.n_lambda_tau:
            lam = nlt / (N * t)
            sp = macro.spread_between_events(N, mc.m, lam, mc.L1, hbar)
            scan.append([N, t, lam, nlt, sp.variance, sp.ratio])
    sigma = mc.L1
    drift_rows, ok = [], True
    max_dev = 0.0
    for smu in mc.sigma_mu:
        spec = macro.GaussianPacketSpec(sigma, smu * hbar / (sigma * mc.m), mc.m)
        sys = macro.build_gaussian_packet(spec, hbar)
        bound = macro.deviation_bound(spec, hbar)
        for r in mc.r_over_sigma:
            R = r * sigma
            closed = float(macro.mean_drift_closed(spec, R, hbar))
            levels = float(macro.mean_drift_levels(sys, R))
            est, se = macro.mean_drift_mc(sys, R, mc.mc_samples, rng)
            gap = abs(levels - closed)
            good = abs(est - closed) <= 3 * se + gap
            ok &= good
            max_dev = max(max_dev, abs(closed - spec.U) / bound)
            drift_rows.append([smu, r, spec.U, closed, levels, est, se, gap, float(good)])
    ok &= max_dev <= 1 + 1e-9
    files = {
        "macro_scan.csv": csv_text(["N", "tau", "lam", "N_lambda_tau", "spread", "spread_ratio"], scan),
        "plotdata/drift_scan.csv": csv_text(["sigma_mu", "r_over_sigma", "U", "closed", "levels", "mc", "mc_se",
                                             "gap", "ok"], drift_rows),
    }
    summary = {"seed": cfg.seed, "drift_ok": ok, "max_deviation_over_bound": max_dev,
               "physical_scales": macro.physical_scales()}
    files["summary.json"] = json_text(summary)
    files["config.yaml"] = dump_config(cfg)
    write_bundle(out, files)
    return EXIT_OK if ok else EXIT_STAT


COMMANDS = {"run": cmd_run, "oracle": cmd_oracle, "ste-test": cmd_ste_test, "dqe": cmd_dqe,
            "grw": cmd_grw, "macro": cmd_macro}


def build_parser():
    p = argparse.ArgumentParser(prog="dualist", description="Stochastic pilot-wave simulator with phase events.")
    p.add_argument("command", choices=sorted(COMMANDS) + ["validate"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (defaults to the config's output)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=1, help="worker processes; output does not depend on it")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        for e in err.errors:
            print(f"config error: {e}", file=_sys.stderr)
        return EXIT_INVALID
    except OSError as err:
        print(f"cannot read config: {err}", file=_sys.stderr)
        return EXIT_INVALID
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            print("config error: --seed must be an unsigned 64-bit integer", file=_sys.stderr)
            return EXIT_INVALID
        cfg = replace(cfg, seed=args.seed)
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=_sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(json.dumps(_plain(config_to_dict(cfg)), sort_keys=True))
        return EXIT_OK
    out = args.out or cfg.output
    try:
        return COMMANDS[args.command](cfg, out, args.threads)
    except (DualistError, ValueError, OSError) as err:
        print(f"runtime error: {err}", file=_sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
