"""Reproducible jump-diffusion ensembles and their statistical checks.

Members are processed in fixed-size blocks.  Every block draws from its
own purpose-specific streams seeded by ``(seed, block, purpose)``, so the
output does not depend on how blocks are distributed over workers.

Inside a step, a member whose event falls at ``t + s`` is split with a
Brownian bridge: the step's Gaussian increment is kept and the partial
increment over ``[t, t + s]`` is drawn conditionally on it.  Members
without an event take exactly the same arithmetic as in a rate-0 run.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import quantum, ste
from .dynamics import DensityField, IntegratorConfig, advance
from .errors import DualistError, ModelError

PURPOSES = ("noise", "events", "ste", "bridge", "init")
INIT_POLICIES = ("pure", "dqe", "custom")
TWO_PI = 2 * np.pi


def block_streams(seed, block):
    """Independent generators for one block, keyed by purpose."""
    return {p: np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block), i)))
            for i, p in enumerate(PURPOSES)}


@dataclass
class EnsembleSpec:
    sys: object
    members: int
    horizon: float
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    rate: ste.RateModel = field(default_factory=lambda: ste.RateModel(lam=0.0))
    init: str = "pure"
    theta0: object = None
    rho0: DensityField | None = None
    q0: object = None
    stride: int = 100
    seed: int = 0
    block_size: int = 256
    t0: float = 0.0
    record_trajectories: bool = True
    record_phases: bool = True
    track_moments: bool = True

    def __post_init__(self):
        if self.members < 0:
            raise ValueError("member count must be >= 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.init not in INIT_POLICIES:
            raise ValueError(f"init must be one of {INIT_POLICIES}")
        if self.init == "custom" and self.rho0 is None and self.q0 is None:
            raise ValueError("custom init needs rho0 or q0")
        if self.block_size < 1 or self.stride < 1:
            raise ValueError("block_size and stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.integrator.dt))

    def initial_theta(self):
        th = self.sys.initial_phases if self.theta0 is None else self.theta0
        return np.asarray(th, dtype=float).reshape(self.sys.K)

    def describe(self) -> dict:
        """Plain-data echo used for hashing and the summary document."""
        cfg = self.integrator
        return {
            "system": {"label": self.sys.label, "K": self.sys.K, "dim": self.sys.dim,
                       "energies": [float(e) for e in self.sys.energies],
                       "magnitudes": [float(c) for c in self.sys.magnitudes]},
            "members": self.members, "horizon": self.horizon, "t0": self.t0,
            "integrator": {"dt": cfg.dt, "mode": cfg.mode, "boundary": cfg.boundary,
                           "b_max": cfg.b_max, "eps_node": cfg.eps_node},
            "rate": {"mode": self.rate.mode, "lam": self.rate.lam,
                     "n_particles": self.rate.n_particles, "kappa": self.rate.kappa},
            "init": self.init, "theta0": [float(v) for v in self.initial_theta()],
            "stride": self.stride, "seed": self.seed, "block_size": self.block_size,
        }

    def config_hash(self) -> str:
        text = json.dumps(self.describe(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


EVENT_FIELDS = ("member", "block", "t", "q", "theta_before", "theta_after", "trials",
                "mu_before", "mu_after", "var_before", "var_after", "g")


@dataclass
class BlockResult:
    block: int
    ids: np.ndarray
    times: np.ndarray
    q: np.ndarray
    theta: np.ndarray | None
    mu: np.ndarray | None
    var: np.ndarray | None
    g: np.ndarray | None
    events: dict
    q_final: np.ndarray
    theta_final: np.ndarray
    deferred: int = 0
    failure: str | None = None


def _as2d(sys, q):
    q = np.asarray(q, dtype=float)
    return q[:, None] if sys.dim == 1 else q


def _sample_field(field_: DensityField, n, rng):
    """Positions from a cell-centred density: pick a cell, then uniform inside."""
    p = field_.values.ravel() / field_.values.sum()
    cells = rng.choice(p.size, size=n, p=p)
    idx = np.unravel_index(cells, field_.values.shape)
    out = [a[i] + (rng.random(n) - 0.5) * h for a, i, h in zip(field_.axes, idx, field_.spacing)]
    return out[0] if len(out) == 1 else np.stack(out, -1)


def _initial_state(spec: EnsembleSpec, ids, rng):
    sys = spec.sys
    m = len(ids)
    if spec.init == "dqe":
        theta = TWO_PI * rng.random((m, sys.K))
    else:
        theta = np.tile(spec.initial_theta(), (m, 1))
    if spec.init == "custom":
        if spec.q0 is not None:
            q = np.asarray(spec.q0, dtype=float)[ids].copy()
        else:
            q = _sample_field(spec.rho0, m, rng)
    else:
        q = quantum.sample_positions(sys, theta, spec.t0, rng)
    return theta, q


def _moments(sys, theta, t, q):
    mu, var, _ = quantum.moments(sys, theta, t)
    mu, var = np.atleast_2d(mu), np.atleast_2d(var)
    g = np.nan_to_num(_as2d(sys, ste.post_ste_mean(sys, q)) - mu)
    return mu, var, g


def _run_block(spec: EnsembleSpec, block: int) -> BlockResult:
    sys, cfg = spec.sys, spec.integrator
    start = block * spec.block_size
    ids = np.arange(start, min(spec.members, start + spec.block_size))
    m = len(ids)
    rng = block_streams(spec.seed, block)
    theta, q = _initial_state(spec, ids, rng["init"])
    dt = cfg.dt
    lam = spec.rate.effective_rate(sys)
    next_ev = spec.t0 + rng["events"].exponential(1 / lam, m) if lam > 0 else np.full(m, np.inf)
    stochastic = cfg.mode == "stochastic"

    times, qs, ths, mus, vs, gs = [], [], [], [], [], []
    ev = {k: [] for k in EVENT_FIELDS}
    deferred = 0
    failure = None

    def record(t):
        times.append(t)
        if spec.record_trajectories:
            qs.append(q.copy())
        if spec.record_phases:
            ths.append(theta.copy())
        if spec.track_moments:
            mu, var, g = _moments(sys, theta, t, q)
            mus.append(mu)
            vs.append(var)
            gs.append(g)

    record(spec.t0)
    n_steps = spec.n_steps
    try:
        for step in range(n_steps):
            t = spec.t0 + step * dt
            t1 = spec.t0 + (step + 1) * dt
            noise = rng["noise"].standard_normal(q.shape) if stochastic else np.zeros(q.shape)
            q_new = advance(sys, theta, t, q, dt, noise, cfg)
            hit = np.flatnonzero(next_ev <= t1)
            if hit.size:
                qh = q[hit].copy()
                th = theta[hit].copy()
                cur = np.full(hit.size, t)
                rem = np.full(hit.size, dt)
                dW = math.sqrt(dt) * noise[hit]
                while True:
                    idx = np.flatnonzero(next_ev[hit] <= t1)
                    if not idx.size:
                        break
                    s = np.maximum(next_ev[hit[idx]] - cur[idx], 0.0)
                    frac = s / rem[idx]
                    spread = np.sqrt(s * (rem[idx] - s) / rem[idx])
                    z = rng["bridge"].standard_normal(qh[idx].shape)
                    if qh.ndim > 1:
                        frac, spread = frac[:, None], spread[:, None]
                    Ws = frac * dW[idx] + spread * z if stochastic else np.zeros(qh[idx].shape)
                    mv = s > 0
                    if mv.any():
                        j = idx[mv]
                        sj = s[mv]
                        nz = Ws[mv] / (np.sqrt(sj)[:, None] if qh.ndim > 1 else np.sqrt(sj))
                        qh[j] = advance(sys, th[j], cur[j], qh[j], sj, nz, cfg)
                    dW[idx] -= Ws
                    rem[idx] -= s
                    cur[idx] = next_ev[hit[idx]]
                    gam = ste.gamma_values(sys, qh[idx])
                    ok = np.asarray(gam) > 0
                    bad = idx[~ok]
                    if bad.size:
                        deferred += bad.size
                        next_ev[hit[bad]] = t1 + 0.5 * dt
                    j = idx[ok]
                    if j.size:
                        draw = ste.sample_ste(sys, cur[j], qh[j], rng["ste"])
                        mu0, var0, g0 = _moments(sys, th[j], cur[j], qh[j])
                        mu1, var1, _ = _moments(sys, draw.theta, cur[j], qh[j])
                        for key, val in (("member", ids[hit[j]]), ("block", np.full(j.size, block)),
                                         ("t", cur[j].copy()), ("q", _as2d(sys, qh[j]).copy()),
                                         ("theta_before", th[j].copy()), ("theta_after", draw.theta.copy()),
                                         ("trials", np.atleast_1d(draw.trials)), ("mu_before", mu0),
                                         ("mu_after", mu1), ("var_before", var0), ("var_after", var1),
                                         ("g", g0)):
                            ev[key].append(val)
                        th[j] = draw.theta
                        next_ev[hit[j]] += rng["events"].exponential(1 / lam, j.size)
                go = rem > 0
                if go.any():
                    nz = dW[go] / (np.sqrt(rem[go])[:, None] if qh.ndim > 1 else np.sqrt(rem[go]))
                    qh[go] = advance(sys, th[go], cur[go], qh[go], rem[go], nz, cfg)
                q_new[hit] = qh
                theta[hit] = th
            q = q_new
            if (step + 1) % spec.stride == 0 or step + 1 == n_steps:
                record(t1)
    except DualistError as err:
        failure = f"block {block} (members {ids[0]}..{ids[-1]}): {err}"

    events = _pack_events(ev, sys)
    if events["member"].size:
        order = np.lexsort((events["t"], events["member"]))
        events = {k: v[order] for k, v in events.items()}
    return BlockResult(
        block, ids, np.array(times),
        np.array(qs) if qs else None,
        np.array(ths) if ths else None,
        np.array(mus) if mus else None,
        np.array(vs) if vs else None,
        np.array(gs) if gs else None,
        events, q.copy(), theta.copy(), deferred, failure)


def _pack_events(ev, sys):
    d, K = sys.dim, sys.K
    shapes = {"member": (0,), "block": (0,), "t": (0,), "trials": (0,), "q": (0, d),
              "theta_before": (0, K), "theta_after": (0, K), "mu_before": (0, d), "mu_after": (0, d),
              "var_before": (0, d), "var_after": (0, d), "g": (0, d)}
    out = {}
    for key in EVENT_FIELDS:
        if ev[key]:
            out[key] = np.concatenate(ev[key])
        else:
            dtype = np.int64 if key in ("member", "block", "trials") else float
            out[key] = np.zeros(shapes[key], dtype=dtype)
    return out


@dataclass
class Stat:
    value: object
    se: object
    n: int

    def to_dict(self):
        conv = lambda v: np.asarray(v).tolist()
        return {"value": conv(self.value), "se": conv(self.se), "n": int(self.n)}


@dataclass
class EnsembleResult:
    spec: EnsembleSpec
    seed: int
    config_hash: str
    times: np.ndarray
    q: np.ndarray | None
    theta: np.ndarray | None
    mu: np.ndarray | None
    var: np.ndarray | None
    g: np.ndarray | None
    events: dict
    q_final: np.ndarray
    theta_final: np.ndarray
    failures: list
    deferred: int
    rate: float
    member_ids: np.ndarray = None

    @property
    def n_events(self) -> int:
        return int(self.events["t"].size)

    def mean_series(self) -> Stat:
        if self.mu is None:
            raise ValueError("moments were not tracked")
        n = self.mu.shape[1]
        return Stat(self.mu.mean(1), self.mu.std(1, ddof=1) / math.sqrt(n) if n > 1 else 0 * self.mu[:, 0], n)

    def variance_series(self) -> Stat:
        if self.var is None:
            raise ValueError("moments were not tracked")
        n = self.var.shape[1]
        return Stat(self.var.mean(1), self.var.std(1, ddof=1) / math.sqrt(n) if n > 1 else 0 * self.var[:, 0], n)


def run_ensemble(spec: EnsembleSpec, threads=1) -> EnsembleResult:
    """Run every member; bit-identical for any ``threads`` value."""
    n_blocks = -(-spec.members // spec.block_size)
    if threads and threads > 1 and n_blocks > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(_run_block, [spec] * n_blocks, range(n_blocks)))
    else:
        blocks = [_run_block(spec, b) for b in range(n_blocks)]
    return _merge(spec, blocks)


def _empty_result(spec):
    sys = spec.sys
    return EnsembleResult(spec, spec.seed, spec.config_hash(), np.array([spec.t0]), None, None, None, None, None,
                          _pack_events({k: [] for k in EVENT_FIELDS}, sys), np.zeros((0,) if sys.dim == 1 else
                                                                                     (0, sys.dim)),
                          np.zeros((0, sys.K)), [], 0, spec.rate.effective_rate(sys), np.zeros(0, dtype=int))


def _merge(spec, blocks):
    if not blocks:
        return _empty_result(spec)
    failures = [b.failure for b in blocks if b.failure]
    good = [b for b in blocks if not b.failure] or blocks[:0]
    ref = good[0] if good else None
    n_rec = len(ref.times) if ref else 0
    ok = [b for b in good if len(b.times) == n_rec]

    def cat(attr, axis=1):
        parts = [getattr(b, attr) for b in ok]
        if not parts or parts[0] is None:
            return None
        return np.concatenate(parts, axis=axis)

    events = {k: np.concatenate([b.events[k] for b in blocks]) for k in EVENT_FIELDS}
    return EnsembleResult(
        spec, spec.seed, spec.config_hash(),
        ref.times if ref else np.array([spec.t0]),
        cat("q"), cat("theta"), cat("mu"), cat("var"), cat("g"),
        events,
        np.concatenate([b.q_final for b in blocks]),
        np.concatenate([b.theta_final for b in blocks]),
        failures, int(sum(b.deferred for b in blocks)),
        spec.rate.effective_rate(spec.sys),
        np.concatenate([b.ids for b in ok]) if ok else np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

@dataclass
class MeanFit:
    lam_hat: float
    se: float
    ci: tuple
    n_events: int
    exposure: float
    degenerate: bool
    mu_p_mc: Stat | None = None
    mu_p_exact: float | None = None
    note: str = ""

    def contains(self, value, z=1.96) -> bool:
        return abs(value - self.lam_hat) <= z * self.se


def _window_mask(times, window):
    if window is None:
        return np.ones(len(times), dtype=bool)
    lo, hi = window
    return (times >= lo) & (times <= hi)


def mean_evolution_check(result: EnsembleResult, window=None) -> MeanFit:
    """Fit the relaxation coefficient of the ensemble centroid.

    Each event moves the centroid by ``J = mu(theta') - mu(theta)`` and
    its conditional mean is ``g = {mu}_p(q) - mu(theta)``.  The estimator
    ``sum_e g_e J_e / int sum_m g_m**2 ds`` is the ratio of the observed
    jump response to its compensator, so it is consistent for the rate
    multiplying the bracket term of the centroid law.
    """
    sys = result.spec.sys
    if sys.K == 0:
        return MeanFit(0.0, 0.0, (0.0, 0.0), result.n_events, 0.0, True,
                       note="single level: centroid is constant, fit is degenerate")
    if result.g is None:
        raise ValueError("moments were not tracked")
    mask = _window_mask(result.times, window)
    ts = result.times[mask]
    g2 = np.sum(result.g[mask] ** 2, axis=(1, 2))
    exposure = float(np.sum(0.5 * (g2[1:] + g2[:-1]) * np.diff(ts))) if len(ts) > 1 else 0.0
    ev = result.events
    lo, hi = (ts[0], ts[-1]) if len(ts) else (0.0, 0.0)
    sel = (ev["t"] > lo) & (ev["t"] <= hi)
    n_ev = int(sel.sum())
    if exposure <= 0:
        return MeanFit(0.0, 0.0, (0.0, 0.0), n_ev, exposure, True, note="zero exposure")
    if n_ev == 0:
        if result.rate > 0:
            raise ValueError("no events in the window")
        return MeanFit(0.0, 0.0, (0.0, 0.0), 0, exposure, False, note="no events (rate 0)")
    J = ev["mu_after"][sel] - ev["mu_before"][sel]
    gJ = np.sum(ev["g"][sel] * J, axis=1)
    lam_hat = float(gJ.sum() / exposure)
    se = float(math.sqrt(np.sum(gJ**2)) / exposure)
    post = ev["mu_after"][sel][:, 0]
    exact = ev["mu_before"][sel][:, 0] + ev["g"][sel][:, 0]
    mc = Stat(float(post.mean()), float(post.std(ddof=1) / math.sqrt(n_ev)) if n_ev > 1 else 0.0, n_ev)
    return MeanFit(lam_hat, se, (lam_hat - 1.96 * se, lam_hat + 1.96 * se), n_ev, exposure, False,
                   mc, float(exact.mean()))


@dataclass
class VarianceFit:
    coefficient: float
    se: float
    slope: float
    chi: float | None
    n_events: int
    degenerate: bool
    note: str = ""


def variance_evolution_check(result: EnsembleResult, control: EnsembleResult | None = None,
                             window=None, max_events=300, n_mc=200, seed=0) -> VarianceFit:
    """Fit the bracket coefficient of the variance law.

    Each event changes the variance by ``J = sigma**2(theta') - sigma**2(theta)``
    whose conditional mean is ``-(sigma**2 - {sigma**2}_p)``.  The slope of
    ``J`` on ``h = sigma**2 - {sigma**2}_p`` (Monte Carlo ``{sigma**2}_p``)
    times the empirical event rate estimates the coefficient, expected to be
    ``-lambda``.  ``chi`` is the growth rate of the control ensemble's mean
    variance.
    """
    sys = result.spec.sys
    chi = None
    if control is not None and control.var is not None and len(control.times) > 1:
        v = control.var.sum(axis=2).mean(axis=1)
        chi = float(np.polyfit(control.times, v, 1)[0])
    if sys.K == 0:
        return VarianceFit(0.0, 0.0, 0.0, chi, result.n_events, True, "single level: variance constant")
    ev = result.events
    sel = np.flatnonzero(_window_mask(ev["t"], window))[:max_events]
    if sel.size < 2:
        if result.rate > 0:
            raise ValueError("insufficient events in the window")
        return VarianceFit(0.0, 0.0, 0.0, chi, int(sel.size), False, "no events (rate 0)")
    rng = np.random.default_rng(seed)
    q = ev["q"][sel] if sys.dim > 1 else ev["q"][sel, 0]
    post = ste.post_ste_moments(sys, q, ev["t"][sel], rng, n_mc)
    var_p = np.atleast_2d(post.variance.T).T.reshape(len(sel), -1).sum(axis=1)
    before = ev["var_before"][sel].sum(axis=1)
    J = ev["var_after"][sel].sum(axis=1) - before
    h = before - var_p
    slope = float(np.sum(J * h) / np.sum(h**2))
    resid = J - slope * h
    slope_se = float(math.sqrt(np.sum(resid**2 * h**2)) / np.sum(h**2))
    members = result.spec.members
    T = result.times[-1] - result.times[0]
    rate_emp = result.n_events / (members * T) if T > 0 else 0.0
    return VarianceFit(rate_emp * slope, rate_emp * slope_se, slope, chi, int(sel.size), False)


@dataclass
class PhaseTest:
    chi2: np.ndarray
    pvalues: np.ndarray
    pair_pvalues: dict
    min_p: float
    alpha: float
    passed: bool
    n: int


def phase_uniformity_test(theta, bins=32, alpha=0.01) -> PhaseTest:
    """Chi-square uniformity per component plus pairwise Rayleigh tests.

    ``passed`` uses a Bonferroni split of ``alpha`` over the components.
    """
    th = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    if th.ndim == 1:
        th = th[:, None]
    n, K = th.shape
    if n < 1000:
        raise ValueError("phase uniformity test needs at least 1000 samples")
    chi2, pv = np.zeros(K), np.ones(K)
    for k in range(K):
        counts, _ = np.histogram(th[:, k], bins=bins, range=(0, TWO_PI))
        res = stats.chisquare(counts)
        chi2[k], pv[k] = res.statistic, res.pvalue
    pairs = {}
    for a in range(K):
        for b in range(a + 1, min(K, 8)):
            r = abs(np.mean(np.exp(1j * (th[:, a] - th[:, b]))))
            pairs[(a, b)] = float(math.exp(-n * r**2))
    min_p = float(pv.min()) if K else 1.0
    return PhaseTest(chi2, pv, pairs, min_p, alpha, bool(K == 0 or min_p > alpha / K), n)


def conditional_pit(sys, theta, t, q, n_grid=1024, chunk=512):
    """Probability integral transform of each position under its own ``|psi|**2``.

    For 2-D systems the first coordinate's marginal is used.
    """
    theta = quantum.theta_rows(theta, sys.K)
    n = len(theta)
    if sys.dim == 1:
        x = np.linspace(sys.lower[0], sys.upper[0], n_grid)
        Phi = quantum.level_values(sys, x[:, None])[0]
        qx = np.asarray(q, dtype=float).reshape(-1)
    else:
        ng = int(math.sqrt(n_grid)) * 2
        x = np.linspace(sys.lower[0], sys.upper[0], ng)
        y = np.linspace(sys.lower[1], sys.upper[1], ng)
        X, Y = np.meshgrid(x, y, indexing="ij")
        Phi = quantum.level_values(sys, np.stack([X.ravel(), Y.ravel()], -1))[0]
        qx = np.asarray(q, dtype=float)[:, 0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    u = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        a = quantum.phase_factors(sys, theta[sl], t[sl])
        rho = np.abs(a @ Phi.T) ** 2
        if sys.dim > 1:
            rho = rho.reshape(len(rho), len(x), -1).sum(axis=2)
        cdf = np.concatenate([np.zeros((len(rho), 1)),
                              np.cumsum(0.5 * (rho[:, 1:] + rho[:, :-1]) * np.diff(x), axis=1)], axis=1)
        cdf /= cdf[:, -1:]
        for r, row in enumerate(cdf):
            u[s + r] = np.interp(qx[s + r], x, row)
    return u


@dataclass
class DqeReport:
    phase: PhaseTest | None
    bin_ks: list
    bin_pvalues: list
    bin_thresholds: list
    bin_counts: list
    pooled_ks: float
    ks_pass: bool
    passed: bool
    l1_gap: float
    theta_after: np.ndarray
    q: np.ndarray
    note: str = ""


def dqe_stationarity_test(sys, members, seed, init="dqe", t0=0.0, phase_bins=4, alpha=0.01,
                          theta0=None) -> DqeReport:
    """Apply one event to every member of an ensemble and test stationarity.

    ``init="dqe"`` draws uniform phases with equilibrium positions;
    ``init="pure"`` starts every member at ``theta0`` instead, for which
    the post-event conditional densities are not ``|psi_theta'|**2``; the
    mean L1 gap predicted by the Bayes posterior is reported.
    """
    if sys.K == 0:
        return DqeReport(None, [], [], [], [], 0.0, True, True, 0.0, np.zeros((members, 0)), np.zeros(members),
                         "single level: vacuously stationary")
    rng = block_streams(seed, 0)
    if init == "dqe":
        theta, q = ste.make_dqe(ste.DqeEnsembleSpec(sys, members), rng["init"], t0)
    elif init == "pure":
        th0 = sys.initial_phases if theta0 is None else np.asarray(theta0, dtype=float)
        theta = np.tile(th0, (members, 1))
        q = quantum.sample_positions(sys, theta, t0, rng["init"])
    else:
        raise ModelError(f"unknown init policy {init!r}")
    after = ste.sample_ste(sys, t0, q, rng["ste"]).theta
    phase = phase_uniformity_test(after, alpha=alpha)
    u = conditional_pit(sys, after, t0, q)
    edges = np.linspace(0, TWO_PI, phase_bins + 1)
    which = np.clip(np.digitize(np.mod(after[:, 0], TWO_PI), edges) - 1, 0, phase_bins - 1)
    ks, pv, thr, cnt = [], [], [], []
    for b in range(phase_bins):
        ub = u[which == b]
        cnt.append(int(ub.size))
        res = stats.kstest(ub, "uniform") if ub.size else None
        ks.append(float(res.statistic) if res else float("nan"))
        pv.append(float(res.pvalue) if res else float("nan"))
        thr.append(1.358 / math.sqrt(max(ub.size, 1)))
    # ks_pass: every bin inside its own 95% band (family-wise null failure ~1 - 0.95**bins);
    # passed: phase test plus every bin's KS p-value above alpha
    ks_pass = all(k < h for k, h in zip(ks, thr))
    bins_ok = all(p > alpha for p in pv)
    pooled = float(stats.kstest(u, "uniform").statistic)
    gap = 0.0
    if init == "pure":
        from .dynamics import psi_density_field

        base = psi_density_field(sys, theta[0], t0, 512 if sys.dim == 1 else 64)
        probes = [np.full(sys.K, c) for c in 0.5 * (edges[1:] + edges[:-1])]
        gaps = [ste.posterior_density(sys, base, th, t0).l1(psi_density_field(sys, th, t0, len(base.axes[0])))
                for th in probes]
        gap = float(np.mean(gaps))
    return DqeReport(phase, ks, pv, thr, cnt, pooled, ks_pass, bool(bins_ok and phase.passed), gap, after, q)


@dataclass
class IrreversibilityTrend:
    epochs: np.ndarray
    circular_variance: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    monotone: bool


def irreversibility_trend(result: EnsembleResult, component=0, max_epoch=None, min_members=100):
    """Circular variance of one phase component against event count."""
    ev = result.events
    members = result.spec.members
    theta0 = result.spec.initial_theta() if result.spec.init != "dqe" else None
    member = ev["member"]
    # epoch index of each event within its member's history
    first = np.r_[True, member[1:] != member[:-1]]
    start = np.maximum.accumulate(np.where(first, np.arange(len(member)), 0))
    epoch = np.arange(len(member)) - start + 1
    top = int(epoch.max()) if epoch.size else 0
    if max_epoch is not None:
        top = min(top, max_epoch)
    cv, se, cnt = [], [], []
    for k in range(top + 1):
        if k == 0:
            if theta0 is None:
                continue
            ph = np.full(members, theta0[component])
        else:
            ph = ev["theta_after"][epoch == k, component]
        if ph.size < min_members:
            break
        c, s = np.cos(ph), np.sin(ph)
        R = math.hypot(c.mean(), s.mean())
        cv.append(1 - R)
        se.append(math.sqrt((c.var() + s.var()) / ph.size))
        cnt.append(ph.size)
    cv, se = np.array(cv), np.array(se)
    tol = 3 * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    mono = bool(np.all(np.diff(cv) >= -tol))
    return IrreversibilityTrend(np.arange(len(cv)), cv, se, np.array(cnt), mono)
