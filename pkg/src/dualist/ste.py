"""Spontaneous transition events: the particle conditions the wave.

At Poisson times the phase vector is redrawn from

    f(theta' | q) = |psi(q, theta', t)|**2 / Gamma(q),
    Gamma(q) = (2 pi)**K sum_i |C_i|**2 |Phi_i(q)|**2,

while the particle position, the level magnitudes and the degenerate
coefficients stay fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import quantum
from .dynamics import DensityField, _mesh
from .errors import ModelError, NodeError, SamplerError

RATE_MODES = ("constant", "per_particle", "energy_spread")
DEFAULT_TRIAL_CAP = 10**7
TWO_PI = 2 * np.pi


@dataclass
class RateModel:
    mode: str = "constant"
    lam: float = 0.1
    n_particles: int = 1
    kappa: float | None = None

    def __post_init__(self):
        if self.mode not in RATE_MODES:
            raise ValueError(f"rate mode must be one of {RATE_MODES}")
        if self.lam < 0:
            raise ValueError("rate lambda must be >= 0")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.mode == "energy_spread":
            if self.kappa is None:
                raise ValueError("energy_spread mode needs an explicit kappa")
            if self.kappa < 0:
                raise ValueError("kappa must be >= 0")

    def effective_rate(self, sys=None) -> float:
        if self.mode == "constant":
            return float(self.lam)
        if self.mode == "per_particle":
            return float(self.n_particles * self.lam)
        _, spread = quantum.energy_moments(sys)
        return float(self.kappa * spread / sys.hbar)


@dataclass
class SteEvent:
    t_event: float
    theta_before: np.ndarray
    theta_after: np.ndarray
    q: np.ndarray
    accept_trials: int
    block: int = 0


def amplitudes(sys, t, q):
    """Per-level amplitudes ``a_i = |C_i| Phi_i(q) exp(-i E_i t / hbar)``, shape (n, K+1)."""
    pts, _ = quantum._points(sys, q)
    Phi = quantum.level_values(sys, pts)[0]
    t = np.asarray(t, dtype=float)
    tt = t[:, None] if t.ndim else t
    return sys.magnitudes * Phi * np.exp(-1j * sys.energies * tt / sys.hbar)


def gamma_values(sys, q):
    """Vectorised normaliser without the zero check."""
    pts, shape = quantum._points(sys, q)
    Phi = quantum.level_values(sys, pts)[0]
    g = TWO_PI**sys.K * np.sum(sys.magnitudes**2 * np.abs(Phi) ** 2, axis=1)
    return g.reshape(shape) if shape else float(g[0])


def gamma(sys, q):
    """STE normaliser ``Gamma(q)``; raises :class:`NodeError` where it vanishes."""
    g = gamma_values(sys, q)
    if np.any(np.asarray(g) <= 0):
        raise NodeError("Gamma vanishes: particle sits on a common node of all levels")
    return g


def ste_density(sys, t, q, theta_new):
    """``f(theta' | q, t)``.  ``theta_new`` may carry leading batch axes."""
    a = amplitudes(sys, t, q)[0]
    g = gamma(sys, q)
    th = np.asarray(theta_new, dtype=float)
    if sys.K == 0:
        return np.ones(th.shape[:-1]) if th.ndim > 1 else 1.0
    phase = np.exp(1j * th)
    psi = a[0] + phase @ a[1:]
    return np.abs(psi) ** 2 / g


@dataclass
class SteSample:
    theta: np.ndarray
    trials: np.ndarray


def sample_ste(sys, t, q, rng, trial_cap=DEFAULT_TRIAL_CAP) -> SteSample:
    """Draw new phase vectors by rejection from the triangle envelope.

    ``q`` may hold one point or ``n`` points (one draw each); ``t`` is a
    scalar or per point.  Proposals are uniform on ``[0, 2 pi)**K`` and
    accepted with probability ``|psi|**2 / (sum_i |a_i|)**2``.
    """
    pts, shape = quantum._points(sys, q)
    n = len(pts)
    a = amplitudes(sys, t, pts if sys.dim > 1 else pts[:, 0])
    if np.any(np.sum(np.abs(a) ** 2, axis=1) <= 0):
        raise NodeError("Gamma vanishes at a sampling point")
    K = sys.K
    theta = np.zeros((n, K))
    trials = np.zeros(n, dtype=np.int64)
    if K == 0:
        trials[:] = 1
        return SteSample(theta if shape else theta[0], trials if shape else trials[0])
    env = np.sum(np.abs(a), axis=1) ** 2
    pending = np.arange(n)
    while pending.size:
        prop = TWO_PI * rng.random((pending.size, K))
        u = rng.random(pending.size)
        ap = a[pending]
        psi = ap[:, 0] + np.sum(ap[:, 1:] * np.exp(1j * prop), axis=1)
        ok = u * env[pending] < np.abs(psi) ** 2
        trials[pending] += 1
        theta[pending[ok]] = prop[ok]
        pending = pending[~ok]
        if pending.size and trials[pending].max() >= trial_cap:
            raise SamplerError(f"rejection sampler exceeded {trial_cap} trials")
    if shape:
        return SteSample(theta, trials)
    return SteSample(theta[0], trials[0])


def schedule_events(rate: RateModel, sys, horizon, rng, t0=0.0):
    """Poisson event times in ``(t0, t0 + horizon]``."""
    lam = rate.effective_rate(sys)
    times = []
    if lam <= 0 or horizon <= 0:
        return np.array(times)
    t = t0
    while True:
        t += rng.exponential(1 / lam)
        if t > t0 + horizon:
            return np.array(times)
        times.append(t)


def event_probability(rate, T) -> float:
    """Probability of at least one event in time ``T`` at the given rate."""
    return float(-np.expm1(-rate * T))


# ---------------------------------------------------------------------------
# analytic oracles
# ---------------------------------------------------------------------------

def phase_grid(n):
    return (np.arange(n) + 0.5) * TWO_PI / n


@dataclass
class KernelTable:
    grid: np.ndarray
    values: np.ndarray  # density over theta' (K axes) for a fixed source theta

    def total(self):
        return float(self.values.sum() * (self.grid[1] - self.grid[0]) ** self.values.ndim) if self.values.ndim else 1.0


def _q_grid(sys, n_cells):
    from .dynamics import cell_axes

    n_cells = n_cells or (sys.grid_points if sys.dim == 1 else 96)
    axes = cell_axes(sys, n_cells)
    pts = _mesh(axes)
    vol = float(np.prod([a[1] - a[0] for a in axes]))
    return axes, pts, vol


def _theta_mesh(grid, K):
    mesh = np.meshgrid(*([grid] * K), indexing="ij")
    return np.stack([m.ravel() for m in mesh], -1)


def transition_kernel(sys, theta, t, n_phase=64, n_cells=None, theta_new=None):
    """``f(theta' | theta) = int f(theta' | q) |psi(q, theta, t)|**2 dq``.

    Tabulated on a midpoint phase grid (K <= 2), or evaluated at the
    explicit ``theta_new`` points when given.
    """
    if sys.K > 2:
        raise ModelError("transition kernel tabulation supports K <= 2 only")
    grid = phase_grid(n_phase)
    if sys.K == 0:
        return KernelTable(grid, np.array(1.0))
    _, pts, vol = _q_grid(sys, n_cells)
    q = pts if sys.dim > 1 else pts[:, 0]
    a = amplitudes(sys, t, q)
    g = gamma_values(sys, q)
    src = np.abs(a[:, 0] + a[:, 1:] @ np.exp(1j * np.asarray(theta, dtype=float))) ** 2
    keep = g > 0
    w = np.where(keep, src / np.where(keep, g, 1.0), 0.0) * vol
    targets = _theta_mesh(grid, sys.K) if theta_new is None else np.atleast_2d(theta_new)
    out = np.empty(len(targets))
    for s in range(0, len(targets), 256):
        ph = np.exp(1j * targets[s:s + 256])
        psi = a[None, :, 0] + ph @ a[:, 1:].T
        out[s:s + 256] = np.abs(psi) ** 2 @ w
    if theta_new is not None:
        return out
    vals = out.reshape((n_phase,) * sys.K)
    return KernelTable(grid, vals)


def posterior_density(sys, rho: DensityField, theta_new, t) -> DensityField:
    """Bayes update of a particle density after the phases become ``theta'``."""
    pts = _mesh(rho.axes)
    q = pts if sys.dim > 1 else pts[:, 0]
    g = gamma_values(sys, q)
    dens = np.abs(quantum.evaluate_psi(sys, theta_new, t, q)) ** 2
    like = np.where(g > 0, dens / np.where(g > 0, g, 1.0), 0.0).reshape(rho.values.shape)
    post = rho.values * like
    marginal = post.sum() * rho.cell_volume
    if not marginal > 0:
        raise ValueError("zero marginal density for the requested phase vector")
    return DensityField(rho.axes, post / marginal, t, rho.periodic)


def dqe_density(sys, n_cells=None) -> DensityField:
    """Marginal particle density ``(2 pi)**-K Gamma(q)`` of the DQE state."""
    axes, pts, vol = _q_grid(sys, n_cells)
    g = gamma_values(sys, pts if sys.dim > 1 else pts[:, 0]) / TWO_PI**sys.K
    return DensityField(axes, g.reshape([len(a) for a in axes]), 0.0, sys.periodic).normalized()


# ---------------------------------------------------------------------------
# ensembles and run state
# ---------------------------------------------------------------------------

@dataclass
class DqeEnsembleSpec:
    sys: object
    member_count: int

    def __post_init__(self):
        if self.member_count < 1:
            raise ValueError("member_count must be >= 1")


def make_dqe(spec: DqeEnsembleSpec, rng, t=0.0):
    """Uniform i.i.d. phases and one equilibrium position per member."""
    sys = spec.sys
    theta = TWO_PI * rng.random((spec.member_count, sys.K))
    q = quantum.sample_positions(sys, theta, t, rng)
    return theta, q


@dataclass
class RunState:
    sys: object
    theta: np.ndarray
    q: np.ndarray
    t: float = 0.0
    events: list = field(default_factory=list)


def apply_ste(state: RunState, event: SteEvent) -> RunState:
    """Replace the phases; position, clock and coefficients are untouched."""
    return replace(state, theta=np.array(event.theta_after, dtype=float),
                   events=state.events + [event])


def ste_event(state: RunState, rng, trial_cap=DEFAULT_TRIAL_CAP) -> SteEvent:
    """Sample an event at the current position and time."""
    s = sample_ste(state.sys, state.t, state.q if state.sys.dim > 1 else state.q.reshape(-1)[0],
                   rng, trial_cap)
    return SteEvent(state.t, np.array(state.theta, dtype=float), np.atleast_1d(s.theta),
                    np.array(state.q, dtype=float), int(s.trials))


# ---------------------------------------------------------------------------
# post-event mixed-state moments
# ---------------------------------------------------------------------------

def post_ste_mean(sys, q):
    """Exact mixed-state centroid ``{mu}_p(q)`` after an event at ``q``.

    Averaging ``a_i* a_j`` over ``f(theta' | q)`` kills every phase except
    the pairs matched by the density, which leaves a time-independent
    ratio of level functions at ``q``.  Shape ``(n, d)`` (or ``(n,)`` in 1-D).
    """
    pts, shape = quantum._points(sys, q)
    Phi = quantum.level_values(sys, pts)[0]
    w = sys.magnitudes**2
    X = sys.level_matrices["x"]  # (d, K+1, K+1)
    gt = np.sum(w * np.abs(Phi) ** 2, axis=1)
    diag = np.einsum("i,dii->d", w, X).real
    u = w * Phi
    cross = np.stack([np.sum((u @ Xd) * u.conj(), axis=1).real for Xd in X], axis=1)
    cross -= (np.abs(u) ** 2 @ np.stack([np.diag(Xd) for Xd in X], axis=1)).real
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = diag[None] + cross / gt[:, None]
    if sys.dim == 1:
        return mu[:, 0].reshape(shape) if shape else float(mu[0, 0])
    return mu.reshape(shape + (sys.dim,))


@dataclass
class PostMoments:
    mean: np.ndarray
    mean_se: np.ndarray
    variance: np.ndarray
    variance_se: np.ndarray
    n: int


def post_ste_moments(sys, q, t, rng, n_samples=2000) -> PostMoments:
    """Monte Carlo ``{mu}_p`` and ``{sigma**2}_p`` at each point in ``q``."""
    pts, shape = quantum._points(sys, q)
    m = len(pts)
    rep = np.repeat(pts, n_samples, axis=0)
    tt = np.repeat(np.broadcast_to(np.asarray(t, dtype=float), (m,)), n_samples)
    draw = sample_ste(sys, tt, rep if sys.dim > 1 else rep[:, 0], rng).theta
    mu, var, _ = quantum.moments(sys, draw.reshape(-1, sys.K), tt)
    mu = mu.reshape(m, n_samples, -1)
    var = var.reshape(m, n_samples, -1)
    se = lambda x: x.std(axis=1, ddof=1) / math.sqrt(n_samples) if n_samples > 1 else np.zeros(x.shape[::2])
    out = PostMoments(mu.mean(1), se(mu), var.mean(1), se(var), n_samples)
    if sys.dim == 1:
        out = PostMoments(*(v[:, 0] for v in (out.mean, out.mean_se, out.variance, out.variance_se)), n_samples)
    return out


# ---------------------------------------------------------------------------
# sampler fidelity
# ---------------------------------------------------------------------------

@dataclass
class Chi2Result:
    statistic: float
    dof: int
    pvalue: float
    n: int


def cell_probabilities(sys, t, q, bins, sub=8, axes=None):
    """Exact-by-quadrature probability of each phase cell under ``f(.|q)``.

    ``axes`` selects the phase components to keep (marginalising the rest).
    """
    K = sys.K
    keep = tuple(range(K)) if axes is None else tuple(axes)
    fine = phase_grid(bins * sub)
    pts = _theta_mesh(fine, K)
    dens = ste_density(sys, t, q, pts).reshape((bins * sub,) * K)
    dens = dens.sum(axis=tuple(k for k in range(K) if k not in keep)) if len(keep) < K else dens
    shape = []
    for _ in keep:
        shape += [bins, sub]
    cell = dens.reshape(shape).sum(axis=tuple(range(1, 2 * len(keep), 2)))
    return cell / cell.sum()


def sampler_chi2(theta, probs, min_expected=5.0) -> Chi2Result:
    """Chi-square of phase samples against cell probabilities.

    Cells with expected count below ``min_expected`` are pooled.
    """
    theta = np.mod(np.atleast_2d(np.asarray(theta, dtype=float).T).T, TWO_PI)
    n = len(theta)
    bins = probs.shape[0]
    idx = np.minimum((theta[:, :probs.ndim] / TWO_PI * bins).astype(int), bins - 1)
    flat = np.ravel_multi_index(tuple(idx.T), probs.shape)
    counts = np.bincount(flat, minlength=probs.size).astype(float)
    expected = probs.ravel() * n
    small = expected < min_expected
    if small.any():
        counts = np.append(counts[~small], counts[small].sum())
        expected = np.append(expected[~small], expected[small].sum())
    res = stats.chisquare(counts, expected * counts.sum() / expected.sum())
    return Chi2Result(float(res.statistic), int(len(counts) - 1), float(res.pvalue), n)
