"""Particle guidance dynamics and the Fokker-Planck density oracle.

The particle obeys the Langevin equation

    dq = b(q, t) dt + sqrt(D) dW,    D = hbar / m,

integrated with Euler-Maruyama at a fixed step.  ``fp_oracle`` solves the
matching forward Fokker-Planck equation on a cell-centred grid and is used
only to verify the ensemble.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, stats
from scipy.sparse.linalg import splu
from scipy.special import exprel

from . import quantum
from .errors import InstabilityError, NonFiniteError

MODES = ("stochastic", "deterministic")
BOUNDARIES = ("reflect", "clamp", "periodic")


@dataclass
class IntegratorConfig:
    dt: float = 1e-3
    mode: str = "stochastic"
    boundary: str = "reflect"
    b_max: float = quantum.DEFAULT_B_MAX
    eps_node: float = quantum.DEFAULT_EPS_NODE

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.b_max > 0:
            raise ValueError("b_max must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")


@dataclass
class ParticleState:
    q: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float)).copy()


def apply_boundary(q, lower, upper, policy):
    """Map positions back into ``[lower, upper]`` (per coordinate)."""
    width = upper - lower
    if policy == "periodic":
        return lower + np.mod(q - lower, width)
    if policy == "clamp":
        return np.clip(q, lower, upper)
    y = np.mod(q - lower, 2 * width)
    return lower + np.where(y > width, 2 * width - y, y)


def velocity(sys, theta, t, q, cfg: IntegratorConfig):
    if cfg.mode == "deterministic":
        return quantum.current_velocity(sys, theta, t, q, cfg.b_max, cfg.eps_node)
    return quantum.drift(sys, theta, t, q, cfg.b_max, cfg.eps_node)


def advance(sys, theta, t, q, dt, noise, cfg: IntegratorConfig):
    """One vectorised Euler-Maruyama step for many particles.

    ``q`` is ``(n,)`` for 1-D systems or ``(n, d)``; ``theta`` is ``(K,)``
    or ``(n, K)``; ``t`` and ``dt`` are scalars or ``(n,)``.  ``noise``
    holds standard normal deviates shaped like ``q`` (ignored in
    deterministic mode).
    """
    q = np.asarray(q, dtype=float)
    dt = np.asarray(dt, dtype=float)
    b = velocity(sys, theta, t, q, cfg)
    dtq = dt[..., None] if (dt.ndim and q.ndim > 1) else dt
    new = q + b * dtq
    if cfg.mode == "stochastic":
        D = sys.hbar / sys.masses
        if sys.dim == 1:
            D = D[0]
        new = new + np.sqrt(D * dtq) * noise
    lower, upper = sys.lower, sys.upper
    if sys.dim == 1:
        lower, upper = lower[0], upper[0]
    if sys.basis.bounded or sys.periodic:
        policy = "periodic" if sys.periodic else cfg.boundary
        new = apply_boundary(new, lower, upper, policy)
    if not np.all(np.isfinite(new)):
        raise NonFiniteError("non-finite particle position", state=q)
    return new


def em_step(state: ParticleState, sys, theta, cfg: IntegratorConfig, noise) -> ParticleState:
    """Advance a single particle by one step of length ``cfg.dt``."""
    q = state.q if sys.dim > 1 else state.q[0]
    noise = np.asarray(noise, dtype=float)
    try:
        new = advance(sys, theta, state.t, q, cfg.dt, noise if sys.dim > 1 else noise.reshape(()), cfg)
    except NonFiniteError as err:
        raise NonFiniteError(str(err), state=state) from err
    return ParticleState(np.atleast_1d(new), state.t + cfg.dt)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    positions: np.ndarray  # (n_records, n_paths) or (n_records, n_paths, d)
    switch_times: list = field(default_factory=list)


def _schedule(theta_schedule, K):
    """Normalise a phase history to a sorted list of (start_time, theta)."""
    if isinstance(theta_schedule, (list, tuple)) and theta_schedule and isinstance(theta_schedule[0], tuple):
        items = sorted(((float(t), np.asarray(th, dtype=float).reshape(K)) for t, th in theta_schedule),
                       key=lambda it: it[0])
        return items
    return [(-np.inf, np.asarray(theta_schedule, dtype=float).reshape(K))]


def simulate_paths(sys, theta_schedule, q0, cfg: IntegratorConfig, horizon, rng, stride=1, t0=0.0):
    """Integrate many independent paths under a shared phase history.

    ``theta_schedule`` is a constant phase vector or a list of
    ``(switch_time, theta)`` pairs; the phases in force at the start of a
    step are used for the whole step.
    """
    sched = _schedule(theta_schedule, sys.K)
    q = np.array(q0, dtype=float)
    n_steps = int(round(horizon / cfg.dt))
    stride = max(1, int(stride))
    times, snaps = [t0], [q.copy()]
    switches = [t for t, _ in sched if np.isfinite(t) and t0 <= t <= t0 + horizon]
    k = 0
    for step in range(n_steps):
        t = t0 + step * cfg.dt
        while k + 1 < len(sched) and sched[k + 1][0] <= t:
            k += 1
        theta = sched[k][1]
        noise = rng.standard_normal(q.shape) if cfg.mode == "stochastic" else 0.0
        q = advance(sys, theta, t, q, cfg.dt, noise, cfg)
        if (step + 1) % stride == 0 or step + 1 == n_steps:
            times.append(t0 + (step + 1) * cfg.dt)
            snaps.append(q.copy())
    return TrajectoryRecord(np.array(times), np.array(snaps), switches)


def simulate_path(sys, theta_schedule, state: ParticleState, cfg: IntegratorConfig, horizon, rng, stride=1):
    """Single-path wrapper around :func:`simulate_paths`."""
    q0 = state.q[None, :] if sys.dim > 1 else state.q[:1]
    rec = simulate_paths(sys, theta_schedule, q0, cfg, horizon, rng, stride, t0=state.t)
    return TrajectoryRecord(rec.times, rec.positions[:, 0], rec.switch_times)


# ---------------------------------------------------------------------------
# Fokker-Planck oracle
# ---------------------------------------------------------------------------

@dataclass
class DensityField:
    """Cell-centred density on a uniform grid (1-D or 2-D)."""

    axes: tuple
    values: np.ndarray
    t: float = 0.0
    periodic: bool = False

    @property
    def spacing(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def bounds(self):
        return [(a[0] - 0.5 * h, a[-1] + 0.5 * h) for a, h in zip(self.axes, self.spacing)]

    def mass(self):
        return float(self.values.sum() * self.cell_volume)

    def normalized(self):
        return DensityField(self.axes, self.values / self.mass(), self.t, self.periodic)

    def l1(self, other) -> float:
        return float(np.abs(self.values - other.values).sum() * self.cell_volume)


def cell_axes(sys, n_cells):
    return tuple(lo + (np.arange(n_cells) + 0.5) * (hi - lo) / n_cells
                 for lo, hi in zip(sys.lower, sys.upper))


def _mesh(axes):
    if len(axes) == 1:
        return axes[0][:, None]
    X, Y = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], -1)


def _eval(sys, fn, theta, t, pts):
    return fn(sys, theta, t, pts if sys.dim > 1 else pts[:, 0])


def psi_density_field(sys, theta, t, n_cells=None):
    """``|psi|**2`` sampled at cell centres and normalised on the grid."""
    n_cells = n_cells or (sys.grid_points if sys.dim == 1 else 128)
    axes = cell_axes(sys, n_cells)
    vals = _eval(sys, quantum.density, theta, t, _mesh(axes)).reshape([len(a) for a in axes])
    return DensityField(axes, vals, t, sys.periodic).normalized()


def uniform_field(sys, n_cells=None, t=0.0):
    n_cells = n_cells or (sys.grid_points if sys.dim == 1 else 128)
    axes = cell_axes(sys, n_cells)
    vals = np.ones([len(a) for a in axes])
    return DensityField(axes, vals, t, sys.periodic).normalized()


def _bernoulli(z):
    with np.errstate(over="ignore"):
        return 1.0 / exprel(z)


def _generator(sys, theta, t, field_: DensityField, diffusion, drift_fn, floor=1e-300):
    """Sparse Fokker-Planck generator with exponentially fitted fluxes."""
    axes = field_.axes
    shape = tuple(len(a) for a in axes)
    n = int(np.prod(shape))
    idx = np.arange(n).reshape(shape)
    hs = field_.spacing
    if sys is not None:
        Ds = sys.hbar / sys.masses
        pts = _mesh(axes)
        logp = np.log(np.maximum(_eval(sys, quantum.density, theta, t, pts), floor * sys.density_bound))
        logp = logp.reshape(shape)
    else:
        Ds = np.broadcast_to(np.asarray(diffusion, dtype=float), (len(axes),))
        logp = None
    rows, cols, data = [], [], []
    for k, h in enumerate(hs):
        left = np.moveaxis(idx, k, 0)[:-1].ravel()
        right = np.moveaxis(idx, k, 0)[1:].ravel()
        if field_.periodic:
            left = np.concatenate([left, np.moveaxis(idx, k, 0)[-1].ravel()])
            right = np.concatenate([right, np.moveaxis(idx, k, 0)[0].ravel()])
        centers = _mesh(axes).reshape(shape + (len(axes),)).reshape(n, len(axes))
        faces = centers[left].copy()
        faces[:, k] += 0.5 * h
        half_d = 0.5 * Ds[k]
        if drift_fn is not None:
            v = np.asarray(drift_fn(faces, t), dtype=float).reshape(len(faces), -1)[:, k] * h
        elif sys is not None:
            lo, hi = sys.lower[k], sys.upper[k]
            if field_.periodic:
                faces[:, k] = lo + np.mod(faces[:, k] - lo, hi - lo)
            beta = _eval(sys, quantum.current_velocity, theta, t, faces)
            beta = np.asarray(beta).reshape(len(faces), -1)[:, k]
            lp = logp.ravel()
            v = beta * h + half_d * (lp[right] - lp[left])
        else:
            v = np.zeros(len(left))
        pe = v / half_d
        c = half_d / h**2
        bm, bp = c * _bernoulli(-pe), c * _bernoulli(pe)
        rows += [left, left, right, right]
        cols += [left, right, left, right]
        data += [-bm, bp, bm, -bp]
    A = sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsc()
    return A


def fp_oracle(sys, theta, rho0: DensityField, horizon, dt, *, scheme="cn", diffusion=1.0,
              drift=None, sample_times=None, startup_steps=2):
    """Integrate the forward Fokker-Planck equation with phases held fixed.

    The flux across each face uses exponential fitting with the
    quantum-equilibrium density folded into the Peclet number, so
    ``|psi|**2`` of a stationary state is an exact discrete steady state.
    ``scheme`` is ``"cn"`` (Crank-Nicolson after ``startup_steps``
    backward-Euler half steps) or ``"implicit"`` (backward Euler, which
    is positivity preserving).  With ``sys=None`` the process is pure
    diffusion with coefficient ``diffusion`` plus an optional ``drift``
    callable ``(points, t) -> velocities``.

    Returns the final field, or a list of fields at ``sample_times``.
    """
    if scheme not in ("cn", "implicit"):
        raise ValueError("scheme must be 'cn' or 'implicit'")
    n_steps = int(round(horizon / dt))
    shape = rho0.values.shape
    rho = rho0.values.ravel().astype(float).copy()
    vol = rho0.cell_volume
    t = rho0.t
    static = sys is None or sys.K == 0
    I = sparse.identity(rho.size, format="csc")
    wanted = None
    if sample_times is not None:
        wanted = {int(round((s - rho0.t) / dt)): s for s in sample_times}
        out = [DensityField(rho0.axes, rho.reshape(shape).copy(), t, rho0.periodic)] if 0 in wanted else []
    cache = {}

    def gen(tt):
        if static:
            if "A" not in cache:
                cache["A"] = _generator(sys, theta, tt, rho0, diffusion, drift)
            return cache["A"]
        return _generator(sys, theta, tt, rho0, diffusion, drift)

    def be(rho, tt, h):
        key = ("be", h)
        if static and key in cache:
            lu = cache[key]
        else:
            lu = splu((I - h * gen(tt + h)).tocsc())
            if static:
                cache[key] = lu
        return lu.solve(rho)

    for step in range(n_steps):
        if scheme == "implicit":
            rho = be(rho, t, dt)
        elif step < startup_steps:
            rho = be(be(rho, t, 0.5 * dt), t + 0.5 * dt, 0.5 * dt)
        else:
            A0 = gen(t)
            rhs = rho + 0.5 * dt * (A0 @ rho)
            if static and "cn" in cache:
                lu = cache["cn"]
            else:
                lu = splu((I - 0.5 * dt * gen(t + dt)).tocsc())
                if static:
                    cache["cn"] = lu
            rho = lu.solve(rhs)
        t = rho0.t + (step + 1) * dt
        neg = -rho[rho < 0].sum() * vol
        if neg > 1e-6 or not np.all(np.isfinite(rho)):
            raise InstabilityError(f"negative mass {neg:.3g} at t={t:.6g}; reduce dt or use scheme='implicit'")
        if wanted is not None and step + 1 in wanted:
            out.append(DensityField(rho0.axes, rho.reshape(shape).copy(), t, rho0.periodic))
    if wanted is not None:
        return out
    return DensityField(rho0.axes, rho.reshape(shape), t, rho0.periodic)


# ---------------------------------------------------------------------------
# distance between a sample and a reference density
# ---------------------------------------------------------------------------

@dataclass
class QeDistance:
    ks: float
    ks_pvalue: float
    ks_threshold: float
    hist_l1: float
    hist_l1_floor: float
    cdf_l1: float
    n: int

    @property
    def within_band(self) -> bool:
        return self.ks < self.ks_threshold


def _cdf_1d(field_: DensityField):
    (lo, hi), = field_.bounds
    h = field_.spacing[0]
    edges = lo + h * np.arange(len(field_.axes[0]) + 1)
    mass = np.concatenate([[0.0], np.cumsum(field_.values * h)])
    mass /= mass[-1]
    return edges, mass


def _cdf_2d(field_: DensityField):
    (xlo, _), (ylo, _) = field_.bounds
    hx, hy = field_.spacing
    ex = xlo + hx * np.arange(field_.values.shape[0] + 1)
    ey = ylo + hy * np.arange(field_.values.shape[1] + 1)
    F = np.zeros((len(ex), len(ey)))
    F[1:, 1:] = np.cumsum(np.cumsum(field_.values, 0), 1)
    F /= F[-1, -1]
    return ex, ey, F


def _bilinear(ex, ey, F, x, y):
    i = np.clip(np.searchsorted(ex, x) - 1, 0, len(ex) - 2)
    j = np.clip(np.searchsorted(ey, y) - 1, 0, len(ey) - 2)
    fx = np.clip((x - ex[i]) / (ex[i + 1] - ex[i]), 0, 1)
    fy = np.clip((y - ey[j]) / (ey[j + 1] - ey[j]), 0, 1)
    return ((1 - fx) * (1 - fy) * F[i, j] + fx * (1 - fy) * F[i + 1, j]
            + (1 - fx) * fy * F[i, j + 1] + fx * fy * F[i + 1, j + 1])


def ks_2d(samples, field_: DensityField, max_points=1000, rng=None):
    """Fasano-Franceschini style 2-D KS statistic (max quadrant gap)."""
    pts = np.asarray(samples, dtype=float)
    n = len(pts)
    ex, ey, F = _cdf_2d(field_)
    probe = pts
    if n > max_points:
        rng = rng or np.random.default_rng(0)
        probe = pts[rng.choice(n, max_points, replace=False)]
    Fxy = _bilinear(ex, ey, F, probe[:, 0], probe[:, 1])
    Fx = _bilinear(ex, ey, F, probe[:, 0], np.full(len(probe), ey[-1]))
    Fy = _bilinear(ex, ey, F, np.full(len(probe), ex[-1]), probe[:, 1])
    ref = np.stack([Fxy, Fx - Fxy, Fy - Fxy, 1 - Fx - Fy + Fxy], 1)
    lx = pts[None, :, 0] <= probe[:, None, 0]
    ly = pts[None, :, 1] <= probe[:, None, 1]
    emp = np.stack([(lx & ly).mean(1), (lx & ~ly).mean(1), (~lx & ly).mean(1), (~lx & ~ly).mean(1)], 1)
    return float(np.abs(emp - ref).max())


def qe_distance(samples, reference: DensityField, bins=256) -> QeDistance:
    """Compare particle positions with a reference density.

    Reports the KS statistic (1-D) or its quadrant 2-D variant, the
    histogram L1 distance with its expected value under exact sampling
    (``hist_l1_floor``), and the L1 distance between CDFs (1-D).
    """
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("empty sample set")
    thresh = 1.358 / np.sqrt(n)
    if len(reference.axes) == 1:
        x = x.reshape(-1)
        edges, mass = _cdf_1d(reference)
        F = np.interp(np.sort(x), edges, mass)
        i = np.arange(1, n + 1)
        ks = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
        pval = float(stats.kstwo.sf(ks, n))
        (lo, hi), = reference.bounds
        be = np.linspace(lo, hi, bins + 1)
        counts, _ = np.histogram(x, be)
        p = np.diff(np.interp(be, edges, mass))
        emp_cdf = np.searchsorted(np.sort(x), edges, side="right") / n
        cdf_l1 = float(np.sum(0.5 * (np.abs(emp_cdf - mass)[1:] + np.abs(emp_cdf - mass)[:-1]) * np.diff(edges)))
    else:
        ks = ks_2d(x, reference)
        pval = float("nan")
        nb = int(round(np.sqrt(bins)))
        (xlo, xhi), (ylo, yhi) = reference.bounds
        bx, by = np.linspace(xlo, xhi, nb + 1), np.linspace(ylo, yhi, nb + 1)
        counts, _, _ = np.histogram2d(x[:, 0], x[:, 1], [bx, by])
        ex, ey, Fg = _cdf_2d(reference)
        BX, BY = np.meshgrid(bx, by, indexing="ij")
        Fb = _bilinear(ex, ey, Fg, BX.ravel(), BY.ravel()).reshape(BX.shape)
        p = Fb[1:, 1:] - Fb[:-1, 1:] - Fb[1:, :-1] + Fb[:-1, :-1]
        counts, p = counts.ravel(), p.ravel()
        cdf_l1 = float("nan")
    l1 = float(np.abs(counts / n - p).sum())
    floor = float(np.sum(np.sqrt(2 * p * (1 - p) / (np.pi * n))))
    return QeDistance(ks, pval, float(thresh), l1, floor, cdf_l1, n)
