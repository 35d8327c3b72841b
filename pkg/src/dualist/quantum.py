"""Closed-system wavefunctions in the energy eigenbasis.

A wavefunction is stored as a list of energy levels.  Level ``i`` has an
energy ``E_i``, a magnitude ``|C_i|`` and a composed eigenfunction
``Phi_i = sum_j w_ij phi_ij`` built from the degenerate members
``phi_ij`` of a catalogue basis.  The only mutable degrees of freedom are
the relative phases ``theta = (theta_1, ..., theta_K)``; ``theta_0`` is
pinned to zero, so

    psi(q, theta, t) = sum_i |C_i| exp(i theta_i) Phi_i(q) exp(-i E_i t / hbar).

Eigenfunctions and their first and second derivatives are analytic for
every catalogue system, so unitary evolution is exact phase rotation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, ModelError, NonFiniteError, QuadratureError

MODEL_KINDS = ("box", "oscillator", "free_packet", "two_particle_box")

DEFAULT_GRID_POINTS = 2048
DEFAULT_B_MAX = 1e6
DEFAULT_EPS_NODE = 1e-12


# ---------------------------------------------------------------------------
# catalogue bases
# ---------------------------------------------------------------------------

class BoxBasis:
    """Infinite square well(s) on ``[0, L_k]`` per coordinate.

    ``members`` holds tuples of quantum numbers, one entry per coordinate.
    """

    periodic = False
    bounded = True

    def __init__(self, members, lengths, masses, hbar=1.0):
        self.members = [tuple(int(n) for n in m) for m in members]
        self.lengths = np.asarray(lengths, dtype=float)
        self.masses = np.asarray(masses, dtype=float)
        self.hbar = float(hbar)
        self.dim = len(self.lengths)
        self.lower = np.zeros(self.dim)
        self.upper = self.lengths.copy()
        self._n = np.array(self.members, dtype=float).reshape(len(self.members), self.dim)

    @property
    def energies(self):
        k2 = (self._n * np.pi / self.lengths) ** 2
        return (self.hbar**2 * k2 / (2 * self.masses)).sum(axis=1)

    @property
    def sup_bounds(self):
        return np.full(len(self.members), np.prod(np.sqrt(2 / self.lengths)))

    def _factors(self, q):
        k = self._n * np.pi / self.lengths  # (M, d)
        arg = q[:, None, :] * k[None]  # (n, M, d)
        norm = np.sqrt(2 / self.lengths)
        s = norm * np.sin(arg)
        c = norm * np.cos(arg) * k
        return s, c, -(k**2) * s

    def evaluate(self, q):
        s, ds, d2s = self._factors(q)
        vals = np.prod(s, axis=2)
        grad = np.empty_like(s)
        hess = np.empty_like(s)
        for k in range(self.dim):
            others = np.prod(np.delete(s, k, axis=2), axis=2) if self.dim > 1 else 1.0
            grad[..., k] = ds[..., k] * others
            hess[..., k] = d2s[..., k] * others
        return vals.astype(complex), grad.astype(complex), hess.astype(complex)

    def quadrature_axes(self, n_points):
        axes = []
        for L in self.lengths:
            x = np.linspace(0.0, L, n_points)
            w = np.full(n_points, x[1] - x[0])
            w[[0, -1]] *= 0.5
            axes.append((x, w))
        return axes

    def _axis_tables(self, axis, x):
        ns = sorted({m[axis] for m in self.members})
        L = self.lengths[axis]
        norm = math.sqrt(2 / L)
        vals = {n: norm * np.sin(n * np.pi * x / L) for n in ns}
        ders = {n: norm * (n * np.pi / L) * np.cos(n * np.pi * x / L) for n in ns}
        return vals, ders

    def moment_matrices(self, n_points):
        return _separable_moments(self, n_points)


class OscillatorBasis:
    """Harmonic oscillator eigenfunctions (Hermite functions), 1-D."""

    periodic = False
    bounded = False
    dim = 1

    def __init__(self, members, mass, omega, hbar=1.0):
        self.members = [(int(m[0]),) if isinstance(m, tuple) else (int(m),) for m in members]
        self.mass = float(mass)
        self.masses = np.array([self.mass])
        self.omega = float(omega)
        self.hbar = float(hbar)
        self.alpha = self.mass * self.omega / self.hbar
        self.ell = 1 / math.sqrt(self.alpha)
        n_max = max(m[0] for m in self.members)
        half = (math.sqrt(2 * n_max + 1) + 8.0) * self.ell
        self.lower = np.array([-half])
        self.upper = np.array([half])

    @property
    def energies(self):
        n = np.array([m[0] for m in self.members], dtype=float)
        return self.hbar * self.omega * (n + 0.5)

    @property
    def sup_bounds(self):
        # Cramer's inequality for Hermite functions
        return np.full(len(self.members), 1.086435 * np.pi**-0.25 * self.alpha**0.25)

    def _table(self, x, n_max):
        xi = math.sqrt(self.alpha) * x
        table = np.empty((n_max + 2,) + x.shape)
        table[0] = (self.alpha / np.pi) ** 0.25 * np.exp(-0.5 * xi**2)
        if n_max + 1 >= 1:
            table[1] = math.sqrt(2.0) * xi * table[0]
        for n in range(1, n_max + 1):
            table[n + 1] = math.sqrt(2.0 / (n + 1)) * xi * table[n] - math.sqrt(n / (n + 1)) * table[n - 1]
        return xi, table

    def _vals_ders(self, x):
        n_max = max(m[0] for m in self.members)
        xi, table = self._table(x, n_max)
        sa = math.sqrt(self.alpha)
        vals, ders, secs = [], [], []
        for (n,) in self.members:
            lower = table[n - 1] if n > 0 else 0.0
            vals.append(table[n])
            ders.append(sa * (math.sqrt(n / 2) * lower - math.sqrt((n + 1) / 2) * table[n + 1]))
            secs.append(self.alpha * (xi**2 - (2 * n + 1)) * table[n])
        return np.stack(vals, -1), np.stack(ders, -1), np.stack(secs, -1)

    def evaluate(self, q):
        v, d, s = self._vals_ders(q[:, 0])
        return v.astype(complex), d[..., None].astype(complex), s[..., None].astype(complex)

    def quadrature_axes(self, n_points):
        x = np.linspace(self.lower[0], self.upper[0], n_points)
        w = np.full(n_points, x[1] - x[0])
        w[[0, -1]] *= 0.5
        return [(x, w)]

    def _axis_tables(self, axis, x):
        v, d, _ = self._vals_ders(x)
        return ({m[0]: v[:, j] for j, m in enumerate(self.members)},
                {m[0]: d[:, j] for j, m in enumerate(self.members)})

    def moment_matrices(self, n_points):
        return _separable_moments(self, n_points)


class RingBasis:
    """Plane waves ``exp(i p R / hbar) / sqrt(L)`` on a ring ``[-L/2, L/2)``.

    All momenta must be distinct multiples of ``2 pi hbar / L`` (possibly
    offset by a common half-step, which keeps every pair orthogonal as long
    as sums and differences stay integer multiples).  Matrix elements of
    ``R`` and ``R**2`` are evaluated analytically with the sawtooth
    coordinate, which is exact for states localised away from the seam.
    """

    periodic = True
    bounded = False
    dim = 1

    def __init__(self, momenta, length, mass, hbar=1.0, grid_points=16384):
        self.momenta = np.asarray(momenta, dtype=float)
        self.members = [(float(p),) for p in self.momenta]
        self.length = float(length)
        self.mass = float(mass)
        self.masses = np.array([self.mass])
        self.hbar = float(hbar)
        self.lower = np.array([-0.5 * self.length])
        self.upper = np.array([0.5 * self.length])
        self.grid_points = int(grid_points)

    @property
    def energies(self):
        return self.momenta**2 / (2 * self.mass)

    @property
    def sup_bounds(self):
        return np.full(len(self.momenta), 1 / math.sqrt(self.length))

    def evaluate(self, q):
        k = self.momenta / self.hbar
        vals = np.exp(1j * q[:, :1] * k[None]) / math.sqrt(self.length)
        grad = (1j * k)[None] * vals
        hess = -(k**2)[None] * vals
        return vals, grad[..., None], hess[..., None]

    def quadrature_axes(self, n_points=None):
        n = self.grid_points if n_points is None else n_points
        x = -0.5 * self.length + self.length * np.arange(n) / n
        return [(x, np.full(n, self.length / n))]

    def moment_matrices(self, n_points=None):
        k = self.momenta / self.hbar
        dk = k[None, :] - k[:, None]  # (a, b): k_b - k_a
        n = np.rint(dk * self.length / (2 * np.pi))
        if not np.allclose(n * 2 * np.pi / self.length, dk, atol=1e-9 * max(1.0, np.abs(k).max())):
            raise QuadratureError("ring momenta are not commensurate with the ring length")
        off = n != 0
        sign = np.where(n.astype(int) % 2 == 0, 1.0, -1.0)
        x = np.zeros(dk.shape, dtype=complex)
        x2 = np.full(dk.shape, self.length**2 / 12, dtype=complex)
        x[off] = sign[off] / (1j * dk[off])
        x2[off] = 2 * sign[off] / dk[off] ** 2
        M = len(k)
        return {
            "overlap": np.eye(M, dtype=complex),
            "x": x[None],
            "x2": x2[None],
            "p": np.diag(self.momenta).astype(complex)[None],
        }


def _separable_moments(basis, n_points):
    """Member-level moment matrices by 1-D trapezoid quadrature per axis."""
    d = basis.dim
    M = len(basis.members)
    tables = []
    for axis, (x, w) in enumerate(basis.quadrature_axes(n_points)):
        vals, ders = basis._axis_tables(axis, x)
        tables.append((x, w, vals, ders))

    def axis_int(axis, a, b, kind):
        x, w, vals, ders = tables[axis]
        fa = vals[a]
        if kind == "1":
            g = vals[b]
        elif kind == "x":
            g = x * vals[b]
        elif kind == "x2":
            g = x**2 * vals[b]
        else:
            g = ders[b]
        return float(np.sum(w * fa * g))

    overlap = np.empty((M, M), dtype=complex)
    xs = np.empty((d, M, M), dtype=complex)
    x2s = np.empty((d, M, M), dtype=complex)
    ps = np.empty((d, M, M), dtype=complex)
    for a, ma in enumerate(basis.members):
        for b, mb in enumerate(basis.members):
            base = [axis_int(k, ma[k], mb[k], "1") for k in range(d)]
            overlap[a, b] = np.prod(base)
            for k in range(d):
                rest = np.prod([base[j] for j in range(d) if j != k]) if d > 1 else 1.0
                xs[k, a, b] = axis_int(k, ma[k], mb[k], "x") * rest
                x2s[k, a, b] = axis_int(k, ma[k], mb[k], "x2") * rest
                ps[k, a, b] = -1j * basis.hbar * axis_int(k, ma[k], mb[k], "d") * rest
    return {"overlap": overlap, "x": xs, "x2": x2s, "p": ps}


# ---------------------------------------------------------------------------
# model specification and the spectral system
# ---------------------------------------------------------------------------

@dataclass
class LevelSelection:
    """One selected energy level and its degenerate coefficients.

    ``level`` is the quantum number ``n`` for ``box`` (n >= 1) and
    ``oscillator`` (n >= 0); for ``two_particle_box`` it indexes the
    sorted list of distinct energies (0-based), whose degenerate members
    ``(n1, n2)`` are taken in lexicographic order.
    """

    level: int
    coefficients: tuple = (1.0,)

    def __post_init__(self):
        self.coefficients = tuple(complex(c) for c in self.coefficients)


@dataclass
class ModelSpec:
    kind: str
    levels: list = field(default_factory=list)
    mass: float | tuple = 1.0
    hbar: float = 1.0
    length: float | tuple = 1.0
    omega: float = 1.0
    packet: object = None
    grid_points: int = DEFAULT_GRID_POINTS

    def __post_init__(self):
        self.levels = [lv if isinstance(lv, LevelSelection) else LevelSelection(**lv) for lv in self.levels]


class Composite(NamedTuple):
    C: complex
    weights: np.ndarray
    phi: Callable | None


def compose_degenerate(coefficients, functions=None) -> Composite:
    """Combine degenerate members into one level.

    Returns ``C`` with ``|C| = sqrt(sum |c_j|**2)`` and phase equal to the
    phase of the first non-zero coefficient, the weights ``w_j = c_j / C``
    so that ``Phi = sum_j w_j phi_j`` is normalised, and (when member
    functions are given) ``Phi`` itself as a callable.
    """
    c = np.asarray(coefficients, dtype=complex).ravel()
    mag = math.sqrt(float(np.sum(np.abs(c) ** 2)))
    if mag == 0.0:
        raise ModelError("all degenerate coefficients are zero")
    lead = c[np.flatnonzero(np.abs(c) > 0)[0]]
    C = mag * lead / abs(lead)
    weights = c / C
    phi = None
    if functions is not None:
        funcs = list(functions)
        if len(funcs) != len(c):
            raise ModelError("need one member function per coefficient")

        def phi(q, _w=weights, _f=funcs):
            return sum(w * f(q) for w, f in zip(_w, _f))

    return Composite(C, weights, phi)


@dataclass(frozen=True, eq=False)
class SpectralSystem:
    """Immutable closed quantum system over a 1-D or 2-D domain."""

    basis: object
    energies: np.ndarray
    magnitudes: np.ndarray
    weights: np.ndarray  # (members, K+1): Phi_i = sum_m weights[m, i] phi_m
    initial_phases: np.ndarray
    hbar: float = 1.0
    grid_points: int = DEFAULT_GRID_POINTS
    label: str = ""
    length_scale: float | None = None

    @property
    def K(self) -> int:
        return len(self.energies) - 1

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def masses(self) -> np.ndarray:
        return self.basis.masses

    @property
    def lower(self):
        return self.basis.lower

    @property
    def upper(self):
        return self.basis.upper

    @property
    def periodic(self) -> bool:
        return self.basis.periodic

    @cached_property
    def level_sup(self) -> np.ndarray:
        """Upper bounds on ``sup_q |Phi_i(q)|``."""
        return np.abs(self.weights).T @ self.basis.sup_bounds

    @cached_property
    def density_bound(self) -> float:
        """Upper bound on ``max_q |psi|**2`` valid for every phase vector."""
        return float(np.sum(self.magnitudes * self.level_sup) ** 2)

    @cached_property
    def level_matrices(self) -> dict:
        """Level-basis matrices of 1, x, x**2 and p (per coordinate)."""
        mm = self.basis.moment_matrices(self.grid_points)
        W = self.weights
        out = {"overlap": W.conj().T @ mm["overlap"] @ W}
        for key in ("x", "x2", "p"):
            out[key] = np.einsum("ma,kmn,nb->kab", W.conj(), mm[key], W, optimize=True)
        err = np.abs(out["overlap"] - np.eye(self.K + 1)).max()
        if err > 1e-8:
            raise QuadratureError(
                f"level functions not orthonormal on the quadrature grid (max error {err:.2e}); "
                "increase grid_points")
        return out

    def quadrature_axes(self, n_points=None):
        return self.basis.quadrature_axes(self.grid_points if n_points is None else n_points)


def _box_members(spec):
    lengths = np.atleast_1d(np.asarray(spec.length, dtype=float))
    masses = np.atleast_1d(np.asarray(spec.mass, dtype=float))
    if spec.kind == "box":
        if lengths.size != 1 or masses.size != 1:
            raise ModelError("box is one-dimensional: give a single length and mass")
        groups = {}
        for sel in spec.levels:
            if sel.level < 1:
                raise ModelError(f"box level must be >= 1, got {sel.level}")
            if len(sel.coefficients) != 1:
                raise ModelError("box levels are non-degenerate: give one coefficient")
            groups[sel.level] = [(sel.level,)]
        return lengths, masses, groups
    if lengths.size == 1:
        lengths = np.repeat(lengths, 2)
    if masses.size == 1:
        masses = np.repeat(masses, 2)
    if lengths.size != 2 or masses.size != 2:
        raise ModelError("two_particle_box needs two lengths and two masses")
    top = max(sel.level for sel in spec.levels) + 2
    n_max = int(4 * math.sqrt(top) + 4)
    pairs = list(product(range(1, n_max + 1), repeat=2))
    e = np.array([(a / lengths[0]) ** 2 / masses[0] + (b / lengths[1]) ** 2 / masses[1] for a, b in pairs])
    order = np.argsort(e, kind="stable")
    energies, members = [], []
    for idx in order:
        if energies and math.isclose(e[idx], energies[-1], rel_tol=1e-12):
            members[-1].append(pairs[idx])
        else:
            energies.append(e[idx])
            members.append([pairs[idx]])
    groups = {}
    for sel in spec.levels:
        if sel.level < 0 or sel.level >= len(members) - 1:
            raise ModelError(f"two_particle_box level {sel.level} out of catalogue range")
        grp = sorted(members[sel.level])
        if len(sel.coefficients) != len(grp):
            raise ModelError(
                f"level {sel.level} has {len(grp)} degenerate members {grp}; "
                f"got {len(sel.coefficients)} coefficients")
        groups[sel.level] = grp
    return lengths, masses, groups


def build_model(spec: ModelSpec) -> SpectralSystem:
    """Build the spectral system for a catalogue model."""
    if spec.kind not in MODEL_KINDS:
        raise ModelError(f"unsupported model kind {spec.kind!r}")
    if np.any(np.asarray(spec.mass, dtype=float) <= 0):
        raise ModelError("masses must be positive")
    if spec.kind == "free_packet":
        from .macro import build_gaussian_packet

        if spec.packet is None:
            raise ModelError("free_packet needs a packet specification")
        return build_gaussian_packet(spec.packet, hbar=spec.hbar)
    if not spec.levels:
        raise ModelError("empty level selection")
    levels = [lv.level for lv in spec.levels]
    if len(set(levels)) != len(levels):
        raise ModelError("a level was selected twice")

    if spec.kind == "oscillator":
        if np.asarray(spec.mass).size != 1:
            raise ModelError("oscillator is one-dimensional")
        groups = {}
        for sel in spec.levels:
            if sel.level < 0 or len(sel.coefficients) != 1:
                raise ModelError("oscillator levels are n >= 0 with one coefficient")
            groups[sel.level] = [(sel.level,)]
        members = [m for lv in sorted(groups) for m in groups[lv]]
        basis = OscillatorBasis(members, float(np.asarray(spec.mass)), spec.omega, spec.hbar)
    else:
        lengths, masses, groups = _box_members(spec)
        members = [m for lv in sorted(groups) for m in groups[lv]]
        basis = BoxBasis(members, lengths, masses, spec.hbar)

    coeffs = {sel.level: sel.coefficients for sel in spec.levels}
    total = math.sqrt(sum(abs(c) ** 2 for sel in spec.levels for c in sel.coefficients))
    if total == 0:
        raise ModelError("all coefficients are zero")
    e_members = basis.energies
    order = sorted(groups)
    W = np.zeros((len(members), len(order)), dtype=complex)
    mags, phases, energies = [], [], []
    col = 0
    row = 0
    for lv in order:
        comp = compose_degenerate(np.asarray(coeffs[lv]) / total)
        n_m = len(groups[lv])
        W[row:row + n_m, col] = comp.weights
        mags.append(abs(comp.C))
        phases.append(np.angle(comp.C))
        energies.append(e_members[row])
        row += n_m
        col += 1
    energies = np.array(energies)
    idx = np.argsort(energies, kind="stable")
    energies = energies[idx]
    if np.any(np.diff(energies) <= 0):
        raise ModelError("selected levels must have distinct energies")
    mags = np.array(mags)[idx]
    phases = np.array(phases)[idx]
    W = W[:, idx]
    theta0 = np.mod(phases[1:] - phases[0], 2 * np.pi)
    return SpectralSystem(basis, energies, mags, W, theta0, float(spec.hbar),
                          int(spec.grid_points), label=spec.kind)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _points(sys, q):
    """Coerce ``q`` to ``(n, d)``; return the original leading shape."""
    q = np.asarray(q, dtype=float)
    d = sys.dim
    if d == 1:
        shape = q.shape
        pts = q.reshape(-1, 1)
    else:
        if q.shape[-1] != d:
            raise DomainError(f"expected points with {d} coordinates, got shape {q.shape}")
        shape = q.shape[:-1]
        pts = q.reshape(-1, d)
    if sys.periodic:
        lo, hi = sys.lower, sys.upper
        pts = lo + np.mod(pts - lo, hi - lo)
    else:
        tol = 1e-12 * np.maximum(1.0, np.abs(sys.upper - sys.lower))
        bad = np.any((pts < sys.lower - tol) | (pts > sys.upper + tol), axis=1)
        if sys.basis.bounded and np.any(bad):
            raise DomainError(f"configuration point(s) outside domain: {pts[bad][:3].tolist()}")
    return pts, shape


def _apply_weights(arr, W):
    """``(n, members, d) -> (n, K+1, d)`` contraction with the weight matrix."""
    return np.matmul(arr.transpose(0, 2, 1), W).transpose(0, 2, 1)


def _quadratic_forms(a, mats):
    """Real parts of ``a^H A_k a`` for each row of ``a`` and each matrix ``A_k``."""
    return np.stack([np.sum((a.conj() @ A) * a, axis=1).real for A in mats], axis=1)


def level_values(sys, q):
    """Composed level functions and derivatives at points ``q`` (n, d).

    Returns ``Phi`` (n, K+1), ``grad Phi`` (n, K+1, d), and the diagonal
    second derivatives (n, K+1, d).
    """
    vals, grad, hess = sys.basis.evaluate(q)
    W = sys.weights
    return vals @ W, _apply_weights(grad, W), _apply_weights(hess, W)


def phase_factors(sys, theta, t, relative=False):
    """``|C_i| exp(i theta_i - i E_i t / hbar)`` with theta_0 = 0.

    ``theta`` is ``(K,)`` or ``(n, K)``; ``t`` scalar or ``(n,)``.  With
    ``relative=True`` the global phase of level 0 is dropped (energies
    measured from ``E_0``), which leaves every bilinear observable
    unchanged but makes single-level results exactly time independent.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1:] != (sys.K,) and not (sys.K == 0 and theta.size == 0):
        raise ValueError(f"phase vector must have length K={sys.K}, got shape {theta.shape}")
    if sys.K == 0:
        theta = np.zeros(theta.shape[:-1] + (0,)) if theta.ndim > 1 else np.zeros(0)
    full = np.concatenate([np.zeros(theta.shape[:-1] + (1,)), theta], axis=-1)
    t = np.asarray(t, dtype=float)
    if t.ndim:
        t = t[:, None]
    energies = sys.energies - sys.energies[0] if relative else sys.energies
    return sys.magnitudes * np.exp(1j * full - 1j * energies * t / sys.hbar)


def _psi_parts(sys, theta, t, q, order=0):
    pts, shape = _points(sys, q)
    Phi, dPhi, d2Phi = level_values(sys, pts)
    a = phase_factors(sys, theta, t)
    a = np.broadcast_to(a, Phi.shape)
    psi = np.sum(a * Phi, axis=1)
    if order == 0:
        return psi, None, None, shape
    dpsi = np.matmul(a[:, None, :], dPhi)[:, 0, :]
    d2psi = np.matmul(a[:, None, :], d2Phi)[:, 0, :] if order > 1 else None
    return psi, dpsi, d2psi, shape


def _reshape_scalar(v, shape):
    return v.reshape(shape) if shape else v.reshape(())[()]


def _reshape_vector(v, sys, shape):
    if sys.dim == 1:
        return v[:, 0].reshape(shape) if shape else v[0, 0]
    return v.reshape(shape + (sys.dim,))


def evaluate_psi(sys, theta, t, q):
    """Complex amplitude ``psi(q, theta, t)``."""
    psi, _, _, shape = _psi_parts(sys, theta, t, q)
    return _reshape_scalar(psi, shape)


def density(sys, theta, t, q):
    return np.abs(evaluate_psi(sys, theta, t, q)) ** 2


def _velocity_terms(sys, theta, t, q):
    psi, dpsi, _, shape = _psi_parts(sys, theta, t, q, order=1)
    rho = np.abs(psi) ** 2
    z = np.conj(psi)[:, None] * dpsi
    scale = sys.hbar / sys.masses
    with np.errstate(divide="ignore", invalid="ignore"):
        current = scale * z.imag / rho[:, None]
        osmotic = scale * z.real / rho[:, None]
    return current, osmotic, rho, shape


def _clamp(v, rho, sys, b_max, eps_node):
    near = rho < eps_node * sys.density_bound
    if np.any(near):
        v = v.copy()
        sub = v[near]
        sub[~np.isfinite(sub)] = 0.0
        v[near] = np.clip(sub, -b_max, b_max)
    return v


def drift(sys, theta, t, q, b_max=DEFAULT_B_MAX, eps_node=DEFAULT_EPS_NODE):
    """Stochastic drift ``grad S / m + (hbar / m) grad R / R``.

    Evaluated as ``(hbar/m) (Re + Im)(psi* grad psi) / |psi|**2``.  Within
    ``eps_node * max|psi|**2`` of a node the components are clipped to
    ``b_max``.
    """
    current, osmotic, rho, shape = _velocity_terms(sys, theta, t, q)
    b = _clamp(current + osmotic, rho, sys, b_max, eps_node)
    if not np.all(np.isfinite(b)):
        bad = ~np.all(np.isfinite(b), axis=1)
        raise NonFiniteError(f"non-finite drift at {np.argwhere(bad).ravel()[:5].tolist()} "
                             f"(|psi|^2={rho[bad][:5].tolist()})")
    return _reshape_vector(b, sys, shape)


def current_velocity(sys, theta, t, q, b_max=DEFAULT_B_MAX, eps_node=DEFAULT_EPS_NODE):
    """Deterministic guidance velocity ``grad S / m``."""
    current, _, rho, shape = _velocity_terms(sys, theta, t, q)
    v = _clamp(current, rho, sys, b_max, eps_node)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite guidance velocity")
    return _reshape_vector(v, sys, shape)


def quantum_potential(sys, theta, t, q):
    """``Q = -sum_k (hbar**2 / 2 m_k) d_k**2 R / R``."""
    psi, dpsi, d2psi, shape = _psi_parts(sys, theta, t, q, order=2)
    rho = np.abs(psi) ** 2
    re1 = (np.conj(psi)[:, None] * dpsi).real
    with np.errstate(divide="ignore", invalid="ignore"):
        lap_over_r = ((np.conj(psi)[:, None] * d2psi).real + np.abs(dpsi) ** 2
                      - re1**2 / rho[:, None]) / rho[:, None]
    Q = -np.sum(sys.hbar**2 / (2 * sys.masses) * lap_over_r, axis=1)
    if not np.all(np.isfinite(Q)):
        raise NonFiniteError("quantum potential undefined at a node")
    return _reshape_scalar(Q, shape)


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

@dataclass
class ObservableSet:
    mean: object
    variance: object
    momentum: object
    energy: float
    energy_spread: float
    norm: float


def energy_moments(sys):
    """``<H>`` and the energy standard deviation from the coefficients alone."""
    w = sys.magnitudes**2
    h = float(np.sum(w * sys.energies))
    var = float(np.sum(w * sys.energies**2) - h**2)
    return h, math.sqrt(max(var, 0.0))


def moments(sys, theta, t):
    """Vectorised position mean, variance and momentum mean.

    Shapes follow ``theta``: ``(K,)`` gives ``(d,)`` arrays, ``(n, K)``
    gives ``(n, d)``.
    """
    mats = sys.level_matrices
    a = phase_factors(sys, theta, t, relative=True)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    mean = _quadratic_forms(a, mats["x"])
    second = _quadratic_forms(a, mats["x2"])
    mom = _quadratic_forms(a, mats["p"])
    var = np.maximum(second - mean**2, 0.0)
    if single:
        return mean[0], var[0], mom[0]
    return mean, var, mom


def observables(sys, theta, t) -> ObservableSet:
    mean, var, mom = moments(sys, theta, t)
    a = phase_factors(sys, theta, t, relative=True)
    norm = float(np.real(a.conj() @ sys.level_matrices["overlap"] @ a))
    h, dh = energy_moments(sys)
    if sys.dim == 1:
        mean, var, mom = float(mean[0]), float(var[0]), float(mom[0])
    return ObservableSet(mean, var, mom, h, dh, norm)


def grid_density(sys, theta, t, n_points=None):
    """``|psi|**2`` on the quadrature grid: returns (axes, weights, values)."""
    axes = sys.quadrature_axes(n_points)
    if sys.dim == 1:
        x, w = axes[0]
        return [x], [w], density(sys, theta, t, x)
    (x, wx), (y, wy) = axes
    X, Y = np.meshgrid(x, y, indexing="ij")
    vals = density(sys, theta, t, np.stack([X, Y], -1))
    return [x, y], [wx, wy], vals


def equilibrium_timescale(sys) -> float:
    """``L**2 / D`` with ``D = hbar / m`` and L the domain (or packet) length."""
    D = sys.hbar / float(np.min(sys.masses))
    length = getattr(sys, "length_scale", None)
    if length is None:
        length = float(np.max(sys.upper - sys.lower))
    return length**2 / D


def theta_rows(theta, K):
    """Coerce phases to ``(n, K)``; a lone vector counts as one row."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 2:
        return theta
    if K == 0:
        return np.zeros((1, 0))
    return theta.reshape(-1, K)


# ---------------------------------------------------------------------------
# sampling positions from |psi|^2
# ---------------------------------------------------------------------------

def sample_positions(sys, theta, t, rng, chunk=512):
    """Draw one position per phase vector from ``|psi(., theta_m, t)|**2``.

    ``theta`` is ``(n, K)``.  Bounded domains use rejection sampling with
    the uniform envelope ``(sum_i |C_i| sup|Phi_i|)**2``; otherwise the
    density is inverted on the quadrature grid.
    """
    theta = theta_rows(theta, sys.K)
    n = theta.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    if sys.basis.bounded:
        out = np.empty((n, sys.dim))
        pending = np.arange(n)
        bound = sys.density_bound
        while pending.size:
            prop = sys.lower + (sys.upper - sys.lower) * rng.random((pending.size, sys.dim))
            u = rng.random(pending.size) * bound
            rho = np.abs(_psi_parts(sys, theta[pending], t[pending], prop if sys.dim > 1 else prop[:, 0])[0]) ** 2
            ok = u < rho
            out[pending[ok]] = prop[ok]
            pending = pending[~ok]
        return out[:, 0] if sys.dim == 1 else out
    if sys.dim != 1:
        raise ModelError("grid inversion sampling is 1-D only")
    x, _ = sys.quadrature_axes()[0]
    if sys.periodic:
        x = np.append(x, sys.upper[0])
    Phi = level_values(sys, x[:, None])[0]
    out = np.empty(n)
    u = rng.random(n)
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        a = phase_factors(sys, theta[sl], t[sl])
        rho = np.abs(a @ Phi.T) ** 2
        cdf = np.concatenate([np.zeros((rho.shape[0], 1)),
                              np.cumsum(0.5 * (rho[:, 1:] + rho[:, :-1]) * np.diff(x), axis=1)], axis=1)
        cdf /= cdf[:, -1:]
        target = u[sl]
        idx = np.clip((cdf < target[:, None]).sum(axis=1) - 1, 0, len(x) - 2)
        rows = np.arange(len(idx))
        c0, c1 = cdf[rows, idx], cdf[rows, idx + 1]
        frac = np.where(c1 > c0, (target - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.5)
        out[sl] = x[idx] + frac * (x[idx + 1] - x[idx])
    return out
