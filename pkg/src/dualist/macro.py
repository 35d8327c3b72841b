"""Centre-of-mass reduction and the macroscopic limit.

A body of ``N`` particles of mass ``m`` is reduced to its centre of mass
``R`` with total mass ``M = N m``, diffusion ``hbar / M`` and event rate
``N lambda``.  The free Gaussian packet is discretised into momentum
levels, each holding the degenerate pair ``exp(+-i P R / hbar)`` on a ring
whose circumference makes the plane waves exactly orthonormal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import constants, stats

from . import quantum, ste
from .errors import ModelError

# Characteristic single-particle length used for the order-of-magnitude
# estimates (1e-5 cm).
L1_PHYSICAL = 1e-7  # m


@dataclass
class GaussianPacketSpec:
    """Free packet with position std ``sigma`` and mean velocity ``U``.

    ``n_levels`` momentum magnitudes cover ``extent`` momentum standard
    deviations (``hbar / (2 sigma)``) on either side of ``M U``.
    """

    sigma: float
    U: float = 0.0
    M: float = 1.0
    n_levels: int = 128
    extent: float = 6.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.M > 0):
            raise ValueError("sigma and M must be positive")
        if self.n_levels < 1 or self.extent <= 0:
            raise ValueError("invalid momentum grid")

    def momentum_std(self, hbar=1.0):
        return hbar / (2 * self.sigma)


def momentum_grid(spec: GaussianPacketSpec, hbar=1.0):
    """Level momenta ``P_k = P_lo + (k + 1/2) dP`` with ``P_lo`` a multiple of ``dP``."""
    sp = spec.momentum_std(hbar)
    P0 = spec.M * abs(spec.U)
    hi = P0 + spec.extent * sp
    lo = max(0.0, P0 - spec.extent * sp)
    dP = (hi - lo) / spec.n_levels
    lo = math.floor(lo / dP) * dP
    return lo + (np.arange(spec.n_levels) + 0.5) * dP, dP


def coverage(spec: GaussianPacketSpec, hbar=1.0) -> float:
    """Momentum probability captured by the level grid (both signs)."""
    P, dP = momentum_grid(spec, hbar)
    lo, hi = P[0] - 0.5 * dP, P[-1] + 0.5 * dP
    dist = stats.norm(spec.M * spec.U, spec.momentum_std(hbar))
    return float(dist.cdf(hi) - dist.cdf(lo) + dist.cdf(-lo) - dist.cdf(-hi))


def build_gaussian_packet(spec: GaussianPacketSpec, hbar=1.0, min_coverage=0.9999) -> quantum.SpectralSystem:
    """Discretised free packet; at zero phases and ``t = 0`` it is the Gaussian."""
    cov = coverage(spec, hbar)
    if cov < min_coverage:
        raise ModelError(f"momentum grid covers only {cov:.6f} of the packet")
    P, dP = momentum_grid(spec, hbar)
    length = 2 * math.pi * hbar / dP
    a = np.exp(-(spec.sigma**2) * (P - spec.M * spec.U) ** 2 / hbar**2)
    b = np.exp(-(spec.sigma**2) * (P + spec.M * spec.U) ** 2 / hbar**2)
    momenta = np.stack([P, -P], 1).ravel()
    basis = quantum.RingBasis(momenta, length, spec.M, hbar)
    mags = np.sqrt(a**2 + b**2)
    norm = math.sqrt(float(np.sum(mags**2)))
    W = np.zeros((2 * len(P), len(P)), dtype=complex)
    k = np.arange(len(P))
    W[2 * k, k] = a / mags
    W[2 * k + 1, k] = b / mags
    return quantum.SpectralSystem(basis, P**2 / (2 * spec.M), mags / norm, W, np.zeros(len(P) - 1),
                                  float(hbar), basis.grid_points, label="free_packet",
                                  length_scale=spec.sigma)


def free_variance(spec: GaussianPacketSpec, t, hbar=1.0):
    """Position variance of the free Gaussian packet at time ``t``."""
    return spec.sigma**2 * (1 + (hbar * np.asarray(t) / (2 * spec.M * spec.sigma**2)) ** 2)


@dataclass
class ComSystem:
    sys: quantum.SpectralSystem
    packet: GaussianPacketSpec
    N: int
    m: float
    rate: float
    D: float


def com_reduce(N, m, packet: GaussianPacketSpec, lam, hbar=1.0) -> ComSystem:
    """Centre-of-mass system with ``M = N m``, diffusion ``hbar/M`` and rate ``N lambda``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    spec = GaussianPacketSpec(packet.sigma, packet.U, N * m, packet.n_levels, packet.extent)
    return ComSystem(build_gaussian_packet(spec, hbar), spec, int(N), float(m), N * lam, hbar / (N * m))


def deviation_exponent(spec: GaussianPacketSpec, R, hbar=1.0):
    return np.exp(-2 * (spec.sigma * spec.M * spec.U / hbar) ** 2 - np.asarray(R) ** 2 / (2 * spec.sigma**2))


def mean_drift_closed(spec: GaussianPacketSpec, R, hbar=1.0):
    """Phase-averaged drift of the continuum packet at position ``R``."""
    R = np.asarray(R, dtype=float)
    E = deviation_exponent(spec, R, hbar)
    return (spec.U - hbar * R / (2 * spec.M * spec.sigma**2) * E) / (1 + E)


def deviation_bound(spec: GaussianPacketSpec, hbar=1.0) -> float:
    return hbar / (2 * spec.M * spec.sigma)


def mean_drift_levels(sys, q):
    """Deterministic average ``sum |C_i|^2 |Phi_i|^2 b_i / sum |C_i|^2 |Phi_i|^2``.

    Each stationary level contributes ``(hbar/m) (Re + Im)(Phi_i* grad Phi_i)``,
    so the level densities cancel and no division by ``|Phi_i|**2`` is needed.
    """
    pts, shape = quantum._points(sys, q)
    Phi, dPhi, _ = quantum.level_values(sys, pts)
    w = sys.magnitudes**2
    z = np.conj(Phi)[..., None] * dPhi
    num = np.einsum("i,nid->nd", w, z.real + z.imag, optimize=True) * (sys.hbar / sys.masses)
    den = np.sum(w * np.abs(Phi) ** 2, axis=1)
    out = num / den[:, None]
    if sys.dim == 1:
        return out[:, 0].reshape(shape) if shape else float(out[0, 0])
    return out.reshape(shape + (sys.dim,))


def mean_drift_mc(sys, R, n_samples, rng, t=0.0):
    """Monte Carlo average of the drift over event-sampled phases at ``R``.

    Returns ``(estimate, standard_error)``.
    """
    q = np.full(n_samples, float(R))
    theta = ste.sample_ste(sys, t, q, rng).theta
    b = quantum.drift(sys, theta, t, q)
    return float(b.mean()), float(b.std(ddof=1) / math.sqrt(n_samples))


def tau(N, m, L1, chi=0.5, hbar=1.0):
    """Equilibrium timescale ``N m L(N)**2 / hbar`` with ``L(N) = N**-chi L(1)``."""
    L = np.asarray(N, dtype=float) ** (-chi) * L1
    return np.asarray(N, dtype=float) * m * L**2 / hbar


@dataclass
class Spread:
    variance: float
    reference: float
    ratio: float
    below: bool


def spread_between_events(N, m, lam, L1=None, hbar=1.0) -> Spread:
    """Diffusive spread ``hbar / (N**2 m lambda)`` accumulated between events.

    Compared with ``L(1)**2 / N`` when ``L1`` is given; ``ratio`` is the
    spread over that reference.
    """
    var = hbar / (N**2 * m * lam)
    if L1 is None:
        return Spread(var, float("nan"), float("nan"), False)
    ref = L1**2 / N
    return Spread(var, ref, var / ref, var < ref)


def mean_step(R0, velocity, N, lam):
    """Expected position at the next event: ``R0 + v / (N lambda)``."""
    return R0 + velocity / (N * lam)


def physical_scales(N_macro=1e23, lam=1e-16, N_molecule=1e3, T_molecule=1e-2, L1=L1_PHYSICAL):
    """Order-of-magnitude numbers in SI units."""
    hbar = constants.hbar
    tau_p = float(tau(1, constants.m_p, L1, hbar=hbar))
    tau_e = float(tau(1, constants.m_e, L1, hbar=hbar))
    spread = spread_between_events(N_macro, constants.m_p, lam, L1, hbar)
    return {
        "N_lambda": N_macro * lam,
        "tau_proton": tau_p,
        "tau_electron": tau_e,
        "lambda_tau_proton": lam * tau_p,
        "N_lambda_tau_proton": N_macro * lam * tau_p,
        "molecule_event_probability": ste.event_probability(N_molecule * lam, T_molecule),
        "spread_ratio": spread.ratio,
    }


def inter_event_displacements(events_member, events_t, events_q, ring_length=None):
    """Displacements between consecutive events of the same member.

    Arrays are the flat event log; events must be ordered by member then
    time (the ensemble log is).  Ring coordinates are unwrapped.
    """
    member = np.asarray(events_member)
    q = np.asarray(events_q, dtype=float).reshape(len(member), -1)[:, 0]
    t = np.asarray(events_t, dtype=float)
    same = member[1:] == member[:-1]
    d = (q[1:] - q[:-1])[same]
    if ring_length is not None:
        d = np.mod(d + 0.5 * ring_length, ring_length) - 0.5 * ring_length
    return d, (t[1:] - t[:-1])[same]
