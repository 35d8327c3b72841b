import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import constants

from dualist import macro, quantum

SPEC = macro.GaussianPacketSpec(sigma=1.0, U=0.0, M=1.0)


@pytest.fixture(scope="module")
def packet():
    return macro.build_gaussian_packet(SPEC)


def test_single_particle_reduction_is_identity():
    base = macro.build_gaussian_packet(SPEC)
    com = macro.com_reduce(1, 1.0, SPEC, lam=0.3)
    np.testing.assert_array_equal(com.sys.energies, base.energies)
    np.testing.assert_array_equal(com.sys.magnitudes, base.magnitudes)
    assert com.rate == 0.3 and com.D == 1.0


@given(st.integers(1, 10**6))
def test_diffusion_scales_inverse_n(N):
    spec = macro.GaussianPacketSpec(sigma=1.0, n_levels=8)
    D1 = macro.com_reduce(1, 2.0, spec, 0.1).D
    com = macro.com_reduce(N, 2.0, spec, 0.1)
    assert com.D / D1 == pytest.approx(1 / N, rel=1e-15)
    assert com.rate == pytest.approx(N * 0.1, rel=1e-15)


def test_macroscopic_event_frequency():
    assert 1e6 <= macro.physical_scales()["N_lambda"] <= 1e8


def test_packet_symmetric_at_rest(packet):
    obs = quantum.observables(packet, np.zeros(packet.K), 0.0)
    assert abs(obs.mean) < 1e-8
    x = np.linspace(-4, 4, 81)
    rho = quantum.density(packet, np.zeros(packet.K), 0.0, x)
    np.testing.assert_allclose(rho, rho[::-1], atol=1e-12)


def test_packet_norm(packet):
    assert np.sum(packet.magnitudes**2) == pytest.approx(1.0, abs=1e-10)
    assert macro.coverage(SPEC) > 0.9999


def test_packet_matches_gaussian_at_origin():
    wide = macro.build_gaussian_packet(macro.GaussianPacketSpec(sigma=1.0, n_levels=512, extent=10.0))
    x = np.linspace(-3, 3, 61)
    rho = quantum.density(wide, np.zeros(wide.K), 0.0, x)
    exact = np.exp(-x**2 / 2) / math.sqrt(2 * math.pi)
    np.testing.assert_allclose(rho, exact, atol=1e-6)


@pytest.mark.parametrize("U", [0.0, 1.5])
def test_free_spreading(U):
    spec = macro.GaussianPacketSpec(sigma=1.0, U=U, M=1.0)
    sys = macro.build_gaussian_packet(spec)
    for t in (0.5, 1.0, 2.0):
        obs = quantum.observables(sys, np.zeros(sys.K), t)
        assert obs.variance == pytest.approx(macro.free_variance(spec, t), rel=1e-3)
        assert obs.mean == pytest.approx(U * t, abs=1e-6)


def test_closed_form_limits():
    spec = macro.GaussianPacketSpec(sigma=1.0, U=0.8, M=1.0)
    far = macro.mean_drift_closed(spec, np.array([20.0, -20.0]))
    np.testing.assert_allclose(far, 0.8, atol=1e-12)
    assert macro.mean_drift_closed(SPEC, 0.0) == 0.0


@pytest.mark.parametrize("smu", [0.0, 0.3, 1.0, 3.0])
def test_deviation_bound(smu):
    spec = macro.GaussianPacketSpec(sigma=1.0, U=smu, M=1.0)
    R = np.linspace(-6, 6, 2401)
    dev = np.abs(macro.mean_drift_closed(spec, R) - spec.U)
    assert dev.max() <= macro.deviation_bound(spec) * (1 + 1e-12)


@pytest.mark.parametrize("U", [0.0, 0.2, 1.0, 3.0])
def test_deviation_decays_monotonically_past_peak(U):
    # at U = 0 the deviation peaks where R**2 = 1 + exp(-R**2 / 2), R ~ 1.22 sigma
    spec = macro.GaussianPacketSpec(sigma=1.0, U=U, M=1.0)
    R = np.linspace(1.25, 8.0, 2000)
    dev = np.abs(macro.mean_drift_closed(spec, R) - spec.U)
    assert np.all(np.diff(dev) <= 1e-13)
    assert dev[-1] < 1e-12


def test_deviation_peak_location_at_rest():
    R = np.linspace(0, 3, 30001)
    dev = np.abs(macro.mean_drift_closed(SPEC, R))
    peak = R[np.argmax(dev)]
    assert peak**2 == pytest.approx(1 + math.exp(-peak**2 / 2), abs=1e-3)


def test_plane_wave_level_sum_is_velocity():
    U, M = 0.7, 2.0
    basis = quantum.RingBasis([M * U], 50.0, M)
    sys = quantum.SpectralSystem(basis, np.array([M * U**2 / 2]), np.ones(1), np.ones((1, 1), dtype=complex),
                                 np.zeros(0), 1.0, basis.grid_points)
    np.testing.assert_allclose(macro.mean_drift_levels(sys, np.linspace(-5, 5, 11)), U, rtol=1e-14)


def test_level_sum_matches_closed_form(packet):
    R = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(macro.mean_drift_levels(packet, R), macro.mean_drift_closed(SPEC, R), atol=1e-6)


def test_monte_carlo_drift_at_one_sigma(rng):
    spec = macro.GaussianPacketSpec(sigma=1.0, U=1.0, M=1.0)
    sys = macro.build_gaussian_packet(spec)
    closed = float(macro.mean_drift_closed(spec, 1.0))
    gap = abs(float(macro.mean_drift_levels(sys, 1.0)) - closed)
    est, se = macro.mean_drift_mc(sys, 1.0, 10_000, rng)
    assert abs(est - closed) <= 3 * se + gap


def test_monte_carlo_matches_level_sum_five_points(rng):
    spec = macro.GaussianPacketSpec(sigma=1.0, U=0.0, M=1.0, n_levels=64)
    sys = macro.build_gaussian_packet(spec)
    for R in (-2.0, -1.0, 0.0, 1.0, 2.0):
        est, se = macro.mean_drift_mc(sys, R, 8000, rng)
        assert abs(est - float(macro.mean_drift_levels(sys, R))) <= 3 * se


def test_proton_and_electron_timescales():
    s = macro.physical_scales()
    assert 1e-8 <= s["tau_proton"] <= 1e-6
    assert 1e-12 <= s["tau_electron"] <= 1e-10
    assert 1e-24 <= s["lambda_tau_proton"] <= 1e-22
    assert 1e-16 <= s["molecule_event_probability"] <= 1e-14
    assert s["tau_proton"] == pytest.approx(constants.m_p * 1e-14 / constants.hbar, rel=1e-12)


@given(st.integers(1, 10**9))
def test_timescale_invariant_and_bound_scaling(N):
    assert macro.tau(N, 1.0, 1.0) == pytest.approx(macro.tau(1, 1.0, 1.0), rel=1e-12)
    spec1 = macro.GaussianPacketSpec(sigma=1.0, M=1.0, n_levels=4)
    specN = macro.GaussianPacketSpec(sigma=N**-0.5, M=float(N), n_levels=4)
    ratio = macro.deviation_bound(specN) / macro.deviation_bound(spec1)
    assert ratio == pytest.approx(N**-0.5, rel=1e-12)


def test_timescale_exponent_parameter():
    assert macro.tau(100, 1.0, 1.0, chi=0.0) == pytest.approx(100.0)
    assert macro.tau(100, 1.0, 1.0, chi=1.0) == pytest.approx(0.01)


def test_spread_scaling():
    a = macro.spread_between_events(10, 1.0, 0.1)
    b = macro.spread_between_events(20, 1.0, 0.1)
    assert b.variance == pytest.approx(a.variance / 4, rel=1e-14)
    assert macro.spread_between_events(100, 1.0, 0.1).variance == pytest.approx(1e-3, rel=1e-14)


def test_spread_regime_flag_physical():
    sp = macro.spread_between_events(1e23, constants.m_p, 1e-16, macro.L1_PHYSICAL, constants.hbar)
    assert sp.below
    assert sp.ratio < 1


def test_mean_step():
    assert macro.mean_step(2.0, 0.0, 10, 1.0) == 2.0
    assert macro.mean_step(2.0, 1.0, 10, 1.0) == pytest.approx(2.1, rel=1e-14)


def test_inter_event_displacements_unwraps_ring():
    member = np.array([0, 0, 0, 1, 1])
    t = np.array([0.1, 0.3, 0.6, 0.2, 0.9])
    q = np.array([4.9, -4.9, -4.7, 0.0, 1.0])
    d, dt = macro.inter_event_displacements(member, t, q, ring_length=10.0)
    np.testing.assert_allclose(d, [0.2, 0.2, 1.0], atol=1e-12)
    np.testing.assert_allclose(dt, [0.2, 0.3, 0.7])
