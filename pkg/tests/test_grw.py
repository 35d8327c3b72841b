import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualist import grw

X = np.linspace(-10, 10, 4001)


def two_packets(d=6.0, s=0.5):
    psi = np.exp(-((X + d / 2) ** 2) / (2 * s**2)) + np.exp(-((X - d / 2) ** 2) / (2 * s**2))
    return grw.GridWavefunction(X, psi.astype(complex)).normalized()


def _F_moments(wf, alpha):
    z = grw.hit_grid(wf, alpha)
    F = grw.hit_density(wf, alpha, z)
    m0 = np.trapezoid(F, z)
    m1 = np.trapezoid(z * F, z) / m0
    return m0, m1, np.trapezoid((z - m1) ** 2 * F, z) / m0


def test_narrow_packet_gives_gaussian_centre_density():
    wf = grw.gaussian_state(X, 1.5, 0.01)
    alpha = 2.0
    z = np.linspace(-2, 5, 50)
    ref = math.sqrt(alpha / math.pi) * np.exp(-alpha * (z - 1.5) ** 2)
    np.testing.assert_allclose(grw.hit_density(wf, alpha, z), ref, atol=2e-4)


def test_large_alpha_recovers_born_density():
    wf = grw.gaussian_state(X, 0.0, 1.0)
    gaps = []
    for alpha in (10.0, 100.0, 1000.0):
        F = grw.hit_density(wf, alpha, X)
        gaps.append(np.abs(F - wf.prob).sum() * wf.dx)
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3


@pytest.mark.parametrize("s,alpha", [(1.0, 3.0), (0.4, 50.0), (2.0, 0.5)])
def test_centre_density_variance(s, alpha):
    wf = grw.gaussian_state(X, 0.3, s)
    m0, m1, var = _F_moments(wf, alpha)
    assert m0 == pytest.approx(1.0, abs=1e-6)
    assert m1 == pytest.approx(0.3, abs=1e-6)
    assert var == pytest.approx(wf.variance() + 1 / (2 * alpha), abs=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_centre_density_integrates_to_one_random_state(seed):
    r = np.random.default_rng(seed)
    x = np.linspace(-8, 8, 1601)
    coeffs = r.normal(size=6) + 1j * r.normal(size=6)
    centres = r.uniform(-3, 3, 6)
    psi = sum(c * np.exp(-((x - m) ** 2) / (2 * r.uniform(0.2, 1.0) ** 2)) for c, m in zip(coeffs, centres))
    wf = grw.GridWavefunction(x, psi).normalized()
    alpha = float(r.uniform(0.5, 50))
    m0, _, _ = _F_moments(wf, alpha)
    assert m0 == pytest.approx(1.0, abs=1e-6)


def test_symmetric_state_centre_mean(rng):
    wf = grw.gaussian_state(X, 0.5, 0.8)
    z = grw.sample_hit_center(wf, 4.0, rng, 100_000)
    assert abs(z.mean() - 0.5) < 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_centre_sample_variance(rng):
    wf = grw.gaussian_state(X, 0.0, 1.0)
    alpha = 2.0
    z = grw.sample_hit_center(wf, alpha, rng, 100_000)
    var = z.var(ddof=1)
    se = math.sqrt(np.mean((z - z.mean()) ** 4) - var**2) / math.sqrt(z.size)
    assert abs(var - (wf.variance() + 1 / (2 * alpha))) < 3 * se


def test_separated_packets_split_evenly(rng):
    wf = two_packets()
    z = grw.sample_hit_center(wf, 10.0, rng, 20_000)
    frac = np.mean(z > 0)
    assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / z.size)


@pytest.mark.parametrize("s,alpha", [(1.0, 3.0), (0.5, 20.0)])
def test_hit_at_centre_narrows(s, alpha):
    wf = grw.gaussian_state(X, 0.0, s)
    post = grw.apply_hit(wf, alpha, 0.0)
    assert post.amplitude_width2() == pytest.approx(1 / (s**-2 + alpha), abs=1e-6)
    assert post.norm() == pytest.approx(1.0, abs=1e-8)


def test_vanishing_alpha_is_identity():
    wf = grw.gaussian_state(X, 0.2, 1.3, k0=0.7)
    post = grw.apply_hit(wf, 1e-12, 0.5)
    np.testing.assert_allclose(post.psi, wf.psi, atol=1e-8)


def test_tail_survives_hit():
    d, alpha = 6.0, 1.0
    wf = two_packets(d)
    post = grw.apply_hit(wf, alpha, -d / 2)
    right = lambda w: w.prob[X > 0].sum() * w.dx
    ratio = right(post) / right(wf)
    assert 0 < ratio < 1e-3
    # exact Gaussian overlaps: each packet density has variance v = s**2 / 2
    v = 0.5**2 / 2
    e = math.exp(-alpha * d**2 / (1 + 2 * alpha * v))
    assert ratio == pytest.approx(2 * e / (1 + e), rel=1e-6, abs=0)


def test_hits_commute():
    wf = grw.gaussian_state(X, 0.0, 1.5)
    ab = grw.apply_hit(grw.apply_hit(wf, 2.0, 0.4), 2.0, -0.3)
    ba = grw.apply_hit(grw.apply_hit(wf, 2.0, -0.3), 2.0, 0.4)
    np.testing.assert_allclose(ab.psi, ba.psi, atol=1e-10)


def test_run_hits_normalised_and_energy_grows(rng):
    wf = grw.gaussian_state(X, 0.0, 2.0)
    final, rec = grw.run_hits(wf, grw.HitConfig(alpha=5.0, lam=2.0), 5.0, rng)
    assert rec and all(r.index == i for i, r in enumerate(rec))
    assert final.norm() == pytest.approx(1.0, abs=1e-8)
    assert rec[0].energy_after > rec[0].energy_before
    assert np.all(np.diff([r.t for r in rec]) > 0)


def test_run_hits_rate_zero(rng):
    wf = grw.gaussian_state(X)
    final, rec = grw.run_hits(wf, grw.HitConfig(alpha=1.0, lam=0.0), 10.0, rng)
    assert rec == [] and final is wf


def test_constants():
    assert grw.LAMBDA_GRW == pytest.approx(1e-8 / (365.25 * 86400), rel=1e-3)
    # the two quoted rates differ by about a factor of three
    assert 2 < grw.LAMBDA_GRW / grw.LAMBDA_ROUND < 4
    with pytest.raises(ValueError):
        grw.HitConfig(alpha=0.0)
