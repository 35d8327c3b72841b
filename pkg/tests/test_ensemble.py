import math

import numpy as np
import pytest

from dualist import macro, quantum, ste
from dualist.dynamics import IntegratorConfig, simulate_paths
from dualist.ensemble import (EnsembleSpec, block_streams, dqe_stationarity_test, irreversibility_trend,
                              mean_evolution_check, phase_uniformity_test, run_ensemble,
                              variance_evolution_check)


def spec_for(sys, members=200, horizon=0.5, lam=0.0, seed=1, **kw):
    kw.setdefault("stride", 50)
    return EnsembleSpec(sys, members, horizon, IntegratorConfig(dt=1e-3), ste.RateModel(lam=lam), seed=seed, **kw)


@pytest.fixture(scope="module")
def two_level_run():
    from conftest import box

    sys = box(1, 2)
    return run_ensemble(spec_for(sys, members=600, horizon=1.0, lam=2.0, seed=3, stride=20))


def test_block_streams_distinct_and_reproducible():
    a, b = block_streams(5, 0), block_streams(5, 1)
    assert a["noise"].random() != b["noise"].random()
    assert block_streams(5, 0)["events"].random() == block_streams(5, 0)["events"].random()
    assert block_streams(5, 0)["noise"].random() != block_streams(5, 0)["events"].random()


def test_single_member_zero_horizon(two_level):
    res = run_ensemble(spec_for(two_level, members=1, horizon=0.0))
    assert res.times.tolist() == [0.0]
    np.testing.assert_array_equal(res.q[0], res.q_final)
    np.testing.assert_array_equal(res.theta_final, [[0.0]])
    assert res.n_events == 0


def test_rate_zero_equals_plain_paths(two_level):
    spec = spec_for(two_level, members=100, horizon=0.2, seed=3)
    res = run_ensemble(spec)
    rec = simulate_paths(two_level, [0.0], res.q[0], IntegratorConfig(dt=1e-3), 0.2, block_streams(3, 0)["noise"],
                         stride=50)
    assert res.q.tobytes() == rec.positions.tobytes()


def test_worker_count_invariance(two_level):
    spec = spec_for(two_level, members=300, horizon=0.2, lam=3.0, seed=9, block_size=64)
    a, b = run_ensemble(spec, threads=1), run_ensemble(spec, threads=3)
    assert a.config_hash == b.config_hash
    for name in ("q", "theta", "mu", "var", "q_final", "theta_final"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    for k in a.events:
        assert a.events[k].tobytes() == b.events[k].tobytes()


def test_events_sorted_and_counted(two_level_run):
    ev = two_level_run.events
    order = np.lexsort((ev["t"], ev["member"]))
    assert np.array_equal(order, np.arange(len(order)))
    exposure = two_level_run.spec.members * two_level_run.spec.horizon
    assert abs(two_level_run.n_events - 2.0 * exposure) < 4 * math.sqrt(2.0 * exposure)


def test_events_conserve_energy_moments(two_level_run):
    sys = two_level_run.spec.sys
    ev = two_level_run.events
    for th in (ev["theta_before"][:50], ev["theta_after"][:50]):
        for row in th:
            assert quantum.observables(sys, row, 0.3).energy == quantum.energy_moments(sys)[0]


def test_stats_carry_uncertainty(two_level_run):
    m = two_level_run.mean_series()
    assert m.n == 600 and np.all(np.asarray(m.se)[1:] > 0)


def test_rate_zero_mean_fit_is_zero(two_level):
    res = run_ensemble(spec_for(two_level, members=200, horizon=0.3))
    fit = mean_evolution_check(res)
    assert fit.lam_hat == 0.0 and fit.ci[0] <= 0.0 <= fit.ci[1]
    assert not fit.degenerate


def test_single_level_fit_degenerate(ground):
    res = run_ensemble(spec_for(ground, members=50, horizon=0.1, lam=5.0))
    assert np.ptp(res.mu[:, :, 0]) == 0.0
    assert mean_evolution_check(res).degenerate
    assert variance_evolution_check(res).degenerate
    assert np.ptp(res.var[:, :, 0]) == 0.0


def test_mean_fit_recovers_rate(two_level_run):
    fit = mean_evolution_check(two_level_run)
    assert fit.contains(2.0, z=3.0)


def test_rate_zero_variance_matches_quadrature(two_level):
    res = run_ensemble(spec_for(two_level, members=50, horizon=0.5))
    v = res.variance_series()
    exact = [quantum.observables(two_level, [0.0], t).variance for t in res.times]
    np.testing.assert_allclose(np.asarray(v.value)[:, 0], exact, atol=1e-12)


def test_free_packet_variance_growth_impeded():
    sys = macro.build_gaussian_packet(macro.GaussianPacketSpec(sigma=1.0, n_levels=64))
    kw = dict(members=128, horizon=1.0, seed=4, stride=10)
    mk = lambda lam: EnsembleSpec(sys, kw["members"], kw["horizon"], IntegratorConfig(dt=1e-2),
                                  ste.RateModel(lam=lam), seed=kw["seed"], stride=kw["stride"])
    res, ctrl = run_ensemble(mk(3.0)), run_ensemble(mk(0.0))
    fit = variance_evolution_check(res, ctrl, max_events=200, n_mc=100)
    assert fit.coefficient + 3 * fit.se < 0
    assert fit.chi > 0


def test_phase_test_calibration():
    passes = sum(phase_uniformity_test(np.random.default_rng(s).uniform(0, 2 * np.pi, (2000, 1))).passed
                 for s in range(100))
    assert passes >= 98


def test_phase_test_rejects_constant():
    res = phase_uniformity_test(np.full((2000, 2), 1.0))
    assert res.min_p < 1e-12 and not res.passed


def test_phase_test_needs_samples():
    with pytest.raises(ValueError):
        phase_uniformity_test(np.zeros((10, 1)))


def test_dqe_stationarity_two_level(two_level):
    rep = dqe_stationarity_test(two_level, 10_000, seed=21)
    assert rep.phase.passed and min(rep.bin_pvalues) > 0.01 and rep.passed


def test_dqe_pure_start_reports_gap(two_level):
    rep = dqe_stationarity_test(two_level, 2000, seed=22, init="pure", theta0=[0.0])
    assert rep.l1_gap > 0.05


def test_dqe_single_level_vacuous(ground):
    assert dqe_stationarity_test(ground, 1000, seed=1).passed


def test_irreversibility_trend(two_level_run):
    tr = irreversibility_trend(two_level_run)
    assert tr.circular_variance[0] == 0.0
    assert tr.monotone
    assert tr.circular_variance[-1] > 0.5
