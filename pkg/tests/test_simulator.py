import math

import numpy as np
import pytest
from scipy import integrate, stats

from bbmcmd import density
from bbmcmd.curves import ModelParams
from bbmcmd.simulator import (BarrierSpec, ConfigError, SimConfig, UnderpoweredError, count_hits,
                              estimate_survival, sample_cmd, simulate, simulate_batch)


def _cfg(**kw):
    base = dict(params=ModelParams(0.3, 3.0), x0=2.0, barrier=BarrierSpec.origin_only(), dt=0.01, seed=11)
    base.update(kw)
    return SimConfig(**base)


@pytest.mark.parametrize("barrier,x0", [(BarrierSpec.origin_only(), 2.0), (BarrierSpec.origin_plus_k(), 1.0),
                                        (BarrierSpec.origin_plus_h(), 1.0), (BarrierSpec.constant_strip(3.0), 1.5),
                                        (BarrierSpec.no_absorption(), 0.0)])
def test_backends_agree(barrier, x0):
    cfg = _cfg(barrier=barrier, x0=x0, record_hits_window=(0.0, 3.0) if barrier.has_upper else None)
    track = barrier.kind == "none"
    a = simulate_batch(cfg, 150, track_cmd=track, backend="numba")
    b = simulate_batch(cfg, 150, track_cmd=track, backend="numpy")
    np.testing.assert_array_equal(a.leaves, b.leaves)
    np.testing.assert_array_equal(a.created, b.created)
    np.testing.assert_array_equal(a.hit_counts, b.hit_counts)
    np.testing.assert_allclose(a.zeta, b.zeta, rtol=0, atol=1e-12)
    if track:
        np.testing.assert_allclose(a.cmd, b.cmd, rtol=0, atol=1e-12)


def test_single_replicate_records_agree_across_backends():
    cfg = _cfg(barrier=BarrierSpec.origin_plus_k(), x0=1.0)
    a = simulate(cfg, 4, backend="numba")
    b = simulate(cfg, 4, backend="numpy")
    assert [g for _, g in a.hit_records] == [g for _, g in b.hit_records]
    np.testing.assert_allclose([t for t, _ in a.hit_records], [t for t, _ in b.hit_records], atol=1e-12)
    assert (a.final_population, a.n_created, a.extinct) == (b.final_population, b.n_created, b.extinct)


def test_independent_of_worker_count():
    cfg = _cfg(x0=3.0)
    a = simulate_batch(cfg, 400, workers=1)
    b = simulate_batch(cfg, 400, workers=3)
    np.testing.assert_array_equal(a.leaves, b.leaves)
    np.testing.assert_array_equal(a.zeta, b.zeta)


def test_replicate_slices_are_consistent():
    cfg = _cfg(x0=3.0)
    full = simulate_batch(cfg, 60)
    tail = simulate_batch(cfg, 20, first_replicate=40)
    np.testing.assert_array_equal(full.leaves[40:], tail.leaves)
    assert simulate(cfg, 45).final_population == full.leaves[45]


def test_survival_monotone_in_start_under_common_draws():
    # the whole tree translates with x0, so survival can only improve
    prev = None
    for x in (0.5, 1.0, 2.0, 3.0, 4.0):
        s = simulate_batch(_cfg(x0=x), 300).survived
        if prev is not None:
            assert np.all(s >= prev)
        prev = s


def test_degenerate_cases():
    out = simulate(_cfg(x0=0.0))
    assert out.extinct and out.zeta == 0.0
    est = estimate_survival(-1.0, ModelParams(0.3, 3.0), 100, 0)
    assert est.point == 0.0
    vals = sample_cmd(ModelParams(0.3, 0.0), 20, 0)
    np.testing.assert_array_equal(vals, 0.0)


def test_window_after_horizon_has_no_hits():
    cfg = _cfg(barrier=BarrierSpec.constant_strip(2.0), x0=1.0, record_hits_window=(3.5, 5.0))
    est = count_hits(cfg, 200)
    assert est.mean.point == 0.0 and est.p_positive.point == 0.0


def test_strip_hits_match_density_oracle():
    # expected BBM kills at the top of a constant strip over [0, t]
    w, x, rho, t = 1.5, 0.7, 1.0, 1.0
    cfg = SimConfig(ModelParams(0.3, t), x, BarrierSpec.constant_strip(w), dt=0.002, seed=3,
                    record_hits_window=(0.0, t), rho=rho)
    est = count_hits(cfg, 20_000)
    rate = lambda s: density.hitting_rate(density.StripQuery(0.0, s, x, 0.0, w, rho))
    ref = integrate.quad(rate, 1e-12, t, limit=200)[0]
    assert abs(est.mean.point - ref) <= 4 * est.mean.std_error


def test_killed_bm_survival_matches_series():
    t, x = 1.0, 0.5
    cfg = SimConfig(ModelParams(0.3, t), x, BarrierSpec.constant_strip(1.0), dt=0.01, seed=9,
                    rho=0.0, branch_rate=0.0)
    res = simulate_batch(cfg, 40_000)
    p = res.survived.mean()
    se = math.sqrt(p * (1 - p) / res.survived.size)
    n = np.arange(1, 200, 2)
    exact = (4 / math.pi * np.exp(-math.pi ** 2 * n ** 2 * t / 2) * np.sin(n * math.pi * x) / n).sum()
    assert abs(p - exact) <= 4 * se


def test_branching_clocks_are_exponential():
    cfg = _cfg(barrier=BarrierSpec.no_absorption(), x0=0.0, params=ModelParams(0.3, 7.0))
    out = simulate(cfg, 0, record_clocks=True)
    clocks = np.array([t for t, g in out.hit_records if g == "clock"])
    assert clocks.size > 200
    assert stats.kstest(clocks, "expon").pvalue > 1e-3


def test_population_cap_is_flagged():
    cfg = _cfg(barrier=BarrierSpec.no_absorption(), x0=0.0, params=ModelParams(0.3, 6.0), pop_cap=50)
    res = simulate_batch(cfg, 30)
    assert res.capped.mean() > 0.5
    assert not np.any(res.survived[res.capped])
    with pytest.raises(UnderpoweredError):
        estimate_survival(5.0, ModelParams(0.3, 8.0), 50, 0, pop_cap=20, rho=0.5)


def test_bridge_removes_discretisation_bias():
    cfg = lambda bridge: SimConfig(ModelParams(0.3, 1.0), 0.5, BarrierSpec.constant_strip(1.0), dt=0.05,
                                   seed=1, rho=0.0, branch_rate=0.0, bridge=bridge)
    on = simulate_batch(cfg(True), 20_000).survived.mean()
    off = simulate_batch(cfg(False), 20_000).survived.mean()
    assert off > on + 0.02


def test_cmd_pruning_matches_exhaustive():
    p = ModelParams(0.3, 3.0)
    cfg = SimConfig(p, 0.0, BarrierSpec.no_absorption(), dt=0.01, seed=4)
    full = simulate_batch(cfg, 80, track_cmd=True)
    pruned = sample_cmd(p, 80, 4, dt=0.01)
    np.testing.assert_allclose(pruned, full.cmd, atol=1e-12)


def test_cmd_and_survival_duality_pathwise():
    # L <= x exactly when the absorbed process from x survives, on shared draws
    p = ModelParams(0.3, 3.0)
    vals = sample_cmd(p, 200, 8, dt=0.01)
    for x in (1.0, 2.5, 4.0):
        surv = simulate_batch(SimConfig(p, x, BarrierSpec.origin_only(), dt=0.01, seed=8), 200).survived
        np.testing.assert_array_equal(surv, vals < x)


def test_config_violations():
    bad = SimConfig(ModelParams(0.3, 2.0), 5.0, BarrierSpec.constant_strip(2.0))
    assert any("strictly between" in m for m in bad.violations())
    with pytest.raises(ConfigError):
        bad.check()
    assert BarrierSpec("wall").violations()
    assert BarrierSpec(BarrierSpec.origin_only().kind, 2.0).violations()
    assert SimConfig(ModelParams(0.3, 2.0), 1.0, dt=0.0).violations()


def test_strip_occupancy_matches_density_oracle():
    w, x0, rho, t, n = 2.0, 1.0, math.sqrt(2), 4.0, 20_000
    cfg = SimConfig(ModelParams(0.3, t), x0, BarrierSpec.constant_strip(w), dt=0.005, seed=21, rho=rho)
    edges = np.linspace(0, w, 5)
    counts = np.zeros((n, 4))
    for i in range(n):
        out = simulate(cfg, i, record_cap=4096, record_leaves=True)
        counts[i] = np.histogram(out.final_positions, edges)[0]
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(n)
    for j in range(4):
        q = lambda y: density.strip_density_exact(density.StripQuery(0.0, t, x0, y, w, rho))
        ref = integrate.quad(q, max(edges[j], 1e-12), min(edges[j + 1], w - 1e-12))[0]
        assert abs(mean[j] - ref) <= 3 * se[j], (j, mean[j], ref, se[j])


def test_cmd_increases_with_drift_under_common_draws():
    a = sample_cmd(ModelParams(0.1, 3.0), 150, 6, dt=0.01)
    b = sample_cmd(ModelParams(0.3, 3.0), 150, 6, dt=0.01)
    assert np.all(b >= a - 1e-12)


def test_cmd_median_near_l_bar():
    from bbmcmd.curves import l_bar
    vals = sample_cmd(ModelParams(0.3, 8.0), 2000, 31)
    assert abs(np.median(vals) - l_bar(8.0, 0.3)) <= 3


def test_survival_limits():
    p = ModelParams(0.2, 10.0)
    hi = estimate_survival(0.2 * 10 + 2.36 * 10 ** (1 / 3) + 10, p, 500, 1)
    lo = estimate_survival(0.01, p, 500, 1)
    assert hi.point >= 0.98 and lo.point <= 0.02
    assert simulate(_cfg(x0=1e-12)).zeta <= 0.01
