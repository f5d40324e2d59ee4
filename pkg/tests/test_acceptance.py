"""The thirteen acceptance criteria, each at its stated tolerance and runtime budget."""
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from bbmcmd import cli, curves as cv, density as dn, experiments as ex
from bbmcmd.curves import C_CRIT, OMEGA, LOG_COEF, ModelParams
from bbmcmd.simulator import (BarrierSpec, SimConfig, estimate_survival, sample_cmd, simulate,
                              simulate_batch)

EPS_GRID = (1e-4, 1e-3, 1e-2, 0.1, 0.5)


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def finish(report, label, ok, detail, clock, budget):
    fast = clock.elapsed < budget
    status = "PASS" if ok and fast else "FAIL"
    report(f"[{status}] {label}: {detail}; {clock.elapsed:.1f}s (budget {budget:g}s)")
    assert ok, detail
    assert fast, f"{label} took {clock.elapsed:.1f}s > {budget}s"


def test_ac01_inversion_exactness(report):
    v = np.logspace(-6, 8, 10_000)
    with Clock() as clk:
        worst = {}
        scale = np.maximum(1.0, v)
        worst["F"] = float(np.max(np.abs(cv.f_eval(cv.f_inv(v)) - v) / scale))
        for eps in EPS_GRID:
            worst[f"F_eps({eps:g})"] = float(np.max(np.abs(cv.feps_eval(cv.feps_inv(v, eps), eps) - v) / scale))
        # G^{-1}(v) sits within e^{-2v/omega} of omega, so it is carried as log(omega - u)
        worst["G"] = float(np.max(np.abs(cv.g_eval_loggap(cv.g_inv_loggap(v)) - v) / scale))
    ok = max(worst.values()) <= 1e-10
    name = max(worst, key=worst.get)
    finish(report, "AC1 inversion exactness", ok, f"max scaled residual {worst[name]:.2e} ({name}) <= 1e-10",
           clk, 5)


def test_ac02_asymptotic_regimes(report):
    with Clock() as clk:
        small = np.logspace(-6, -2, 2000)
        r_small = np.abs(cv.f_inv(small) - (C_CRIT * np.cbrt(small) + 0.6 * small)) / small ** (5 / 3)
        big = np.logspace(2, 8, 2000)
        r_big = np.abs(cv.f_inv(big) - big - OMEGA * math.pi / 2) * big
    ok = r_small.max() <= 1.0 and np.all(r_big <= 2 * OMEGA ** 2)
    finish(report, "AC2 asymptotic regimes", ok,
           f"small-u ratio max {r_small.max():.3f} <= 1; large-u u*|gap| max {r_big.max():.4f} <= 2 omega^2 "
           f"= {2 * OMEGA ** 2:.4f}", clk, 1)


def test_ac03_log_correction_bounded(report):
    u = np.logspace(-6, 8, 4000)
    with Clock() as clk:
        sup_all, sup_top = 0.0, 0.0
        top = u >= u[-1] / 10
        for eps in (1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.3, 0.5):
            d = np.abs((cv.feps_inv(u, eps) - cv.f_inv(u)) / math.sqrt(eps) - LOG_COEF * np.maximum(np.log(u), 0))
            sup_all = max(sup_all, float(d.max()))
            sup_top = max(sup_top, float(d[top].max()))
    ok = sup_all <= 10 and sup_top <= 1.01 * sup_all
    finish(report, "AC3 log correction", ok,
           f"global sup {sup_all:.4f} <= 10; top-decade sup {sup_top:.4f}", clk, 5)


def _gauss_tau(curve, p, r, s, nodes=60, panels=8):
    # int_r^s curve(u)^-2 du in w = (t - u)^{1/3}, where the integrand is smooth
    t = p.horizon_t
    x, wts = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace((t - s) ** (1 / 3), (t - r) ** (1 / 3), panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    w = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    jac = np.repeat(0.5 * (b - a), nodes, axis=1).ravel() * np.tile(wts, panels)
    u = np.minimum(t - w ** 3, t)
    vals = np.asarray(curve(u, p)) ** -2.0 * 3 * w ** 2
    return float(np.sum(vals * jac))


def test_ac04_tau_identities(report):
    gen = np.random.default_rng(20240601)
    worst = 0.0
    with Clock() as clk:
        for _ in range(100):
            eps = float(gen.uniform(0.01, 0.5))
            t = float(np.exp(gen.uniform(0, math.log(1000))))
            r, s = np.sort(gen.uniform(0, t, 2))
            p = ModelParams(eps, t)
            for closed, curve in ((cv.tau_k, cv.k_curve), (cv.tau_h, cv.h_curve)):
                q = _gauss_tau(curve, p, r, s)
                worst = max(worst, abs(closed(r, s, p) - q) / max(1.0, abs(q)))
    finish(report, "AC4 tau identities", worst <= 1e-8,
           f"max deviation from Gauss-Legendre quadrature {worst:.2e} <= 1e-8", clk, 5)


def test_ac05_ode_heuristic(report):
    cells = [(e, t) for e in (0.05, 0.1, 0.3) for t in (10.0, 100.0, 1000.0) if e ** 1.5 * t <= 30]
    with Clock() as clk:
        errs = {c: ex.ode_heuristic_check(ModelParams(*c)).rel_error for c in cells}
    worst = max(errs.values())
    finish(report, "AC5 ODE heuristic", worst <= 1e-3,
           f"{len(cells)} cells with eps^1.5 t <= 30, max rel error {worst:.2e} <= 1e-3", clk, 10)


def test_ac06_density_oracle(report):
    with Clock() as clk:
        ck = 0.0
        for a, b, x, y, w in [(0.3, 0.7, 0.2, 0.9, 1.0), (0.05, 0.02, 1.1, 2.5, 3.0), (1.0, 2.0, 0.4, 0.1, 2.0),
                              (0.01, 0.5, 0.5, 0.5, 1.0)]:
            lhs, rhs = dn.chapman_kolmogorov_check(a, b, x, y, w)
            ck = max(ck, abs(lhs - rhs) / max(1.0, abs(rhs)))
        ratio_ok = True
        for s, x, y, w, rho in [(1.0, 0.3, 0.8, 1.0, 1.4), (4.0, 0.5, 1.3, 2.0, 0.0), (2.5, 1.1, 0.2, 1.5, 2.0),
                                (9.0, 0.2, 2.9, 3.0, 1.0)]:
            ratio_ok &= abs(dn.long_time_ratio(s, x, y, w, rho) - 1) <= dn.j_bound(s / w ** 2) + 1e-14
        bal = 0.0
        for x, w, t in [(0.3, 1.0, 0.5), (0.8, 2.0, 3.0), (0.5, 1.0, 1.0)]:
            bal = max(bal, abs(sum(dn.probability_balance(x, w, t)) - 1.0))
    ok = ck <= 1e-8 and ratio_ok and bal <= 1e-6
    finish(report, "AC6 density oracle", ok,
           f"CK {ck:.1e} <= 1e-8; single-mode ratio within J: {ratio_ok}; balance {bal:.1e} <= 1e-6", clk, 30)


def test_ac07_killed_bm_survival(report):
    n = np.arange(1, 401, 2)
    exact = float((4 / math.pi * np.exp(-math.pi ** 2 * n ** 2 / 2) * np.sin(n * math.pi / 2) / n).sum())

    def run(dt, bridge):
        cfg = SimConfig(ModelParams(0.3, 1.0), 0.5, BarrierSpec.constant_strip(1.0), dt=dt, seed=77,
                        rho=0.0, branch_rate=0.0, bridge=bridge)
        p = simulate_batch(cfg, 100_000).survived.mean()
        return p, math.sqrt(p * (1 - p) / 100_000)

    with Clock() as clk:
        p1, se1 = run(0.01, True)
        p2, se2 = run(0.001, True)
        e1, _ = run(0.01, False)
        e2, _ = run(0.001, False)
    z1, z2 = (p1 - exact) / se1, (p2 - exact) / se2
    ok = abs(z1) <= 3 and abs(z2) <= 3 and abs(e2 - exact) < abs(e1 - exact)
    finish(report, "AC7 killed BM survival", ok,
           f"exact {exact:.5f}; bridge dt=0.01 {p1:.5f} (z={z1:+.2f}), dt=0.001 {p2:.5f} (z={z2:+.2f}); "
           f"endpoint-only bias {e1 - exact:+.5f} -> {e2 - exact:+.5f}", clk, 60)


def test_ac08_branching_law(report):
    with Clock() as clk:
        cfg = SimConfig(ModelParams(0.3, 5.0), 0.0, BarrierSpec.no_absorption(), dt=0.05, seed=8)
        pop = simulate_batch(cfg, 10_000).leaves.astype(float)
        mean, se = pop.mean(), pop.std(ddof=1) / math.sqrt(pop.size)
        clocks = []
        for rep in range(5):
            out = simulate(cfg, rep, record_clocks=True)
            clocks += [t for t, g in out.hit_records if g == "clock"]
        p_ks = stats.kstest(clocks, "expon").pvalue
    z = (mean - math.exp(5)) / se
    ok = abs(z) <= 3 and p_ks > 1e-3
    finish(report, "AC8 branching law", ok,
           f"mean population {mean:.2f} vs e^5 {math.exp(5):.2f} (z={z:+.2f}); KS p={p_ks:.3f} on {len(clocks)} clocks",
           clk, 60)


def test_ac09_duality(report):
    p = ModelParams(0.3, 8.0)
    n = 10_000
    with Clock() as clk:
        vals = sample_cmd(p, n, seed=901)
        good = vals[~np.isnan(vals)]
        zs = []
        for x in (2.0, 4.0, 6.0):
            e = estimate_survival(x, p, n, seed=902)
            q = float(np.mean(good < x))
            se = math.sqrt(e.std_error ** 2 + q * (1 - q) / good.size)
            zs.append((e.point - q) / se)
    ok = all(abs(z) <= 3 for z in zs)
    finish(report, "AC9 duality", ok, "z at x=2,4,6: " + ", ".join(f"{z:+.2f}" for z in zs), clk, 300)


def test_ac10_phase_transition(report):
    reps = 2000
    with Clock() as clk:
        crit, _ = ex.phase_sweep(ex.SweepSpec((0.05,), time_values=(2.0, 4.0, 6.0, 8.0, 10.0), replicates=reps,
                                              seed=1001))
        late, _ = ex.phase_sweep(ex.SweepSpec((0.4,), time_values=(8.0, 9.0, 10.0, 11.0, 12.0), replicates=reps,
                                              seed=1002))
        mid, _ = ex.phase_sweep(ex.SweepSpec((0.1, 0.2, 0.3), time_values=(4.0, 8.0, 12.0), replicates=reps,
                                             seed=1003))
    dev = max(abs(r["median"] - r["c_t13"]) for r in crit)
    slope = ex.late_slope(late, 0.4, 8.0, 12.0)
    rows = crit + late + mid
    gaps = [r["gap"] for r in rows]
    usable = not any(r["underpowered"] for r in rows)
    ok = usable and dev <= 2 and abs(slope - 0.4) <= 0.5 * 0.4 and all(-5 <= g <= 5 for g in gaps)
    finish(report, "AC10 phase transition", ok,
           f"max |median - c t^1/3| at eps=0.05: {dev:.2f} <= 2; late slope at eps=0.4: {slope:.3f} "
           f"(within 50% of 0.4); gap range [{min(gaps):+.2f}, {max(gaps):+.2f}] over {len(rows)} cells",
           clk, 900)


def test_ac11_kesten(report):
    p = ModelParams(0.3, 20.0)
    with Clock() as clk:
        sub = estimate_survival(5.0, p, 10_000, seed=1101, rho=1.2)
        sup = estimate_survival(5.0, p, 10_000, seed=1102, rho=1.8)
    ok = sub.point >= 0.2 and sup.point <= 0.02
    finish(report, "AC11 Kesten dichotomy", ok,
           f"survival {sub.point:.4f} at rho=1.2 (>= 0.2), {sup.point:.4f} at rho=1.8 (<= 0.02)", clk, 300)


def test_ac12_fkpp_front(report):
    with Clock() as clk:
        res = ex.fkpp_front(ex.FrontTrackerConfig(rho=math.sqrt(2), horizon=80.0, n_outputs=80))
    sel = res.times >= 20 - 1e-9
    ratio = res.fronts[sel] / res.times[sel] ** (1 / 3) / C_CRIT
    ok = np.all(np.abs(ratio - 1) <= 0.25) and res.u_min >= -1e-12 and res.u_max <= 1 + 1e-12
    finish(report, "AC12 FKPP front", ok,
           f"front/(c t^1/3) in [{ratio.min():.3f}, {ratio.max():.3f}] on [20, 80]; u in "
           f"[{res.u_min:.1e}, {res.u_max:.6f}]", clk, 120)


def test_ac13_reproducibility(report, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    args = ["experiment", "sweep", "--epsilon-grid", "0.3", "--time-values", "2", "3", "--replicates", "300",
            "--seed", "13"]
    with Clock() as clk:
        codes = [cli.main(args + ["--out", str(tmp_path / "w1")]),
                 cli.main(args + ["--out", str(tmp_path / "w3"), "--workers", "3"]),
                 cli.main(["replay", str(tmp_path / "w1" / "experiment_sweep.manifest.json"),
                           "--out", str(tmp_path / "replay"), "--workers", "2"])]
        files = ["experiment_sweep.csv", "experiment_sweep.manifest.json"]
        same = all((tmp_path / d / f).read_bytes() == (tmp_path / "w1" / f).read_bytes()
                   for d in ("w3", "replay") for f in files)
    man = json.loads((tmp_path / "w1" / files[1]).read_text())
    ok = codes == [0, 0, 0] and same and "workers" not in man["config"]
    finish(report, "AC13 reproducibility", ok,
           f"reruns at 1 and 3 workers and a replay at 2 workers are byte-identical: {same}", clk, 60)
