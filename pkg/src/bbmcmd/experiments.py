"""Desk-scale numerical studies built on the curves and the simulator.

Each study returns plain rows (lists of dicts) plus summary flags, so the CLI
can write them as CSV without knowing anything about the study.
"""
from dataclasses import asdict, dataclass, field
import math
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import _accel
from .curves import (C_CRIT, OMEGA, SQRT2, ModelParams, NumericsError, f_inv, g_inv,
                     l_bar, l_star)
from .rng import derive_seed
from .simulator import BarrierSpec, SimConfig, estimate_survival, sample_cmd, simulate_batch

TIME_RULES = ("eps^-3/2", "eps^-1", "absolute")
ODE_COEF = math.pi ** 2 / (2.0 * SQRT2)


class StabilityError(NumericsError):
    """The explicit front solver left the invariant region [0, 1]."""


# ---------------------------------------------------------------------------
# backward ODE for the barrier

def _ode_k0(eps, t, delta0, rtol, atol):
    if t == 0:
        return delta0

    def rhs(k, y):
        return [k * k / (eps * k * k + ODE_COEF)]

    def reached(k, y):
        return y[0] - t
    reached.terminal = True
    reached.direction = 1

    k_hi = delta0 + eps * t + 3.0 * C_CRIT * t ** (1.0 / 3.0) + 10.0
    sol = solve_ivp(rhs, (delta0, k_hi), [0.0], method="DOP853", rtol=rtol, atol=atol,
                    events=reached)
    if sol.status != 1 or not len(sol.t_events[0]):
        raise NumericsError(f"backward ODE did not reach t={t} (status {sol.status})")
    return float(sol.t_events[0][0])


@dataclass(frozen=True)
class OdeCheck:
    k0: float
    l_star: float
    rel_error: float
    k0_by_delta: tuple


def ode_heuristic_check(params, rtol=1e-11, atol=1e-13, deltas=(1e-3, 1e-4)):
    """Integrate ``dt/dK = K^2 / (eps K^2 + pi^2/(2 sqrt 2))`` from ``K = delta``.

    The time to climb from ``delta`` to ``K`` is the time-to-go, so ``K(0)`` is
    where it reaches the horizon. The ``delta -> 0`` limit is taken by
    Richardson extrapolation (the offset is ``O(delta^3)``).
    """
    params.check()
    eps, t = params.epsilon, params.horizon_t
    d1, d2 = deltas
    k1 = _ode_k0(eps, t, d1, rtol, atol)
    k2 = _ode_k0(eps, t, d2, rtol, atol)
    # at t = 0 the answer is delta itself, whose limit is 0
    k0 = 0.0 if t == 0 else (k2 * d1 ** 3 - k1 * d2 ** 3) / (d1 ** 3 - d2 ** 3)
    ref = float(l_star(t, eps))
    rel = abs(k0 - ref) / ref if ref > 0 else abs(k0 - ref)
    return OdeCheck(k0, ref, rel, (k1, k2))


# ---------------------------------------------------------------------------
# sweeps over (eps, t)

@dataclass(frozen=True)
class SweepSpec:
    """Grid of (eps, t) cells; ``time_values`` are multipliers of the chosen rule.

    ``c1`` bounds ``eps^2 t`` in every cell, ``band`` is the tightness band
    for the gap and the IQR, ``dual`` adds the survival-scan median.
    """

    epsilon_grid: tuple
    time_rule: str = "absolute"
    time_values: tuple = (3.0, 8.0)
    replicates: int = 2000
    seed: int = 0
    dt: float = 0.005
    c1: float = 4.0
    band: float = 5.0
    dual: bool = False
    pop_cap: int = 2_000_000

    def times(self, eps):
        scale = {"eps^-3/2": eps ** -1.5, "eps^-1": 1.0 / eps, "absolute": 1.0}[self.time_rule]
        return [float(v) * scale for v in self.time_values]

    def cells(self):
        return [(float(e), t) for e in self.epsilon_grid for t in self.times(float(e))]

    def violations(self):
        out = []
        if self.time_rule not in TIME_RULES:
            out.append(f"SweepSpec.time_rule={self.time_rule!r} must be one of {', '.join(TIME_RULES)}")
            return out
        if not self.epsilon_grid:
            out.append("SweepSpec.epsilon_grid is empty")
        for e in self.epsilon_grid:
            out += [f"SweepSpec: {m}" for m in ModelParams(float(e)).violations()]
        if not self.time_values:
            out.append("SweepSpec.time_values is empty")
        if any(not (float(v) > 0) for v in self.time_values):
            out.append("SweepSpec.time_values must be positive")
        if not out:
            for e, t in self.cells():
                if e * e * t > self.c1:
                    out.append(f"SweepSpec: cell (eps={e:g}, t={t:g}) has eps^2 t = {e * e * t:.4g} "
                               f"> C1 = {self.c1:g}; times must satisfy 0 <= t <= C1 eps^-2")
        if not (isinstance(self.replicates, (int, np.integer)) and self.replicates >= 1):
            out.append("SweepSpec.replicates must be an integer >= 1")
        if not (self.dt > 0):
            out.append("SweepSpec.dt must be > 0")
        if not (self.c1 > 0):
            out.append("SweepSpec.c1 must be > 0")
        if not (0 <= int(self.seed) < 2 ** 64):
            out.append("SweepSpec.seed must lie in [0, 2^64)")
        return out

    def check(self):
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))
        return self

    def to_dict(self):
        d = asdict(self)
        d["epsilon_grid"] = list(self.epsilon_grid)
        d["time_values"] = list(self.time_values)
        return d


def _median_se(values, centre):
    """Asymptotic SE of a sample median from a local density estimate."""
    n = values.size
    h = 1.06 * values.std() * n ** -0.2
    if not (h > 0):
        return 0.0
    f = np.mean(np.abs(values - centre) < h) / (2 * h)
    return float(1.0 / (2.0 * f * math.sqrt(n))) if f > 0 else math.inf


def dual_median(params, n, seed, dt=0.005, centre=None, pop_cap=2_000_000):
    """Median of the maximal displacement from survival probabilities on an x-grid.

    Survival from ``x`` is the event ``{L < x}``; with common seeds across
    ``x`` the scan is an empirical CDF, inverted at 1/2 by linear interpolation
    on a coarse then a fine grid. Returns ``(median, se)``.
    """
    t = params.horizon_t
    if centre is None:
        centre = float(l_bar(t, params.epsilon))

    def surv(xs):
        out = []
        for x in xs:
            if x <= 0:
                out.append(0.0)
                continue
            cfg = SimConfig(params, float(x), BarrierSpec.origin_only(), dt, pop_cap, seed)
            r = simulate_batch(cfg, n, stop_on_survival=True)
            if r.capped.mean() > 0.01:
                raise NumericsError("survival scan hit the population cap")
            out.append(float(r.survived[~r.capped].mean()))
        return np.array(out)

    lo, hi = centre - 4.0, centre + 4.0
    while True:
        xs = np.linspace(lo, hi, 9)
        ps = surv(xs)
        if ps[0] <= 0.5 <= ps[-1]:
            break
        if ps[0] > 0.5:
            lo -= 8.0
        if ps[-1] < 0.5:
            hi += 8.0
    j = int(np.searchsorted(ps, 0.5))
    a, b = xs[max(j - 1, 0)], xs[min(j, 8)]
    fx = np.linspace(a, b, 9)
    fp = surv(fx)
    k = int(np.searchsorted(fp, 0.5))
    k = min(max(k, 1), 8)
    x0, x1, p0, p1 = fx[k - 1], fx[k], fp[k - 1], fp[k]
    med = x0 if p1 == p0 else x0 + (0.5 - p0) * (x1 - x0) / (p1 - p0)
    slope = (ps[min(j + 1, 8)] - ps[max(j - 2, 0)]) / (xs[min(j + 1, 8)] - xs[max(j - 2, 0)])
    se = 0.5 / math.sqrt(n) / slope if slope > 0 else math.inf
    return float(med), float(se)


def phase_sweep(spec, workers=1):
    """Median and IQR of the maximal displacement minus ``l_bar`` on every cell.

    Returns ``(rows, summary)``; ``summary['within_band']`` is the tightness proxy
    (``|gap| <= band`` and ``IQR <= band`` in every usable cell).
    """
    spec.check()
    rows = []
    for i, (eps, t) in enumerate(spec.cells()):
        p = ModelParams(eps, t)
        cell_seed = derive_seed(spec.seed, i)
        vals = sample_cmd(p, spec.replicates, cell_seed, spec.dt, spec.pop_cap, workers=workers)
        capped = int(np.isnan(vals).sum())
        good = vals[~np.isnan(vals)]
        lb = float(l_bar(t, eps))
        row = {"epsilon": eps, "t": t, "l_star": float(l_star(t, eps)), "l_bar": lb,
               "c_t13": C_CRIT * t ** (1.0 / 3.0), "n": spec.replicates, "n_capped": capped,
               "underpowered": capped > 0.01 * spec.replicates or good.size < 2}
        if row["underpowered"]:
            row.update(median=math.nan, median_se=math.nan, q25=math.nan, q75=math.nan,
                       iqr=math.nan, gap=math.nan)
        else:
            q25, med, q75 = np.quantile(good, [0.25, 0.5, 0.75])
            row.update(median=float(med), median_se=_median_se(good, med), q25=float(q25),
                       q75=float(q75), iqr=float(q75 - q25), gap=float(med - lb))
        if spec.dual and not row["underpowered"]:
            dm, dse = dual_median(p, spec.replicates, derive_seed(spec.seed, i, 1), spec.dt,
                                  centre=lb, pop_cap=spec.pop_cap)
            row.update(dual_median=dm, dual_se=dse)
        rows.append(row)
    usable = [r for r in rows if not r["underpowered"]]
    max_gap = max((abs(r["gap"]) for r in usable), default=math.nan)
    max_iqr = max((r["iqr"] for r in usable), default=math.nan)
    summary = {"cells": len(rows), "underpowered_cells": len(rows) - len(usable),
               "max_abs_gap": max_gap, "max_iqr": max_iqr,
               "within_band": bool(usable) and max_gap <= spec.band and max_iqr <= spec.band}
    return rows, summary


def late_slope(rows, epsilon, t_lo, t_hi):
    """Least-squares slope of the median against t over cells in ``[t_lo, t_hi]``."""
    pts = [(r["t"], r["median"]) for r in rows
           if r["epsilon"] == epsilon and t_lo <= r["t"] <= t_hi and not r["underpowered"]]
    if len(pts) < 2:
        raise ValueError("need at least two usable cells for a slope")
    t, m = np.array(pts).T
    return float(np.polyfit(t, m, 1)[0])


def survival_threshold_study(params, offsets, n, seed, dt=0.005, pop_cap=2_000_000):
    """Survival probability from ``l_bar(t) + a`` for each offset ``a`` (common seeds).

    Returns ``(rows, summary)`` with the offset window in which the probability
    climbs from below 0.25 to above 0.75.
    """
    params.check()
    offs = sorted(float(a) for a in offsets)
    if not offs or offs[0] >= 0 or offs[-1] <= 0:
        raise ValueError("offsets must straddle 0")
    lb = float(l_bar(params.horizon_t, params.epsilon))
    rows = []
    for a in offs:
        e = estimate_survival(lb + a, params, n, seed, dt, pop_cap)
        rows.append({"offset": a, "x": lb + a, "survival": e.point, "std_error": e.std_error,
                     "ci_low": e.ci_low, "ci_high": e.ci_high, "n": e.n_replicates})
    ps = [r["survival"] for r in rows]
    monotone = all(b >= a for a, b in zip(ps, ps[1:]))
    below = [r["offset"] for r in rows if r["survival"] < 0.25]
    above = [r["offset"] for r in rows if r["survival"] > 0.75]
    crosses = bool(below and above)
    lo = max(below) if below else math.nan
    hi = min(above) if above else math.nan
    summary = {"l_bar": lb, "monotone": monotone, "crosses": crosses,
               "window_low": lo, "window_high": hi,
               "window_width": (hi - lo) if crosses else math.nan}
    return rows, summary


# ---------------------------------------------------------------------------
# reaction-diffusion front

@dataclass(frozen=True)
class FrontTrackerConfig:
    """Explicit scheme for ``u = P_x(zeta <= t)``.

    ``u_t = u_xx/2 - rho u_x - u(1 - u)`` on ``[0, length]`` with ``u(0, t) = 1``,
    ``u(length, t) = 0`` and ``u(x, 0) = 0``, solved for ``p = 1 - u``. ``length=None`` picks
    ``4 (max(eps, 0) t_end + c t_end^{1/3})``; ``dt=None`` picks 90% of the
    stability limit ``1 / (1/dx^2 + rho/dx + 1)``.
    """

    dx: float = 0.0125
    length: Optional[float] = None
    dt: Optional[float] = None
    rho: float = SQRT2
    level: float = 0.5
    horizon: float = 80.0
    n_outputs: int = 80

    def stable_dt(self):
        return 1.0 / (1.0 / self.dx ** 2 + self.rho / self.dx + 1.0)

    def resolved(self):
        length = self.length
        if length is None:
            eps = max(self.rho - SQRT2, 0.0)
            length = max(10.0, 4.0 * (eps * self.horizon + C_CRIT * self.horizon ** (1.0 / 3.0)))
        dt = self.dt if self.dt is not None else 0.9 * self.stable_dt()
        return length, dt

    def violations(self):
        out = []
        if not (self.dx > 0):
            out.append("FrontTrackerConfig.dx must be > 0")
            return out
        if not (self.rho >= 0):
            out.append("FrontTrackerConfig.rho must be >= 0 (upwinding assumes rightward transport)")
        if not (0 < self.level < 1):
            out.append("FrontTrackerConfig.level must lie in (0, 1)")
        if not (self.horizon > 0):
            out.append("FrontTrackerConfig.horizon must be > 0")
        if not (isinstance(self.n_outputs, (int, np.integer)) and self.n_outputs >= 1):
            out.append("FrontTrackerConfig.n_outputs must be an integer >= 1")
        if self.length is not None and not (self.length > 4 * self.dx):
            out.append("FrontTrackerConfig.length must exceed a few grid cells")
        if self.dt is not None and not (0 < self.dt <= self.stable_dt()):
            out.append(f"FrontTrackerConfig.dt={self.dt!r} breaks the stability bound "
                       f"dt (1/dx^2 + rho/dx + 1) <= 1 (max {self.stable_dt():.6g})")
        return out

    def check(self):
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))
        return self

    def to_dict(self):
        return asdict(self)


# The scheme runs on the survival probability p = 1 - u: near the origin p is
# tiny and drives the front, and 1 - p would round it away.

@_accel.jit
def _fkpp_steps_jit(p, work, n, dt, dx, rho):
    a = 0.5 * dt / (dx * dx)
    b = rho * dt / dx
    m = p.shape[0]
    for _ in range(n):
        work[0] = 0.0
        work[m - 1] = 1.0
        for i in range(1, m - 1):
            pi = p[i]
            work[i] = pi + a * (p[i + 1] - 2.0 * pi + p[i - 1]) - b * (pi - p[i - 1]) + dt * pi * (1.0 - pi)
        for i in range(m):
            p[i] = work[i]


def _fkpp_steps_numpy(p, work, n, dt, dx, rho):
    a = 0.5 * dt / (dx * dx)
    b = rho * dt / dx
    for _ in range(n):
        pi = p[1:-1]
        work[1:-1] = pi + a * (p[2:] - 2.0 * pi + p[:-2]) - b * (pi - p[:-2]) + dt * pi * (1.0 - pi)
        work[0] = 0.0
        work[-1] = 1.0
        p[:] = work


def front_position(x, u, level=0.5):
    """First crossing of ``level`` by a decreasing profile, linearly interpolated."""
    below = np.nonzero(u < level)[0]
    if below.size == 0:
        return float(x[-1])
    j = int(below[0])
    if j == 0:
        return float(x[0])
    u0, u1 = u[j - 1], u[j]
    return float(x[j - 1] + (u0 - level) * (x[j] - x[j - 1]) / (u0 - u1))


@dataclass
class FrontResult:
    times: np.ndarray
    fronts: np.ndarray
    u_min: float
    u_max: float
    monotone_in_x: bool
    nondecreasing: bool
    config: dict = field(default_factory=dict)


def fkpp_front(config, backend=None):
    """Front position of ``P_x(zeta <= t)`` at ``n_outputs`` equally spaced times."""
    config.check()
    length, dt_max = config.resolved()
    m = int(round(length / config.dx)) + 1
    x = np.arange(m) * config.dx
    n_steps = int(math.ceil(config.horizon / dt_max))
    per = int(math.ceil(n_steps / config.n_outputs))
    n_steps = per * config.n_outputs
    dt = config.horizon / n_steps
    p = np.ones(m)
    p[0] = 0.0
    work = np.empty(m)
    name = backend or _accel.backend()
    step = _fkpp_steps_jit if name == "numba" else _fkpp_steps_numpy
    times, fronts = [], []
    u_min, u_max, mono = 0.0, 1.0, True
    for k in range(1, config.n_outputs + 1):
        step(p, work, per, dt, config.dx, config.rho)
        u = 1.0 - p
        lo, hi = float(u.min()), float(u.max())
        if lo < -1e-6 or hi > 1 + 1e-6 or not np.all(np.isfinite(u)):
            raise StabilityError(f"front solver left [0, 1] at t={k * per * dt:g}: min {lo:g}, max {hi:g}")
        u_min, u_max = min(u_min, lo), max(u_max, hi)
        mono = mono and bool(np.all(np.diff(u) <= 1e-12))
        times.append(k * per * dt)
        fronts.append(front_position(x, u, config.level))
    fronts = np.array(fronts)
    cfg = config.to_dict()
    cfg.update(resolved_length=length, resolved_dt=dt, grid_points=m)
    return FrontResult(np.array(times), fronts, u_min, u_max, mono,
                       bool(np.all(np.diff(fronts) >= -1e-12)), cfg)


# ---------------------------------------------------------------------------
# drift slightly below critical

def supercritical_limit_check(eps_abs_grid, scaled_times=(0.5, 1.0, 2.0, 5.0, 50.0),
                              small_scaled_time=1e-4):
    """Compare ``|eps|^{-1/2} G^{-1}(|eps|^{3/2} t)`` with its large-t limit.

    One row per ``(|eps|, |eps|^{3/2} t)``: the relative gap to
    ``omega |eps|^{-1/2}``, the error of the identity
    ``omega |eps|^{-1/2} = pi / sqrt(2 sqrt 2 |eps|)``, and the relative
    difference between the G and F branches at ``small_scaled_time``.
    """
    v = small_scaled_time
    gsmall, fsmall = float(g_inv(v)), float(f_inv(v))
    rows = []
    for e in eps_abs_grid:
        e = abs(float(e))
        if not (0 < e < 1):
            raise ValueError("|eps| must lie in (0, 1)")
        limit = OMEGA / math.sqrt(e)
        ident = math.pi / math.sqrt(2 * SQRT2 * e)
        for s in scaled_times:
            val = float(g_inv(float(s))) / math.sqrt(e)
            rows.append({"eps_abs": e, "scaled_time": float(s), "t": float(s) / e ** 1.5,
                         "value": val, "limit": limit, "rel_gap": abs(val - limit) / limit,
                         "identity_rel_error": abs(limit - ident) / ident,
                         "small_t_rel_diff": abs(gsmall - fsmall) / fsmall})
    return rows
