"""Densities of Brownian motion and BBM killed at the edges of a strip.

The unit-strip kernel ``omega_s(x, y)`` is evaluated by its sine series for
scaled times above a crossover and by Gaussian images below it. Strip
densities for width ``K`` and drift ``-rho`` follow by scaling plus the
many-to-one/Girsanov factor ``exp((1 - rho^2/2) s + rho (x - y))``.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple
import math

import numpy as np

from . import curves

_N_IMAGES = 5


@dataclass(frozen=True)
class SeriesSettings:
    term_tol: float = 1e-17
    max_terms: int = 2000
    small_time_crossover: float = 0.2

    def __post_init__(self):
        if not self.term_tol > 0:
            raise ValueError("SeriesSettings.term_tol must be positive")
        if self.max_terms < 2:
            raise ValueError("SeriesSettings.max_terms must be >= 2")
        if not (0.0 < self.small_time_crossover <= 1.0):
            raise ValueError("SeriesSettings.small_time_crossover must lie in (0, 1]")


DEFAULT_SERIES = SeriesSettings()


@dataclass(frozen=True)
class StripQuery:
    """Start ``x`` at time ``r``, end ``y`` at time ``s`` in the strip ``(0, width)``."""

    r: float
    s: float
    x: float
    y: float
    width: float
    rho: float = 0.0

    def __post_init__(self):
        if not (0 <= self.r < self.s):
            raise ValueError("StripQuery needs 0 <= r < s")
        if not self.width > 0:
            raise ValueError("StripQuery.width must be positive")
        if not (0 < self.x < self.width):
            raise ValueError("StripQuery.x must lie strictly inside the strip")
        if not (0 <= self.y <= self.width):
            raise ValueError("StripQuery.y must lie in [0, width]")


class GreenBound(NamedTuple):
    lhs: float
    rhs: float
    divergent: bool


class ChangeOfMeasureCheck(NamedTuple):
    lhs: float
    std_error: float
    rhs: float
    kernel_time: float
    n_alive: int
    underpowered: bool


# ---------------------------------------------------------------------------
# unit-strip kernel

def _n_terms(s, settings):
    # tail sum_{n>N} 2 exp(-pi^2 n^2 s/2) n  is below term_tol once this holds
    a = math.pi ** 2 * s / 2
    n = 1
    while n < settings.max_terms and 2 * (n + 1) * math.exp(-a * (n + 1) ** 2) / max(1.0 - math.exp(-a), 1e-300) > settings.term_tol:
        n += 1
    return n


def _series(s, x, y, settings):
    n = np.arange(1, _n_terms(s, settings) + 1)
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)[..., None]
    terms = np.exp(-math.pi ** 2 * n ** 2 * s / 2) * np.sin(n * math.pi * x) * np.sin(n * math.pi * y)
    return 2.0 * terms.sum(axis=-1)


def _series_dy(s, x, y, settings):
    n = np.arange(1, _n_terms(s, settings) + 1)
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)[..., None]
    terms = (np.exp(-math.pi ** 2 * n ** 2 * s / 2) * n * math.pi
             * np.sin(n * math.pi * x) * np.cos(n * math.pi * y))
    return 2.0 * terms.sum(axis=-1)


def _images(s, x, y):
    k = np.arange(-_N_IMAGES, _N_IMAGES + 1)
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)[..., None]
    norm = 1.0 / math.sqrt(2 * math.pi * s)
    a = y - x + 2 * k
    b = y + x + 2 * k
    return norm * (np.exp(-a * a / (2 * s)) - np.exp(-b * b / (2 * s))).sum(axis=-1)


def _images_dy(s, x, y):
    k = np.arange(-_N_IMAGES, _N_IMAGES + 1)
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)[..., None]
    norm = 1.0 / math.sqrt(2 * math.pi * s)
    a = y - x + 2 * k
    b = y + x + 2 * k
    return norm * (-a / s * np.exp(-a * a / (2 * s)) + b / s * np.exp(-b * b / (2 * s))).sum(axis=-1)


def _scalar(v, *args):
    return float(v) if all(np.ndim(a) == 0 for a in args) else v


def omega_series(s, x, y, settings=DEFAULT_SERIES):
    """Transition density of Brownian motion killed at 0 and 1.

    ``2 sum_n exp(-pi^2 n^2 s/2) sin(n pi x) sin(n pi y)``; for
    ``s < settings.small_time_crossover`` the equivalent image sum is used.
    """
    if not s > 0:
        raise ValueError("omega_series needs s > 0")
    if s < settings.small_time_crossover:
        return _scalar(_images(s, x, y), x, y)
    return _scalar(_series(s, x, y, settings), x, y)


def omega_images(s, x, y):
    """Image-method evaluation of the same kernel (any ``s > 0``)."""
    if not s > 0:
        raise ValueError("omega_images needs s > 0")
    return _scalar(_images(s, x, y), x, y)


def omega_sine_sum(s, x, y, settings=DEFAULT_SERIES):
    """Sine-series evaluation regardless of the crossover."""
    if not s > 0:
        raise ValueError("omega_sine_sum needs s > 0")
    return _scalar(_series(s, x, y, settings), x, y)


def omega_dy(s, x, y, settings=DEFAULT_SERIES):
    """``d/dy omega_s(x, y)``: differentiated series above the crossover, images below."""
    if not s > 0:
        raise ValueError("omega_dy needs s > 0")
    if s < settings.small_time_crossover:
        return _scalar(_images_dy(s, x, y), x, y)
    return _scalar(_series_dy(s, x, y, settings), x, y)


def j_bound(t):
    """``J_t = sum_{n>=2} n^2 exp(-pi^2 (n^2 - 1) t / 2)``."""
    if not t > 0:
        raise ValueError("j_bound needs t > 0")
    total = 0.0
    n = 2
    while True:
        term = n * n * math.exp(-math.pi ** 2 * (n * n - 1) * t / 2)
        total += term
        if term < 1e-18 * total or n > 100000:
            return total
        n += 1


def j_threshold(grid=None):
    """Smallest grid time with ``J_t < 1/2``."""
    if grid is None:
        grid = np.round(np.arange(0.01, 2.0001, 0.01), 10)
    for t in grid:
        if j_bound(float(t)) < 0.5:
            return float(t)
    raise curves.NumericsError("J_t stays above 1/2 on the grid")


def single_mode(s, x, y):
    """Leading eigenmode ``2 exp(-pi^2 s/2) sin(pi x) sin(pi y)``."""
    return 2 * math.exp(-math.pi ** 2 * s / 2) * np.sin(math.pi * np.asarray(x)) * np.sin(math.pi * np.asarray(y))


# ---------------------------------------------------------------------------
# constant strips

def killed_bm_density(u, x, y, width, settings=DEFAULT_SERIES):
    """Density at time ``u`` of driftless BM from ``x`` killed at 0 and ``width``."""
    return omega_series(u / width ** 2, np.asarray(x) / width, np.asarray(y) / width, settings) / width


def strip_density_exact(q: StripQuery, settings=DEFAULT_SERIES):
    """Expected BBM density ``q*_{s-r}(x, y)`` in the strip with drift ``-rho``."""
    if not (0 < q.y < q.width):
        raise ValueError("strip_density_exact needs 0 < y < width")
    u = q.s - q.r
    v = killed_bm_density(u, q.x, q.y, q.width, settings)
    return math.exp((1 - q.rho ** 2 / 2) * u + q.rho * (q.x - q.y)) * v


def killed_bm_boundary_rates(u, x, width, settings=DEFAULT_SERIES):
    """Hitting-time densities ``(upper, lower)`` at time ``u`` for driftless BM.

    ``-1/2 d_y p`` at ``y = width`` and ``+1/2 d_y p`` at ``y = 0``.
    """
    if not u > 0:
        raise ValueError("rates need u > 0")
    s = u / width ** 2
    xs = x / width
    upper = -0.5 * omega_dy(s, xs, 1.0, settings) / width ** 2
    lower = 0.5 * omega_dy(s, xs, 0.0, settings) / width ** 2
    return upper, lower


def hitting_rate(q: StripQuery, settings=DEFAULT_SERIES, boundary="upper", branching=True):
    """Rate at time ``q.s`` of hits on a strip edge, started from ``q.x`` at ``q.r``.

    With ``branching`` this is the expected number of BBM particles (drift
    ``-rho``) absorbed per unit time; without it the first-passage density of
    a single drifted particle. ``q.y`` is ignored.
    """
    u = q.s - q.r
    upper, lower = killed_bm_boundary_rates(u, q.x, q.width, settings)
    growth = u if branching else 0.0
    if boundary == "upper":
        return math.exp(growth - q.rho ** 2 * u / 2 + q.rho * (q.x - q.width)) * upper
    if boundary == "lower":
        return math.exp(growth - q.rho ** 2 * u / 2 + q.rho * q.x) * lower
    raise ValueError("boundary must be 'upper' or 'lower'")


# ---------------------------------------------------------------------------
# quadrature

def adaptive_simpson(f: Callable[[float], float], a, b, abs_tol=1e-10, max_depth=50, panels=16):
    """Adaptive Simpson quadrature of a scalar function on ``[a, b]``.

    The interval starts as ``panels`` equal pieces so narrow peaks are not
    missed by the first five samples.
    """
    edges = np.linspace(a, b, panels + 1)
    stack = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        lo, hi = float(lo), float(hi)
        fa, fm, fb = f(lo), f(0.5 * (lo + hi)), f(hi)
        whole = (hi - lo) / 6 * (fa + 4 * fm + fb)
        stack.append((lo, hi, fa, fm, fb, whole, abs_tol / panels, 0))
    total = 0.0
    while stack:
        lo, hi, flo, fmid, fhi, est, tol, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) / 6 * (flo + 4 * flm + fmid)
        right = (hi - mid) / 6 * (fmid + 4 * frm + fhi)
        diff = left + right - est
        if depth >= max_depth or abs(diff) <= 15 * tol:
            total += left + right + diff / 15
        else:
            stack.append((lo, mid, flo, flm, fmid, left, tol / 2, depth + 1))
            stack.append((mid, hi, fmid, frm, fhi, right, tol / 2, depth + 1))
    return total


def probability_balance(x, width, horizon, settings=DEFAULT_SERIES, abs_tol=1e-10):
    """Absorbed mass through each edge by ``horizon`` plus the surviving mass.

    For driftless BM the three numbers sum to one.
    """
    def up(u):
        return killed_bm_boundary_rates(u, x, width, settings)[0] if u > 0 else 0.0

    def low(u):
        return killed_bm_boundary_rates(u, x, width, settings)[1] if u > 0 else 0.0

    hit_up = adaptive_simpson(up, 0.0, horizon, abs_tol)
    hit_low = adaptive_simpson(low, 0.0, horizon, abs_tol)
    surv = adaptive_simpson(lambda y: killed_bm_density(horizon, x, y, width, settings), 0.0, width, abs_tol)
    return hit_up, hit_low, surv


def chapman_kolmogorov_check(a, b, x, y, width, settings=DEFAULT_SERIES, abs_tol=1e-12):
    """``(int_0^K v_a(x, z) v_b(z, y) dz, v_{a+b}(x, y))`` for the killed-BM density ``v``."""
    if not (a > 0 and b > 0):
        raise ValueError("chapman_kolmogorov_check needs a, b > 0")
    lhs = adaptive_simpson(lambda z: float(killed_bm_density(a, x, z, width, settings)
                                           * killed_bm_density(b, z, y, width, settings)),
                           0.0, width, abs_tol)
    return lhs, float(killed_bm_density(a + b, x, y, width, settings))


def long_time_ratio(s, x, y, width, rho, settings=DEFAULT_SERIES):
    """``q*_s(x, y)`` over its leading-mode approximation.

    The relative error ``|ratio - 1|`` is at most ``J_{s/K^2}``.
    """
    exact = strip_density_exact(StripQuery(0.0, s, x, y, width, rho), settings)
    approx = (2.0 / width * math.exp((1 - rho ** 2 / 2 - math.pi ** 2 / (2 * width ** 2)) * s)
              * math.exp(rho * x) * math.sin(math.pi * x / width)
              * math.exp(-rho * y) * math.sin(math.pi * y / width))
    return exact / approx


def green_bound_check(x, y, width, rho, settings=DEFAULT_SERIES, abs_tol=1e-10):
    """``int_0^inf q*_s(x, y) ds`` against ``2 e^{rho(x-y)} x (K - y)/K``.

    The time integral is taken in ``w = sqrt(s)`` so the diagonal ``x = y``
    singularity is integrable, and cut off once the leading-mode envelope
    drops below 1e-16 of its peak.
    """
    if not (0 < x < width and 0 < y <= width):
        raise ValueError("green_bound_check needs 0 < x < K and 0 < y <= K")
    rhs = 2 * math.exp(rho * (x - y)) * x * (width - y) / width
    decay = -(1 - rho ** 2 / 2 - math.pi ** 2 / (2 * width ** 2))
    if decay <= 0:
        return GreenBound(math.inf, rhs, True)
    if y >= width:
        return GreenBound(0.0, rhs, False)
    growth = 1 - rho ** 2 / 2
    shift = rho * (x - y)

    def integrand(w):
        if w <= 0:
            return 0.0
        s = w * w
        v = killed_bm_density(s, x, y, width, settings)
        return 2 * w * math.exp(growth * s + shift) * v

    s_peak = width ** 2
    s_max = s_peak + math.log(1e16) / decay
    lhs = adaptive_simpson(integrand, 0.0, math.sqrt(s_max), abs_tol)
    return GreenBound(lhs, rhs, False)


# ---------------------------------------------------------------------------
# moving barriers

def _curve_funcs(kind, params):
    t = params.horizon_t
    eps = params.epsilon
    if kind == "K":
        val = lambda u: np.asarray(curves.l_star(t - u, eps))
        d1 = lambda u: -np.asarray(curves.curve_derivatives(t - u, eps)[0])
        d2 = lambda u: np.asarray(curves.curve_derivatives(t - u, eps)[1])
        tau = lambda r, s: curves.tau_k(r, s, params)
    elif kind == "H":
        val = lambda u: np.asarray(curves.l_exact(t - u, eps))
        d1 = lambda u: -np.asarray(curves.curve_derivatives(t - u, eps)[2])
        d2 = lambda u: np.asarray(curves.curve_derivatives(t - u, eps)[3])
        tau = lambda r, s: curves.tau_h(r, s, params)
    elif kind == "const":
        w = params.horizon_t
        val = lambda u: np.full(np.shape(u), w, dtype=float)
        d1 = lambda u: np.zeros(np.shape(u))
        d2 = lambda u: np.zeros(np.shape(u))
        tau = lambda r, s: (s - r) / w ** 2
    else:
        raise ValueError("curve kind must be 'K', 'H' or 'const'")
    return val, d1, d2, tau


def change_of_measure_check(kind, params, r, s, x, g, n_paths=100_000, dt=0.005,
                            seed=0, settings=DEFAULT_SERIES, min_alive=200):
    """Monte Carlo of ``E[phi_{r,s} g(B_s); survive]`` against the rescaled kernel.

    ``kind`` is ``'K'`` or ``'H'`` (curves with ``params.horizon_t``) or
    ``'const'`` (constant strip of width ``params.horizon_t``). Driftless paths
    are killed at 0 and at the curve, with a Brownian-bridge crossing test per
    step against the chord of the curve. The right-hand side is
    ``(1/f(s)) int g(y) omega_{tau(r,s)}(x/f(r), y/f(s)) dy``.
    """
    val, d1, d2, tau_fn = _curve_funcs(kind, params)
    if kind != "const" and not (0 <= r < s < params.horizon_t):
        raise ValueError("need 0 <= r < s < horizon")
    n_steps = max(1, int(math.ceil((s - r) / dt - 1e-9)))
    times = np.linspace(r, s, n_steps + 1)
    h = (s - r) / n_steps
    fv, f1, f2 = val(times), d1(times), d2(times)
    if not (0 < x < fv[0]):
        raise ValueError("x must lie inside the strip at time r")
    rng = np.random.default_rng(seed)
    b = np.full(n_paths, float(x))
    alive = np.ones(n_paths, dtype=bool)
    coeff = f2 / (2 * fv)
    integral = np.zeros(n_paths)
    prev = coeff[0] * b * b
    for k in range(n_steps):
        b_new = b + math.sqrt(h) * rng.standard_normal(n_paths)
        u_low = rng.random(n_paths)
        u_up = rng.random(n_paths)
        d0, d1_ = fv[k] - b, fv[k + 1] - b_new
        with np.errstate(over="ignore"):
            p_low = np.where((b > 0) & (b_new > 0), np.exp(-2 * b * b_new / h), 1.0)
            p_up = np.where((d0 > 0) & (d1_ > 0), np.exp(-2 * d0 * d1_ / h), 1.0)
        alive &= (u_low >= p_low) & (u_up >= p_up)
        cur = coeff[k + 1] * b_new * b_new
        integral += 0.5 * h * (prev + cur)
        prev = cur
        b = b_new
    phi = math.sqrt(fv[0] / fv[-1]) * np.exp(
        f1[-1] * b * b / (2 * fv[-1]) - f1[0] * x * x / (2 * fv[0]) - integral)
    sample = np.where(alive, phi * g(np.clip(b, 0.0, fv[-1])), 0.0)
    lhs = float(sample.mean())
    se = float(sample.std(ddof=1) / math.sqrt(n_paths))
    kt = float(tau_fn(r, s))
    fr, fs = float(fv[0]), float(fv[-1])
    rhs = adaptive_simpson(
        lambda y: float(g(y)) * omega_series(kt, x / fr, y / fs, settings), 0.0, fs, 1e-10) / fs
    n_alive = int(alive.sum())
    return ChangeOfMeasureCheck(lhs, se, rhs, kt, n_alive, n_alive < min_alive)


# ---------------------------------------------------------------------------
# envelope shapes (implied constants unknown; ratio tests only)

def density_envelope_k(r, s, x, y, params, settings=DEFAULT_SERIES):
    """Shape ``(K(r)K(s))^{-1/2} e^{rho(x-y) - sqrt2 eps (s-r)} omega_tau(x/K(r), y/K(s))``."""
    t = params.horizon_t
    kr, ks = curves.l_star(np.array([t - r, t - s]), params.epsilon)
    kt = curves.tau_k(r, s, params)
    return (math.exp(params.rho * (x - y) - curves.SQRT2 * params.epsilon * (s - r))
            * omega_series(kt, x / kr, y / ks, settings) / math.sqrt(kr * ks))


def density_envelope_k_single_mode(r, s, x, y, params):
    """Shape ``(K(r)K(s))^{-1/2} e^{rho(x-y) - sqrt2 (K(r)-K(s))} sin(pi x/K(r)) sin(pi y/K(s))``."""
    t = params.horizon_t
    kr, ks = curves.l_star(np.array([t - r, t - s]), params.epsilon)
    return (math.exp(params.rho * (x - y) - curves.SQRT2 * (kr - ks))
            * math.sin(math.pi * x / kr) * math.sin(math.pi * y / ks) / math.sqrt(kr * ks))
