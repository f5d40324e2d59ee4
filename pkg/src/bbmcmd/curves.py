"""Barrier curves for slightly subcritical branching Brownian motion.

The functions here are exact scalar/array evaluations of

* ``F(u) = u - omega * arctan(u / omega)`` and its inverse,
* the perturbed ``F_eps`` (extra ``log(u^2/omega^2 + 1)`` term) and its inverse
  on the branch right of its stationary point,
* ``G(u) = omega * artanh(u / omega) - u`` (drift slightly below critical),
* the curves ``L*``, ``L-bar`` and ``L`` built from them, the time-reversed
  barriers ``K`` and ``H``, their derivatives and the closed-form intrinsic
  clocks ``tau^K``, ``tau^H``.

All inverses use a vectorised bracketed Newton iteration with bisection
fallback, so they accept numpy arrays as well as floats.
"""
from dataclasses import dataclass
import math

import numpy as np

OMEGA = 2.0 ** -0.75 * math.pi
C_CRIT = (3.0 * math.pi ** 2) ** (1.0 / 3.0) / math.sqrt(2.0)
LOG_COEF = 3.0 / (2.0 * math.sqrt(2.0))
SQRT2 = math.sqrt(2.0)


class NumericsError(RuntimeError):
    """A root finder or integrator failed to converge."""


@dataclass(frozen=True)
class ModelParams:
    """Drift offset ``epsilon`` (drift is ``-(sqrt(2) + epsilon)``) and horizon."""

    epsilon: float
    horizon_t: float = 0.0

    @property
    def rho(self):
        return SQRT2 + self.epsilon

    def violations(self, allow_negative=False):
        out = []
        eps = self.epsilon
        if not math.isfinite(eps):
            out.append("ModelParams.epsilon must be finite")
        elif allow_negative:
            if not (-1.0 < eps < 1.0) or eps == 0.0:
                out.append(f"ModelParams.epsilon={eps!r} must lie in (-1, 0) or (0, 1)")
        elif not (0.0 < eps < 1.0):
            out.append(f"ModelParams.epsilon={eps!r} must lie in (0, 1)")
        if not (self.horizon_t >= 0.0) or not math.isfinite(self.horizon_t):
            out.append(f"ModelParams.horizon_t={self.horizon_t!r} must be a finite nonnegative time")
        return out

    def check(self, allow_negative=False):
        bad = self.violations(allow_negative)
        if bad:
            raise ValueError("; ".join(bad))
        return self


@dataclass(frozen=True)
class UniversalConstants:
    omega: float = OMEGA
    c: float = C_CRIT


@dataclass(frozen=True)
class RootFindSettings:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-12
    max_iterations: int = 200

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("RootFindSettings tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("RootFindSettings.max_iterations must be >= 1")


DEFAULT_SETTINGS = RootFindSettings()


def _as_array(x, name):
    a = np.asarray(x, dtype=float)
    if np.any(np.isnan(a)):
        raise ValueError(f"{name} contains NaN")
    return a


def _out(a, like):
    return float(a) if np.ndim(like) == 0 else a


def _x_minus_atan(x):
    # series below 0.2 avoids cancellation in x - arctan(x)
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.2
    xs = np.where(small, x, 0.0)
    x2 = xs * xs
    series = np.zeros_like(xs)
    term = xs * x2
    for k in range(1, 14):
        series = series + (term / (2 * k + 1) if k % 2 else -term / (2 * k + 1))
        term = term * x2
    return np.where(small, series, x - np.arctan(np.where(small, 1.0, x)))


def _atanh_minus_x(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.2
    xs = np.where(small, x, 0.0)
    x2 = xs * xs
    series = np.zeros_like(xs)
    term = xs * x2
    for k in range(1, 14):
        series = series + term / (2 * k + 1)
        term = term * x2
    return np.where(small, series, np.arctanh(np.where(small, 0.0, x)) - x)


# ---------------------------------------------------------------------------
# root finding

def bracketed_newton(func, deriv, target, lo, hi, guess=None, settings=DEFAULT_SETTINGS):
    """Solve ``func(u) = target`` elementwise for increasing ``func`` on [lo, hi].

    Newton steps are taken when they stay inside the current bracket,
    bisection otherwise. ``func(lo) <= target <= func(hi)`` is assumed.
    """
    target = np.asarray(target, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    u = 0.5 * (lo + hi) if guess is None else np.clip(np.asarray(guess, dtype=float), lo, hi)
    active = np.ones(target.shape, dtype=bool)
    for _ in range(settings.max_iterations):
        idx = np.nonzero(active)
        if idx[0].size == 0:
            return u
        ua = u[idx]
        ra = func(ua, idx) - target[idx]
        la, ha = lo[idx], hi[idx]
        la = np.where(ra < 0, ua, la)
        ha = np.where(ra > 0, ua, ha)
        da = deriv(ua, idx)
        with np.errstate(divide="ignore", invalid="ignore"):
            un = ua - ra / da
        bad = ~np.isfinite(un) | (un <= la) | (un >= ha)
        un = np.where(bad, 0.5 * (la + ha), un)
        step = np.abs(un - ua)
        tol = settings.abs_tol + settings.rel_tol * np.abs(un)
        # tiny Newton steps only count near a root; steep regions give tiny steps too
        near = np.abs(ra) <= 1e-6 * np.maximum(1.0, np.abs(target[idx]))
        done = (ra == 0) | (ha - la <= tol) | (~bad & (step <= tol) & near)
        u[idx] = np.where(ra == 0, ua, un)
        lo[idx], hi[idx] = la, ha
        sub = active[idx]
        sub[done] = False
        active[idx] = sub
    if np.any(active):
        raise NumericsError("bracketed Newton did not converge")
    return u


# ---------------------------------------------------------------------------
# F and its inverse

def f_eval(u):
    """``F(u) = u - omega*arctan(u/omega)`` for ``u >= 0``."""
    a = _as_array(u, "u")
    if np.any(a < 0):
        raise ValueError("f_eval requires u >= 0")
    return _out(OMEGA * _x_minus_atan(a / OMEGA), u)


def f_prime(u):
    a = np.asarray(u, dtype=float)
    return _out(a * a / (a * a + OMEGA ** 2), u)


def _f_inv_guess(v):
    small = C_CRIT * np.cbrt(v) + 0.6 * v
    big = v + OMEGA * math.pi / 2
    big = big - OMEGA ** 2 / big
    return np.where(v < 1.0, small, big)


def f_inv(v, settings=DEFAULT_SETTINGS):
    """Inverse of ``F`` on ``[0, inf)``."""
    a = _as_array(v, "v")
    if np.any(a < 0):
        raise ValueError("f_inv requires v >= 0")
    flat = np.atleast_1d(a).ravel()
    res = np.zeros_like(flat)
    pos = flat > 0
    if np.any(pos):
        t = flat[pos]
        res[pos] = bracketed_newton(
            lambda x, i: OMEGA * _x_minus_atan(x / OMEGA),
            lambda x, i: x * x / (x * x + OMEGA ** 2),
            t, t, t + OMEGA * math.pi / 2 + 1.0, _f_inv_guess(t), settings)
    return _out(res.reshape(np.shape(a)), v)


# ---------------------------------------------------------------------------
# F_eps and its inverse

def _eps_of(params):
    eps = params.epsilon if isinstance(params, ModelParams) else float(params)
    if not (0.0 < eps < 1.0):
        raise ValueError(f"epsilon={eps!r} must lie in (0, 1)")
    return eps


def stationary_point(params):
    """Minimiser of ``F_eps``: ``(3/(2 sqrt 2)) eps^{1/2}``."""
    return LOG_COEF * math.sqrt(_eps_of(params))


def _feps(u, eps):
    x = u / OMEGA
    return OMEGA * _x_minus_atan(x) - 0.5 * LOG_COEF * math.sqrt(eps) * np.log1p(x * x)


def _feps_prime(u, eps):
    return (u * u - LOG_COEF * math.sqrt(eps) * u) / (OMEGA ** 2 + u * u)


def feps_eval(u, params):
    a = _as_array(u, "u")
    if np.any(a < 0):
        raise ValueError("feps_eval requires u >= 0")
    return _out(_feps(a, _eps_of(params)), u)


def feps_inv(v, params, settings=DEFAULT_SETTINGS):
    """Root of ``F_eps(u) = v`` right of the stationary point (``v >= 0``)."""
    eps = _eps_of(params)
    a = _as_array(v, "v")
    if np.any(a < 0):
        raise ValueError("feps_inv requires v >= 0")
    t = np.atleast_1d(a).ravel()
    lo = np.full_like(t, LOG_COEF * math.sqrt(eps))
    hi = np.maximum(f_inv(t, settings) + 1.0, 2.0 * lo + 1.0)
    for _ in range(200):
        short = _feps(hi, eps) <= t
        if not np.any(short):
            break
        hi = np.where(short, lo + 2.0 * (hi - lo), hi)
    else:
        raise NumericsError("could not bracket feps_inv")
    res = bracketed_newton(
        lambda x, i: _feps(x, eps), lambda x, i: _feps_prime(x, eps),
        t, lo, hi, None, settings)
    return _out(res.reshape(np.shape(a)), v)


# ---------------------------------------------------------------------------
# G (drift below critical) and its inverse

def g_eval(u):
    """``G(u) = omega*artanh(u/omega) - u`` for ``0 <= u < omega``."""
    a = _as_array(u, "u")
    if np.any(a < 0) or np.any(a >= OMEGA):
        raise ValueError("g_eval requires 0 <= u < omega")
    return _out(OMEGA * _atanh_minus_x(a / OMEGA), u)


def g_inv(v, settings=DEFAULT_SETTINGS):
    """Inverse of ``G``; values in ``[0, omega)``.

    Beyond ``v`` of about 10 the inverse is within 1e-7 of ``omega`` and float
    resolution degrades (it saturates at the largest double below ``omega``); use
    :func:`g_inv_loggap` when the distance to ``omega`` matters.
    """
    a = _as_array(v, "v")
    if np.any(a < 0):
        raise ValueError("g_inv requires v >= 0")
    t = np.atleast_1d(a).ravel()
    res = np.zeros_like(t)
    top = np.nextafter(OMEGA, 0.0)
    direct = (t > 0) & (t <= 1.0)
    if np.any(direct):
        td = t[direct]
        guess = np.where(td < 1.0, np.cbrt(3 * OMEGA ** 2 * td),
                         OMEGA - 2 * OMEGA * np.exp(-2.0 * (td + OMEGA) / OMEGA))
        res[direct] = bracketed_newton(
            lambda x, i: OMEGA * _atanh_minus_x(x / OMEGA),
            lambda x, i: x * x / (OMEGA ** 2 - x * x),
            td, 0.0, top, guess, settings)
    far = t > 1.0
    if np.any(far):
        res[far] = np.minimum(OMEGA - np.exp(g_inv_loggap(t[far], settings)), top)
    return _out(res.reshape(np.shape(a)), v)


def g_eval_loggap(ell):
    """``G(omega - e^ell)``, accurate even when ``e^ell`` underflows in ``omega - e^ell``."""
    ell = np.asarray(ell, dtype=float)
    if np.any(ell > math.log(OMEGA)):
        raise ValueError("log-gap must not exceed log(omega)")
    w = np.exp(ell)
    z = w / OMEGA
    u_small = (OMEGA - w) / OMEGA
    near = z < 0.5
    # artanh(1 - z) = 0.5*log((2 - z)/z), stable near the singularity
    far_val = OMEGA * _atanh_minus_x(np.where(near, 0.0, u_small))
    near_val = OMEGA * (0.5 * (np.log(2.0 * OMEGA - w) - ell)) - OMEGA + w
    return _out(np.where(near, near_val, far_val), ell)


def g_inv_loggap(v, settings=DEFAULT_SETTINGS):
    """``log(omega - G^{-1}(v))``; finite for every finite ``v >= 0``."""
    a = _as_array(v, "v")
    if np.any(a < 0):
        raise ValueError("g_inv_loggap requires v >= 0")
    t = np.atleast_1d(a).ravel()
    top = math.log(OMEGA)
    # G decreasing in ell; G'(ell) = -w * u^2/(omega^2 - u^2), u = omega - w
    # asymptotics: ell ~ log(2 omega) - 2(v + omega)/omega
    lo = np.minimum(math.log(2 * OMEGA) - 2.0 * (t + OMEGA) / OMEGA - 2.0, top - 1e-3)

    def neg_g(ell, i):
        return -g_eval_loggap(ell)

    def neg_dg(ell, i):
        w = np.exp(ell)
        u = OMEGA - w
        return u * u / (2 * OMEGA - w)

    res = np.full_like(t, top)
    pos = t > 0
    if np.any(pos):
        tp = t[pos]
        hi = np.full_like(tp, top)
        res[pos] = bracketed_newton(neg_g, neg_dg, -tp, lo[pos], hi, None,
                                    RootFindSettings(settings.abs_tol, settings.rel_tol,
                                                     settings.max_iterations))
    return _out(res.reshape(np.shape(a)), v)


# ---------------------------------------------------------------------------
# curves

def _time(t):
    a = _as_array(t, "t")
    if np.any(a < 0):
        raise ValueError("times must be nonnegative")
    return a


def l_star(t, params, settings=DEFAULT_SETTINGS):
    """``L*(t) = eps^{-1/2} F^{-1}(eps^{3/2} t)``."""
    eps = _eps_of(params)
    a = _time(t)
    return _out(f_inv(eps ** 1.5 * a, settings) / math.sqrt(eps), t)


def l_bar(t, params, settings=DEFAULT_SETTINGS):
    """``L*(t) + (3/(2 sqrt 2)) log+(eps^{3/2} t)``."""
    eps = _eps_of(params)
    a = _time(t)
    with np.errstate(divide="ignore"):
        logp = np.maximum(0.0, np.log(eps ** 1.5 * a))
    return _out(np.asarray(l_star(a, eps, settings)) + LOG_COEF * logp, t)


def l_exact(t, params, settings=DEFAULT_SETTINGS):
    """``L(t) = eps^{-1/2} F_eps^{-1}(eps^{3/2} t)``."""
    eps = _eps_of(params)
    a = _time(t)
    return _out(np.asarray(feps_inv(eps ** 1.5 * a, eps, settings)) / math.sqrt(eps), t)


def _horizon(params, horizon):
    t = params.horizon_t if horizon is None else horizon
    if not (t > 0):
        raise ValueError("barrier curves need a positive horizon")
    return t


def k_curve(s, params, horizon=None, settings=DEFAULT_SETTINGS):
    """``K(s) = L*(t - s)`` for ``0 <= s <= t`` (``K(t) = 0``)."""
    t = _horizon(params, horizon)
    a = _as_array(s, "s")
    if np.any(a < 0) or np.any(a > t):
        raise ValueError("k_curve needs 0 <= s <= horizon")
    return _out(np.asarray(l_star(t - a, params, settings)), s)


def h_curve(s, params, horizon=None, settings=DEFAULT_SETTINGS):
    """``H(s) = L(t - s)`` for ``0 <= s < t``."""
    t = _horizon(params, horizon)
    a = _as_array(s, "s")
    if np.any(a < 0) or np.any(a >= t):
        raise ValueError("h_curve needs 0 <= s < horizon")
    return _out(np.asarray(l_exact(t - a, params, settings)), s)


def curve_derivatives(t, params, settings=DEFAULT_SETTINGS):
    """First and second time derivatives of ``L*`` and ``L`` at ``t > 0``.

    Returns ``(l_star', l_star'', l_exact', l_exact'')``.
    """
    eps = _eps_of(params)
    a = _as_array(t, "t")
    if np.any(a <= 0):
        raise ValueError("curve_derivatives needs t > 0")
    w2 = OMEGA ** 2
    u = np.asarray(f_inv(eps ** 1.5 * a, settings))
    ls1 = eps * (1.0 + w2 / u ** 2)
    ls2 = -2.0 * w2 * eps ** 2.5 * (u ** 2 + w2) / u ** 5
    v = np.asarray(feps_inv(eps ** 1.5 * a, eps, settings))
    se = math.sqrt(eps)
    den = 2 * SQRT2 * v ** 2 - 3 * se * v
    le1 = 2 * SQRT2 * eps * (w2 + v ** 2) / den
    le2 = 8 * eps ** 2.5 * (w2 + v ** 2) * (-3 * se * v ** 2 - 4 * SQRT2 * w2 * v + 3 * w2 * se) / den ** 3
    return tuple(_out(x, t) for x in (ls1, ls2, le1, le2))


def _check_rs(r, s, t):
    if not (0 <= r < s):
        raise ValueError("need 0 <= r < s")
    if s > t:
        raise ValueError("need s <= horizon")


def tau_k(r, s, params, horizon=None, settings=DEFAULT_SETTINGS):
    """Closed form of ``int_r^s K(u)^{-2} du``."""
    t = _horizon(params, horizon)
    _check_rs(r, s, t)
    eps = _eps_of(params)
    kr, ks = l_star(np.array([t - r, t - s]), eps, settings)
    return (kr - ks - eps * (s - r)) / OMEGA ** 2


def tau_h(r, s, params, horizon=None, settings=DEFAULT_SETTINGS):
    """Closed form of ``int_r^s H(u)^{-2} du`` (``s = t`` uses ``H(t) = L(0)``)."""
    t = _horizon(params, horizon)
    _check_rs(r, s, t)
    eps = _eps_of(params)
    hr, hs = l_exact(np.array([t - r, t - s]), eps, settings)
    return (hr - hs - eps * (s - r)) / OMEGA ** 2 - 3.0 / math.pi ** 2 * math.log(hr / hs)


def max_tau_bound(params):
    """Upper bound ``pi/(2 omega) eps^{-1/2}`` on ``tau^K(0, t)`` for every t."""
    return math.pi / (2 * OMEGA) / math.sqrt(_eps_of(params))


def linear_regime_threshold(eps_values, u_max=1e6, points=20001):
    """Smallest grid ``u*`` with ``F_eps(u) > u/2`` for all grid ``u >= u*`` and all eps.

    Found by scanning a log-spaced grid on ``[1e-3, u_max]``.
    """
    u = np.logspace(-3, math.log10(u_max), points)
    ok = np.ones_like(u, dtype=bool)
    for eps in eps_values:
        ok &= _feps(u, _eps_of(eps)) > u / 2
    bad = np.nonzero(~ok)[0]
    if bad.size == 0:
        return float(u[0])
    if bad[-1] == u.size - 1:
        raise NumericsError("F_eps(u) > u/2 fails at the top of the scan")
    return float(u[bad[-1] + 1])


def supercritical_l_bar(t, epsilon, settings=DEFAULT_SETTINGS):
    """Conjectured ``|eps|^{-1/2} G^{-1}(|eps|^{3/2} t)`` for ``eps < 0``."""
    if not (-1.0 < epsilon < 0.0):
        raise ValueError("supercritical branch needs -1 < epsilon < 0")
    e = abs(epsilon)
    a = _time(t)
    return _out(np.asarray(g_inv(e ** 1.5 * a, settings)) / math.sqrt(e), t)
