"""Configuration, outcome types and estimators on top of the replicate kernels."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math
from typing import Optional

import numpy as np
from scipy import stats

from .. import _accel
from ..curves import ModelParams, l_bar, l_exact, l_star
from ..rng import split_seed

ORIGIN_ONLY = "origin"
ORIGIN_PLUS_K = "origin+K"
ORIGIN_PLUS_H = "origin+H"
CONSTANT_STRIP = "strip"
NO_ABSORPTION = "none"
BARRIER_KINDS = (ORIGIN_ONLY, ORIGIN_PLUS_K, ORIGIN_PLUS_H, CONSTANT_STRIP, NO_ABSORPTION)

TAG_NAMES = {0: "origin", 1: "upper", 2: "clock"}
TAG_LEAF = 3

DEFAULT_RECORD_CAP = 1_000_000
CAPPED_LIMIT = 0.01


class ConfigError(ValueError):
    """A configuration violates a documented invariant."""


class UnderpoweredError(RuntimeError):
    """Too many replicates were capped for the estimate to be trusted."""


@dataclass(frozen=True)
class BarrierSpec:
    kind: str = ORIGIN_ONLY
    width: Optional[float] = None

    @classmethod
    def origin_only(cls):
        return cls(ORIGIN_ONLY)

    @classmethod
    def origin_plus_k(cls):
        return cls(ORIGIN_PLUS_K)

    @classmethod
    def origin_plus_h(cls):
        return cls(ORIGIN_PLUS_H)

    @classmethod
    def constant_strip(cls, width):
        return cls(CONSTANT_STRIP, float(width))

    @classmethod
    def no_absorption(cls):
        return cls(NO_ABSORPTION)

    @property
    def absorbing_origin(self):
        return self.kind != NO_ABSORPTION

    @property
    def has_upper(self):
        return self.kind in (ORIGIN_PLUS_K, ORIGIN_PLUS_H, CONSTANT_STRIP)

    def violations(self, params=None):
        out = []
        if self.kind not in BARRIER_KINDS:
            out.append(f"BarrierSpec.kind={self.kind!r} must be one of {', '.join(BARRIER_KINDS)}")
            return out
        if self.kind == CONSTANT_STRIP:
            if self.width is None or not (self.width > 0) or not math.isfinite(self.width):
                out.append("BarrierSpec: ConstantStrip needs a finite width K > 0")
        elif self.width is not None:
            out.append(f"BarrierSpec: width only applies to ConstantStrip, not {self.kind!r}")
        if self.kind in (ORIGIN_PLUS_K, ORIGIN_PLUS_H) and params is not None:
            if not (params.horizon_t > 0):
                out.append("BarrierSpec: curve barriers need ModelParams.horizon_t > 0")
            if not (params.epsilon > 0):
                out.append("BarrierSpec: curve barriers need epsilon > 0")
        return out

    def table(self, params, grid):
        """Upper barrier values on the time grid (empty if there is none)."""
        t = params.horizon_t
        if self.kind == ORIGIN_PLUS_K:
            return np.asarray(l_star(np.maximum(t - grid, 0.0), params.epsilon), dtype=float)
        if self.kind == ORIGIN_PLUS_H:
            return np.asarray(l_exact(np.maximum(t - grid, 0.0), params.epsilon), dtype=float)
        if self.kind == CONSTANT_STRIP:
            return np.full(grid.shape, self.width)
        return np.empty(0)

    def at(self, params, s):
        return float(self.table(params, np.array([float(s)]))[0]) if self.has_upper else math.inf


@dataclass(frozen=True)
class SimConfig:
    """One simulation setup.

    ``rho`` and ``branch_rate`` override the drift ``sqrt(2) + epsilon`` and the
    unit splitting rate; ``bridge=False`` switches off the within-step crossing
    correction (endpoint-only monitoring).
    """

    params: ModelParams
    x0: float
    barrier: BarrierSpec = field(default_factory=BarrierSpec)
    dt: float = 0.005
    pop_cap: int = 2_000_000
    seed: int = 0
    record_hits_window: Optional[tuple] = None
    rho: Optional[float] = None
    branch_rate: float = 1.0
    bridge: bool = True

    @property
    def drift(self):
        return self.params.rho if self.rho is None else float(self.rho)

    @property
    def horizon(self):
        return float(self.params.horizon_t)

    def violations(self):
        out = list(self.params.violations(allow_negative=True)) if self.rho is None else []
        if self.rho is not None:
            if not math.isfinite(self.rho):
                out.append("SimConfig.rho must be finite")
            if not (self.params.horizon_t >= 0) or not math.isfinite(self.params.horizon_t):
                out.append("ModelParams.horizon_t must be a finite nonnegative time")
        out += self.barrier.violations(self.params)
        if not (self.dt > 0) or not math.isfinite(self.dt):
            out.append(f"SimConfig.dt={self.dt!r} must be > 0")
        if not (isinstance(self.pop_cap, (int, np.integer)) and self.pop_cap >= 1):
            out.append(f"SimConfig.pop_cap={self.pop_cap!r} must be an integer >= 1")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2 ** 64):
            out.append(f"SimConfig.seed={self.seed!r} must be an integer in [0, 2^64)")
        if not (self.branch_rate >= 0) or not math.isfinite(self.branch_rate):
            out.append("SimConfig.branch_rate must be finite and >= 0")
        if not math.isfinite(self.x0):
            out.append("SimConfig.x0 must be finite")
        elif self.barrier.has_upper and not out:
            f0 = self.barrier.at(self.params, 0.0)
            if not (0.0 < self.x0 < f0):
                out.append(f"SimConfig.x0={self.x0!r} must lie strictly between 0 and the "
                           f"upper barrier {f0:.6g} at time 0")
        if self.record_hits_window is not None:
            try:
                r, s = (float(v) for v in self.record_hits_window)
            except (TypeError, ValueError):
                out.append("SimConfig.record_hits_window must be a pair (r, s)")
            else:
                if not (0 <= r < s):
                    out.append("SimConfig.record_hits_window needs 0 <= r < s")
        return out

    def check(self):
        bad = self.violations()
        if bad:
            raise ConfigError("; ".join(bad))
        return self


@dataclass
class SimOutcome:
    extinct: bool
    zeta: float
    cmd_value: Optional[float]
    hit_records: list
    final_population: int
    capped: bool
    n_created: int = 0
    curvature_warning: bool = False
    records_truncated: bool = False
    final_positions: list = field(default_factory=list)


@dataclass(frozen=True)
class EstimateWithCI:
    point: float
    std_error: float
    n_replicates: int
    seed_manifest: dict
    ci_low: float = math.nan
    ci_high: float = math.nan


@dataclass
class BatchResult:
    survived: np.ndarray
    leaves: np.ndarray
    zeta: np.ndarray
    cmd: np.ndarray
    created: np.ndarray
    capped: np.ndarray
    hit_counts: np.ndarray
    curvature_warning: bool = False


@dataclass
class CmdEstimate:
    values: np.ndarray
    quantiles: dict
    quantile_ci: dict
    n_capped: int
    n_censored: int
    seed_manifest: dict


@dataclass
class HitEstimate:
    mean: EstimateWithCI
    second_moment: EstimateWithCI
    p_positive: EstimateWithCI
    counts: np.ndarray
    n_capped: int


def seed_manifest(seed, n, first=0):
    return {
        "base_seed": int(seed),
        "replicates": [int(first), int(first + n)],
        "rule": "replicate i has root particle id mix64(i + 0x9E3779B97F4A7C15); children of p "
                "are mix64(2p+1), mix64(2p+2); every draw is Philox4x32-10 keyed by the seed "
                "with counter (step, stream tag, particle id)",
    }


def _kernels(backend):
    name = backend or _accel.backend()
    if name == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        from . import _kernel as mod
    elif name == "numpy":
        from . import _numpy_kernel as mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    return mod


def time_grid(horizon, dt):
    """``k*dt`` for ``k < n`` plus the horizon itself as the last node."""
    n = max(0, int(math.ceil(horizon / dt - 1e-9)))
    grid = np.arange(n + 1, dtype=float) * dt
    if n:
        grid[n] = horizon
    return n, grid


def curvature_warning(table, grid):
    """True if a per-step chord misses the barrier by more than ``0.1 sqrt(dt)``.

    The deviation is estimated as ``|f''| h^2 / 8`` from second differences.
    The last two steps are exempt: the curves have an infinite slope at the
    horizon.
    """
    if table.size < 5:
        return False
    h = np.diff(grid)
    second = (table[2:] - 2 * table[1:-1] + table[:-2]) / (h[1:] * h[:-1])
    dev = np.abs(second[:-1]) * h[1:-1] ** 2 / 8.0
    return bool(np.any(dev > 0.1 * np.sqrt(h[1:-1])))


def _prepare(config):
    config.check()
    n_steps, grid = time_grid(config.horizon, config.dt)
    upper = config.barrier.table(config.params, grid) if config.barrier.has_upper else np.empty(0)
    warn = curvature_warning(upper, grid) if config.barrier.kind in (ORIGIN_PLUS_K, ORIGIN_PLUS_H) else False
    k0, k1 = split_seed(config.seed)
    return n_steps, upper, warn, k0, k1


def _edges(config, hit_edges):
    if hit_edges is not None:
        e = np.asarray(hit_edges, dtype=float)
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise ConfigError("hit_edges must be an increasing 1-d array of length >= 2")
        return e
    if config.record_hits_window is not None:
        r, s = config.record_hits_window
        return np.array([float(r), float(s)])
    return np.empty(0)


def simulate(config, replicate=0, backend=None, record_cap=DEFAULT_RECORD_CAP,
             record_clocks=False, track_cmd=None, record_leaves=False):
    """Run one replicate and return its :class:`SimOutcome`.

    Hit records are ``(time, tag)`` pairs sorted by time, with tag ``"origin"``
    or ``"upper"`` (``"clock"`` rows hold drawn branching clocks when
    ``record_clocks`` is set). ``record_leaves`` fills ``final_positions`` with
    the sorted positions of the survivors at the horizon. ``cmd_value`` is tracked in NoAbsorption mode,
    and in OriginOnly mode when the population survives.
    """
    n_steps, upper, warn, k0, k1 = _prepare(config)
    mod = _kernels(backend)
    edges = _edges(config, None)
    counts = np.zeros(max(edges.size - 1, 0), dtype=np.int64)
    rec_t = np.empty(record_cap)
    rec_g = np.empty(record_cap, dtype=np.int8)
    kind = config.barrier.kind
    if track_cmd is None:
        track_cmd = kind in (NO_ABSORPTION, ORIGIN_ONLY)
    leaves, zeta, cmd, created, capped, overflow, n_rec = mod.run_replicate(
        k0, k1, int(replicate), float(config.x0), config.drift, float(config.branch_rate),
        float(config.dt), n_steps, config.horizon, config.barrier.absorbing_origin, upper,
        bool(track_cmd), False, math.inf, False, int(config.pop_cap), edges, counts,
        rec_t, rec_g, bool(config.bridge), bool(record_clocks), bool(record_leaves))
    capped = bool(capped or overflow)
    m = min(n_rec, record_cap)
    order = np.lexsort((rec_g[:m], rec_t[:m]))
    records = [(float(rec_t[i]), TAG_NAMES[int(rec_g[i])]) for i in order if rec_g[i] != TAG_LEAF]
    finals = sorted(float(rec_t[i]) for i in order if rec_g[i] == TAG_LEAF)
    cmd_value = None
    if track_cmd and math.isfinite(cmd) and not capped:
        cmd_value = float(cmd)
    return SimOutcome(
        extinct=bool(leaves == 0 and not capped),
        zeta=float(zeta),
        cmd_value=cmd_value,
        hit_records=records,
        final_population=int(leaves),
        capped=capped,
        n_created=int(created),
        curvature_warning=warn,
        records_truncated=n_rec > record_cap,
        final_positions=finals,
    )


def simulate_batch(config, n, first_replicate=0, hit_edges=None, track_cmd=False,
                   prune=False, cmd_bound=math.inf, stop_on_survival=False,
                   workers=1, backend=None):
    """Run replicates ``first_replicate .. first_replicate + n - 1``.

    Results are stored by replicate index, so they do not depend on
    ``workers``. With ``prune`` the maximal-displacement search abandons
    lineages that can no longer beat the best one found (and ``cmd_bound``);
    replicates whose answer is not below the bound report ``inf``.
    """
    if n < 1:
        raise ConfigError("need at least one replicate")
    n_steps, upper, warn, k0, k1 = _prepare(config)
    mod = _kernels(backend)
    edges = _edges(config, hit_edges)
    n_bins = max(edges.size - 1, 0)
    leaves = np.zeros(n, dtype=np.int64)
    zeta = np.zeros(n)
    cmd = np.zeros(n)
    created = np.zeros(n, dtype=np.int64)
    flags = np.zeros(n, dtype=np.int64)
    hits = np.zeros((n, n_bins), dtype=np.int64)
    args = (float(config.x0), config.drift, float(config.branch_rate), float(config.dt), n_steps,
            config.horizon, config.barrier.absorbing_origin, upper, bool(track_cmd),
            bool(prune), float(cmd_bound), bool(stop_on_survival), int(config.pop_cap),
            edges, bool(config.bridge))

    def run(lo, hi):
        mod.run_batch(k0, k1, first_replicate + lo, hi - lo, *args,
                      leaves[lo:hi], zeta[lo:hi], cmd[lo:hi], created[lo:hi],
                      flags[lo:hi], hits[lo:hi])

    workers = max(1, int(workers))
    if workers == 1 or n < 2 * workers:
        run(0, n)
    else:
        bounds = np.linspace(0, n, workers * 4 + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
    capped = flags != 0
    return BatchResult(survived=(leaves > 0) & ~capped, leaves=leaves, zeta=zeta, cmd=cmd,
                       created=created, capped=capped, hit_counts=hits, curvature_warning=warn)


def _binomial(k, n, seed, first=0, alpha=0.05):
    p = k / n
    se = math.sqrt(p * (1 - p) / n)
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return EstimateWithCI(p, se, n, seed_manifest(seed, n, first), lo, hi)


def _refuse_if_capped(n_capped, n):
    if n_capped > CAPPED_LIMIT * n:
        raise UnderpoweredError(f"{n_capped} of {n} replicates hit the population cap")


def estimate_survival(x, params, n, seed, dt=0.005, pop_cap=2_000_000, rho=None,
                      workers=1, backend=None, bridge=True):
    """Binomial estimate of ``P_x(zeta > t)`` with origin absorption.

    Each replicate stops as soon as one particle reaches the horizon. Capped
    replicates are excluded; more than 1% capped raises ``UnderpoweredError``.
    """
    if x <= 0:
        return EstimateWithCI(0.0, 0.0, int(n), seed_manifest(seed, n), 0.0, 0.0)
    cfg = SimConfig(params, float(x), BarrierSpec.origin_only(), dt, pop_cap, seed, rho=rho,
                    bridge=bridge)
    res = simulate_batch(cfg, n, stop_on_survival=True, workers=workers, backend=backend)
    n_capped = int(res.capped.sum())
    _refuse_if_capped(n_capped, n)
    used = n - n_capped
    return _binomial(int(res.survived.sum()), used, seed)


def _quantile_ci(values, qs, seed, n_boot, alpha=0.05):
    rng = np.random.default_rng(seed)
    n = values.size
    boot = np.empty((n_boot, len(qs)))
    for b in range(n_boot):
        boot[b] = np.quantile(values[rng.integers(0, n, n)], qs)
    lo = np.quantile(boot, alpha / 2, axis=0)
    hi = np.quantile(boot, 1 - alpha / 2, axis=0)
    return {q: (float(a), float(b)) for q, a, b in zip(qs, lo, hi)}


def sample_cmd(params, n, seed, dt=0.005, pop_cap=2_000_000, first_replicate=0,
               margin=4.0, workers=1, backend=None, bridge=True):
    """Draw ``n`` values of the consistent maximal displacement at ``params.horizon_t``.

    Uses branch and bound from an initial bound ``l_bar(t) + margin``;
    replicates that find nothing below the bound are rerun with looser bounds
    and finally without one. Capped replicates come back as ``nan``.
    """
    cfg = SimConfig(params, 0.0, BarrierSpec.no_absorption(), dt, pop_cap, seed, bridge=bridge)
    t = params.horizon_t
    centre = float(l_bar(t, params.epsilon)) if params.epsilon > 0 and t > 0 else 0.0
    out = np.full(n, math.nan)
    todo = np.arange(n)
    for bound in (centre + margin, centre + 4 * margin, centre + 16 * margin, math.inf):
        if todo.size == 0:
            break
        # contiguous runs keep the batch calls cheap
        runs = np.split(todo, np.nonzero(np.diff(todo) != 1)[0] + 1)
        still = []
        for run in runs:
            res = simulate_batch(cfg, run.size, first_replicate + int(run[0]), track_cmd=True,
                                 prune=True, cmd_bound=bound, workers=workers, backend=backend)
            ok = ~res.capped & np.isfinite(res.cmd)
            out[run[ok]] = res.cmd[ok]
            if math.isinf(bound):
                continue
            still.extend(run[~ok & ~res.capped].tolist())
        todo = np.array(still, dtype=int)
    return out


def estimate_cmd(params, n, seed, dt=0.005, quantiles=(0.1, 0.25, 0.5, 0.75, 0.9),
                 n_boot=1000, pop_cap=2_000_000, workers=1, backend=None, bridge=True):
    """Sample the consistent maximal displacement and report quantiles with bootstrap CIs.

    With ``bridge=False`` each lineage's running minimum is only checked at
    step endpoints, which biases the values down by O(sqrt(dt)).
    """
    vals = sample_cmd(params, n, seed, dt, pop_cap, workers=workers, backend=backend, bridge=bridge)
    capped = np.isnan(vals)
    n_capped = int(capped.sum())
    _refuse_if_capped(n_capped, n)
    good = vals[~capped]
    qs = tuple(float(q) for q in quantiles)
    qv = {q: float(v) for q, v in zip(qs, np.quantile(good, qs))}
    ci = _quantile_ci(good, qs, seed, n_boot) if n_boot > 0 else {}
    return CmdEstimate(values=vals, quantiles=qv, quantile_ci=ci, n_capped=n_capped,
                       n_censored=0, seed_manifest=seed_manifest(seed, n))


def count_hits(config, n, workers=1, backend=None):
    """Moments of the number of upper-barrier kills in ``config.record_hits_window``."""
    if not config.barrier.has_upper:
        raise ConfigError("count_hits needs an upper barrier (OriginPlusK, OriginPlusH or ConstantStrip)")
    if config.record_hits_window is None:
        raise ConfigError("count_hits needs record_hits_window")
    res = simulate_batch(config, n, workers=workers, backend=backend)
    n_capped = int(res.capped.sum())
    _refuse_if_capped(n_capped, n)
    counts = res.hit_counts[~res.capped, 0].astype(float)
    m = counts.size
    man = seed_manifest(config.seed, n)

    def moment(v):
        se = float(v.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
        return EstimateWithCI(float(v.mean()), se, m, man,
                              float(v.mean() - 1.96 * se), float(v.mean() + 1.96 * se))

    pos = _binomial(int((counts > 0).sum()), m, config.seed)
    return HitEstimate(mean=moment(counts), second_moment=moment(counts ** 2),
                       p_positive=pos, counts=counts, n_capped=n_capped)
