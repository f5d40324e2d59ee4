"""Command-line front end.

Every command resolves a flat config (defaults, then an optional JSON config
file, then flags), validates it, writes ``<stem>.manifest.json`` and then
``<stem>.csv`` into the output directory. Exit codes: 0 success, 2 invalid
config, 3 numerics fault, 4 underpowered or capped statistics.

Config files look like ``{"command": "simulate survival", "config": {...}}``;
a manifest has the same two keys, so it can be validated or replayed as is.
"""
import argparse
import csv
import datetime as _dt
import json
import math
import os
from pathlib import Path
import sys
from typing import NamedTuple

import numpy as np

from . import __version__, _accel
from .curves import (ModelParams, NumericsError, curve_derivatives, f_eval, f_inv, feps_eval,
                     feps_inv, g_eval, g_inv, h_curve, k_curve, l_bar, l_exact, l_star)
from . import density, experiments
from .simulator import (BarrierSpec, ConfigError, SimConfig, UnderpoweredError, count_hits,
                        estimate_cmd, estimate_survival, simulate)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_UNDERPOWERED = 4

OUTPUT_ENV = "BBMCMD_OUTPUT_DIR"
MANIFEST_KEYS = {"tool", "version", "command", "config", "backend", "started", "finished",
                 "cells", "columns", "outputs", "summary", "status"}


class Opt(NamedTuple):
    name: str
    kind: str  # float, int, bool, str, floats
    default: object
    help: str
    choices: tuple = ()


class Result(NamedTuple):
    columns: list
    rows: list
    summary: dict = {}
    extra: dict = {}
    status: int = EXIT_OK


def fmt(v):
    """CSV cell text: floats in ``%.16e`` (17 significant digits), bools as 0/1."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.16e" % v
    return str(v)


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        when = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
    else:
        when = _dt.datetime.now(_dt.timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


# ---------------------------------------------------------------------------
# options shared by several commands

EPS = Opt("epsilon", "float", 0.1, "drift offset eps (drift is -(sqrt 2 + eps))")
SEED = Opt("seed", "int", 0, "base seed (all randomness flows from it)")
DT = Opt("dt", "float", 0.005, "time step")
POP_CAP = Opt("pop_cap", "int", 2_000_000, "maximum particles created per replicate")
N_REP = Opt("n", "int", 10_000, "number of replicates")

SIM_OPTS = [
    EPS, Opt("t", "float", 5.0, "horizon"), Opt("x0", "float", 1.0, "starting position"),
    Opt("barrier", "str", "origin", "barrier mode", ("origin", "origin+K", "origin+H", "strip", "none")),
    Opt("width", "float", None, "strip width K (strip mode)"),
    DT, POP_CAP, SEED,
    Opt("window", "floats", None, "hit-recording window r s"),
    Opt("rho", "float", None, "drift override (default sqrt 2 + eps)"),
    Opt("branch_rate", "float", 1.0, "branching rate per particle"),
    Opt("bridge", "bool", True, "within-step crossing correction"),
]


def _sim_config(c):
    barrier = BarrierSpec(c["barrier"], c["width"])
    window = tuple(c["window"]) if c["window"] is not None else None
    return SimConfig(ModelParams(c["epsilon"], c["t"]), c["x0"], barrier, c["dt"], c["pop_cap"],
                     c["seed"], window, c["rho"], c["branch_rate"], c["bridge"])


# ---------------------------------------------------------------------------
# curves

CURVE_FUNCS = ("F", "F_inv", "F_eps", "F_eps_inv", "G", "G_inv", "L_star", "L_bar", "L_exact", "K", "H")


def _curves_eval(c, workers=1):
    name, eps, hz = c["function"], c["epsilon"], c["horizon"]
    table = {
        "F": lambda v: f_eval(v), "F_inv": lambda v: f_inv(v),
        "F_eps": lambda v: feps_eval(v, eps), "F_eps_inv": lambda v: feps_inv(v, eps),
        "G": lambda v: g_eval(v), "G_inv": lambda v: g_inv(v),
        "L_star": lambda v: l_star(v, eps), "L_bar": lambda v: l_bar(v, eps),
        "L_exact": lambda v: l_exact(v, eps),
        "K": lambda v: k_curve(v, ModelParams(eps, hz)),
        "H": lambda v: h_curve(v, ModelParams(eps, hz)),
    }
    at = np.asarray(c["at"], dtype=float)
    vals = np.atleast_1d(table[name](at))
    rows = [{"function": name, "epsilon": eps, "horizon": hz, "arg": a, "value": v}
            for a, v in zip(at, vals)]
    return Result(["function", "epsilon", "horizon", "arg", "value"], rows)


def _curves_eval_check(c):
    out = []
    if c["function"] not in ("F", "F_inv", "G", "G_inv"):
        out += ModelParams(c["epsilon"]).violations()
    if c["function"] in ("K", "H") and not (c["horizon"] > 0):
        out.append("curves eval: K and H need --horizon > 0")
    if not c["at"]:
        out.append("curves eval: --at needs at least one value")
    return out


TABLE_COLS = ["t", "L_star", "L_bar", "L_exact", "K_at_0", "dL_star", "d2L_star", "dL_exact", "d2L_exact"]


def _curves_table(c, workers=1):
    eps = c["epsilon"]
    t = c["t_max"] * np.arange(1, c["points"] + 1) / c["points"]
    ls, lb, le = l_star(t, eps), l_bar(t, eps), l_exact(t, eps)
    k0 = [k_curve(0.0, ModelParams(eps, float(ti))) for ti in t]
    d = curve_derivatives(t, eps)
    rows = [dict(zip(TABLE_COLS, vals)) for vals in zip(t, ls, lb, le, k0, *d)]
    return Result(TABLE_COLS, rows)


def _curves_table_check(c):
    out = ModelParams(c["epsilon"]).violations()
    if not (c["t_max"] > 0):
        out.append("curves table: --t-max must be > 0")
    if c["points"] < 1:
        out.append("curves table: --points must be >= 1")
    return out


# ---------------------------------------------------------------------------
# density

def _query(c):
    return density.StripQuery(c["r"], c["s"], c["x"], c["y"], c["width"], c["rho"])


def _density_query(c, workers=1):
    q = _query(c)
    inner = 0 < q.y < q.width
    row = {"r": q.r, "s": q.s, "x": q.x, "y": q.y, "width": q.width, "rho": q.rho,
           "q_exact": density.strip_density_exact(q) if inner else 0.0,
           "hit_rate_upper": density.hitting_rate(q, boundary="upper"),
           "hit_rate_lower": density.hitting_rate(q, boundary="lower"),
           "j_bound": density.j_bound((q.s - q.r) / q.width ** 2)}
    return Result(list(row), [row])


def _density_query_check(c):
    try:
        _query(c)
    except ValueError as e:
        return [f"StripQuery: {e}"]
    return []


def _density_check(c, workers=1):
    x, k, hz, rho = c["x"], c["width"], c["horizon"], c["rho"]
    rows = []
    up, low, surv = density.probability_balance(x, k, hz)
    total = up + low + surv
    rows.append({"check": "probability_balance", "lhs": total, "rhs": 1.0,
                 "error": abs(total - 1.0), "tolerance": 1e-6, "pass": abs(total - 1.0) <= 1e-6})
    lhs, rhs = density.chapman_kolmogorov_check(0.4 * hz, 0.6 * hz, x, 0.5 * k, k)
    rows.append({"check": "chapman_kolmogorov", "lhs": lhs, "rhs": rhs, "error": abs(lhs - rhs),
                 "tolerance": 1e-8, "pass": abs(lhs - rhs) <= 1e-8})
    s = max(hz, k * k)
    ratio = density.long_time_ratio(s, x, 0.5 * k, k, rho)
    jb = max(density.j_bound(s / k ** 2), 1e-12)  # floor at rounding level
    rows.append({"check": "single_mode_ratio", "lhs": ratio, "rhs": 1.0, "error": abs(ratio - 1),
                 "tolerance": jb, "pass": abs(ratio - 1) <= jb})
    g = density.green_bound_check(x, 0.5 * k, k, rho)
    rows.append({"check": "green_bound", "lhs": g.lhs, "rhs": g.rhs, "error": max(g.lhs - g.rhs, 0.0),
                 "tolerance": 1e-6 * g.rhs, "pass": (not g.divergent) and g.lhs <= g.rhs * (1 + 1e-6)})
    cols = ["check", "lhs", "rhs", "error", "tolerance", "pass"]
    return Result(cols, rows, {"all_pass": all(r["pass"] for r in rows), "green_divergent": g.divergent})


def _density_check_check(c):
    out = []
    if not (c["width"] > 0):
        out.append("density check: --width must be > 0")
    elif not (0 < c["x"] < c["width"]):
        out.append("density check: --x must lie strictly inside (0, width)")
    if not (c["horizon"] > 0):
        out.append("density check: --horizon must be > 0")
    return out


# ---------------------------------------------------------------------------
# simulation

ONCE_COLS = ["replicate", "extinct", "zeta", "cmd_value", "final_population", "capped",
             "n_created", "origin_hits", "upper_hits", "curvature_warning"]


def _simulate_once(c, workers=1):
    cfg = _sim_config(c)
    out = simulate(cfg, replicate=c["replicate"])
    tags = [g for _, g in out.hit_records]
    row = {"replicate": c["replicate"], "extinct": out.extinct, "zeta": out.zeta,
           "cmd_value": math.nan if out.cmd_value is None else out.cmd_value,
           "final_population": out.final_population, "capped": out.capped,
           "n_created": out.n_created, "origin_hits": tags.count("origin"),
           "upper_hits": tags.count("upper"), "curvature_warning": out.curvature_warning}
    hits = [{"time": t, "tag": g} for t, g in out.hit_records]
    return Result(ONCE_COLS, [row], {"records_truncated": out.records_truncated},
                  {"hits": (["time", "tag"], hits)},
                  EXIT_UNDERPOWERED if out.capped else EXIT_OK)


def _simulate_once_check(c):
    return _sim_config(c).violations()


SURV_COLS = ["x", "epsilon", "t", "n", "survival", "std_error", "ci_low", "ci_high"]


def _simulate_survival(c, workers=1):
    p = ModelParams(c["epsilon"], c["t"])
    e = estimate_survival(c["x"], p, c["n"], c["seed"], c["dt"], c["pop_cap"], c["rho"], workers)
    row = {"x": c["x"], "epsilon": c["epsilon"], "t": c["t"], "n": e.n_replicates,
           "survival": e.point, "std_error": e.std_error, "ci_low": e.ci_low, "ci_high": e.ci_high}
    return Result(SURV_COLS, [row], {"seed_manifest": e.seed_manifest})


def _survival_check(c):
    cfg = SimConfig(ModelParams(c["epsilon"], c["t"]), max(c["x"], 1e-300), BarrierSpec(),
                    c["dt"], c["pop_cap"], c["seed"], rho=c["rho"])
    out = cfg.violations()
    if c["n"] < 1:
        out.append("simulate survival: --n must be >= 1")
    return out


CMD_COLS = ["quantile", "value", "ci_low", "ci_high"]


def _simulate_cmd(c, workers=1):
    p = ModelParams(c["epsilon"], c["t"])
    est = estimate_cmd(p, c["n"], c["seed"], c["dt"], tuple(c["quantiles"]), c["n_boot"], c["pop_cap"],
                       workers)
    rows = [{"quantile": q, "value": v, "ci_low": est.quantile_ci.get(q, (math.nan,) * 2)[0],
             "ci_high": est.quantile_ci.get(q, (math.nan,) * 2)[1]} for q, v in est.quantiles.items()]
    extra = {}
    if c["samples"]:
        extra["samples"] = (["replicate", "value"],
                            [{"replicate": i, "value": v} for i, v in enumerate(est.values)])
    summary = {"l_bar": float(l_bar(c["t"], c["epsilon"])) if c["t"] > 0 else 0.0,
               "n_capped": est.n_capped, "seed_manifest": est.seed_manifest}
    return Result(CMD_COLS, rows, summary, extra)


def _cmd_check(c):
    cfg = SimConfig(ModelParams(c["epsilon"], c["t"]), 0.0, BarrierSpec.no_absorption(),
                    c["dt"], c["pop_cap"], c["seed"])
    out = cfg.violations()
    if c["n"] < 1:
        out.append("simulate cmd: --n must be >= 1")
    if any(not (0 < q < 1) for q in c["quantiles"]):
        out.append("simulate cmd: quantiles must lie in (0, 1)")
    return out


HITS_COLS = ["mean", "mean_se", "second_moment", "second_moment_se", "p_positive",
             "p_positive_se", "n", "n_capped"]


def _simulate_hits(c, workers=1):
    est = count_hits(_sim_config(c), c["n"], workers)
    row = {"mean": est.mean.point, "mean_se": est.mean.std_error,
           "second_moment": est.second_moment.point, "second_moment_se": est.second_moment.std_error,
           "p_positive": est.p_positive.point, "p_positive_se": est.p_positive.std_error,
           "n": est.mean.n_replicates, "n_capped": est.n_capped}
    return Result(HITS_COLS, [row], {"seed_manifest": est.mean.seed_manifest})


def _hits_check(c):
    out = _sim_config(c).violations()
    if c["barrier"] not in ("origin+K", "origin+H", "strip"):
        out.append("simulate hits: --barrier must be origin+K, origin+H or strip")
    if c["window"] is None:
        out.append("simulate hits: --window r s is required")
    if c["n"] < 1:
        out.append("simulate hits: --n must be >= 1")
    return out


# ---------------------------------------------------------------------------
# experiments

def _exp_ode(c, workers=1):
    r = experiments.ode_heuristic_check(ModelParams(c["epsilon"], c["t"]), c["rtol"], c["atol"])
    row = {"epsilon": c["epsilon"], "t": c["t"], "k0_ode": r.k0, "l_star": r.l_star,
           "rel_error": r.rel_error, "k0_delta_1": r.k0_by_delta[0], "k0_delta_2": r.k0_by_delta[1]}
    return Result(list(row), [row])


def _exp_ode_check(c):
    out = ModelParams(c["epsilon"], c["t"]).violations()
    if not (c["rtol"] > 0 and c["atol"] > 0):
        out.append("experiment ode: tolerances must be > 0")
    return out


def _sweep_spec(c):
    return experiments.SweepSpec(tuple(c["epsilon_grid"]), c["time_rule"], tuple(c["time_values"]),
                                 c["replicates"], c["seed"], c["dt"], c["c1"], c["band"],
                                 c["dual"], c["pop_cap"])


SWEEP_COLS = ["epsilon", "t", "l_star", "l_bar", "c_t13", "n", "n_capped", "underpowered",
              "median", "median_se", "q25", "q75", "iqr", "gap", "dual_median", "dual_se"]


def _exp_sweep(c, workers=1):
    rows, summary = experiments.phase_sweep(_sweep_spec(c), workers)
    status = EXIT_UNDERPOWERED if summary["underpowered_cells"] else EXIT_OK
    return Result(SWEEP_COLS, rows, summary, status=status)


THRESH_COLS = ["offset", "x", "survival", "std_error", "ci_low", "ci_high", "n"]


def _exp_threshold(c, workers=1):
    rows, summary = experiments.survival_threshold_study(
        ModelParams(c["epsilon"], c["t"]), c["offsets"], c["n"], c["seed"], c["dt"], c["pop_cap"])
    return Result(THRESH_COLS, rows, summary)


def _exp_threshold_check(c):
    out = ModelParams(c["epsilon"], c["t"]).violations()
    offs = c["offsets"]
    if not offs or min(offs) >= 0 or max(offs) <= 0:
        out.append("experiment threshold: offsets must straddle 0")
    if c["n"] < 1:
        out.append("experiment threshold: --n must be >= 1")
    return out


def _front_config(c):
    return experiments.FrontTrackerConfig(c["dx"], c["length"], c["dt"], c["rho"], c["level"],
                                          c["horizon"], c["n_outputs"])


FRONT_COLS = ["time", "front", "front_over_ct13"]


def _exp_fkpp(c, workers=1):
    r = experiments.fkpp_front(_front_config(c))
    rows = [{"time": t, "front": f, "front_over_ct13": f / (experiments.C_CRIT * t ** (1 / 3))}
            for t, f in zip(r.times, r.fronts)]
    summary = {"u_min": r.u_min, "u_max": r.u_max, "monotone_in_x": r.monotone_in_x,
               "nondecreasing": r.nondecreasing, "resolved": r.config}
    return Result(FRONT_COLS, rows, summary)


SUPER_COLS = ["eps_abs", "scaled_time", "t", "value", "limit", "rel_gap", "identity_rel_error",
              "small_t_rel_diff"]


def _exp_super(c, workers=1):
    rows = experiments.supercritical_limit_check(c["eps_abs"], tuple(c["scaled_times"]))
    return Result(SUPER_COLS, rows)


def _exp_super_check(c):
    out = []
    if not c["eps_abs"] or any(not (0 < abs(e) < 1) for e in c["eps_abs"]):
        out.append("experiment supercritical: every |eps| must lie in (0, 1)")
    if not c["scaled_times"] or any(not (s > 0) for s in c["scaled_times"]):
        out.append("experiment supercritical: scaled times must be > 0")
    return out


class Command(NamedTuple):
    opts: list
    run: object
    check: object
    help: str


COMMANDS = {
    "curves eval": Command(
        [Opt("function", "str", "L_star", "function to evaluate", CURVE_FUNCS),
         Opt("at", "floats", [1.0], "arguments"), EPS,
         Opt("horizon", "float", 0.0, "horizon for K and H")],
        _curves_eval, _curves_eval_check, "evaluate a curve function at points"),
    "curves table": Command(
        [EPS, Opt("t_max", "float", 100.0, "largest time"), Opt("points", "int", 50, "number of times")],
        _curves_table, _curves_table_check, "table of the curves and their derivatives"),
    "density query": Command(
        [Opt("r", "float", 0.0, "start time"), Opt("s", "float", 1.0, "end time"),
         Opt("x", "float", 0.5, "start position"), Opt("y", "float", 0.5, "end position"),
         Opt("width", "float", 1.0, "strip width K"), Opt("rho", "float", 0.0, "drift")],
        _density_query, _density_query_check, "strip density and edge hitting rates"),
    "density check": Command(
        [Opt("x", "float", 0.3, "start position"), Opt("width", "float", 1.0, "strip width K"),
         Opt("horizon", "float", 3.0, "time horizon"), Opt("rho", "float", 1.5, "drift for the Green bound")],
        _density_check, _density_check_check, "identity checks for the strip kernel"),
    "simulate once": Command(
        SIM_OPTS + [Opt("replicate", "int", 0, "replicate index")],
        _simulate_once, _simulate_once_check, "one replicate with its hit records"),
    "simulate survival": Command(
        [Opt("x", "float", 5.0, "starting position"), EPS, Opt("t", "float", 8.0, "horizon"),
         N_REP, SEED, DT, POP_CAP, Opt("rho", "float", None, "drift override")],
        _simulate_survival, _survival_check, "survival probability with origin absorption"),
    "simulate cmd": Command(
        [EPS, Opt("t", "float", 8.0, "horizon"), N_REP, SEED, DT, POP_CAP,
         Opt("quantiles", "floats", [0.1, 0.25, 0.5, 0.75, 0.9], "quantile levels"),
         Opt("n_boot", "int", 1000, "bootstrap resamples"),
         Opt("samples", "bool", False, "also write every sampled value")],
        _simulate_cmd, _cmd_check, "quantiles of the consistent maximal displacement"),
    "simulate hits": Command(
        [o if o.name != "barrier" else Opt("barrier", "str", "origin+K", o.help, o.choices)
         for o in SIM_OPTS] + [N_REP],
        _simulate_hits, _hits_check, "moments of upper-barrier hit counts"),
    "experiment ode": Command(
        [EPS, Opt("t", "float", 100.0, "horizon"), Opt("rtol", "float", 1e-11, "integrator rtol"),
         Opt("atol", "float", 1e-13, "integrator atol")],
        _exp_ode, _exp_ode_check, "backward ODE against the closed-form barrier"),
    "experiment sweep": Command(
        [Opt("epsilon_grid", "floats", [0.3], "eps values"),
         Opt("time_rule", "str", "absolute", "time rule", experiments.TIME_RULES),
         Opt("time_values", "floats", [3.0, 8.0], "times or multipliers"),
         Opt("replicates", "int", 2000, "replicates per cell"), SEED, DT,
         Opt("c1", "float", 4.0, "bound on eps^2 t"), Opt("band", "float", 5.0, "tightness band"),
         Opt("dual", "bool", False, "also run the survival-scan median"), POP_CAP],
        _exp_sweep, lambda c: _sweep_spec(c).violations(), "maximal displacement over an (eps, t) grid"),
    "experiment threshold": Command(
        [EPS, Opt("t", "float", 8.0, "horizon"),
         Opt("offsets", "floats", [-8.0, -4.0, -2.0, 0.0, 2.0, 4.0, 8.0], "offsets from l_bar"),
         N_REP, SEED, DT, POP_CAP],
        _exp_threshold, _exp_threshold_check, "survival from l_bar(t) + offset"),
    "experiment fkpp": Command(
        [Opt("dx", "float", 0.0125, "spatial step"), Opt("length", "float", None, "domain length"),
         Opt("dt", "float", None, "time step (default: 90% of the stability limit)"),
         Opt("rho", "float", math.sqrt(2.0), "drift"), Opt("level", "float", 0.5, "front level"),
         Opt("horizon", "float", 80.0, "final time"), Opt("n_outputs", "int", 80, "output times")],
        _exp_fkpp, lambda c: _front_config(c).violations(), "front of the extinction-probability PDE"),
    "experiment supercritical": Command(
        [Opt("eps_abs", "floats", [0.04, 0.01], "|eps| values"),
         Opt("scaled_times", "floats", [0.5, 1.0, 2.0, 5.0, 50.0], "values of |eps|^{3/2} t")],
        _exp_super, _exp_super_check, "drift below critical: large-t limit of the barrier"),
}


# ---------------------------------------------------------------------------
# config handling

def _coerce(opt, v, where):
    if v is None:
        return None
    k = opt.kind
    try:
        if k == "float":
            if isinstance(v, bool):
                raise TypeError
            return float(v)
        if k == "int":
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise TypeError
            return int(v)
        if k == "bool":
            if isinstance(v, bool):
                return v
            if isinstance(v, str) and v.lower() in ("1", "true", "yes", "0", "false", "no"):
                return v.lower() in ("1", "true", "yes")
            raise TypeError
        if k == "str":
            if not isinstance(v, str):
                raise TypeError
            if opt.choices and v not in opt.choices:
                raise ConfigError(f"{where}: {opt.name}={v!r} must be one of {', '.join(opt.choices)}")
            return v
        if k == "floats":
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                v = [v]
            return [float(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {opt.name}={v!r} is not a valid {k}") from None
    raise AssertionError(k)


def resolve_config(command, file_cfg=None, flags=None):
    """Defaults, then the config file, then explicit flags; unknown keys are rejected."""
    cmd = COMMANDS[command]
    known = {o.name: o for o in cmd.opts}
    cfg = {o.name: o.default for o in cmd.opts}
    for src, where in ((file_cfg or {}, "config file"), (flags or {}, "flags")):
        unknown = sorted(set(src) - set(known))
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) for '{command}': {', '.join(unknown)}")
        for key, v in src.items():
            cfg[key] = _coerce(known[key], v, where)
    return cfg


def load_config_file(path):
    """Return ``(command or None, config dict)`` from a config or manifest file."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if "config" in data:
        extra = sorted(set(data) - MANIFEST_KEYS)
        if extra:
            raise ConfigError(f"{path}: unknown top-level key(s): {', '.join(extra)}")
        if not isinstance(data["config"], dict):
            raise ConfigError(f"{path}: 'config' must be an object")
        command = data.get("command")
        if command is not None and command not in COMMANDS:
            raise ConfigError(f"{path}: unknown command {command!r}")
        return command, data["config"]
    return None, data


def check_config(command, cfg):
    try:
        return list(COMMANDS[command].check(cfg))
    except (ValueError, TypeError) as e:
        return [str(e)]


# ---------------------------------------------------------------------------
# running

def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(col, math.nan)) for col in columns])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def execute(command, cfg, out_dir, stem=None, workers=1, log=print):
    """Validate, run and write outputs; returns the exit status.

    ``workers`` only changes wall time, so it is not part of the manifest.
    """
    bad = check_config(command, cfg)
    if bad:
        for msg in bad:
            log(f"violation: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or command.replace(" ", "_")
    manifest = {"tool": "bbmcmd", "version": __version__, "command": command, "config": cfg,
                "backend": _accel.backend(), "started": _timestamp(),
                "outputs": {"csv": f"{stem}.csv"}}
    mpath = out_dir / f"{stem}.manifest.json"
    _write_json(mpath, manifest)
    try:
        res = COMMANDS[command].run(cfg, workers)
    except (ConfigError, ValueError) as e:
        log(f"violation: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UnderpoweredError as e:
        log(f"underpowered: {e}", file=sys.stderr)
        manifest.update(status=EXIT_UNDERPOWERED, finished=_timestamp())
        _write_json(mpath, manifest)
        return EXIT_UNDERPOWERED
    except NumericsError as e:
        log(f"numerics fault: {e}", file=sys.stderr)
        manifest.update(status=EXIT_NUMERICS, finished=_timestamp())
        _write_json(mpath, manifest)
        return EXIT_NUMERICS
    _write_csv(out_dir / f"{stem}.csv", res.columns, res.rows)
    for name, (cols, rows) in res.extra.items():
        _write_csv(out_dir / f"{stem}.{name}.csv", cols, rows)
        manifest["outputs"][name] = f"{stem}.{name}.csv"
    manifest.update(columns=res.columns, cells=len(res.rows), summary=res.summary,
                    status=res.status, finished=_timestamp())
    _write_json(mpath, manifest)
    log(str(out_dir / f"{stem}.csv"))
    return res.status


def _default_out():
    return os.environ.get(OUTPUT_ENV, ".")


def _add_opts(p, opts):
    for o in opts:
        flag = "--" + o.name.replace("_", "-")
        text = o.help if "default" in o.help else f"{o.help} (default: {o.default})"
        kw = {"dest": o.name, "default": None, "help": text.replace("%", "%%")}
        if o.kind == "floats":
            kw.update(nargs="+", type=float)
        elif o.kind == "bool":
            kw.update(type=lambda s: s, metavar="{true,false}")
        elif o.kind == "str":
            if o.choices:
                kw["choices"] = o.choices
        else:
            kw["type"] = {"float": float, "int": int}[o.kind]
        p.add_argument(flag, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="bbmcmd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bbmcmd {__version__}")
    top = parser.add_subparsers(dest="group", required=True)
    groups = {}
    for name, cmd in COMMANDS.items():
        group, action = name.split()
        if group not in groups:
            groups[group] = top.add_parser(group).add_subparsers(dest="action", required=True)
        p = groups[group].add_parser(action, help=cmd.help)
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ENV} or .)")
        p.add_argument("--name", default=None, help="output file stem")
        p.add_argument("--workers", type=int, default=1, help="threads (results do not depend on it)")
        _add_opts(p, cmd.opts)
    v = top.add_parser("validate", help="check a config or manifest file")
    v.add_argument("path")
    r = top.add_parser("replay", help="rerun the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", default=None)
    r.add_argument("--name", default=None)
    r.add_argument("--workers", type=int, default=1)
    return parser


def _validate(path):
    try:
        command, raw = load_config_file(path)
        if command is None:
            print(f"violation: {path}: no 'command' key, cannot tell which types own the config",
                  file=sys.stderr)
            return EXIT_CONFIG
        cfg = resolve_config(command, raw)
    except ConfigError as e:
        print(f"violation: {e}", file=sys.stderr)
        return EXIT_CONFIG
    bad = check_config(command, cfg)
    for msg in bad:
        print(f"violation: {msg}")
    if not bad:
        print(f"ok: {command}")
    return EXIT_CONFIG if bad else EXIT_OK


def _manifest_stem(path):
    name = os.path.basename(path)
    return name[:-len(".manifest.json")] if name.endswith(".manifest.json") else None


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.group == "validate":
        return _validate(args.path)
    try:
        if args.group == "replay":
            command, raw = load_config_file(args.manifest)
            if command is None:
                raise ConfigError(f"{args.manifest}: no 'command' key")
            cfg = resolve_config(command, raw)
            if args.name is None:
                args.name = _manifest_stem(args.manifest)
        else:
            command = f"{args.group} {args.action}"
            file_cmd, raw = load_config_file(args.config) if args.config else (None, {})
            if file_cmd is not None and file_cmd != command:
                raise ConfigError(f"config file is for '{file_cmd}', not '{command}'")
            flags = {o.name: getattr(args, o.name) for o in COMMANDS[command].opts
                     if getattr(args, o.name) is not None}
            cfg = resolve_config(command, raw, flags)
    except ConfigError as e:
        print(f"violation: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else _default_out()
    return execute(command, cfg, out, args.name, max(1, args.workers))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
