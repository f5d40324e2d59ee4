"""Monte Carlo engine for branching Brownian motion with drift and absorbing barriers."""
from .engine import (
    BARRIER_KINDS, CONSTANT_STRIP, NO_ABSORPTION, ORIGIN_ONLY, ORIGIN_PLUS_H, ORIGIN_PLUS_K,
    BarrierSpec, BatchResult, CmdEstimate, ConfigError, EstimateWithCI, HitEstimate,
    SimConfig, SimOutcome, UnderpoweredError, count_hits, curvature_warning, estimate_cmd,
    estimate_survival, sample_cmd, seed_manifest, simulate, simulate_batch, time_grid,
)

__all__ = [
    "BARRIER_KINDS", "CONSTANT_STRIP", "NO_ABSORPTION", "ORIGIN_ONLY", "ORIGIN_PLUS_H",
    "ORIGIN_PLUS_K", "BarrierSpec", "BatchResult", "CmdEstimate", "ConfigError",
    "EstimateWithCI", "HitEstimate", "SimConfig", "SimOutcome", "UnderpoweredError",
    "count_hits", "curvature_warning", "estimate_cmd", "estimate_survival", "sample_cmd",
    "seed_manifest", "simulate", "simulate_batch", "time_grid",
]
