"""Depth-first replicate kernel (numba).

One replicate is a tree walk: a particle is advanced step by step on the
global time grid ``k*dt`` until it branches, dies or reaches the horizon;
at a branching event one child is pushed on a stack and the walk continues
with the other. Every draw is keyed by (seed, replicate, particle id, step),
so the outcome does not depend on traversal order and the pure-numpy
breadth-first kernel reproduces it.

Killing at a flat level uses the exact minimum of the Brownian bridge between
step endpoints; a moving upper barrier is linearised per step and tested with
the bridge crossing probability ``exp(-2 d0 d1 / h)``.
"""
import math

import numpy as np

from .._accel import jit
from ..rng import (MASK32, TAG_LIFETIME, TAG_STEP, INV32, TWO_PI, GOLDEN,
                   mix64, philox4x32)

philox = jit(philox4x32)
_mix = jit(mix64)


@jit
def _root(rep):
    return _mix(rep + GOLDEN)


@jit
def _children(pid):
    return _mix(pid * np.uint64(2) + np.uint64(1)), _mix(pid * np.uint64(2) + np.uint64(2))

STACK_CAP = 4096

TAG_ORIGIN = 0
TAG_UPPER = 1
TAG_CLOCK = 2
TAG_LEAF = 3


@jit
def _draws(k0, k1, pid, step):
    w0, w1, w2, w3 = philox(np.uint64(step) & MASK32, TAG_STEP, pid & MASK32,
                            pid >> np.uint64(32), k0, k1)
    u1 = (w0 + 0.5) * INV32
    u2 = (w1 + 0.5) * INV32
    z = math.sqrt(-2.0 * math.log(u1)) * math.cos(TWO_PI * u2)
    return z, (w2 + 0.5) * INV32, (w3 + 0.5) * INV32


@jit
def _lifetime(k0, k1, pid, rate):
    if rate <= 0.0:
        return np.inf
    w0, w1, _, _ = philox(MASK32, TAG_LIFETIME, pid & MASK32, pid >> np.uint64(32), k0, k1)
    bits = ((w0 << np.uint64(21)) ^ (w1 >> np.uint64(11))) & np.uint64((1 << 53) - 1)
    u = (bits + 0.5) * 2.0 ** -53
    return -math.log(u) / rate


@jit
def _grid(k, n_steps, dt, horizon):
    if k >= n_steps:
        return horizon
    return k * dt


@jit
def _barrier_at(upper, k, n_steps, dt, horizon, t):
    ta = _grid(k, n_steps, dt, horizon)
    tb = _grid(k + 1, n_steps, dt, horizon)
    fa = upper[k]
    fb = upper[k + 1]
    if tb <= ta:
        return fb
    return fa + (fb - fa) * (t - ta) / (tb - ta)


@jit
def run_replicate(k0, k1, rep, x0, rho, branch_rate, dt, n_steps, horizon,
                  lower_kill, upper, track_cmd, prune, cmd_bound, stop_on_survival,
                  pop_cap, hit_edges, hit_counts, rec_times, rec_tags, bridge,
                  record_clocks, record_leaves):
    """Simulate one replicate.

    Returns ``(leaves, zeta, cmd, created, capped, overflow, n_records)``.
    ``cmd`` is the minimum over surviving lineages of ``x0 - running min``
    (``inf`` if none survived). With ``bridge`` off, killing and the running
    minimum only look at step endpoints. With ``record_clocks`` every drawn
    branching clock is written to the record buffer under ``TAG_CLOCK``; with
    ``record_leaves`` each survivor's final position goes there under ``TAG_LEAF``.
    """
    has_upper = upper.shape[0] > 0
    n_bins = hit_edges.shape[0] - 1
    rec_cap = rec_times.shape[0]

    st_t = np.empty(STACK_CAP)
    st_y = np.empty(STACK_CAP)
    st_m = np.empty(STACK_CAP)
    st_tb = np.empty(STACK_CAP)
    st_pid = np.empty(STACK_CAP, dtype=np.uint64)
    st_k = np.empty(STACK_CAP, dtype=np.int64)

    leaves = 0
    zeta = 0.0
    cmd = np.inf
    created = 1
    capped = False
    overflow = False
    n_rec = 0

    if lower_kill and x0 <= 0.0:
        return leaves, zeta, cmd, created, capped, overflow, n_rec

    pid0 = _root(np.uint64(rep))
    st_t[0] = 0.0
    st_y[0] = x0
    st_m[0] = x0
    st_pid[0] = pid0
    st_tb[0] = _lifetime(k0, k1, pid0, branch_rate)
    st_k[0] = 0
    sp = 1
    if record_clocks:
        if n_rec < rec_cap:
            rec_times[n_rec] = st_tb[0]
            rec_tags[n_rec] = TAG_CLOCK
        n_rec += 1

    while sp > 0:
        sp -= 1
        t = st_t[sp]
        y = st_y[sp]
        m = st_m[sp]
        pid = st_pid[sp]
        tb = st_tb[sp]
        k = st_k[sp]
        while True:
            if k >= n_steps:
                leaves += 1
                cand = x0 - m
                if cand < cmd:
                    cmd = cand
                if record_leaves:
                    if n_rec < rec_cap:
                        rec_times[n_rec] = y
                        rec_tags[n_rec] = TAG_LEAF
                    n_rec += 1
                break
            t_next = _grid(k + 1, n_steps, dt, horizon)
            branching = tb < t_next
            end = tb if branching else t_next
            h = end - t
            z, ua, ub = _draws(k0, k1, pid, k)
            y1 = y + math.sqrt(h) * z - rho * h
            if bridge and h > 0.0:
                d = y1 - y
                mn = 0.5 * (y + y1 - math.sqrt(d * d - 2.0 * h * math.log(ua)))
            else:
                mn = min(y, y1)
            if lower_kill:
                low = 0.0
            elif prune and track_cmd:
                low = x0 - min(cmd_bound, cmd)
            else:
                low = x0 - cmd_bound
            tag = -1
            if mn <= low:
                tag = TAG_ORIGIN
            elif has_upper:
                f0 = _barrier_at(upper, k, n_steps, dt, horizon, t)
                f1 = _barrier_at(upper, k, n_steps, dt, horizon, end)
                e0 = f0 - y
                e1 = f1 - y1
                if e0 <= 0.0 or e1 <= 0.0:
                    tag = TAG_UPPER
                elif bridge and h > 0.0 and ub < math.exp(-2.0 * e0 * e1 / h):
                    tag = TAG_UPPER
            if tag >= 0:
                td = t + 0.5 * h
                if td > zeta:
                    zeta = td
                if tag == TAG_UPPER or lower_kill:
                    if n_rec < rec_cap:
                        rec_times[n_rec] = td
                        rec_tags[n_rec] = tag
                    n_rec += 1
                if tag == TAG_UPPER and n_bins > 0:
                    if td >= hit_edges[0] and td < hit_edges[n_bins]:
                        j = np.searchsorted(hit_edges, td, side="right") - 1
                        hit_counts[j] += 1
                break
            if mn < m:
                m = mn
            y = y1
            t = end
            if branching:
                created += 2
                if created > pop_cap:
                    capped = True
                    return leaves, horizon, cmd, created, capped, overflow, n_rec
                if sp >= STACK_CAP:
                    overflow = True
                    return leaves, horizon, cmd, created, capped, overflow, n_rec
                c1, c2 = _children(pid)
                st_t[sp] = t
                st_y[sp] = y
                st_m[sp] = m
                st_pid[sp] = c2
                life2 = _lifetime(k0, k1, c2, branch_rate)
                life1 = _lifetime(k0, k1, c1, branch_rate)
                st_tb[sp] = t + life2
                st_k[sp] = k
                sp += 1
                pid = c1
                tb = t + life1
                if record_clocks:
                    if n_rec + 1 < rec_cap:
                        rec_times[n_rec] = life1
                        rec_tags[n_rec] = TAG_CLOCK
                        rec_times[n_rec + 1] = life2
                        rec_tags[n_rec + 1] = TAG_CLOCK
                    n_rec += 2
            else:
                k += 1
                if k >= n_steps and stop_on_survival:
                    leaves += 1
                    cand = x0 - m
                    if cand < cmd:
                        cmd = cand
                    return leaves, horizon, cmd, created, capped, overflow, n_rec
    if leaves > 0:
        zeta = horizon
    return leaves, zeta, cmd, created, capped, overflow, n_rec


@jit(nogil=True)
def run_batch(k0, k1, rep0, n, x0, rho, branch_rate, dt, n_steps, horizon,
              lower_kill, upper, track_cmd, prune, cmd_bound, stop_on_survival,
              pop_cap, hit_edges, bridge, out_leaves, out_zeta, out_cmd, out_created,
              out_flags, out_hits):
    """Run replicates ``rep0 .. rep0+n-1``; ``out_flags`` bit 0 = capped, bit 1 = overflow."""
    empty_t = np.empty(0)
    empty_g = np.empty(0, dtype=np.int8)
    for i in range(n):
        res = run_replicate(k0, k1, rep0 + i, x0, rho, branch_rate, dt, n_steps, horizon,
                            lower_kill, upper, track_cmd, prune, cmd_bound,
                            stop_on_survival, pop_cap, hit_edges, out_hits[i],
                            empty_t, empty_g, bridge, False, False)
        out_leaves[i] = res[0]
        out_zeta[i] = res[1]
        out_cmd[i] = res[2]
        out_created[i] = res[3]
        out_flags[i] = (1 if res[4] else 0) | (2 if res[5] else 0)
