"""Breadth-first kernel in plain numpy.

Same model, same keyed draws and same killing rules as the numba kernel, but
all particles of all replicates in a batch advance one grid step at a time as
flat arrays. Branching events inside a step are resolved by repeated passes
over the newborns. Pruning for the maximal displacement uses the fixed
initial bound only, which gives the same answers whenever they are below it.
"""
import numpy as np

from ..rng import child_ids, lifetime_uniform, root_particle_id, step_draws

TAG_ORIGIN = 0
TAG_UPPER = 1
TAG_CLOCK = 2
TAG_LEAF = 3


def _grid(k, n_steps, dt, horizon):
    return horizon if k >= n_steps else k * dt


def _lifetimes(k0, k1, pids, rate):
    if rate <= 0.0:
        return np.full(pids.shape, np.inf)
    return -np.log(lifetime_uniform(k0, k1, pids)) / rate


def _run(k0, k1, reps, x0, rho, branch_rate, dt, n_steps, horizon, lower_kill, upper,
         cmd_bound, pop_cap, hit_edges, bridge, record, record_clocks, record_leaves=False):
    n = reps.size
    has_upper = upper.shape[0] > 0
    n_bins = hit_edges.shape[0] - 1
    zeta = np.zeros(n)
    created = np.ones(n, dtype=np.int64)
    capped = np.zeros(n, dtype=bool)
    hits = np.zeros((n, max(n_bins, 0)), dtype=np.int64)
    rec_t, rec_g = [], []
    low = 0.0 if lower_kill else x0 - cmd_bound

    if lower_kill and x0 <= 0.0:
        return np.zeros(n, dtype=np.int64), zeta, np.full(n, np.inf), created, capped, hits, rec_t, rec_g

    with np.errstate(over="ignore"):
        pid = root_particle_id(reps.astype(np.uint64))
        owner = np.arange(n)
        t = np.zeros(n)
        y = np.full(n, float(x0))
        m = y.copy()
        tb = _lifetimes(k0, k1, pid, branch_rate)
        if record and record_clocks:
            rec_t.append(tb.copy())
            rec_g.append(np.full(n, TAG_CLOCK))

        for k in range(n_steps):
            t_next = _grid(k + 1, n_steps, dt, horizon)
            t_k = _grid(k, n_steps, dt, horizon)
            keep = []
            while t.size:
                branching = tb < t_next
                end = np.where(branching, tb, t_next)
                h = end - t
                z, ua, ub = step_draws(k0, k1, pid, np.uint64(k))
                y1 = y + np.sqrt(h) * z - rho * h
                d = y1 - y
                if bridge:
                    mn = np.where(h > 0.0, 0.5 * (y + y1 - np.sqrt(d * d - 2.0 * h * np.log(ua))),
                                  np.minimum(y, y1))
                else:
                    mn = np.minimum(y, y1)
                dead_low = mn <= low
                tag = np.where(dead_low, TAG_ORIGIN, -1)
                if has_upper:
                    fa, fb = upper[k], upper[k + 1]
                    span = t_next - t_k
                    if span > 0:
                        f0 = fa + (fb - fa) * (t - t_k) / span
                        f1 = fa + (fb - fa) * (end - t_k) / span
                    else:
                        f0 = f1 = np.full(t.shape, fb)
                    e0 = f0 - y
                    e1 = f1 - y1
                    hit = (e0 <= 0.0) | (e1 <= 0.0)
                    if bridge:
                        pos = (h > 0.0) & ~hit
                        p = np.zeros(t.shape)
                        p[pos] = np.exp(-2.0 * e0[pos] * e1[pos] / h[pos])
                        hit |= ub < p
                    tag = np.where(~dead_low & hit, TAG_UPPER, tag)
                dead = tag >= 0
                if dead.any():
                    td = t[dead] + 0.5 * h[dead]
                    tg = tag[dead]
                    od = owner[dead]
                    np.maximum.at(zeta, od, td)
                    if record:
                        sel = (tg == TAG_UPPER) | lower_kill
                        rec_t.append(td[sel])
                        rec_g.append(tg[sel])
                    if n_bins > 0:
                        up = (tg == TAG_UPPER) & (td >= hit_edges[0]) & (td < hit_edges[-1])
                        if up.any():
                            j = np.searchsorted(hit_edges, td[up], side="right") - 1
                            np.add.at(hits, (od[up], j), 1)
                alive = ~dead
                m_new = np.minimum(m, mn)
                br = alive & branching
                st = alive & ~branching
                keep.append((end[st], y1[st], m_new[st], pid[st], tb[st], owner[st]))
                if br.any():
                    np.add.at(created, owner[br], 2)
                    over = created > pop_cap
                    if over.any():
                        capped |= over
                    c1, c2 = child_ids(pid[br])
                    pid = np.concatenate([c1, c2])
                    t = np.concatenate([end[br], end[br]])
                    y = np.concatenate([y1[br], y1[br]])
                    m = np.concatenate([m_new[br], m_new[br]])
                    owner = np.concatenate([owner[br], owner[br]])
                    life = _lifetimes(k0, k1, pid, branch_rate)
                    tb = t + life
                    if record and record_clocks:
                        rec_t.append(life)
                        rec_g.append(np.full(life.shape, TAG_CLOCK))
                    live = ~capped[owner]
                    t, y, m, pid, owner, tb = t[live], y[live], m[live], pid[live], owner[live], tb[live]
                else:
                    t = np.zeros(0)
            t, y, m, pid, tb, owner = (np.concatenate([c[i] for c in keep]) for i in range(6))
            live = ~capped[owner]
            t, y, m, pid, tb, owner = t[live], y[live], m[live], pid[live], tb[live], owner[live]
            if t.size == 0:
                break

    if record and record_leaves and t.size:
        rec_t.append(y.copy())
        rec_g.append(np.full(y.shape, TAG_LEAF))
    leaves = np.bincount(owner, minlength=n).astype(np.int64) if t.size else np.zeros(n, dtype=np.int64)
    cmd = np.full(n, np.inf)
    if t.size:
        np.minimum.at(cmd, owner, x0 - m)
    zeta = np.where(leaves > 0, horizon, zeta)
    zeta = np.where(capped, horizon, zeta)
    leaves = np.where(capped, 0, leaves)
    return leaves, zeta, cmd, created, capped, hits, rec_t, rec_g


def run_replicate(k0, k1, rep, x0, rho, branch_rate, dt, n_steps, horizon,
                  lower_kill, upper, track_cmd, prune, cmd_bound, stop_on_survival,
                  pop_cap, hit_edges, hit_counts, rec_times, rec_tags, bridge,
                  record_clocks, record_leaves):
    """Array version of the depth-first kernel; same signature and return tuple."""
    leaves, zeta, cmd, created, capped, hits, rt, rg = _run(
        k0, k1, np.array([rep], dtype=np.int64), x0, rho, branch_rate, dt, n_steps, horizon,
        lower_kill, upper, cmd_bound, pop_cap, hit_edges, bridge, True, record_clocks,
        record_leaves)
    if hit_counts.size:
        hit_counts += hits[0]
    n_rec = 0
    if rt:
        tt = np.concatenate(rt)
        gg = np.concatenate(rg)
        n_rec = tt.size
        order = np.argsort(tt, kind="stable")
        cap = min(rec_times.shape[0], n_rec)
        rec_times[:cap] = tt[order][:cap]
        rec_tags[:cap] = gg[order][:cap]
    lv = int(leaves[0])
    if stop_on_survival and lv:
        lv = 1
    return lv, float(zeta[0]), float(cmd[0]), int(created[0]), bool(capped[0]), False, n_rec


def run_batch(k0, k1, rep0, n, x0, rho, branch_rate, dt, n_steps, horizon,
              lower_kill, upper, track_cmd, prune, cmd_bound, stop_on_survival,
              pop_cap, hit_edges, bridge, out_leaves, out_zeta, out_cmd, out_created,
              out_flags, out_hits):
    reps = rep0 + np.arange(n, dtype=np.int64)
    leaves, zeta, cmd, created, capped, hits, _, _ = _run(
        k0, k1, reps, x0, rho, branch_rate, dt, n_steps, horizon, lower_kill, upper,
        cmd_bound, pop_cap, hit_edges, bridge, False, False)
    out_leaves[:] = np.minimum(leaves, 1) if stop_on_survival else leaves
    out_zeta[:] = zeta
    out_cmd[:] = cmd
    out_created[:] = created
    out_flags[:] = capped.astype(np.int64)
    if out_hits.size:
        out_hits += hits
