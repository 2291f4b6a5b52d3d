"""The four evaluated resource-management policies behind one interface.

PIAwRO: Phase 1 on DT-predicted data, binary recovery, Phase-2 per-TF AP
power calibration on actual data.  PIA: Phase 1 only.  FIA: Phase 1 fed with
the actual world (oracle bound).  Greedy: fixed bandwidth split, gain-based
RB assignment, per-node water-filling, rate-proportional steering.  Every
policy is evaluated on the actual realization only.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .grid import BwpAllocation, RbGrid
from .model import (AllocationState, FiniteBlocklengthParams, QueueCaps,
                    audit, ds_deadline_misses, mean_queue_bits, objective,
                    rate_ds_all, rate_m_rb_all, rate_s_rb_all,
                    simulate_queues, zero_queue_state)
from .scenario import Scenario
from .solver.sca import (SolverParams, make_spec, prune_links,
                         recover_binaries, sca_phase1, sca_phase2_calibrate)
from .solver.subproblem import LinkSets


@dataclass
class PolicyResult:
    policy: str
    mean_queue_bits: float
    objective_bits_slots: float
    ds_miss_count: int
    ds_demand_count: int
    phase1_iters: list
    phase2_iters: list
    infeasible_tfs: int
    audit_ok: bool
    wall_s: float
    per_cycle_mean_queue: list
    convergence: list = field(default_factory=list)  # (cycle, iter, objective)
    phase2_convergence: list = field(default_factory=list)

    @property
    def mean_queue_mbyte(self):
        return self.mean_queue_bits / 8e6


@dataclass
class RunContext:
    scenario: Scenario
    grid: RbGrid
    channels: ChannelSet
    fbl: FiniteBlocklengthParams
    caps: QueueCaps
    p_max_w: float
    P_max_w: float
    params: SolverParams

    @property
    def svc(self):
        return self.scenario.traffic.ue_service

    @property
    def n_aps(self):
        return self.scenario.geometry.n_aps


def _run_policy(name: str, ctx: RunContext, plan_cycle) -> PolicyResult:
    t0 = time.perf_counter()
    n_ues = len(ctx.svc)
    q = zero_queue_state(ctx.n_aps, n_ues)
    res = PolicyResult(policy=name, mean_queue_bits=0.0,
                       objective_bits_slots=0.0, ds_miss_count=0,
                       ds_demand_count=0, phase1_iters=[], phase2_iters=[],
                       infeasible_tfs=0, audit_ok=True, wall_s=0.0,
                       per_cycle_mean_queue=[])
    for c in range(ctx.grid.n_cy):
        state = plan_cycle(c, q, res)
        trace = simulate_queues(state, ctx.channels.act, ctx.scenario.actual, q)
        res.per_cycle_mean_queue.append(mean_queue_bits(trace))
        res.objective_bits_slots += objective(trace)
        mi, de = ds_deadline_misses(state, ctx.channels.act,
                                    ctx.scenario.actual, ctx.fbl)
        res.ds_miss_count += mi
        res.ds_demand_count += de
        q = trace.final_state()
    res.mean_queue_bits = float(np.mean(res.per_cycle_mean_queue))
    res.wall_s = time.perf_counter() - t0
    return res


def _audit_hard(state, view, realization, ctx) -> bool:
    rep = audit(state, view, realization, ctx.fbl, ctx.caps,
                p_max_w=ctx.p_max_w, P_max_w=ctx.P_max_w)
    return rep.hard_ok()


def run_pia(ctx: RunContext) -> PolicyResult:
    def plan(c, q, res):
        spec = make_spec(ctx.grid, ctx.channels.pred, ctx.scenario.predicted,
                         ctx.svc, c, q, ctx.fbl, ctx.caps, ctx.p_max_w,
                         ctx.P_max_w, ctx.params)
        r1 = sca_phase1(spec, ctx.params)
        res.phase1_iters.append(r1.n_iterations)
        res.convergence.extend((c, it.index, it.objective) for it in r1.iterates)
        state = recover_binaries(spec, r1.solution, ctx.params)
        res.audit_ok &= _audit_hard(state, ctx.channels.pred,
                                    ctx.scenario.predicted, ctx)
        return state
    return _run_policy("PIA", ctx, plan)


def run_piawro(ctx: RunContext, warm_phase2: bool = True) -> PolicyResult:
    def plan(c, q, res):
        spec = make_spec(ctx.grid, ctx.channels.pred, ctx.scenario.predicted,
                         ctx.svc, c, q, ctx.fbl, ctx.caps, ctx.p_max_w,
                         ctx.P_max_w, ctx.params)
        r1 = sca_phase1(spec, ctx.params)
        res.phase1_iters.append(r1.n_iterations)
        res.convergence.extend((c, it.index, it.objective) for it in r1.iterates)
        state = recover_binaries(spec, r1.solution, ctx.params)
        res.audit_ok &= _audit_hard(state, ctx.channels.pred,
                                    ctx.scenario.predicted, ctx)
        r2 = sca_phase2_calibrate(state, ctx.channels.act, ctx.scenario.actual,
                                  ctx.fbl, ctx.caps, ctx.p_max_w, ctx.params,
                                  spec.links, q, warm=warm_phase2)
        res.phase2_iters.append(r2.iters_per_tf)
        res.phase2_convergence.extend(
            (c, tf, it) for tf, it in enumerate(r2.iters_per_tf))
        res.infeasible_tfs += len(r2.flagged_tfs)
        res.audit_ok &= _audit_hard(r2.state, ctx.channels.act,
                                    ctx.scenario.actual, ctx)
        return r2.state
    return _run_policy("PIAwRO", ctx, plan)


def run_fia(ctx: RunContext) -> PolicyResult:
    def plan(c, q, res):
        spec = make_spec(ctx.grid, ctx.channels.act, ctx.scenario.actual,
                         ctx.svc, c, q, ctx.fbl, ctx.caps, ctx.p_max_w,
                         ctx.P_max_w, ctx.params)
        r1 = sca_phase1(spec, ctx.params)
        res.phase1_iters.append(r1.n_iterations)
        res.convergence.extend((c, it.index, it.objective) for it in r1.iterates)
        state = recover_binaries(spec, r1.solution, ctx.params)
        res.audit_ok &= _audit_hard(state, ctx.channels.act,
                                    ctx.scenario.actual, ctx)
        return state
    return _run_policy("FIA", ctx, plan)


# ---------------------------------------------------------------------------
# Greedy baseline
# ---------------------------------------------------------------------------

def water_fill(noise_over_gain: np.ndarray, budget: float) -> np.ndarray:
    """Classic water-filling: maximize sum log(1 + p/n_i) s.t. sum p = budget.

    noise_over_gain holds n_i = sigma^2 / h_i per channel; returns powers.
    """
    n = np.asarray(noise_over_gain, dtype=float)
    if n.size == 0 or budget <= 0:
        return np.zeros_like(n)
    order = np.argsort(n)
    ns = n[order]
    p = np.zeros_like(ns)
    for used in range(len(ns), 0, -1):
        mu = (budget + ns[:used].sum()) / used
        if mu > ns[used - 1] or used == 1:
            p[:used] = np.maximum(mu - ns[:used], 0.0)
            break
    out = np.zeros_like(n)
    out[order] = p
    return out


def _greedy_bwp_split(grid: RbGrid, counts: dict):
    """Fixed split proportional to per-service UE counts on the SB grid,
    honoring the ordering-with-guards geometry (d top, m middle, s bottom)."""
    from .solver.subproblem import ordered_bwp_split
    budget = grid.total_bw_khz - grid.guard_sm_khz - grid.guard_md_khz
    total = max(sum(counts.values()), 1)
    want = {x: (int(np.floor(counts[x] / total * budget / grid.sb_width_khz(x)))
                if counts[x] else 0) for x in ("d", "m", "s")}
    for x in ("d", "m", "s"):
        if counts[x]:
            want[x] = max(want[x], 1)
    return ordered_bwp_split(grid, want)


def greedy_allocation(ctx: RunContext, cycle: int, links: LinkSets
                      ) -> AllocationState:
    grid = ctx.grid
    view = ctx.channels.pred
    svc = ctx.svc
    N, K = ctx.n_aps, len(svc)
    counts = {x: sum(1 for s in svc if s == x) for x in ("d", "m", "s")}
    sel_d, sel_m, sel_s = _greedy_bwp_split(grid, counts)
    state = AllocationState.zeros(grid, N, svc, cycle=cycle)
    for x, sel in (("d", sel_d), ("m", sel_m), ("s", sel_s)):
        for f in sel:
            state.b.b[x][f - 1] = 1
    T = grid.n_tf
    tfs = cycle * T + np.arange(T)
    ntd, ntm, nts = (grid.n_ts_per_tf(x) for x in ("d", "m", "s"))
    wd, wm = grid.dl_window_ts("d"), grid.dl_window_ts("m")
    noise = view.noise
    ds_ues = [k for k, s in enumerate(svc) if s == "d"]
    ms_ues = list(links.sm)
    ss_ues = list(links.ss)

    for tau, tf in enumerate(tfs):
        # BWP d: each AP serves its best DS UE per SB (C6 keeps one AP per UE)
        taken = {}
        for f in sel_d:
            claims = []
            for n in range(N):
                if not ds_ues:
                    break
                gains = view.hd[n, ds_ues, f - 1, tf]
                k = ds_ues[int(np.argmax(gains))]
                claims.append((float(gains.max()), n, k))
            for gain, n, k in sorted(claims, reverse=True):
                if (f, k) not in taken:
                    taken[(f, k)] = n
                    sl = slice(tau * ntd, tau * ntd + wd)
                    state.alpha_d[n, k, f - 1, sl] = 1
        # BWP m: winner takes the SB (best AP pair vs satellite)
        for f in sel_m:
            best = (0.0, None)
            for n, k in links.m:
                g = float(view.hm[n, k, f - 1, tf] / noise["m"])
                if g > best[0]:
                    best = (g, ("ap", n, k))
            for k in ms_ues:
                g = float(view.gm[k, f - 1, tf] / noise["m"])
                if g > best[0]:
                    best = (g, ("sat", k))
            if best[1] is None:
                continue
            if best[1][0] == "ap":
                _, n, k = best[1]
                sl = slice(tau * ntm, tau * ntm + wm)
                state.alpha_m[n, k, f - 1, sl] = 1
            else:
                _, k = best[1]
                sl = slice(tau * ntm, (tau + 1) * ntm)
                state.beta_m[k, f - 1, sl] = 1
        for f in sel_s:
            if not ss_ues:
                continue
            gains = view.gs[ss_ues, f - 1, tf]
            k = ss_ues[int(np.argmax(gains))]
            sl = slice(tau * nts, (tau + 1) * nts)
            state.beta_s[k, f - 1, sl] = 1

        # per-node water-filling on the assigned RBs (interference-blind)
        for n in range(N):
            rbs = []
            for f in sel_d:
                for k in np.nonzero(state.alpha_d[n, :, f - 1, tau * ntd])[0]:
                    rbs.append(("d", int(k), f, noise["d"] / view.hd[n, k, f - 1, tf]))
            for f in sel_m:
                for k in np.nonzero(state.alpha_m[n, :, f - 1, tau * ntm])[0]:
                    rbs.append(("m", int(k), f, noise["m"] / view.hm[n, k, f - 1, tf]))
            if not rbs:
                continue
            p = water_fill(np.array([r[3] for r in rbs]), ctx.p_max_w)
            for (x, k, f, _), pi in zip(rbs, p):
                if x == "d":
                    sl = slice(tau * ntd, tau * ntd + wd)
                    state.p_d[n, k, f - 1, sl] = pi
                else:
                    sl = slice(tau * ntm, tau * ntm + wm)
                    state.p_m[n, k, f - 1, sl] = pi
        rbs = []
        for f in sel_m:
            for k in np.nonzero(state.beta_m[:, f - 1, tau * ntm])[0]:
                rbs.append(("m", int(k), f, noise["m"] / view.gm[k, f - 1, tf]))
        for f in sel_s:
            for k in np.nonzero(state.beta_s[:, f - 1, tau * nts])[0]:
                rbs.append(("s", int(k), f, noise["s"] / view.gs[k, f - 1, tf]))
        if rbs:
            p = water_fill(np.array([r[3] for r in rbs]), ctx.P_max_w)
            for (x, k, f, _), pi in zip(rbs, p):
                if x == "m":
                    sl = slice(tau * ntm, (tau + 1) * ntm)
                    state.P_m[k, f - 1, sl] = pi
                else:
                    sl = slice(tau * nts, (tau + 1) * nts)
                    state.P_s[k, f - 1, sl] = pi

    # zero-power RBs carry no assignment (l0 identity), then the SINR floor
    state.alpha_d[state.p_d <= 0] = 0
    state.alpha_m[state.p_m <= 0] = 0
    state.beta_m[state.P_m <= 0] = 0
    state.beta_s[state.P_s <= 0] = 0
    from .model import sinr_d_all
    while True:
        gam = sinr_d_all(state, view)
        bad = (state.alpha_d > 0) & (gam < ctx.fbl.gamma0 * (1 - 1e-9))
        if not bad.any():
            break
        state.alpha_d[bad] = 0
        state.p_d[bad] = 0.0

    # rate-proportional steering (one pass, predicted rates)
    r_ap = rate_m_rb_all(state, view, "ap").sum(axis=2)    # (N,K,Sm)
    r_sm = rate_m_rb_all(state, view, "sat").sum(axis=1)   # (K,Sm)
    rd = rate_ds_all(state, view, ctx.fbl)                 # (N,K,n_sf)
    for k in ds_ues:
        tot = rd[:, k, :].sum(axis=1)
        share = tot / tot.sum() if tot.sum() > 0 else np.full(N, 1.0 / N)
        state.omega_bar[:, k, 0] = share
        state.omega_tn[:, k, 0] = share
        state.omega_cn[k] = 1.0
    for k in ms_ues:
        ap_rates = r_ap[:, k, :].sum(axis=1)
        sat_rate = r_sm[k, :].sum()
        tot = ap_rates.sum() + sat_rate
        if tot <= 0:
            state.omega_cn[k] = 0.0
            state.omega_tn[:, k, 1] = 1.0 / N
            continue
        state.omega_bar[:, k, 1] = ap_rates / tot
        state.omega_cn[k] = float(ap_rates.sum() / tot)
        if state.omega_cn[k] > 0:
            state.omega_tn[:, k, 1] = ap_rates / ap_rates.sum()
        else:
            state.omega_tn[:, k, 1] = 1.0 / N
    return state


def run_greedy(ctx: RunContext) -> PolicyResult:
    def plan(c, q, res):
        links = prune_links(ctx.channels.pred, ctx.svc, ctx.grid, c,
                            ctx.params.max_serving_aps)
        state = greedy_allocation(ctx, c, links)
        res.phase1_iters.append(0)
        res.audit_ok &= _audit_hard(state, ctx.channels.pred,
                                    ctx.scenario.predicted, ctx)
        return state
    return _run_policy("Greedy", ctx, plan)


POLICIES = {"PIAwRO": run_piawro, "PIA": run_pia, "FIA": run_fia,
            "Greedy": run_greedy}


def run_policy(name: str, ctx: RunContext, **kw) -> PolicyResult:
    return POLICIES[name](ctx, **kw)
