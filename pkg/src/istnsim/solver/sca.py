"""Two-phase successive convex approximation driver.

Phase 1 iterates the convexified full-cycle subproblem on predicted data,
recovers the binaries by l0 thresholding, and Phase 2 re-optimizes the AP
powers per TF against the actual world, warm-started from Phase 1.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ..grid import RbGrid
from ..model import AllocationState, slot_window
from ..units import LN2
from .conic import IpmOptions, solve_cone_program
from .subproblem import (Expansion, Expansion2, LinkSets, Lowered,
                         MNAT_PER_BIT, Phase2Spec, SubproblemSpec,
                         build_phase1, build_phase2, ordered_bwp_split)
from .surrogates import f_ap


@dataclass
class SolverParams:
    eps_frac: float = 1e-3        # l0 threshold as a fraction of the budget
    delta_obj: float = 1e-3       # relative SCA stopping tolerance
    i_max_phase1: int = 50
    i_max_phase2: int = 15
    max_serving_aps: int = 3      # AP pruning per UE
    penalty: float = 3e4          # elastic restoration weight (per Mnat)
    ipm: IpmOptions = field(default_factory=IpmOptions)
    warm_mu: float = 1e-2

    def eps_tn(self, p_max):
        return self.eps_frac * p_max

    def eps_sn(self, P_max):
        return self.eps_frac * P_max


@dataclass
class SolverIterate:
    index: int
    objective: float       # minimized surrogate objective (queues + elastics)
    queue_obj: float
    elastic: float
    pfeas: float
    status: str


@dataclass
class Phase1Result:
    expansion: Expansion
    solution: dict
    iterates: list
    status: str
    spec: SubproblemSpec
    wall_s: float

    @property
    def n_iterations(self):
        return len(self.iterates)

    @property
    def objective(self):
        return self.iterates[-1].objective if self.iterates else np.nan


def prune_links(ch_view, ue_service, grid: RbGrid, cycle: int,
                max_aps: int) -> LinkSets:
    """Top-`max_aps` APs per UE by mean planning gain over the cycle."""
    tfs = np.arange(cycle * grid.n_tf, (cycle + 1) * grid.n_tf)
    d_pairs, m_pairs = [], []
    N = ch_view.hd.shape[0]
    for k, x in enumerate(ue_service):
        if x == "d":
            mean_g = ch_view.hd[:, k][:, :, tfs].mean(axis=(1, 2))
            best = np.argsort(mean_g)[::-1][:max_aps]
            d_pairs.extend((int(n), k) for n in sorted(best))
        elif x == "m":
            mean_g = ch_view.hm[:, k][:, :, tfs].mean(axis=(1, 2))
            best = np.argsort(mean_g)[::-1][:max_aps]
            m_pairs.extend((int(n), k) for n in sorted(best))
    sm = [k for k, x in enumerate(ue_service) if x == "m"]
    ss = [k for k, x in enumerate(ue_service) if x == "s"]
    return LinkSets(d=d_pairs, m=m_pairs, sm=sm, ss=ss)


def make_spec(grid: RbGrid, ch_view, realization, ue_service, cycle: int,
              q_state_bits: dict, fbl, caps, p_max: float, P_max: float,
              params: SolverParams, links: LinkSets | None = None
              ) -> SubproblemSpec:
    tfs = np.arange(cycle * grid.n_tf, (cycle + 1) * grid.n_tf)
    links = links or prune_links(ch_view, ue_service, grid, cycle,
                                 params.max_serving_aps)
    K = len(ue_service)
    T = grid.n_tf
    ds = realization.cycle_ds(grid, cycle) * MNAT_PER_BIT      # (K, n_sf)
    lam_d = np.zeros((K, T))
    for tau in range(T):
        sfs = np.arange(tau * 10, tau * 10 + grid.n_sf_tn_dl)
        if sfs.size:
            lam_d[:, tau] = ds[:, sfs].max(axis=1)
    tfb = realization.cycle_tf(grid, cycle) * MNAT_PER_BIT
    svc = np.array(ue_service)
    lam_m = tfb * (svc == "m")[:, None]
    lam_s = tfb * (svc == "s")[:, None]
    return SubproblemSpec(
        grid=grid, cycle=cycle, links=links,
        hd=ch_view.hd[:, :, :, tfs] / ch_view.noise["d"],
        hm=ch_view.hm[:, :, :, tfs] / ch_view.noise["m"],
        gm=ch_view.gm[:, :, tfs] / ch_view.noise["m"],
        gs=ch_view.gs[:, :, tfs] / ch_view.noise["s"],
        lam_d=lam_d, lam_m=lam_m, lam_s=lam_s,
        q0_tn=q_state_bits["tn"] * MNAT_PER_BIT,
        q0_sm=q_state_bits["sn_m"] * MNAT_PER_BIT,
        q0_ss=q_state_bits["sn_s"] * MNAT_PER_BIT,
        p_max=p_max, P_max=P_max,
        eps_tn=params.eps_tn(p_max), eps_sn=params.eps_sn(P_max),
        gamma0=fbl.gamma0, chi_mnat=fbl.chi(grid) / 1e6,
        cap_tn=caps.tn_bits * MNAT_PER_BIT,
        cap_sm=caps.sn_m_bits * MNAT_PER_BIT,
        cap_ss=caps.sn_s_bits * MNAT_PER_BIT,
        penalty=params.penalty, ue_service=list(ue_service))


def _heuristic_bwp_split(spec: SubproblemSpec):
    """Equal-thirds initial sub-band split over the services with traffic."""
    grid = spec.grid
    budget = grid.total_bw_khz - grid.guard_sm_khz - grid.guard_md_khz
    want = {x: 0 for x in ("d", "m", "s")}
    active = [x for x, l in (("d", spec.links.d), ("m", spec.links.m or spec.links.sm),
                             ("s", spec.links.ss)) if len(l)]
    for x in active:
        want[x] = max(1, int(budget / max(len(active), 1) / grid.sb_width_khz(x)))
    return ordered_bwp_split(grid, want)


def initial_point(spec: SubproblemSpec) -> Expansion:
    """Alg.-1 style start: equal BW split, round-robin RB assignment with the
    best AP per UE, half-budget uniform powers, eta at the implied
    denominators, zeta at the implied RB counts."""
    grid = spec.grid
    links = spec.links
    T = grid.n_tf
    fd, fm, fs = spec.allowed["d"], spec.allowed["m"], spec.allowed["s"]
    posd = {int(f): i for i, f in enumerate(fd)}
    posm = {int(f): i for i, f in enumerate(fm)}
    poss = {int(f): i for i, f in enumerate(fs)}
    sel_d, sel_m, sel_s = _heuristic_bwp_split(spec)

    Ld, Lm, Lsm, Lss = len(links.d), len(links.m), len(links.sm), len(links.ss)
    pd = np.zeros((Ld, len(fd), T))
    pm = np.zeros((Lm, len(fm), T))
    Pm = np.zeros((Lsm, len(fm), T))
    Ps = np.zeros((Lss, len(fs), T))

    ds_ues = sorted({k for _, k in links.d})
    assign_d = []
    for i, f in enumerate(sel_d):
        if not ds_ues:
            break
        k = ds_ues[i % len(ds_ues)]
        cand = [(li, n) for li, (n, k2) in enumerate(links.d) if k2 == k]
        gains = [spec.hd[n, k, f - 1, :].mean() for _, n in cand]
        li = cand[int(np.argmax(gains))][0]
        assign_d.append((li, posd[f]))
    ms_ues = list(links.sm)
    assign_m_ap, assign_m_sat = [], []
    for i, f in enumerate(sel_m):
        if not ms_ues:
            break
        k = ms_ues[i % len(ms_ues)]
        if i % 2 == 0 and k in links.sm:
            assign_m_sat.append((links.sm.index(k), posm[f]))
        else:
            cand = [(li, n) for li, (n, k2) in enumerate(links.m) if k2 == k]
            if cand:
                gains = [spec.hm[n, k, f - 1, :].mean() for _, n in cand]
                li = cand[int(np.argmax(gains))][0]
                assign_m_ap.append((li, posm[f]))
    assign_s = []
    for i, f in enumerate(sel_s):
        if not links.ss:
            break
        assign_s.append((i % Lss, poss[f]))

    ap_cnt = {}
    for li, _ in assign_d:
        n = links.d[li][0]
        ap_cnt[n] = ap_cnt.get(n, 0) + 1
    for li, _ in assign_m_ap:
        n = links.m[li][0]
        ap_cnt[n] = ap_cnt.get(n, 0) + 1
    sat_cnt = len(assign_m_sat) + len(assign_s)
    for li, fi in assign_d:
        n = links.d[li][0]
        pd[li, fi, :] = spec.p_max / (2.0 * ap_cnt[n])
    for li, fi in assign_m_ap:
        n = links.m[li][0]
        pm[li, fi, :] = spec.p_max / (2.0 * ap_cnt[n])
    for si, fi in assign_m_sat:
        Pm[si, fi, :] = spec.P_max / (2.0 * max(sat_cnt, 1))
    for si, fi in assign_s:
        Ps[si, fi, :] = spec.P_max / (2.0 * max(sat_cnt, 1))

    # drop DS links whose interference-free start misses the SINR floor
    for li, fi in assign_d:
        n, k = links.d[li]
        snr = pd[li, fi, :] * spec.hd[n, k, fd[fi] - 1, :]
        if np.any(snr < spec.gamma0):
            pd[li, fi, :] = 0.0

    eta_d = np.zeros_like(pd)
    eta_m = np.zeros_like(pm)
    eta_sm = np.zeros_like(Pm)
    for fi in range(len(fd)):
        for tau in range(T):
            for li, (n, k) in enumerate(links.d):
                gains = np.array([spec.hd[n2, k, fd[fi] - 1, tau]
                                  for (n2, _) in links.d])
                psi = float(gains @ pd[:, fi, tau]) - gains[li] * pd[li, fi, tau]
                eta_d[li, fi, tau] = np.log1p(psi)
    for fi in range(len(fm)):
        for tau in range(T):
            sat_pow = Pm[:, fi, tau]
            for li, (n, k) in enumerate(links.m):
                gains = np.array([spec.hm[n2, k, fm[fi] - 1, tau]
                                  for (n2, _) in links.m])
                psi = float(gains @ pm[:, fi, tau]) - gains[li] * pm[li, fi, tau]
                theta = float(sat_pow.sum()) * spec.gm[k, fm[fi] - 1, tau]
                eta_m[li, fi, tau] = np.log1p(psi + theta)
            for si, k in enumerate(links.sm):
                gains = np.array([spec.hm[n2, k, fm[fi] - 1, tau]
                                  for (n2, _) in links.m])
                theta = float(gains @ pm[:, fi, tau])
                eta_sm[si, fi, tau] = np.log1p(theta)
    zeta = np.zeros((Ld, T))
    for li in range(Ld):
        for tau in range(T):
            zeta[li, tau] = grid.n_ts_per_sf("d") * float(
                f_ap(pd[li, :, tau], spec.eps_tn).sum())
    return Expansion(pd=pd, pm=pm, Pm=Pm, Ps=Ps, eta_d=eta_d, eta_m=eta_m,
                     eta_sm=eta_sm, zeta=np.maximum(zeta, 1e-6))


def _exp_from_solution(sol: dict) -> Expansion:
    def eta(a):
        return np.clip(a, -30.0, 30.0)

    def pw(a):
        return np.clip(a, 0.0, 1e3)

    return Expansion(pd=pw(sol["pd"]), pm=pw(sol["pm"]), Pm=pw(sol["Pm"]),
                     Ps=pw(sol["Ps"]), eta_d=eta(sol["eta_d"]),
                     eta_m=eta(sol["eta_m"]), eta_sm=eta(sol["eta_sm"]),
                     zeta=np.clip(sol["zeta"], 1e-6, 1e6))


def sca_phase1(spec: SubproblemSpec, params: SolverParams,
               exp0: Expansion | None = None) -> Phase1Result:
    t_start = time.perf_counter()
    exp = exp0 or initial_point(spec)
    iterates = []
    z_prev = None
    warm = None
    sol = None
    status = "max_iter"
    stall = 0
    prev_obj = None
    for i in range(1, params.i_max_phase1 + 1):
        low = build_phase1(spec, exp)
        opts = IpmOptions(**{**params.ipm.__dict__})
        if z_prev is not None and z_prev.shape[0] == low.prog.n:
            res = solve_cone_program(low.prog, z0=z_prev, warm=warm,
                                     opts=IpmOptions(**{**opts.__dict__,
                                                        "mu0": params.warm_mu}))
        else:
            res = solve_cone_program(low.prog, opts=opts)
        sol_i = low.extract(res.z)
        obj = res.obj
        iterates.append(SolverIterate(
            index=i, objective=obj, queue_obj=low.queue_objective(res.z),
            elastic=low.elastic_total(res.z), pfeas=res.pfeas,
            status=res.status))
        new_exp = _exp_from_solution(sol_i)
        if res.status != "optimal":
            stall += 1
            if stall >= 2:
                exp = exp.blend(new_exp, 0.5)
                stall = 0
            z_prev = None
            warm = None
            if res.status == "infeasible":
                status = "infeasible"
                if sol is None:
                    sol = sol_i
                break
            continue
        stall = 0
        sol = sol_i
        z_prev = res.z
        warm = res.duals
        if prev_obj is not None and abs(obj - prev_obj) <= \
                params.delta_obj * max(1.0, abs(obj)):
            exp = new_exp
            status = "converged"
            break
        prev_obj = obj
        exp = new_exp
    else:
        status = "max_iter"
    return Phase1Result(expansion=exp, solution=sol, iterates=iterates,
                        status=status, spec=spec,
                        wall_s=time.perf_counter() - t_start)


def _keep_largest(powers: np.ndarray, idxs: list):
    """Zero all but the largest entry among powers[idxs] (tie-break repair)."""
    vals = powers[idxs]
    if (vals > 0).sum() > 1:
        keep = idxs[int(np.argmax(vals))]
        for i in idxs:
            if i != keep:
                powers[i] = 0.0


def recover_binaries(spec: SubproblemSpec, sol: dict,
                     params: SolverParams) -> AllocationState:
    """Eq.-(15)/(9) thresholding plus the feasibility repairs that make the
    recovered allocation satisfy C0-C12 exactly: per-RB tie-breaks (keep the
    stronger power), an SINR-floor drop sweep, and BWP ordering/width
    repairs."""
    grid = spec.grid
    links = spec.links
    T = grid.n_tf
    fd, fm, fs = spec.allowed["d"], spec.allowed["m"], spec.allowed["s"]
    pd = np.where(sol["pd"] >= spec.eps_tn, sol["pd"], 0.0)
    pm = np.where(sol["pm"] >= spec.eps_tn, sol["pm"], 0.0)
    Pm = np.where(sol["Pm"] >= spec.eps_sn, sol["Pm"], 0.0)
    Ps = np.where(sol["Ps"] >= spec.eps_sn, sol["Ps"], 0.0)
    Ld, Lm = len(links.d), len(links.m)

    for fi in range(len(fd)):
        for tau in range(T):
            col = pd[:, fi, tau]
            for n in links.aps_d:
                _keep_largest(col, [li for li, (n2, _) in enumerate(links.d)
                                    if n2 == n])
            for k in sorted({k for _, k in links.d}):
                _keep_largest(col, [li for li, (_, k2) in enumerate(links.d)
                                    if k2 == k])
    for fi in range(len(fm)):
        for tau in range(T):
            colp = pm[:, fi, tau]
            colP = Pm[:, fi, tau]
            for n in links.aps_m:
                _keep_largest(colp, [li for li, (n2, _) in enumerate(links.m)
                                     if n2 == n])
            # C9: one server per MS UE per RB (APs vs satellite)
            for si, k in enumerate(links.sm):
                lis = [li for li, (_, k2) in enumerate(links.m) if k2 == k]
                best_ap = max((colp[li] for li in lis), default=0.0)
                if colP[si] > 0 and best_ap > 0:
                    if colP[si] >= best_ap:
                        for li in lis:
                            colp[li] = 0.0
                    else:
                        colP[si] = 0.0
            if len(links.sm) > 1:
                _keep_largest(colP, list(range(len(links.sm))))
    for fi in range(len(fs)):
        for tau in range(T):
            if len(links.ss) > 1:
                _keep_largest(Ps[:, fi, tau], list(range(len(links.ss))))

    # C10 drop sweep on the planning channels (dropping only helps others)
    changed = True
    while changed:
        changed = False
        for fi in range(len(fd)):
            f0 = fd[fi] - 1
            for tau in range(T):
                col = pd[:, fi, tau]
                act = np.nonzero(col)[0]
                for li in act:
                    n, k = links.d[li]
                    gains = np.array([spec.hd[n2, k, f0, tau]
                                      for (n2, _) in links.d])
                    tot = float(gains @ col)
                    own = gains[li] * col[li]
                    sinr = own / (tot - own + 1.0)
                    if sinr < spec.gamma0 * (1 - 1e-9):
                        col[li] = 0.0
                        changed = True

    # aggregate powers (Eq. 9 proxies) and BWP bits
    mult_d = float(grid.dl_window_ts("d"))
    mult_m_ap = float(grid.dl_window_ts("m"))
    mult_m_sat = float(grid.n_ts_per_tf("m"))
    mult_s = float(grid.n_ts_per_tf("s"))

    def aggregates():
        ad = np.zeros(grid.n_sb["d"])
        am = np.zeros(grid.n_sb["m"])
        as_ = np.zeros(grid.n_sb["s"])
        for fi, f in enumerate(fd):
            ad[f - 1] = mult_d * pd[:, fi, :].sum()
        for fi, f in enumerate(fm):
            am[f - 1] = (mult_m_ap * pm[:, fi, :].sum()
                         + mult_m_sat * Pm[:, fi, :].sum())
        for fi, f in enumerate(fs):
            as_[f - 1] = mult_s * Ps[:, fi, :].sum()
        return ad, am, as_

    def zero_sb(x, f_abs):
        if x == "d":
            pd[:, int(np.where(fd == f_abs)[0][0]), :] = 0.0
        elif x == "m":
            i = int(np.where(fm == f_abs)[0][0])
            pm[:, i, :] = 0.0
            Pm[:, i, :] = 0.0
        else:
            Ps[:, int(np.where(fs == f_abs)[0][0]), :] = 0.0

    from ..grid import BwpAllocation, overlap_index_sets, validate_bwp
    eps_any = 0.5 * min(spec.eps_tn, spec.eps_sn)
    for _ in range(grid.n_sb["s"] + grid.n_sb["m"] + grid.n_sb["d"]):
        ad, am, as_ = aggregates()
        alloc = BwpAllocation({"d": (ad > eps_any).astype(int),
                               "m": (am > eps_any).astype(int),
                               "s": (as_ > eps_any).astype(int)})
        rep = validate_bwp(grid, alloc)
        if rep.feasible:
            break
        if rep.violations["C1"] or rep.violations["C2"]:
            x, f = (rep.violations["C1"] + rep.violations["C2"])[0]
            ovl = overlap_index_sets(grid, x, f)
            own = {"d": ad, "m": am}[x][f - 1]
            mass = {}
            for xp, rng in ovl.items():
                arr = {"m": am, "s": as_}[xp]
                for j in rng:
                    if arr[j - 1] > eps_any:
                        mass[(xp, j)] = arr[j - 1]
            if own >= sum(mass.values()):
                for (xp, j) in mass:
                    zero_sb(xp, j)
            else:
                zero_sb(x, f)
        elif rep.violations["C3"]:
            used = [("d", f + 1, ad[f]) for f in np.nonzero(ad > eps_any)[0]]
            used += [("m", f + 1, am[f]) for f in np.nonzero(am > eps_any)[0]]
            used += [("s", f + 1, as_[f]) for f in np.nonzero(as_ > eps_any)[0]]
            x, f, _ = min(used, key=lambda u: u[2])
            zero_sb(x, f)
    ad, am, as_ = aggregates()
    alloc = BwpAllocation({"d": (ad > eps_any).astype(int),
                           "m": (am > eps_any).astype(int),
                           "s": (as_ > eps_any).astype(int)})

    # broadcast the tied solution to per-TS arrays
    N = spec.hd.shape[0]
    state = AllocationState.zeros(grid, N, spec.ue_service, cycle=spec.cycle)
    state.b = alloc
    wd = grid.dl_window_ts("d")
    wm = grid.dl_window_ts("m")
    ntd, ntm, nts = (grid.n_ts_per_tf(x) for x in ("d", "m", "s"))
    for li, (n, k) in enumerate(links.d):
        for fi, f in enumerate(fd):
            for tau in range(T):
                if pd[li, fi, tau] > 0 and alloc.b["d"][f - 1]:
                    sl = slice(tau * ntd, tau * ntd + wd)
                    state.alpha_d[n, k, f - 1, sl] = 1
                    state.p_d[n, k, f - 1, sl] = pd[li, fi, tau]
    for li, (n, k) in enumerate(links.m):
        for fi, f in enumerate(fm):
            for tau in range(T):
                if pm[li, fi, tau] > 0 and alloc.b["m"][f - 1]:
                    sl = slice(tau * ntm, tau * ntm + wm)
                    state.alpha_m[n, k, f - 1, sl] = 1
                    state.p_m[n, k, f - 1, sl] = pm[li, fi, tau]
    for si, k in enumerate(links.sm):
        for fi, f in enumerate(fm):
            for tau in range(T):
                if Pm[si, fi, tau] > 0 and alloc.b["m"][f - 1]:
                    sl = slice(tau * ntm, (tau + 1) * ntm)
                    state.beta_m[k, f - 1, sl] = 1
                    state.P_m[k, f - 1, sl] = Pm[si, fi, tau]
    for si, k in enumerate(links.ss):
        for fi, f in enumerate(fs):
            for tau in range(T):
                if Ps[si, fi, tau] > 0 and alloc.b["s"][f - 1]:
                    sl = slice(tau * nts, (tau + 1) * nts)
                    state.beta_s[k, f - 1, sl] = 1
                    state.P_s[k, f - 1, sl] = Ps[si, fi, tau]

    # traffic splits: omega_bar -> (omega_cn, omega_tn), exact simplexes;
    # sub-1e-6 residuals are solver dust, not routing decisions
    omd = np.clip(sol["ombar_d"], 0.0, 1.0)
    omm = np.clip(sol["ombar_m"], 0.0, 1.0)
    omd[omd < 1e-6] = 0.0
    omm[omm < 1e-6] = 0.0
    for k in sorted({k for _, k in links.d}):
        lis = [li for li, (_, k2) in enumerate(links.d) if k2 == k]
        tot = omd[lis].sum()
        state.omega_cn[k] = 1.0
        if tot <= 1e-12:
            # route everything to the AP actually carrying this UE's power
            best = lis[int(np.argmax([pd[li].sum() for li in lis]))]
            omd[lis] = 0.0
            omd[best] = 1.0
            tot = 1.0
        for li in lis:
            n = links.d[li][0]
            val = omd[li] / tot
            state.omega_bar[n, k, 0] = val
            state.omega_tn[n, k, 0] = val
    for k in links.sm:
        lis = [li for li, (_, k2) in enumerate(links.m) if k2 == k]
        tot = min(float(omm[lis].sum()), 1.0) if lis else 0.0
        state.omega_cn[k] = tot
        for li in lis:
            n = links.m[li][0]
            val = min(omm[li], 1.0)
            state.omega_bar[n, k, 1] = val
        ssum = state.omega_bar[:, k, 1].sum()
        if ssum > 1.0:
            state.omega_bar[:, k, 1] /= ssum
            state.omega_cn[k] = 1.0
        if state.omega_cn[k] > 1e-12:
            state.omega_tn[:, k, 1] = state.omega_bar[:, k, 1] / state.omega_cn[k]
            tot2 = state.omega_tn[:, k, 1].sum()
            if tot2 > 0:
                state.omega_tn[:, k, 1] /= tot2
        elif lis:
            for li in lis:
                state.omega_tn[links.m[li][0], k, 1] = 1.0 / len(lis)
    return state


@dataclass
class Phase2Result:
    state: AllocationState
    iters_per_tf: list
    flagged_tfs: list
    wall_s: float


def sca_phase2_calibrate(state: AllocationState, ch_act_view, realization,
                         fbl, caps, p_max: float, params: SolverParams,
                         links: LinkSets, q_state_bits: dict,
                         warm: bool = True) -> Phase2Result:
    """Per-TF AP power recalibration against the actual world (Alg. 1 phase 2).

    Binaries, satellite powers and splits stay fixed; active DS links that
    cannot meet the SINR floor under the actual channels are deactivated and
    metered as misses.  Returns the calibrated state and per-TF iteration
    counts; the realized queue state threads through the TFs.
    """
    from ..model import simulate_queues
    t_start = time.perf_counter()
    grid = state.grid
    T = grid.n_tf
    cycle = state.cycle
    K = len(state.ue_service)
    ntd, ntm = grid.n_ts_per_tf("d"), grid.n_ts_per_tf("m")
    wd, wm_ts = grid.dl_window_ts("d"), grid.dl_window_ts("m")
    noise = ch_act_view.noise
    eps_tn = params.eps_tn(p_max)
    iters_per_tf = []
    flagged = []
    q_state = {k2: v.copy() for k2, v in q_state_bits.items()}
    ues_m = list(links.sm)
    pairs_m = list(links.m)
    omd = {(n, k): state.omega_bar[n, k, 0] for n, k in links.d}
    omm = {(n, k): state.omega_bar[n, k, 1] for n, k in links.m}

    for tau in range(T):
        tf_glob = cycle * T + tau
        ts0d, ts0m = tau * ntd, tau * ntm
        d_rbs, pd0 = [], []
        for n, k in links.d:
            for f0 in np.nonzero(state.alpha_d[n, k, :, ts0d])[0]:
                d_rbs.append(((n, k), int(f0)))
                pd0.append(state.p_d[n, k, f0, ts0d])
        m_rbs, pm0 = [], []
        for n, k in links.m:
            for f0 in np.nonzero(state.alpha_m[n, k, :, ts0m])[0]:
                m_rbs.append(((n, k), int(f0)))
                pm0.append(state.p_m[n, k, f0, ts0m])
        sm_rbs = []
        for k in ues_m:
            for f0 in np.nonzero(state.beta_m[k, :, ts0m])[0]:
                sm_rbs.append((k, int(f0), float(state.P_m[k, f0, ts0m])))
        ds_count = {}
        for (pair, f0) in d_rbs:
            ds_count[pair] = ds_count.get(pair, 0) + grid.n_ts_per_sf("d")
        n_sf_win = grid.n_sf_tn_dl
        lam_d_sf = np.zeros((K, n_sf_win))
        ds_all = realization.cycle_ds(grid, cycle)
        for v in range(n_sf_win):
            lam_d_sf[:, v] = ds_all[:, tau * 10 + v] * MNAT_PER_BIT
        lam_m = realization.cycle_tf(grid, cycle)[:, tau] * MNAT_PER_BIT
        svc = np.array(state.ue_service)
        lam_m = lam_m * (svc == "m")

        spec2 = Phase2Spec(
            grid=grid, d_rbs=d_rbs, m_rbs=m_rbs, sm_rbs=sm_rbs,
            hd=ch_act_view.hd[:, :, :, tf_glob] / noise["d"],
            hm=ch_act_view.hm[:, :, :, tf_glob] / noise["m"],
            gm=ch_act_view.gm[:, :, tf_glob] / noise["m"],
            pairs_m=pairs_m, ues_m=ues_m, ombar_d=omd, ombar_m=omm,
            lam_d_sf=lam_d_sf, lam_m=lam_m,
            q0_tn=q_state["tn"] * MNAT_PER_BIT,
            q0_sm=q_state["sn_m"] * MNAT_PER_BIT,
            ds_count=ds_count, p_max=p_max, gamma0=fbl.gamma0,
            chi_mnat=fbl.chi(grid) / 1e6,
            cap_tn=caps.tn_bits * MNAT_PER_BIT,
            cap_sm=caps.sn_m_bits * MNAT_PER_BIT,
            penalty=params.penalty)

        nd, nm = len(d_rbs), len(m_rbs)
        if warm:
            pd_init = np.asarray(pd0)
            pm_init = np.asarray(pm0)
        else:
            cnt = {}
            for (pair, _f) in d_rbs + m_rbs:
                cnt[pair[0]] = cnt.get(pair[0], 0) + 1
            pd_init = np.array([p_max / (2.0 * cnt[pair[0]])
                                for pair, _ in d_rbs])
            pm_init = np.array([p_max / (2.0 * cnt[pair[0]])
                                for pair, _ in m_rbs])
        eta_d0 = np.zeros(nd)
        for i, ((n, k), f0) in enumerate(d_rbs):
            psi = sum(pd_init[j] * spec2.hd[d_rbs[j][0][0], k, f0]
                      for j in range(nd)
                      if d_rbs[j][1] == f0 and j != i)
            eta_d0[i] = np.log1p(psi)
        eta_m0 = np.zeros(nm)
        for i, ((n, k), f0) in enumerate(m_rbs):
            psi = sum(pm_init[j] * spec2.hm[m_rbs[j][0][0], k, f0]
                      for j in range(nm)
                      if m_rbs[j][1] == f0 and j != i)
            theta = sum(P * spec2.gm[k, f2] for (_k2, f2, P) in sm_rbs
                        if f2 == f0)
            eta_m0[i] = np.log1p(psi + theta)
        eta_sm0 = np.zeros(len(sm_rbs))
        for i, (k, f0, P) in enumerate(sm_rbs):
            theta = sum(pm_init[j] * spec2.hm[m_rbs[j][0][0], k, f0]
                        for j in range(nm) if m_rbs[j][1] == f0)
            eta_sm0[i] = np.log1p(theta)
        exp2 = Expansion2(pd=pd_init, pm=pm_init, eta_d=eta_d0,
                          eta_m=eta_m0, eta_sm=eta_sm0)

        z_prev = None
        prev_obj = None
        sol2 = None
        it_count = 0
        for i in range(1, params.i_max_phase2 + 1):
            low = build_phase2(spec2, exp2)
            if z_prev is not None and z_prev.shape[0] == low.prog.n:
                res = solve_cone_program(
                    low.prog, z0=z_prev,
                    opts=IpmOptions(**{**params.ipm.__dict__,
                                       "mu0": params.warm_mu}))
            else:
                res = solve_cone_program(low.prog, opts=params.ipm)
            it_count = i
            sol_i = low.extract(res.z)
            if res.status == "optimal":
                sol2 = sol_i
                z_prev = res.z
            exp2 = Expansion2(pd=sol_i["pd"], pm=sol_i["pm"],
                              eta_d=sol_i["eta_d"], eta_m=sol_i["eta_m"],
                              eta_sm=sol_i["eta_sm"])
            if prev_obj is not None and abs(res.obj - prev_obj) <= \
                    params.delta_obj * max(1.0, abs(res.obj)):
                break
            prev_obj = res.obj
        iters_per_tf.append(it_count)
        if sol2 is None:
            sol2 = sol_i
            flagged.append(tau)
        elif low.elastic_total(z_prev if z_prev is not None else res.z) > 1e-4:
            flagged.append(tau)

        # write back calibrated powers; deactivate links that cannot meet
        # the floor (e10 active) or fell below the l0 threshold
        for i, ((n, k), f0) in enumerate(d_rbs):
            p = float(sol2["pd"][i])
            drop = p < eps_tn or float(sol2["e10"][i]) > 1e-6
            sl = slice(ts0d, ts0d + wd)
            if drop:
                state.p_d[n, k, f0, sl] = 0.0
                state.alpha_d[n, k, f0, sl] = 0
            else:
                state.p_d[n, k, f0, sl] = p
        for i, ((n, k), f0) in enumerate(m_rbs):
            p = float(sol2["pm"][i])
            sl = slice(ts0m, ts0m + wm_ts)
            if p < eps_tn:
                state.p_m[n, k, f0, sl] = 0.0
                state.alpha_m[n, k, f0, sl] = 0
            else:
                state.p_m[n, k, f0, sl] = p

        trace = simulate_queues(state, ch_act_view, realization,
                                q_init=q_state_bits)
        end_m = (tau + 1) * ntm
        end_s = (tau + 1) * grid.n_ts_per_tf("s")
        q_state = {"tn": trace.q_tn[:, :, end_m].copy(),
                   "sn_m": trace.q_sn_m[:, end_m].copy(),
                   "sn_s": trace.q_sn_s[:, end_s].copy()}
    return Phase2Result(state=state, iters_per_tf=iters_per_tf,
                        flagged_tfs=flagged,
                        wall_s=time.perf_counter() - t_start)
