"""Lowering of the convexified subproblems into the solver's canonical form.

Phase 1 carries the full variable set (traffic splits, AP/satellite powers,
per-RB rate bounds, log-denominator bounds eta, RB-count bounds zeta, queue
upper bounds) over one time cycle; Phase 2 is the per-TF power-calibration
problem with fixed binaries and satellite powers.  Solver-internal units:
powers in watts, channel gains normalized by the per-service noise power,
data amounts in Mnat (1e6 nats), rates in Mnat/s.

Solver-internal restriction: powers, rates and eta are tied across the TSs of
a TF (channels are constant within a TF and Phase-1 arrivals are per-TF
means), which keeps the lowered programs at desk scale; queue bounds remain
per-TS.  Tied values broadcast back to per-TS allocations.
"""

from dataclasses import dataclass, field

import numpy as np

from ..grid import RbGrid, overlap_index_sets
from ..units import LN2
from .conic import Builder
from .surrogates import f_ap_lin_coeffs

MNAT_PER_BIT = LN2 / 1e6


@dataclass
class LinkSets:
    """Pruned transmitter-receiver pairs carrying optimization variables."""
    d: list          # (n, k) with k in U^d
    m: list          # (n, k) with k in U^m
    sm: list         # k in U^m (satellite side)
    ss: list         # k in U^s

    @property
    def aps_d(self):
        return sorted({n for n, _ in self.d})

    @property
    def aps_m(self):
        return sorted({n for n, _ in self.m})


@dataclass
class SubproblemSpec:
    """Static per-cycle data consumed by the Phase-1 builder."""
    grid: RbGrid
    cycle: int
    links: LinkSets
    # normalized power gains, sliced to the cycle's TFs: h/sigma^2
    hd: np.ndarray       # (N, K, Fd_full, T)
    hm: np.ndarray
    gm: np.ndarray       # (K, Fm_full, T)
    gs: np.ndarray
    lam_d: np.ndarray    # (K, T) Mnat per window-SF epoch
    lam_m: np.ndarray    # (K, T) Mnat injected at TF start
    lam_s: np.ndarray
    q0_tn: np.ndarray    # (N, K) Mnat
    q0_sm: np.ndarray    # (K,)
    q0_ss: np.ndarray
    p_max: float
    P_max: float
    eps_tn: float
    eps_sn: float
    gamma0: float
    chi_mnat: float      # DS dispersion penalty, Mnat/s
    cap_tn: float        # queue caps, Mnat
    cap_sm: float
    cap_ss: float
    penalty: float = 3e4
    ue_service: list = field(default_factory=list)

    @property
    def allowed(self):
        return {x: np.asarray(self.grid.allowed_sb[x], dtype=int)
                for x in ("d", "m", "s")}

    def w_mnat(self, x):
        """Sub-band width in MHz == Mnat/s per unit log-rate."""
        return self.grid.sb_width_khz(x) * 1e3 / 1e6

    def t_slot_s(self, x):
        return self.grid.ts_duration_ms(x) * 1e-3


@dataclass
class Expansion:
    """SCA expansion point: the previous iterate's powers and bounds."""
    pd: np.ndarray        # (Ld, Fd', T)
    pm: np.ndarray        # (Lm, Fm', T)
    Pm: np.ndarray        # (Lsm, Fm', T)
    Ps: np.ndarray        # (Lss, Fs', T)
    eta_d: np.ndarray
    eta_m: np.ndarray
    eta_sm: np.ndarray
    zeta: np.ndarray      # (Ld, T)

    def blend(self, other: "Expansion", w: float) -> "Expansion":
        return Expansion(*[(1 - w) * a + w * b for a, b in zip(
            (self.pd, self.pm, self.Pm, self.Ps, self.eta_d, self.eta_m,
             self.eta_sm, self.zeta),
            (other.pd, other.pm, other.Pm, other.Ps, other.eta_d,
             other.eta_m, other.eta_sm, other.zeta))])


@dataclass
class Lowered:
    prog: object
    spec: object
    names: list
    shapes: dict
    queue_cost_idx: np.ndarray
    elastic_cost_idx: np.ndarray

    def extract(self, z) -> dict:
        out = {}
        for name in self.names:
            out[name] = z[self.prog.var_slices[name]].reshape(self.shapes[name])
        return out

    def queue_objective(self, z) -> float:
        return float(z[self.queue_cost_idx].sum()) if self.queue_cost_idx.size else 0.0

    def elastic_total(self, z) -> float:
        return float(z[self.elastic_cost_idx].sum()) if self.elastic_cost_idx.size else 0.0


def _flat(shape):
    return int(np.prod(shape)) if len(shape) else 1


def ordered_bwp_split(grid: RbGrid, want: dict):
    """Pick non-overlapping sub-band sets (d top, m middle, s bottom with
    guards) of roughly the requested sizes from the allowed lists.

    Searches (n_d, n_m) downward and returns the first combination that gives
    every requested service at least one SB; failing that, the combination
    serving the most services.
    """
    al = {x: list(grid.allowed_sb[x]) for x in ("d", "m", "s")}
    budget = grid.total_bw_khz - grid.guard_sm_khz - grid.guard_md_khz
    best = ([], [], [])
    best_score = -1
    for nd in range(min(want["d"], len(al["d"])), -1, -1):
        sel_d = al["d"][:nd]
        fmax_d = max(sel_d) if sel_d else 0
        cand_m = [f for f in al["m"] if not sel_d or f >= 2 * fmax_d + 2]
        for nm in range(min(want["m"], len(cand_m)), -1, -1):
            sel_m = cand_m[:nm]
            fmax_m = max(sel_m) if sel_m else 0
            s_lo = max(4 * fmax_d + 3 if sel_d else 1,
                       2 * fmax_m + 2 if sel_m else 1)
            cand_s = [f for f in al["s"] if f >= s_lo]
            sel_s = cand_s[:min(want["s"], len(cand_s))]
            used = (grid.sb_width_khz("d") * len(sel_d)
                    + grid.sb_width_khz("m") * len(sel_m)
                    + grid.sb_width_khz("s") * len(sel_s))
            if used > budget:
                continue
            score = sum(1 for x, sel in (("d", sel_d), ("m", sel_m),
                                         ("s", sel_s))
                        if not want[x] or sel)
            if score == 3:
                return sel_d, sel_m, sel_s
            if score > best_score:
                best_score = score
                best = (sel_d, sel_m, sel_s)
    return best


def build_phase1(spec: SubproblemSpec, exp: Expansion) -> Lowered:
    grid = spec.grid
    T = grid.n_tf
    allowed = spec.allowed
    fd, fm, fs = allowed["d"], allowed["m"], allowed["s"]
    Fd, Fm, Fs = len(fd), len(fm), len(fs)
    links = spec.links
    Ld, Lm, Lsm, Lss = len(links.d), len(links.m), len(links.sm), len(links.ss)
    Sm = grid.n_ts_per_cycle("m")
    Ss = grid.n_ts_per_cycle("s")
    n_ts_m = grid.n_ts_per_tf("m")
    n_ts_s = grid.n_ts_per_tf("s")
    win_m = grid.dl_slot_mask("m")
    w_d, w_m, w_s = spec.w_mnat("d"), spec.w_mnat("m"), spec.w_mnat("s")
    t_d, t_m, t_s = spec.t_slot_s("d"), spec.t_slot_s("m"), spec.t_slot_s("s")
    nts_sf_d = grid.n_ts_per_sf("d")
    wslots_d = grid.dl_window_ts("d")
    wslots_m = int(win_m.sum())
    L0 = float(np.log1p(spec.gamma0))

    # gains restricted to allowed SBs (0-based absolute -1)
    hd = spec.hd[:, :, fd - 1, :]
    hm = spec.hm[:, :, fm - 1, :]
    gm = spec.gm[:, fm - 1, :]
    gs = spec.gs[:, fs - 1, :]

    b = Builder()
    shapes, names = {}, []

    def reg(name, shape, **kw):
        idx = b.add_var(name, _flat(shape), **kw)
        shapes[name] = shape
        names.append(name)
        return idx.reshape(shape) if shape else idx

    ombar_d = reg("ombar_d", (Ld,), nonneg=True, init=0.0)
    ombar_m = reg("ombar_m", (Lm,), nonneg=True, init=0.0)
    pd = reg("pd", (Ld, Fd, T), nonneg=True, init=exp.pd.ravel())
    rho_d = reg("rho_d", (Ld, Fd, T), init=0.0)
    eta_d = reg("eta_d", (Ld, Fd, T), init=exp.eta_d.ravel())
    pm = reg("pm", (Lm, Fm, T), nonneg=True, init=exp.pm.ravel())
    rho_m = reg("rho_m", (Lm, Fm, T), init=0.0)
    eta_m = reg("eta_m", (Lm, Fm, T), init=exp.eta_m.ravel())
    Pm = reg("Pm", (Lsm, Fm, T), nonneg=True, init=exp.Pm.ravel())
    rho_sm = reg("rho_sm", (Lsm, Fm, T), init=0.0)
    eta_sm = reg("eta_sm", (Lsm, Fm, T), init=exp.eta_sm.ravel())
    rho_sm_off = reg("rho_sm_off", (Lsm, Fm, T), init=0.0)
    Ps = reg("Ps", (Lss, Fs, T), nonneg=True, init=exp.Ps.ravel())
    rho_ss = reg("rho_ss", (Lss, Fs, T), init=0.0)
    zeta = reg("zeta", (Ld, T), nonneg=True, init=np.maximum(exp.zeta, 1e-6).ravel())
    rd = reg("rd", (Ld, T), init=0.0)
    qtn = reg("qtn", (Lm, Sm), nonneg=True, init=1e-4)
    qsm = reg("qsm", (Lsm, Sm), nonneg=True, init=1e-4)
    qss = reg("qss", (Lss, Ss), nonneg=True, init=1e-4)
    sv_m = reg("sv_m", (Lm, T), init=0.0)
    sv_sm_on = reg("sv_sm_on", (Lsm, T), init=0.0)
    sv_sm_off = reg("sv_sm_off", (Lsm, T), init=0.0)
    sv_ss = reg("sv_ss", (Lss, T), init=0.0)
    aggd = reg("aggd", (Fd,), init=0.0)
    aggm = reg("aggm", (Fm,), init=0.0)
    aggs = reg("aggs", (Fs,), init=0.0)
    e14 = reg("e14", (Ld, T), nonneg=True, cost=spec.penalty, init=1e-6)
    b.set_cost(qtn.ravel(), 1.0)
    b.set_cost(qsm.ravel(), 1.0)
    b.set_cost(qss.ravel(), 1.0)

    # rho inits consistent with the cones at the expansion point
    def set_rho_init(rho_idx, t0, eta0=None):
        v = np.log(np.maximum(t0, 1e-12))
        if eta0 is not None:
            v = v - eta0
        b.set_init(rho_idx.ravel(), np.maximum(v, 0.0).ravel())

    # ---------------- BWP d: cones, SINR floor, rate aggregation ----------
    a_pd, b_pd = f_ap_lin_coeffs(exp.pd, spec.eps_tn)
    hd_own = np.array([[[hd[n, k, fi, tau] for tau in range(T)]
                        for fi in range(Fd)] for (n, k) in links.d])
    t0_d = np.zeros((Ld, Fd, T))
    for fi in range(Fd):
        for tau in range(T):
            pvec = exp.pd[:, fi, tau]
            for li, (n, k) in enumerate(links.d):
                gains = np.array([hd[n2, k, fi, tau] for (n2, _k2) in links.d])
                t0_d[li, fi, tau] = float(gains @ pvec) + 1.0
    set_rho_init(rho_d, t0_d, exp.eta_d)
    for fi in range(Fd):
        for tau in range(T):
            cols_all = pd[:, fi, tau]
            for li, (n, k) in enumerate(links.d):
                gains = np.array([hd[n2, k, fi, tau] for (n2, _k2) in links.d])
                b.add_log(cols_all, gains, 1.0,
                          v_cols=[rho_d[li, fi, tau], eta_d[li, fi, tau]],
                          v_vals=[1.0, 1.0], v_const=0.0,
                          t_init=t0_d[li, fi, tau])
                oth = np.arange(Ld) != li
                e0 = np.exp(exp.eta_d[li, fi, tau])
                b.add_le(np.append(cols_all[oth], eta_d[li, fi, tau]),
                         np.append(gains[oth], -e0),
                         e0 * (1.0 - exp.eta_d[li, fi, tau]) - 1.0)
                # ln(1+gamma) >= f_ap_lin(p) ln(1+gamma0)
                b.add_le([pd[li, fi, tau], rho_d[li, fi, tau]],
                         [L0 * a_pd[li, fi, tau], -1.0],
                         -L0 * b_pd[li, fi, tau])
    # C~5 (x=d), C~6
    for fi in range(Fd):
        for tau in range(T):
            for n in links.aps_d:
                lis = [li for li, (n2, _) in enumerate(links.d) if n2 == n]
                b.add_le(pd[lis, fi, tau], a_pd[lis, fi, tau],
                         1.0 - float(b_pd[lis, fi, tau].sum()))
            for k in sorted({k for (_, k) in links.d}):
                lis = [li for li, (_, k2) in enumerate(links.d) if k2 == k]
                b.add_le(pd[lis, fi, tau], a_pd[lis, fi, tau],
                         1.0 - float(b_pd[lis, fi, tau].sum()))
    # DS rate, RB count, deadline (per link, TF)
    a_z = 0.5 / np.sqrt(np.maximum(exp.zeta, 1e-6))
    b_z = 0.5 * np.sqrt(np.maximum(exp.zeta, 1e-6))
    for li, (n, k) in enumerate(links.d):
        for tau in range(T):
            cols = np.concatenate([[rd[li, tau]], rho_d[li, :, tau],
                                   [zeta[li, tau]]])
            vals = np.concatenate([[1.0], np.full(Fd, -nts_sf_d * w_d),
                                   [spec.chi_mnat * a_z[li, tau]]])
            b.add_le(cols, vals, -spec.chi_mnat * b_z[li, tau])
            cols = np.append(pd[li, :, tau], zeta[li, tau])
            vals = np.append(nts_sf_d * a_pd[li, :, tau], -1.0)
            b.add_le(cols, vals, -nts_sf_d * float(b_pd[li, :, tau].sum()))
            lam = spec.lam_d[k, tau]
            b.add_le([ombar_d[li], rd[li, tau], e14[li, tau]],
                     [lam, -t_d, -1.0], 0.0)

    # ---------------- BWP m: AP-served and satellite-served cones ---------
    a_pm, b_pm = f_ap_lin_coeffs(exp.pm, spec.eps_tn)
    a_Pm, b_Pm = f_ap_lin_coeffs(exp.Pm, spec.eps_sn)
    for fi in range(Fm):
        for tau in range(T):
            pcols = pm[:, fi, tau]
            Pcols = Pm[:, fi, tau]
            p0 = exp.pm[:, fi, tau]
            P0 = exp.Pm[:, fi, tau]
            for li, (n, k) in enumerate(links.m):
                gains_p = np.array([hm[n2, k, fi, tau] for (n2, _k2) in links.m])
                gains_P = np.full(Lsm, gm[k, fi, tau])
                ucols = np.concatenate([pcols, Pcols])
                uvals = np.concatenate([gains_p, gains_P])
                t0 = float(gains_p @ p0 + gains_P @ P0) + 1.0
                b.add_log(ucols, uvals, 1.0,
                          v_cols=[rho_m[li, fi, tau], eta_m[li, fi, tau]],
                          v_vals=[1.0, 1.0], t_init=t0)
                b.set_init(rho_m[li, fi, tau],
                           max(np.log(t0) - exp.eta_m[li, fi, tau], 0.0))
                oth = np.arange(Lm) != li
                e0 = np.exp(exp.eta_m[li, fi, tau])
                b.add_le(np.concatenate([pcols[oth], Pcols,
                                         [eta_m[li, fi, tau]]]),
                         np.concatenate([gains_p[oth], gains_P, [-e0]]),
                         e0 * (1.0 - exp.eta_m[li, fi, tau]) - 1.0)
            for si, k in enumerate(links.sm):
                gains_p = np.array([hm[n2, k, fi, tau] for (n2, _k2) in links.m])
                g_own = gs_own = gm[k, fi, tau]
                ucols = np.concatenate([[Pcols[si]], pcols])
                uvals = np.concatenate([[g_own], gains_p])
                t0 = float(g_own * P0[si] + gains_p @ p0) + 1.0
                b.add_log(ucols, uvals, 1.0,
                          v_cols=[rho_sm[si, fi, tau], eta_sm[si, fi, tau]],
                          v_vals=[1.0, 1.0], t_init=t0)
                b.set_init(rho_sm[si, fi, tau],
                           max(np.log(t0) - exp.eta_sm[si, fi, tau], 0.0))
                e0 = np.exp(exp.eta_sm[si, fi, tau])
                b.add_le(np.append(pcols, eta_sm[si, fi, tau]),
                         np.append(gains_p, -e0),
                         e0 * (1.0 - exp.eta_sm[si, fi, tau]) - 1.0)
                # off-window tier: no terrestrial interference
                t0_off = float(g_own * P0[si]) + 1.0
                b.add_log([Pcols[si]], [g_own], 1.0,
                          v_var=rho_sm_off[si, fi, tau], t_init=t0_off)
                b.set_init(rho_sm_off[si, fi, tau], np.log(t0_off))
            # C~5 (x=m), C~8 (x=m), C~9
            for n in links.aps_m:
                lis = [li for li, (n2, _) in enumerate(links.m) if n2 == n]
                b.add_le(pcols[lis], a_pm[lis, fi, tau],
                         1.0 - float(b_pm[lis, fi, tau].sum()))
            if Lsm:
                b.add_le(Pcols, a_Pm[:, fi, tau],
                         1.0 - float(b_Pm[:, fi, tau].sum()))
            for si, k in enumerate(links.sm):
                lis = [li for li, (_, k2) in enumerate(links.m) if k2 == k]
                cols = np.append(pcols[lis], Pcols[si])
                vals = np.append(a_pm[lis, fi, tau], a_Pm[si, fi, tau])
                rhs = 1.0 - float(b_pm[lis, fi, tau].sum()) - b_Pm[si, fi, tau]
                b.add_le(cols, vals, rhs)

    # ---------------- BWP s ----------------------------------------------
    a_Ps, b_Ps = f_ap_lin_coeffs(exp.Ps, spec.eps_sn)
    for fi in range(Fs):
        for tau in range(T):
            for si, k in enumerate(links.ss):
                g = gs[k, fi, tau]
                t0 = float(g * exp.Ps[si, fi, tau]) + 1.0
                b.add_log([Ps[si, fi, tau]], [g], 1.0,
                          v_var=rho_ss[si, fi, tau], t_init=t0)
                b.set_init(rho_ss[si, fi, tau], np.log(t0))
            if Lss:
                b.add_le(Ps[:, fi, tau], a_Ps[:, fi, tau],
                         1.0 - float(b_Ps[:, fi, tau].sum()))

    # ---------------- serve aggregates and queue chains -------------------
    for li in range(Lm):
        for tau in range(T):
            b.add_eq(np.append(sv_m[li, tau], rho_m[li, :, tau]),
                     np.append(1.0, np.full(Fm, -t_m * w_m)), 0.0)
    for si in range(Lsm):
        for tau in range(T):
            b.add_eq(np.append(sv_sm_on[si, tau], rho_sm[si, :, tau]),
                     np.append(1.0, np.full(Fm, -t_m * w_m)), 0.0)
            b.add_eq(np.append(sv_sm_off[si, tau], rho_sm_off[si, :, tau]),
                     np.append(1.0, np.full(Fm, -t_m * w_m)), 0.0)
    for si in range(Lss):
        for tau in range(T):
            b.add_eq(np.append(sv_ss[si, tau], rho_ss[si, :, tau]),
                     np.append(1.0, np.full(Fs, -t_s * w_s)), 0.0)

    for li, (n, k) in enumerate(links.m):
        for j in range(Sm):
            tau = j // n_ts_m
            inj = (j % n_ts_m == 0)
            cols = [qtn[li, j], sv_m[li, tau]]
            vals = [-1.0, -1.0 if win_m[j % n_ts_m] else 0.0]
            rhs = 0.0
            if j > 0:
                cols.append(qtn[li, j - 1])
                vals.append(1.0)
            else:
                rhs -= spec.q0_tn[n, k]
            if inj:
                cols.append(ombar_m[li])
                vals.append(spec.lam_m[k, tau])
            b.add_le(cols, vals, rhs)
    for si, k in enumerate(links.sm):
        om_cols = [ombar_m[li] for li, (_, k2) in enumerate(links.m) if k2 == k]
        for j in range(Sm):
            tau = j // n_ts_m
            inj = (j % n_ts_m == 0)
            on = win_m[j % n_ts_m]
            cols = [qsm[si, j], (sv_sm_on if on else sv_sm_off)[si, tau]]
            vals = [-1.0, -1.0]
            rhs = 0.0
            if j > 0:
                cols.append(qsm[si, j - 1])
                vals.append(1.0)
            else:
                rhs -= spec.q0_sm[k]
            if inj:
                lam = spec.lam_m[k, tau]
                cols.extend(om_cols)
                vals.extend([-lam] * len(om_cols))
                rhs -= lam
            b.add_le(cols, vals, rhs)
    for si, k in enumerate(links.ss):
        for j in range(Ss):
            tau = j // n_ts_s
            cols = [qss[si, j], sv_ss[si, tau]]
            vals = [-1.0, -1.0]
            rhs = 0.0
            if j > 0:
                cols.append(qss[si, j - 1])
                vals.append(1.0)
            else:
                rhs -= spec.q0_ss[k]
            if j % n_ts_s == 0:
                rhs -= spec.lam_s[k, tau]
            b.add_le(cols, vals, rhs)
    # queue caps (C~15b / C~16b)
    for n in links.aps_m:
        lis = [li for li, (n2, _) in enumerate(links.m) if n2 == n]
        for j in range(Sm):
            b.add_le(qtn[lis, j], np.ones(len(lis)), spec.cap_tn)
    if Lsm:
        for j in range(Sm):
            b.add_le(qsm[:, j], np.ones(Lsm), spec.cap_sm)
    if Lss:
        for j in range(Ss):
            b.add_le(qss[:, j], np.ones(Lss), spec.cap_ss)

    # ---------------- splits, power budgets, BW non-overlap ----------------
    for k in sorted({k for (_, k) in links.d}):
        lis = [li for li, (_, k2) in enumerate(links.d) if k2 == k]
        b.add_eq(ombar_d[lis], np.ones(len(lis)), 1.0)
        b.set_init(ombar_d[lis], 1.0 / len(lis))
    for k in links.sm:
        lis = [li for li, (_, k2) in enumerate(links.m) if k2 == k]
        if lis:
            b.add_le(ombar_m[lis], np.ones(len(lis)), 1.0)
            b.set_init(ombar_m[lis], 1.0 / (len(lis) + 1))
    for n in sorted(set(links.aps_d) | set(links.aps_m)):
        for tau in range(T):
            cols, vals = [], []
            for li, (n2, _) in enumerate(links.d):
                if n2 == n:
                    cols.extend(pd[li, :, tau].tolist())
                    vals.extend([1.0] * Fd)
            for li, (n2, _) in enumerate(links.m):
                if n2 == n:
                    cols.extend(pm[li, :, tau].tolist())
                    vals.extend([1.0] * Fm)
            if cols:
                b.add_le(cols, vals, spec.p_max)
    for tau in range(T):
        cols = Pm[:, :, tau].ravel().tolist() + Ps[:, :, tau].ravel().tolist()
        if cols:
            b.add_le(cols, np.ones(len(cols)), spec.P_max)

    # aggregate-power proxies (per-SB, whole cycle) and C~1-C~3
    mult_d = float(wslots_d)
    mult_m_ap = float(wslots_m)
    mult_m_sat = float(n_ts_m)
    mult_s = float(n_ts_s)
    agg0_d = mult_d * exp.pd.sum(axis=(0, 2))
    agg0_m = mult_m_ap * exp.pm.sum(axis=(0, 2)) + mult_m_sat * exp.Pm.sum(axis=(0, 2))
    agg0_s = mult_s * exp.Ps.sum(axis=(0, 2))
    for fi in range(Fd):
        cols = np.append(pd[:, fi, :].ravel(), aggd[fi])
        b.add_eq(cols, np.append(np.full(Ld * T, mult_d), -1.0), 0.0)
        b.set_init(aggd[fi], agg0_d[fi])
    for fi in range(Fm):
        cols = np.concatenate([pm[:, fi, :].ravel(), Pm[:, fi, :].ravel(),
                               [aggm[fi]]])
        vals = np.concatenate([np.full(Lm * T, mult_m_ap),
                               np.full(Lsm * T, mult_m_sat), [-1.0]])
        b.add_eq(cols, vals, 0.0)
        b.set_init(aggm[fi], agg0_m[fi])
    for fi in range(Fs):
        cols = np.append(Ps[:, fi, :].ravel(), aggs[fi])
        b.add_eq(cols, np.append(np.full(Lss * T, mult_s), -1.0), 0.0)
        b.set_init(aggs[fi], agg0_s[fi])

    a_ad, b_ad = f_ap_lin_coeffs(agg0_d, spec.eps_tn)
    a_am, b_am = f_ap_lin_coeffs(agg0_m, min(spec.eps_tn, spec.eps_sn))
    a_as, b_as = f_ap_lin_coeffs(agg0_s, spec.eps_sn)
    fm_pos = {int(f): i for i, f in enumerate(fm)}
    fs_pos = {int(f): i for i, f in enumerate(fs)}
    for i, f in enumerate(fd):
        ovl = overlap_index_sets(grid, "d", int(f))
        mi = [fm_pos[j] for j in ovl["m"] if j in fm_pos]
        si = [fs_pos[j] for j in ovl["s"] if j in fs_pos]
        cols = np.concatenate([[aggd[i]], aggm[mi], aggs[si]])
        vals = np.concatenate([[a_ad[i]], a_am[mi], a_as[si]])
        rhs = 1.0 - b_ad[i] - float(b_am[mi].sum()) - float(b_as[si].sum())
        b.add_le(cols, vals, rhs)
    for i, f in enumerate(fm):
        ovl = overlap_index_sets(grid, "m", int(f))
        si = [fs_pos[j] for j in ovl["s"] if j in fs_pos]
        cols = np.concatenate([[aggm[i]], aggs[si]])
        vals = np.concatenate([[a_am[i]], a_as[si]])
        b.add_le(cols, vals, 1.0 - b_am[i] - float(b_as[si].sum()))
    wd_khz = grid.sb_width_khz("d")
    wm_khz = grid.sb_width_khz("m")
    ws_khz = grid.sb_width_khz("s")
    cols = np.concatenate([aggd, aggm, aggs])
    vals = np.concatenate([wd_khz * a_ad, wm_khz * a_am, ws_khz * a_as])
    rhs = (grid.total_bw_khz - grid.guard_sm_khz - grid.guard_md_khz
           - wd_khz * float(b_ad.sum()) - wm_khz * float(b_am.sum())
           - ws_khz * float(b_as.sum()))
    b.add_le(cols, vals, rhs)

    prog = b.build()
    qidx = np.concatenate([prog.var_slices["qtn"], prog.var_slices["qsm"],
                           prog.var_slices["qss"]])
    eidx = prog.var_slices["e14"]
    return Lowered(prog=prog, spec=spec, names=names, shapes=shapes,
                   queue_cost_idx=qidx, elastic_cost_idx=eidx)


@dataclass
class Phase2Spec:
    """Static data for one TF's power-calibration problem (fixed binaries,
    fixed satellite powers, actual channels and arrivals)."""
    grid: RbGrid
    d_rbs: list          # ((n, k), fi_abs0) active DS RB-links, 0-based SB
    m_rbs: list          # ((n, k), fi_abs0)
    sm_rbs: list         # (k, fi_abs0, P_fixed_watts)
    hd: np.ndarray       # (N, K, Fd_full) normalized, this TF
    hm: np.ndarray
    gm: np.ndarray       # (K, Fm_full)
    pairs_m: list        # (n, k) queue bookkeeping pairs
    ues_m: list          # k in U^m
    ombar_d: dict        # (n, k) -> fixed split
    ombar_m: dict
    lam_d_sf: np.ndarray  # (K, n_sf_window) Mnat per window SF of this TF
    lam_m: np.ndarray     # (K,) Mnat injected at this TF's first slot
    q0_tn: np.ndarray     # (N, K) Mnat
    q0_sm: np.ndarray     # (K,)
    ds_count: dict        # (n, k) -> RB count per SF (fixed l0 value)
    p_max: float
    gamma0: float
    chi_mnat: float
    cap_tn: float
    cap_sm: float
    penalty: float = 3e4

    def w_mnat(self, x):
        return self.grid.sb_width_khz(x) * 1e3 / 1e6

    def t_slot_s(self, x):
        return self.grid.ts_duration_ms(x) * 1e-3


@dataclass
class Expansion2:
    pd: np.ndarray       # (n_d_rbs,)
    pm: np.ndarray       # (n_m_rbs,)
    eta_d: np.ndarray
    eta_m: np.ndarray
    eta_sm: np.ndarray   # (n_sm_rbs,)

    def blend(self, other: "Expansion2", w: float) -> "Expansion2":
        return Expansion2(*[(1 - w) * a + w * b for a, b in zip(
            (self.pd, self.pm, self.eta_d, self.eta_m, self.eta_sm),
            (other.pd, other.pm, other.eta_d, other.eta_m, other.eta_sm))])


def build_phase2(spec: Phase2Spec, exp: Expansion2) -> Lowered:
    grid = spec.grid
    nd, nm, nsm = len(spec.d_rbs), len(spec.m_rbs), len(spec.sm_rbs)
    n_ts_m = grid.n_ts_per_tf("m")
    win_m = grid.dl_slot_mask("m")
    w_d, w_m = spec.w_mnat("d"), spec.w_mnat("m")
    t_d, t_m = spec.t_slot_s("d"), spec.t_slot_s("m")
    nts_sf_d = grid.n_ts_per_sf("d")
    L0 = float(np.log1p(spec.gamma0))
    pairs_d = sorted({pair for pair, _ in spec.d_rbs})
    n_sf_win = spec.lam_d_sf.shape[1] if spec.lam_d_sf.size else 0

    b = Builder()
    shapes, names = {}, []

    def reg(name, shape, **kw):
        idx = b.add_var(name, _flat(shape), **kw)
        shapes[name] = shape
        names.append(name)
        return idx.reshape(shape) if shape else idx

    pd = reg("pd", (nd,), nonneg=True, init=np.maximum(exp.pd, 1e-8))
    rho_d = reg("rho_d", (nd,), init=0.0)
    eta_d = reg("eta_d", (nd,), init=exp.eta_d)
    pm = reg("pm", (nm,), nonneg=True, init=np.maximum(exp.pm, 1e-8))
    rho_m = reg("rho_m", (nm,), init=0.0)
    eta_m = reg("eta_m", (nm,), init=exp.eta_m)
    rho_sm = reg("rho_sm", (nsm,), init=0.0)
    eta_sm = reg("eta_sm", (nsm,), init=exp.eta_sm)
    Lp = len(spec.pairs_m)
    Ksm = len(spec.ues_m)
    qtn = reg("qtn", (Lp, n_ts_m), nonneg=True, init=1e-4)
    qsm = reg("qsm", (Ksm, n_ts_m), nonneg=True, init=1e-4)
    rdv = reg("rd", (len(pairs_d),), init=0.0)
    e14 = reg("e14", (len(pairs_d), max(n_sf_win, 1)), nonneg=True,
              cost=spec.penalty, init=1e-6)
    e10 = reg("e10", (nd,), nonneg=True, cost=spec.penalty, init=1e-6)
    ecap = reg("ecap", (2,), nonneg=True, cost=spec.penalty, init=1e-6)
    b.set_cost(qtn.ravel(), 1.0)
    b.set_cost(qsm.ravel(), 1.0)

    # interference bookkeeping per sub-band
    d_at = {}
    for i, (pair, fi) in enumerate(spec.d_rbs):
        d_at.setdefault(fi, []).append(i)
    m_at = {}
    for i, (pair, fi) in enumerate(spec.m_rbs):
        m_at.setdefault(fi, []).append(i)
    sm_at = {}
    for i, (k, fi, P) in enumerate(spec.sm_rbs):
        sm_at.setdefault(fi, []).append(i)

    for i, ((n, k), fi) in enumerate(spec.d_rbs):
        idxs = d_at[fi]
        gains = np.array([spec.hd[spec.d_rbs[j][0][0], k, fi] for j in idxs])
        cols = pd[idxs]
        t0 = float(gains @ np.maximum(exp.pd[idxs], 1e-8)) + 1.0
        b.add_log(cols, gains, 1.0, v_cols=[rho_d[i], eta_d[i]],
                  v_vals=[1.0, 1.0], t_init=t0)
        b.set_init(rho_d[i], max(np.log(t0) - exp.eta_d[i], 0.0))
        oth = [j for j in range(len(idxs)) if idxs[j] != i]
        e0 = np.exp(exp.eta_d[i])
        b.add_le(np.append(cols[oth], eta_d[i]), np.append(gains[oth], -e0),
                 e0 * (1.0 - exp.eta_d[i]) - 1.0)
        # exact SINR floor with restoration slack: rho + e10 >= ln(1+gamma0)
        b.add_le([rho_d[i], e10[i]], [-1.0, -1.0], -L0)

    for i, ((n, k), fi) in enumerate(spec.m_rbs):
        idxs = m_at[fi]
        gains = np.array([spec.hm[spec.m_rbs[j][0][0], k, fi] for j in idxs])
        theta_a = sum(P * spec.gm[k, fi2] for (k2, fi2, P) in spec.sm_rbs
                      if fi2 == fi)
        cols = pm[idxs]
        t0 = float(gains @ np.maximum(exp.pm[idxs], 1e-8)) + theta_a + 1.0
        b.add_log(cols, gains, theta_a + 1.0, v_cols=[rho_m[i], eta_m[i]],
                  v_vals=[1.0, 1.0], t_init=t0)
        b.set_init(rho_m[i], max(np.log(t0) - exp.eta_m[i], 0.0))
        oth = [j for j in range(len(idxs)) if idxs[j] != i]
        e0 = np.exp(exp.eta_m[i])
        b.add_le(np.append(cols[oth], eta_m[i]), np.append(gains[oth], -e0),
                 e0 * (1.0 - exp.eta_m[i]) - (theta_a + 1.0))

    sm_const_off = np.zeros(nsm)
    for i, (k, fi, P) in enumerate(spec.sm_rbs):
        own = P * spec.gm[k, fi]
        sm_const_off[i] = np.log1p(own)
        idxs = m_at.get(fi, [])
        if idxs:
            gains = np.array([spec.hm[spec.m_rbs[j][0][0], k, fi] for j in idxs])
            cols = pm[idxs]
            t0 = float(gains @ np.maximum(exp.pm[idxs], 1e-8)) + own + 1.0
            b.add_log(cols, gains, own + 1.0, v_cols=[rho_sm[i], eta_sm[i]],
                      v_vals=[1.0, 1.0], t_init=t0)
            b.set_init(rho_sm[i], max(np.log(t0) - exp.eta_sm[i], 0.0))
            e0 = np.exp(exp.eta_sm[i])
            b.add_le(np.append(cols, eta_sm[i]), np.append(gains, -e0),
                     e0 * (1.0 - exp.eta_sm[i]) - 1.0)
        else:
            b.add_eq([rho_sm[i], eta_sm[i]], [1.0, 1.0], sm_const_off[i])

    # DS rate bound and per-SF deadline rows (actual arrivals)
    for pi, pair in enumerate(pairs_d):
        idxs = [i for i, (pr, _) in enumerate(spec.d_rbs) if pr == pair]
        cnt = spec.ds_count.get(pair, len(idxs) * nts_sf_d)
        pen = spec.chi_mnat * np.sqrt(max(cnt, 0.0))
        cols = np.append(rdv[pi], rho_d[idxs])
        vals = np.append(1.0, np.full(len(idxs), -nts_sf_d * w_d))
        b.add_le(cols, vals, -pen)
        n, k = pair
        for v in range(n_sf_win):
            lam = spec.ombar_d.get(pair, 0.0) * spec.lam_d_sf[k, v]
            b.add_le([rdv[pi], e14[pi, v]], [-t_d, -1.0], -lam)

    # serve terms and this-TF queue chains
    sv_m = reg("sv_m", (Lp,), init=0.0)
    sv_sm_on = reg("sv_sm_on", (Ksm,), init=0.0)
    for li, pair in enumerate(spec.pairs_m):
        idxs = [i for i, (pr, _) in enumerate(spec.m_rbs) if pr == pair]
        if idxs:
            b.add_eq(np.append(sv_m[li], rho_m[idxs]),
                     np.append(1.0, np.full(len(idxs), -t_m * w_m)), 0.0)
        else:
            b.add_eq([sv_m[li]], [1.0], 0.0)
    for si, k in enumerate(spec.ues_m):
        idxs = [i for i, (k2, _, _) in enumerate(spec.sm_rbs) if k2 == k]
        if idxs:
            b.add_eq(np.append(sv_sm_on[si], rho_sm[idxs]),
                     np.append(1.0, np.full(len(idxs), -t_m * w_m)), 0.0)
        else:
            b.add_eq([sv_sm_on[si]], [1.0], 0.0)
    sv_sm_off_const = np.zeros(Ksm)
    for si, k in enumerate(spec.ues_m):
        sv_sm_off_const[si] = t_m * w_m * sum(
            sm_const_off[i] for i, (k2, _, _) in enumerate(spec.sm_rbs)
            if k2 == k)

    for li, (n, k) in enumerate(spec.pairs_m):
        inj = spec.ombar_m.get((n, k), 0.0) * spec.lam_m[k]
        for j in range(n_ts_m):
            cols = [qtn[li, j], sv_m[li]]
            vals = [-1.0, -1.0 if win_m[j] else 0.0]
            rhs = 0.0
            if j > 0:
                cols.append(qtn[li, j - 1])
                vals.append(1.0)
            else:
                rhs -= spec.q0_tn[n, k] + inj
            b.add_le(cols, vals, rhs)
    for si, k in enumerate(spec.ues_m):
        tot = sum(spec.ombar_m.get((n2, k), 0.0) for n2, k2 in spec.pairs_m
                  if k2 == k)
        inj = max(0.0, 1.0 - tot) * spec.lam_m[k]
        for j in range(n_ts_m):
            cols = [qsm[si, j]]
            vals = [-1.0]
            rhs = 0.0
            if win_m[j]:
                cols.append(sv_sm_on[si])
                vals.append(-1.0)
            else:
                rhs += sv_sm_off_const[si]
            if j > 0:
                cols.append(qsm[si, j - 1])
                vals.append(1.0)
            else:
                rhs -= spec.q0_sm[k] + inj
            b.add_le(cols, vals, rhs)
    for j in range(n_ts_m):
        if Lp:
            b.add_le(np.append(qtn[:, j], ecap[0]),
                     np.append(np.ones(Lp), -1.0), spec.cap_tn)
        if Ksm:
            b.add_le(np.append(qsm[:, j], ecap[1]),
                     np.append(np.ones(Ksm), -1.0), spec.cap_sm)

    # C11 per AP (this TF)
    for n in sorted({pr[0] for pr, _ in spec.d_rbs}
                    | {pr[0] for pr, _ in spec.m_rbs}):
        cols = [pd[i] for i, (pr, _) in enumerate(spec.d_rbs) if pr[0] == n]
        cols += [pm[i] for i, (pr, _) in enumerate(spec.m_rbs) if pr[0] == n]
        b.add_le(cols, np.ones(len(cols)), spec.p_max)

    prog = b.build()
    qidx = np.concatenate([prog.var_slices["qtn"], prog.var_slices["qsm"]])
    eidx = np.concatenate([prog.var_slices["e14"], prog.var_slices["e10"],
                           prog.var_slices["ecap"]])
    return Lowered(prog=prog, spec=spec, names=names, shapes=shapes,
                   queue_cost_idx=qidx, elastic_cost_idx=eidx)
