"""Structure-exploiting interior-point solver for the convex subproblems.

Every subproblem is lowered to the canonical form

    min  c'z   s.t.  G z = h,   z_i >= 0 (i in NN),   ln(z_t) >= z_v
                     for each log pair (t, v),  remaining z free,

which captures the three constraint shapes of the convexified problems:
linear rows (equalities, and inequalities via slack variables), affine <=
affine (same), and ln(affine) >= affine (aux t = affine, aux v = affine, one
two-variable log constraint).  The solver is an infeasible-start primal-dual
interior-point method: the log constraints g_j(z) = z_v - ln(z_t) <= 0 get
slacks and multipliers, nonnegative coordinates get bound multipliers, and
the condensed KKT system stays sparse because each g_j touches exactly two
variables (2x2 Hessian/outer-product blocks).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

FREE, NONNEG, CONE_T, CONE_V = 0, 1, 2, 3


@dataclass
class ConeProgram:
    c: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    kind: np.ndarray          # per-variable FREE/NONNEG/CONE_T/CONE_V
    cone_t: np.ndarray        # paired indices, ln(z[cone_t]) >= z[cone_v]
    cone_v: np.ndarray
    var_slices: dict          # name -> index array
    init: np.ndarray          # builder's suggested start

    @property
    def n(self):
        return self.c.shape[0]

    @property
    def m(self):
        return self.h.shape[0]


class Builder:
    """Incremental construction of a ConeProgram.

    add_le lowers a'z <= b via a fresh slack; add_log adds
    ln(u'z + du) >= v'z + dv via aux variables and one log pair.
    """

    CHUNK = None  # optional max nnz per row (split via partial-sum aux vars)

    def __init__(self):
        self._names = {}
        self._kind = []
        self._cost = []
        self._init = []
        self._rows = []        # list of (cols, vals, rhs)
        self._cone_t = []
        self._cone_v = []

    def add_var(self, name, size=1, nonneg=False, cost=0.0, init=None):
        base = len(self._kind)
        idx = np.arange(base, base + size)
        self._names[name] = idx
        self._kind.extend([NONNEG if nonneg else FREE] * size)
        cost = np.broadcast_to(np.asarray(cost, dtype=float), (size,))
        self._cost.extend(cost.tolist())
        if init is None:
            init = 1.0 if nonneg else 0.0
        init = np.broadcast_to(np.asarray(init, dtype=float), (size,))
        self._init.extend(init.tolist())
        return idx

    def _new_aux(self, kind, init):
        i = len(self._kind)
        self._kind.append(kind)
        self._cost.append(0.0)
        self._init.append(float(init))
        return i

    def add_eq(self, cols, vals, rhs):
        cols = np.asarray(cols, dtype=int)
        vals = np.asarray(vals, dtype=float)
        while self.CHUNK is not None and cols.size > self.CHUNK:
            # fold leading chunks into partial-sum variables, keep the tail
            new_cols, new_vals = [], []
            for lo in range(0, cols.size, self.CHUNK):
                cc = cols[lo:lo + self.CHUNK]
                vv = vals[lo:lo + self.CHUNK]
                if cc.size < self.CHUNK // 2 and lo > 0:
                    new_cols.extend(cc.tolist())
                    new_vals.extend(vv.tolist())
                    continue
                aux = self._new_aux(FREE, 0.0)
                self._rows.append((np.append(cc, aux),
                                   np.append(vv, -1.0), 0.0))
                new_cols.append(aux)
                new_vals.append(1.0)
            cols = np.asarray(new_cols, dtype=int)
            vals = np.asarray(new_vals, dtype=float)
        self._rows.append((cols, vals, float(rhs)))

    def add_le(self, cols, vals, rhs, slack_init=1.0):
        s = self._new_aux(NONNEG, max(slack_init, 1e-8))
        cols = np.append(np.asarray(cols, dtype=int), s)
        vals = np.append(np.asarray(vals, dtype=float), 1.0)
        self.add_eq(cols, vals, rhs)
        return s

    def add_log(self, u_cols, u_vals, u_const, v_cols=None, v_vals=None,
                v_const=0.0, v_var=None, t_init=1.0, v_init=None):
        """ln(u'z + u_const) >= (v'z + v_const  |  z[v_var])."""
        t = self._new_aux(CONE_T, max(t_init, 1e-9))
        cols = np.append(np.asarray(u_cols, dtype=int), t)
        vals = np.append(np.asarray(u_vals, dtype=float), -1.0)
        self.add_eq(cols, vals, -float(u_const))
        if v_var is None:
            if v_init is None:
                v_init = np.log(max(t_init, 1e-9)) - 1.0
            v = self._new_aux(CONE_V, v_init)
            vc = np.append(np.asarray(v_cols, dtype=int), v)
            vv = np.append(np.asarray(v_vals, dtype=float), -1.0)
            self.add_eq(vc, vv, -float(v_const))
        else:
            v = int(v_var)
            self._kind[v] = CONE_V
        self._cone_t.append(t)
        self._cone_v.append(v)
        return t, v

    def set_cost(self, idx, cost):
        idx = np.atleast_1d(idx)
        for i, ci in zip(idx, np.broadcast_to(cost, idx.shape)):
            self._cost[int(i)] = float(ci)

    def set_init(self, idx, val):
        idx = np.atleast_1d(idx)
        for i, vi in zip(idx, np.broadcast_to(val, idx.shape)):
            self._init[int(i)] = float(vi)

    @property
    def n_vars(self):
        return len(self._kind)

    def build(self) -> ConeProgram:
        n = len(self._kind)
        m = len(self._rows)
        rows_i, cols_i, vals = [], [], []
        h = np.zeros(m)
        for r, (cc, vv, rhs) in enumerate(self._rows):
            scale = np.max(np.abs(vv)) if vv.size else 1.0
            scale = scale if scale > 0 else 1.0
            rows_i.append(np.full(cc.shape, r))
            cols_i.append(cc)
            vals.append(vv / scale)
            h[r] = rhs / scale
        G = sp.csr_matrix(
            (np.concatenate(vals) if vals else np.zeros(0),
             (np.concatenate(rows_i) if rows_i else np.zeros(0, dtype=int),
              np.concatenate(cols_i) if cols_i else np.zeros(0, dtype=int))),
            shape=(m, n))
        G.sum_duplicates()
        return ConeProgram(
            c=np.asarray(self._cost, dtype=float), G=G, h=h,
            kind=np.asarray(self._kind, dtype=int),
            cone_t=np.asarray(self._cone_t, dtype=int),
            cone_v=np.asarray(self._cone_v, dtype=int),
            var_slices=dict(self._names),
            init=np.asarray(self._init, dtype=float))


@dataclass
class ConeResult:
    z: np.ndarray
    y: np.ndarray
    status: str               # optimal | stalled | infeasible | max_iter
    iters: int
    gap: float
    pfeas: float
    stat_res: float
    obj: float
    duals: dict | None = None  # warm-start bundle (y, lam, lam_b)

    def value(self, prog: ConeProgram, name: str) -> np.ndarray:
        return self.z[prog.var_slices[name]]


@dataclass
class IpmOptions:
    tol_gap: float = 1e-7        # complementarity target, relative to |obj|
    feas_tol: float = 1e-6       # primal feasibility (row-equilibrated)
    stat_tol: float = 1e-5       # dual feasibility relative to |c| scale
    max_iter: int = 300
    mu0: float | None = None
    reg_primal: float = 1e-10
    reg_dual: float = 1e-10
    ftb: float = 0.995           # fraction-to-boundary


def _start_point(prog: ConeProgram, z0, nn, ct, cv):
    z = prog.init.copy() if z0 is None else np.asarray(z0, dtype=float).copy()
    bad = ~np.isfinite(z)
    if bad.any():
        z[bad] = prog.init[bad]
    # keep the start comfortably interior; boundary-hugging starts produce
    # exploding duals on the first steps
    if nn.size:
        z[nn] = np.maximum(z[nn], 1e-4)
    if ct.size:
        z[ct] = np.maximum(z[ct], 1e-6)
    return z


def solve_cone_program(prog: ConeProgram, z0: np.ndarray | None = None,
                       opts: IpmOptions | None = None,
                       warm: dict | None = None) -> ConeResult:
    opts = opts or IpmOptions()
    n, m = prog.n, prog.m
    nn = np.where(prog.kind == NONNEG)[0]
    ct, cv = prog.cone_t, prog.cone_v
    L = len(ct)
    G = prog.G.tocsr()
    GT = G.T.tocsr()

    z = _start_point(prog, z0, nn, ct, cv)
    y = np.zeros(m)

    def g_of(z):
        return z[cv] - np.log(z[ct]) if L else np.zeros(0)

    s = np.maximum(-g_of(z), 1e-2) if L else np.zeros(0)
    obj0 = abs(float(prog.c @ z))
    mu = opts.mu0 if opts.mu0 is not None else max(1.0, 0.01 * obj0)
    # cap the initial duals: mu/s on near-boundary coordinates would start
    # the run with a complementarity explosion
    lam = mu / np.maximum(s, 1e-2) if L else np.zeros(0)
    lam_b = mu / np.maximum(z[nn], 1e-2)
    if warm is not None and warm.get("y") is not None \
            and warm["y"].shape == (m,):
        y = warm["y"].copy()
        if L and warm.get("lam") is not None and warm["lam"].shape == (L,):
            lam = np.maximum(warm["lam"].copy(), 1e-8)
        if nn.size and warm.get("lam_b") is not None \
                and warm["lam_b"].shape == (nn.size,):
            lam_b = np.maximum(warm["lam_b"].copy(), 1e-8)

    # static KKT pattern: [[H, G'], [G, -delta I]]
    Gc = G.tocoo()
    diag_idx = np.arange(n)
    pat_rows = [diag_idx]
    pat_cols = [diag_idx]
    if L:
        pat_rows += [ct, ct, cv, cv]
        pat_cols += [ct, cv, ct, cv]
    pat_rows += [Gc.row + n, Gc.col, np.arange(m) + n]
    pat_cols += [Gc.col, Gc.row + n, np.arange(m) + n]
    P_rows = np.concatenate(pat_rows)
    P_cols = np.concatenate(pat_cols)
    g_vals = Gc.data

    hscale = 1.0 + np.abs(prog.h).max(initial=0.0)
    cscale = 1.0 + np.abs(prog.c).max(initial=0.0)
    n_compl = max(L + nn.size, 1)
    status = "max_iter"
    it = 0

    def max_step(x, dx, tau):
        negd = dx < 0
        if not np.any(negd):
            return 1.0
        return min(1.0, tau * np.min(-x[negd] / dx[negd]))

    pf_hist = []
    for it in range(1, opts.max_iter + 1):
        g = g_of(z)
        # residuals
        r_stat = prog.c + GT @ y
        if L:
            # grad g_j: -1/t at t, +1 at v
            np.add.at(r_stat, ct, -lam / z[ct])
            np.add.at(r_stat, cv, lam)
        if nn.size:
            r_stat[nn] -= lam_b
        r_eq = G @ z - prog.h
        r_ineq = g + s
        compl = (float(s @ lam) if L else 0.0) + \
                (float(z[nn] @ lam_b) if nn.size else 0.0)
        mu_avg = compl / n_compl
        obj = float(prog.c @ z)

        pf = max(np.abs(r_eq).max(initial=0.0) / hscale,
                 np.abs(r_ineq).max(initial=0.0))
        st = np.abs(r_stat).max(initial=0.0) / cscale
        pf_hist.append(pf)
        if (pf <= opts.feas_tol and st <= opts.stat_tol
                and mu_avg <= opts.tol_gap * max(1.0, abs(obj))):
            status = "optimal"
            break
        # infeasibility heuristic: complementarity collapsed and duals blew
        # up while the primal residual stopped improving
        dual_mag = (np.abs(lam).max(initial=0.0)
                    + np.abs(lam_b).max(initial=0.0) + np.abs(y).max(initial=0.0))
        if (pf > 1e-5 and dual_mag > 1e9 * cscale
                and mu_avg < 1e-9 * max(1.0, abs(obj))
                and len(pf_hist) > 20 and pf > 0.5 * pf_hist[-20]):
            status = "infeasible"
            break

        # monotone centering: aim lower once primal-feasible
        sigma = 0.2 if pf > opts.feas_tol else 0.05
        mu_target = sigma * mu_avg

        diag = np.full(n, opts.reg_primal)
        if nn.size:
            diag[nn] += lam_b / z[nn]
        vals = [diag]
        if L:
            d = lam / np.maximum(s, 1e-300)
            invt = 1.0 / z[ct]
            tt = lam * invt ** 2 + d * invt ** 2
            tv = -d * invt
            vv = d
            vals = [diag, tt, tv, tv, vv]
        rhs1 = -r_stat.copy()
        if nn.size:
            rhs1[nn] += (mu_target / z[nn] - lam_b)
        if L:
            dl_const = (mu_target / s - lam) + d * r_ineq
            np.add.at(rhs1, ct, (1.0 / z[ct]) * dl_const)
            np.add.at(rhs1, cv, -dl_const)
        vals += [g_vals, g_vals, np.full(m, -opts.reg_dual)]
        K = sp.csc_matrix((np.concatenate(vals), (P_rows, P_cols)),
                          shape=(n + m, n + m))
        try:
            lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError:
            status = "stalled"
            break
        step = lu.solve(np.concatenate([rhs1, -r_eq]))
        dz, dy = step[:n], step[n:]
        if L:
            ds = -r_ineq - (dz[cv] - dz[ct] / z[ct])
            dlam = (mu_target - s * lam - lam * ds) / np.maximum(s, 1e-300)
        else:
            ds = np.zeros(0)
            dlam = np.zeros(0)
        if nn.size:
            dlam_b = (mu_target - z[nn] * lam_b - lam_b * dz[nn]) / z[nn]
        else:
            dlam_b = np.zeros(0)

        tau = 0.995 if mu_avg > 1e-6 * max(1.0, abs(obj)) else 0.9995
        alpha_p = 1.0
        if nn.size:
            alpha_p = min(alpha_p, max_step(z[nn], dz[nn], tau))
        if L:
            alpha_p = min(alpha_p, max_step(z[ct], dz[ct], tau))
            alpha_p = min(alpha_p, max_step(s, ds, tau))
        alpha_d = 1.0
        if L:
            alpha_d = min(alpha_d, max_step(lam, dlam, tau))
        if nn.size:
            alpha_d = min(alpha_d, max_step(lam_b, dlam_b, tau))

        # safeguard: keep the combined residual from exploding (the log rows
        # are nonlinear, so a full step may overshoot)
        norm0 = np.sqrt(np.dot(r_stat, r_stat) + np.dot(r_eq, r_eq)
                        + np.dot(r_ineq, r_ineq) + compl ** 2)
        accepted = False
        for _ in range(30):
            zt = z + alpha_p * dz
            ok = (not nn.size or np.all(zt[nn] > 0)) and \
                 (not L or np.all(zt[ct] > 0))
            if ok:
                st_ = s + alpha_p * ds if L else s
                lt = lam + alpha_d * dlam if L else lam
                lbt = lam_b + alpha_d * dlam_b if nn.size else lam_b
                yt = y + alpha_d * dy
                r_stat2 = prog.c + GT @ yt
                if L:
                    np.add.at(r_stat2, ct, -lt / zt[ct])
                    np.add.at(r_stat2, cv, lt)
                if nn.size:
                    r_stat2[nn] -= lbt
                r_eq2 = G @ zt - prog.h
                r_in2 = (zt[cv] - np.log(zt[ct]) + st_) if L else np.zeros(0)
                compl2 = (float(st_ @ lt) if L else 0.0) + \
                         (float(zt[nn] @ lbt) if nn.size else 0.0)
                norm1 = np.sqrt(np.dot(r_stat2, r_stat2) + np.dot(r_eq2, r_eq2)
                                + np.dot(r_in2, r_in2) + compl2 ** 2)
                if norm1 <= 10.0 * norm0 + 1e-12:
                    accepted = True
                    break
            alpha_p *= 0.5
            alpha_d *= 0.5
        if not accepted or (alpha_p < 1e-13 and alpha_d < 1e-13):
            status = "stalled"
            break
        z = z + alpha_p * dz
        y = y + alpha_d * dy
        if L:
            s = s + alpha_p * ds
            lam = lam + alpha_d * dlam
            # absorb the curvature error of the log rows where feasible so
            # the inequality residual does not keep regenerating
            g_new = g_of(z)
            s = np.where(g_new < 0, np.maximum(-g_new, 1e-13), s)
        if nn.size:
            lam_b = lam_b + alpha_d * dlam_b

    g = g_of(z)
    r_eq = G @ z - prog.h
    r_stat = prog.c + GT @ y
    if L:
        np.add.at(r_stat, ct, -lam / z[ct])
        np.add.at(r_stat, cv, lam)
    if nn.size:
        r_stat[nn] -= lam_b
    pf = max(np.abs(r_eq).max(initial=0.0) / hscale,
             np.abs(g + s).max(initial=0.0) if L else 0.0)
    compl = (float(s @ lam) if L else 0.0) + \
            (float(z[nn] @ lam_b) if nn.size else 0.0)
    if status in ("max_iter", "stalled") and pf > 1e-3:
        status = "infeasible"
    return ConeResult(
        z=z, y=y, status=status, iters=it,
        gap=compl / n_compl,
        pfeas=float(pf),
        stat_res=float(np.abs(r_stat).max(initial=0.0) / cscale),
        obj=float(prog.c @ z),
        duals={"y": y, "lam": lam, "lam_b": lam_b})
