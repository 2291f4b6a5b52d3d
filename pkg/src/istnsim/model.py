"""Transmission and queueing model: SINRs, rates, routing, queue recursions,
the congestion objective, and the full C0-C16 constraint audit.

Rates are natural-log (nats/s) exactly as in the formulas; queues are kept in
bits, so every serve term carries an explicit 1/ln2.  All evaluators are pure
functions of an AllocationState and a ChannelView.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcinv

from .channel import ChannelView
from .grid import BwpAllocation, RbGrid, N_SF_PER_TF, validate_bwp
from .units import LN2


def q_inv(p: float) -> float:
    """Inverse Gaussian Q-function via the complementary error function."""
    return float(np.sqrt(2.0) * erfcinv(2.0 * p))


@dataclass(frozen=True)
class FiniteBlocklengthParams:
    """Short-packet dispersion penalty parameters for the DS service."""

    p_err: float = 1e-5
    gamma0_db: float = 5.0

    def __post_init__(self):
        if self.gamma0_db < 5.0:
            raise ValueError("SINR floor must be at least 5 dB")

    @property
    def gamma0(self) -> float:
        return 10.0 ** (self.gamma0_db / 10.0)

    def chi(self, grid: RbGrid) -> float:
        """chi_d = sqrt(w_d) Q^-1(P_err) / sqrt(tau_d), with V ~ 1."""
        w_hz = grid.sb_width_khz("d") * 1e3
        tau_s = grid.ts_duration_ms("d") * 1e-3
        return float(np.sqrt(w_hz) * q_inv(self.p_err) / np.sqrt(tau_s))


@dataclass(frozen=True)
class QueueCaps:
    tn_bits: float = 1.6e8   # 20 MB per AP, MS buffer
    sn_m_bits: float = 1.6e8
    sn_s_bits: float = 1.6e8


@dataclass
class AllocationState:
    """Decision variables of one time cycle (slot-resolved)."""

    cycle: int
    grid: RbGrid = field(repr=False)
    ue_service: list
    b: BwpAllocation
    alpha_d: np.ndarray   # (N, K, Fd, Sd) 0/1
    alpha_m: np.ndarray   # (N, K, Fm, Sm)
    beta_m: np.ndarray    # (K, Fm, Sm)
    beta_s: np.ndarray    # (K, Fs, Ss)
    p_d: np.ndarray       # watts, same shape as alpha_d
    p_m: np.ndarray
    P_m: np.ndarray
    P_s: np.ndarray
    omega_cn: np.ndarray   # (K,)
    omega_tn: np.ndarray   # (N, K, 2), x index 0="d", 1="m"
    omega_bar: np.ndarray  # (N, K, 2)

    @classmethod
    def zeros(cls, grid: RbGrid, n_aps: int, ue_service, cycle: int = 0):
        K = len(ue_service)
        Sd = grid.n_ts_per_cycle("d")
        Sm = grid.n_ts_per_cycle("m")
        Ss = grid.n_ts_per_cycle("s")
        return cls(
            cycle=cycle, grid=grid, ue_service=list(ue_service),
            b=BwpAllocation.zeros(grid),
            alpha_d=np.zeros((n_aps, K, grid.n_sb["d"], Sd), dtype=np.int8),
            alpha_m=np.zeros((n_aps, K, grid.n_sb["m"], Sm), dtype=np.int8),
            beta_m=np.zeros((K, grid.n_sb["m"], Sm), dtype=np.int8),
            beta_s=np.zeros((K, grid.n_sb["s"], Ss), dtype=np.int8),
            p_d=np.zeros((n_aps, K, grid.n_sb["d"], Sd)),
            p_m=np.zeros((n_aps, K, grid.n_sb["m"], Sm)),
            P_m=np.zeros((K, grid.n_sb["m"], Sm)),
            P_s=np.zeros((K, grid.n_sb["s"], Ss)),
            omega_cn=np.zeros(K),
            omega_tn=np.zeros((n_aps, K, 2)),
            omega_bar=np.zeros((n_aps, K, 2)),
        )

    @property
    def n_aps(self):
        return self.alpha_d.shape[0]

    def ues_of(self, x):
        return np.array([k for k, s in enumerate(self.ue_service) if s == x],
                        dtype=int)


# ---------------------------------------------------------------------------
# index helpers
# ---------------------------------------------------------------------------

def slot_tf(grid: RbGrid, x: str, cycle: int) -> np.ndarray:
    """Global 0-based TF index of each cycle slot of service x."""
    per = grid.n_ts_per_tf(x)
    return cycle * grid.n_tf + np.arange(grid.n_ts_per_cycle(x)) // per


def slot_window(grid: RbGrid, x: str) -> np.ndarray:
    """Bool per cycle slot: inside the terrestrial TDD DL window."""
    return np.tile(grid.dl_slot_mask(x), grid.n_tf)


def slot_tf_start(grid: RbGrid, x: str) -> np.ndarray:
    per = grid.n_ts_per_tf(x)
    m = np.zeros(grid.n_ts_per_cycle(x), dtype=bool)
    m[::per] = True
    return m


def _gains_at_slots(gain_tf: np.ndarray, grid: RbGrid, x: str, cycle: int):
    """Expand per-TF gains (..., T_global) to the cycle's slots (..., S_x)."""
    return gain_tf[..., slot_tf(grid, x, cycle)]


# ---------------------------------------------------------------------------
# SINRs (vectorized; scalar spec ops wrap these)
# ---------------------------------------------------------------------------

def sinr_d_all(state: AllocationState, ch: ChannelView) -> np.ndarray:
    grid = state.grid
    h = _gains_at_slots(ch.hd, grid, "d", state.cycle)       # (N,K,Fd,Sd)
    tx = state.alpha_d * state.p_d
    cell = tx.sum(axis=1)                                    # (N,Fd,Sd)
    rx = cell[:, None] * h                                   # (N,K,Fd,Sd)
    psi = rx.sum(axis=0)[None] - cell[:, None] * h           # ICI at k from i!=n
    num = tx * h
    return num / (psi + ch.noise["d"])


def sinr_m_ap_all(state: AllocationState, ch: ChannelView) -> np.ndarray:
    grid = state.grid
    h = _gains_at_slots(ch.hm, grid, "m", state.cycle)
    g = _gains_at_slots(ch.gm, grid, "m", state.cycle)       # (K,Fm,Sm)
    tx = state.alpha_m * state.p_m
    cell = tx.sum(axis=1)
    rx = cell[:, None] * h
    psi = rx.sum(axis=0)[None] - cell[:, None] * h
    theta_a = (state.beta_m * state.P_m).sum(axis=0)[None, :, :] * g
    num = tx * h
    return num / (psi + theta_a[None] + ch.noise["m"])


def sinr_m_sat_all(state: AllocationState, ch: ChannelView) -> np.ndarray:
    grid = state.grid
    h = _gains_at_slots(ch.hm, grid, "m", state.cycle)
    g = _gains_at_slots(ch.gm, grid, "m", state.cycle)
    cell = (state.alpha_m * state.p_m).sum(axis=1)           # (N,Fm,Sm)
    theta_s = (cell[:, None] * h).sum(axis=0)                # (K,Fm,Sm)
    num = state.beta_m * state.P_m * g
    return num / (theta_s + ch.noise["m"])


def snr_s_all(state: AllocationState, ch: ChannelView) -> np.ndarray:
    g = _gains_at_slots(ch.gs, state.grid, "s", state.cycle)
    return state.beta_s * state.P_s * g / ch.noise["s"]


def sinr_d(state, ch, n, k, f, ts):
    return float(sinr_d_all(state, ch)[n, k, f - 1, ts])


def sinr_m_ap(state, ch, n, k, f, ts):
    return float(sinr_m_ap_all(state, ch)[n, k, f - 1, ts])


def sinr_m_sat(state, ch, k, f, ts):
    return float(sinr_m_sat_all(state, ch)[k, f - 1, ts])


def snr_s(state, ch, k, f, ts):
    return float(snr_s_all(state, ch)[k, f - 1, ts])


# ---------------------------------------------------------------------------
# rates (nats/s)
# ---------------------------------------------------------------------------

def rate_m_rb_all(state, ch, node="ap"):
    w = state.grid.sb_width_khz("m") * 1e3
    if node == "ap":
        return w * np.log1p(sinr_m_ap_all(state, ch))
    return w * np.log1p(sinr_m_sat_all(state, ch))


def rate_m(state, ch, node, k, ts):
    """Per-TS rate of MS UE k: node is an AP index or "sat"."""
    if node == "sat":
        return float(rate_m_rb_all(state, ch, "sat")[k, :, ts].sum())
    return float(rate_m_rb_all(state, ch, "ap")[node, k, :, ts].sum())


def rate_s_rb_all(state, ch):
    w = state.grid.sb_width_khz("s") * 1e3
    return w * np.log1p(snr_s_all(state, ch))


def rate_s(state, ch, k, ts=None, tf=None):
    """Per-TS rate (ts given) or per-TF aggregate (tf given, 0-based in cycle)."""
    rb = rate_s_rb_all(state, ch)
    if ts is not None:
        return float(rb[k, :, ts].sum())
    per = state.grid.n_ts_per_tf("s")
    return float(rb[k, :, tf * per:(tf + 1) * per].sum())


def rate_ds_all(state, ch, fbl: FiniteBlocklengthParams) -> np.ndarray:
    """SF-aggregated DS rates (N, K, n_sf_cycle), dispersion penalty included."""
    grid = state.grid
    w = grid.sb_width_khz("d") * 1e3
    chi = fbl.chi(grid)
    logs = np.log1p(sinr_d_all(state, ch))                  # (N,K,Fd,Sd)
    per_sf = grid.n_ts_per_sf("d")
    n_sf = grid.n_tf * N_SF_PER_TF
    N, K, F, Sd = logs.shape
    logs = logs.reshape(N, K, F, n_sf, per_sf)
    cnt = state.alpha_d.reshape(N, K, F, n_sf, per_sf).sum(axis=(2, 4))
    rate = w * logs.sum(axis=(2, 4)) - chi * np.sqrt(cnt)
    return np.where(cnt > 0, rate, 0.0)


def rate_ds(state, ch, fbl, n, k, t_v):
    return float(rate_ds_all(state, ch, fbl)[n, k, t_v])


# ---------------------------------------------------------------------------
# traffic routing and queues
# ---------------------------------------------------------------------------

def route_arrivals(state: AllocationState, realization, c: int | None = None):
    """Node-level arrivals (bits) from the UE-level realization via the splits.

    Returns dict: ds (N,K,n_sf), m_ap (N,K,n_tf), m_sat (K,n_tf),
    s_sat (K,n_tf), all for the state's cycle.
    """
    grid = state.grid
    c = state.cycle if c is None else c
    ds = realization.cycle_ds(grid, c)        # (K, n_sf)
    tf = realization.cycle_tf(grid, c)        # (K, n_tf)
    wd = state.omega_bar[:, :, 0]             # (N,K)
    wm = state.omega_bar[:, :, 1]
    svc = np.array([{"d": 0, "m": 1, "s": 2}[x] for x in state.ue_service])
    ds_bits = wd[:, :, None] * ds[None, :, :] * (svc == 0)[None, :, None]
    m_ap = wm[:, :, None] * tf[None, :, :] * (svc == 1)[None, :, None]
    m_sat = (1.0 - wm.sum(axis=0))[:, None] * tf * (svc == 1)[:, None]
    s_sat = tf * (svc == 2)[:, None]
    total_m = m_ap.sum(axis=0) + m_sat
    expect = tf * (svc == 1)[:, None]
    if not np.allclose(total_m, expect, rtol=1e-12, atol=1e-9):
        raise ValueError("MS splits violate the flow-conservation simplex")
    return {"ds": ds_bits, "m_ap": m_ap, "m_sat": m_sat, "s_sat": s_sat}


def step_queues(q_prev: np.ndarray, arrivals: np.ndarray,
                served: np.ndarray) -> np.ndarray:
    """One slot of the recursion q -> [q + lambda - served]^+ (all bits)."""
    return np.maximum(0.0, q_prev + arrivals - served)


@dataclass
class QueueTrace:
    """Per-flow queue lengths (bits) over the slots of one cycle; index 0 is
    the inherited initial state, 1..S are the post-update states."""

    q_tn: np.ndarray    # (N, K, Sm+1)
    q_sn_m: np.ndarray  # (K, Sm+1)
    q_sn_s: np.ndarray  # (K, Ss+1)

    def final_state(self):
        return {"tn": self.q_tn[:, :, -1].copy(),
                "sn_m": self.q_sn_m[:, -1].copy(),
                "sn_s": self.q_sn_s[:, -1].copy()}


def zero_queue_state(n_aps: int, n_ues: int):
    return {"tn": np.zeros((n_aps, n_ues)), "sn_m": np.zeros(n_ues),
            "sn_s": np.zeros(n_ues)}


def simulate_queues(state: AllocationState, ch: ChannelView, realization,
                    q_init: dict | None = None) -> QueueTrace:
    """Realized queue evolution of the state's cycle under the given world."""
    grid = state.grid
    N, K = state.alpha_d.shape[0], len(state.ue_service)
    q_init = q_init or zero_queue_state(N, K)
    routed = route_arrivals(state, realization)
    Sm = grid.n_ts_per_cycle("m")
    Ss = grid.n_ts_per_cycle("s")
    t_m = grid.ts_duration_ms("m") * 1e-3
    t_s = grid.ts_duration_ms("s") * 1e-3
    r_ap = rate_m_rb_all(state, ch, "ap").sum(axis=2)     # (N,K,Sm)
    r_sm = rate_m_rb_all(state, ch, "sat").sum(axis=1)    # (K,Sm)
    r_ss = rate_s_rb_all(state, ch).sum(axis=1)           # (K,Ss)
    start_m = slot_tf_start(grid, "m")
    start_s = slot_tf_start(grid, "s")
    tf_of_m = np.arange(Sm) // grid.n_ts_per_tf("m")
    tf_of_s = np.arange(Ss) // grid.n_ts_per_tf("s")

    q_tn = np.zeros((N, K, Sm + 1))
    q_sn_m = np.zeros((K, Sm + 1))
    q_sn_s = np.zeros((K, Ss + 1))
    q_tn[:, :, 0] = q_init["tn"]
    q_sn_m[:, 0] = q_init["sn_m"]
    q_sn_s[:, 0] = q_init["sn_s"]
    for ts in range(Sm):
        inj_ap = routed["m_ap"][:, :, tf_of_m[ts]] if start_m[ts] else 0.0
        inj_sat = routed["m_sat"][:, tf_of_m[ts]] if start_m[ts] else 0.0
        q_tn[:, :, ts + 1] = step_queues(q_tn[:, :, ts], inj_ap,
                                         t_m * r_ap[:, :, ts] / LN2)
        q_sn_m[:, ts + 1] = step_queues(q_sn_m[:, ts], inj_sat,
                                        t_m * r_sm[:, ts] / LN2)
    for ts in range(Ss):
        inj = routed["s_sat"][:, tf_of_s[ts]] if start_s[ts] else 0.0
        q_sn_s[:, ts + 1] = step_queues(q_sn_s[:, ts], inj,
                                        t_s * r_ss[:, ts] / LN2)
    return QueueTrace(q_tn, q_sn_m, q_sn_s)


def objective(trace: QueueTrace) -> float:
    """Sum queue length of MS and SS flows over the cycle (bits * slots)."""
    return float(trace.q_tn[:, :, 1:].sum() + trace.q_sn_m[:, 1:].sum()
                 + trace.q_sn_s[:, 1:].sum())


def mean_queue_bits(trace: QueueTrace) -> float:
    """Time-average of the total queued bits (each queue on its own slot
    timeline, which equals the true time average for piecewise-constant
    queues)."""
    return float(trace.q_tn[:, :, 1:].sum(axis=(0, 1)).mean()
                 + trace.q_sn_m[:, 1:].sum(axis=0).mean()
                 + trace.q_sn_s[:, 1:].sum(axis=0).mean())


def ds_deadline_misses(state: AllocationState, ch: ChannelView, realization,
                       fbl: FiniteBlocklengthParams, rtol: float = 1e-9):
    """(misses, demands): C14 violations T_d R < lambda on the realized rates."""
    grid = state.grid
    routed = route_arrivals(state, realization)
    lam = routed["ds"]                                    # (N,K,n_sf) bits
    rate = rate_ds_all(state, ch, fbl)                    # nats/s
    t_d = grid.ts_duration_ms("d") * 1e-3
    served_bits = t_d * rate / LN2
    demand = lam > 0
    miss = demand & (served_bits < lam * (1.0 - rtol))
    return int(miss.sum()), int(demand.sum())


# ---------------------------------------------------------------------------
# constraint audit
# ---------------------------------------------------------------------------

@dataclass
class ConstraintCheck:
    ok: bool
    worst: float = 0.0
    count: int = 0


@dataclass
class AuditReport:
    checks: dict

    def ok(self, names=None):
        names = names or self.checks.keys()
        return all(self.checks[n].ok for n in names)

    def hard_ok(self):
        """C0-C12 plus the TDD mask: the constraints every recovered
        allocation must satisfy exactly."""
        hard = [n for n in self.checks if n not in ("C14", "C15", "C16")]
        return self.ok(hard)

    def summary(self):
        return {n: (c.ok, c.worst, c.count) for n, c in self.checks.items()}


def _check_le(lhs: np.ndarray, rhs, tol=1e-9) -> ConstraintCheck:
    resid = np.asarray(lhs, dtype=float) - rhs
    bad = resid > tol
    worst = float(resid.max()) if resid.size else 0.0
    return ConstraintCheck(ok=not bool(bad.any()), worst=max(0.0, worst),
                           count=int(bad.sum()))


def audit(state: AllocationState, ch: ChannelView, realization,
          fbl: FiniteBlocklengthParams, caps: QueueCaps = QueueCaps(),
          q_init: dict | None = None, p_max_w: float = np.inf,
          P_max_w: float = np.inf) -> AuditReport:
    """Report-only audit of C0-C16.  C10 is checked against ``ch`` (the
    channels the allocation was planned with); C14-C16 are metered against
    the realization."""
    grid = state.grid
    checks = {}
    binaries = [state.alpha_d, state.alpha_m, state.beta_m, state.beta_s]
    b_ok = all(np.isin(a, (0, 1)).all() for a in binaries) \
        and all(np.isin(state.b.b[x], (0, 1)).all() for x in ("d", "m", "s"))
    checks["C0"] = ConstraintCheck(ok=bool(b_ok))

    rep = validate_bwp(grid, state.b)
    checks["C1"] = ConstraintCheck(ok=rep.ok("C1"), count=len(rep.violations["C1"]))
    checks["C2"] = ConstraintCheck(ok=rep.ok("C2"), count=len(rep.violations["C2"]))
    checks["C3"] = ConstraintCheck(ok=rep.ok("C3"), count=len(rep.violations["C3"]))

    bd = state.b.b["d"][None, None, :, None]
    bm = state.b.b["m"][None, None, :, None]
    checks["C4"] = _check_le(np.maximum((state.alpha_d - bd).max(initial=0),
                                        (state.alpha_m - bm).max(initial=0)), 0)
    checks["C7"] = _check_le(np.maximum(
        (state.beta_m - state.b.b["m"][None, :, None]).max(initial=0),
        (state.beta_s - state.b.b["s"][None, :, None]).max(initial=0)), 0)
    checks["C5"] = _check_le(np.maximum(state.alpha_d.sum(axis=1).max(initial=0),
                                        state.alpha_m.sum(axis=1).max(initial=0)), 1)
    checks["C6"] = _check_le(state.alpha_d.sum(axis=0), 1)
    checks["C8"] = _check_le(np.maximum(state.beta_m.sum(axis=0).max(initial=0),
                                        state.beta_s.sum(axis=0).max(initial=0)), 1)
    ue_m = state.ues_of("m")
    c9 = state.alpha_m.sum(axis=0)[ue_m] + state.beta_m[ue_m] if ue_m.size \
        else np.zeros(1)
    checks["C9"] = _check_le(c9, 1)

    win_d = slot_window(grid, "d")
    win_m = slot_window(grid, "m")
    tdd = max(state.alpha_d[:, :, :, ~win_d].max(initial=0),
              state.alpha_m[:, :, :, ~win_m].max(initial=0))
    checks["TDD"] = ConstraintCheck(ok=tdd == 0)

    gam = sinr_d_all(state, ch)
    active = state.alpha_d > 0
    if active.any():
        short = fbl.gamma0 * (1 - 1e-9) - gam[active]
        checks["C10"] = _check_le(short, 0)
    else:
        checks["C10"] = ConstraintCheck(ok=True)

    ratio_dm = grid.n_ts_per_sf("d") // grid.n_ts_per_sf("m")
    pd_slot = state.p_d.sum(axis=(1, 2))                    # (N, Sd)
    pm_slot = state.p_m.sum(axis=(1, 2))                    # (N, Sm)
    inst = pd_slot + np.repeat(pm_slot, ratio_dm, axis=1)
    checks["C11"] = _check_le(inst, p_max_w, tol=1e-9 * max(1.0, p_max_w))
    ratio_ms = grid.n_ts_per_sf("m") // grid.n_ts_per_sf("s")
    Pm_slot = state.P_m.sum(axis=(0, 1))
    Ps_slot = state.P_s.sum(axis=(0, 1))
    inst_s = Pm_slot + np.repeat(Ps_slot, ratio_ms)
    checks["C12"] = _check_le(inst_s, P_max_w, tol=1e-9 * max(1.0, P_max_w))

    c13 = []
    for xi, x in enumerate(("d", "m")):
        ues = state.ues_of(x)
        if not ues.size:
            continue
        tot = state.omega_tn[:, ues, xi].sum(axis=0)
        c13.append(np.abs(tot - 1.0).max(initial=0))
    ok13 = (max(c13) < 1e-9) if c13 else True
    ok_range = bool((state.omega_bar >= -1e-12).all()
                    and (state.omega_bar <= 1 + 1e-12).all())
    checks["C13"] = ConstraintCheck(ok=ok13 and ok_range,
                                    worst=float(max(c13) if c13 else 0.0))

    misses, demands = ds_deadline_misses(state, ch, realization, fbl)
    checks["C14"] = ConstraintCheck(ok=misses == 0, count=misses)

    trace = simulate_queues(state, ch, realization, q_init)
    checks["C15"] = _check_le(trace.q_tn.sum(axis=1), caps.tn_bits,
                              tol=1e-6 * caps.tn_bits)
    c16 = max(_check_le(trace.q_sn_m.sum(axis=0), caps.sn_m_bits,
                        tol=1e-6 * caps.sn_m_bits).worst,
              _check_le(trace.q_sn_s.sum(axis=0), caps.sn_s_bits,
                        tol=1e-6 * caps.sn_s_bits).worst)
    checks["C16"] = ConstraintCheck(ok=c16 <= 0, worst=c16)
    return AuditReport(checks)
