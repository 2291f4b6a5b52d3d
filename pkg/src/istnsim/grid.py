"""Multi-numerology resource grid, bandwidth-part layout and feasibility checks.

Services: "d" (delay-sensitive, terrestrial only), "m" (mobile, shared
terrestrial/satellite), "s" (satellite only).  Sub-band index f of service x
occupies the absolute span [B - f*w_x, B - (f-1)*w_x] kHz, i.e. indices count
down from the top of the shared band; the ordering constraints then place the
s band-width part lowest in frequency, m in the middle and d highest, with
fixed guard bands w_s between s-m and w_m between m-d.
"""

from dataclasses import dataclass, field

import numpy as np

SERVICES = ("d", "m", "s")
TN_SERVICES = ("d", "m")     # transmitted by APs
SN_SERVICES = ("m", "s")     # transmitted by the satellite
SB_WIDTH_BASE_KHZ = 180.0
N_SF_PER_TF = 10
T_SF_MS = 1.0
T_TF_MS = 10.0


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class NumerologyParams:
    """5G NR scaling exponents per service and the derived grid scalars."""

    mu_s: int = 0
    mu_m: int = 1
    mu_d: int = 2

    def mu(self, x: str) -> int:
        return {"s": self.mu_s, "m": self.mu_m, "d": self.mu_d}[x]

    def sb_width_khz(self, x: str) -> float:
        return (2 ** self.mu(x)) * SB_WIDTH_BASE_KHZ

    def ts_duration_ms(self, x: str) -> float:
        return 2.0 ** (-self.mu(x))

    def qbar(self, x: str, xp: str) -> float:
        """Sub-band width ratio 2^(mu_x - mu_x')."""
        return 2.0 ** (self.mu(x) - self.mu(xp))


@dataclass(frozen=True)
class RbGrid:
    """The time/frequency lattice for one configuration.

    ``n_sb[x]`` is the full count floor(B / w_x); ``allowed_sb[x]`` lists the
    1-based sub-band indices available to the optimizer (defaults to all,
    desk-scale configs may restrict it).
    """

    total_bw_khz: float
    numerology: NumerologyParams
    n_tf: int
    n_cy: int
    n_sf_tn_dl: int
    n_sb: dict = field(repr=False)
    allowed_sb: dict = field(repr=False)
    guard_sm_khz: float
    guard_md_khz: float

    # -- frequency axis -------------------------------------------------
    def sb_width_khz(self, x):
        return self.numerology.sb_width_khz(x)

    def sb_span_khz(self, x, f):
        """Absolute [low, high] span of sub-band f (1-based, from band top)."""
        w = self.sb_width_khz(x)
        return (self.total_bw_khz - f * w, self.total_bw_khz - (f - 1) * w)

    def sb_center_offset_khz(self, x, f):
        """Center frequency of SB f relative to the band's lower edge."""
        lo, hi = self.sb_span_khz(x, f)
        return 0.5 * (lo + hi)

    # -- time axis ------------------------------------------------------
    def ts_duration_ms(self, x):
        return self.numerology.ts_duration_ms(x)

    def n_ts_per_sf(self, x):
        return 2 ** self.numerology.mu(x)

    def n_ts_per_tf(self, x):
        return N_SF_PER_TF * self.n_ts_per_sf(x)

    def n_ts_per_cycle(self, x):
        return self.n_tf * self.n_ts_per_tf(x)

    def n_tf_total(self):
        return self.n_tf * self.n_cy

    def dl_window_ts(self, x):
        """Number of leading TSs per TF in the terrestrial TDD DL window."""
        return self.n_sf_tn_dl * self.n_ts_per_sf(x)

    def dl_slot_mask(self, x):
        """Boolean mask over one TF's TS indices: True inside the DL window."""
        mask = np.zeros(self.n_ts_per_tf(x), dtype=bool)
        mask[: self.dl_window_ts(x)] = True
        return mask

    def sf_of_ts(self, x, ts):
        """0-based SF index within the TF of 0-based slot ts."""
        return ts // self.n_ts_per_sf(x)


def build_grid(total_bw_khz: float,
               numerology: NumerologyParams | None = None,
               n_tf: int = 5,
               n_cy: int = 20,
               n_sf_tn_dl: int = 6,
               allowed_sb: dict | None = None) -> RbGrid:
    """Construct the grid; rejects bandwidths too small for one SB per service
    plus both guard bands."""
    num = numerology or NumerologyParams()
    if n_tf <= 0 or n_cy <= 0:
        raise GridError("counts must be positive")
    if not 1 <= n_sf_tn_dl <= N_SF_PER_TF:
        raise GridError(f"n_sf_tn_dl must be in 1..{N_SF_PER_TF}")
    guard_sm = num.sb_width_khz("s")
    guard_md = num.sb_width_khz("m")
    min_bw = sum(num.sb_width_khz(x) for x in SERVICES) + guard_sm + guard_md
    if total_bw_khz < min_bw:
        raise GridError(
            f"bandwidth {total_bw_khz} kHz cannot host one SB per service "
            f"plus guards (needs >= {min_bw} kHz)")
    n_sb = {x: int(np.floor(total_bw_khz / num.sb_width_khz(x))) for x in SERVICES}
    allow = {}
    for x in SERVICES:
        if allowed_sb and allowed_sb.get(x) is not None:
            idx = tuple(int(f) for f in allowed_sb[x])
            if any(f < 1 or f > n_sb[x] for f in idx):
                raise GridError(f"allowed_sb[{x}] out of range 1..{n_sb[x]}")
            allow[x] = tuple(sorted(idx))
        else:
            allow[x] = tuple(range(1, n_sb[x] + 1))
    return RbGrid(total_bw_khz=float(total_bw_khz), numerology=num,
                  n_tf=int(n_tf), n_cy=int(n_cy), n_sf_tn_dl=int(n_sf_tn_dl),
                  n_sb=n_sb, allowed_sb=allow,
                  guard_sm_khz=guard_sm, guard_md_khz=guard_md)


def overlap_index_sets(grid: RbGrid, x: str, f: int) -> dict:
    """Index ranges of lower-ordered services that conflict with SB f of x.

    For x = "d" returns {"m": range, "s": range}; for "m" returns {"s": range};
    for "s" returns {}.  Ranges are 1-based and clipped to the service's SB
    count.  Bound floor(qbar * (f + 0.5)) per the ordering constraints.
    """
    if f < 1 or f > grid.n_sb[x]:
        raise GridError(f"sub-band index {f} out of range 1..{grid.n_sb[x]}")
    lower = {"d": ("m", "s"), "m": ("s",), "s": ()}[x]
    out = {}
    for xp in lower:
        bound = int(np.floor(grid.numerology.qbar(x, xp) * (f + 0.5)))
        out[xp] = range(1, min(bound, grid.n_sb[xp]) + 1)
    return out


@dataclass
class BwpAllocation:
    """Binary sub-band usage per service for one cycle."""

    b: dict  # service -> 0/1 int array of length n_sb[x]

    @classmethod
    def zeros(cls, grid: RbGrid) -> "BwpAllocation":
        return cls({x: np.zeros(grid.n_sb[x], dtype=int) for x in SERVICES})

    def used(self, x):
        """1-based indices of used sub-bands."""
        return np.nonzero(self.b[x])[0] + 1

    def copy(self):
        return BwpAllocation({x: self.b[x].copy() for x in SERVICES})


@dataclass
class BwpReport:
    feasible: bool
    violations: dict  # constraint name -> list of offending index tuples

    def ok(self, name):
        return not self.violations.get(name)


def validate_bwp(grid: RbGrid, alloc: BwpAllocation) -> BwpReport:
    """Report-only check of the non-overlap (C1, C2) and total-bandwidth (C3)
    constraints.  Guard bands are charged in C3 unconditionally."""
    viol = {"C1": [], "C2": [], "C3": []}
    b = alloc.b
    for x in SERVICES:
        arr = np.asarray(b[x])
        if arr.shape != (grid.n_sb[x],) or not np.isin(arr, (0, 1)).all():
            raise GridError(f"allocation for {x} must be 0/1 of length {grid.n_sb[x]}")
    for f in range(1, grid.n_sb["d"] + 1):
        if not b["d"][f - 1]:
            continue
        ovl = overlap_index_sets(grid, "d", f)
        total = 1 + sum(b["m"][i - 1] for i in ovl["m"]) \
                  + sum(b["s"][j - 1] for j in ovl["s"])
        if total > 1:
            viol["C1"].append(("d", f))
    for f in range(1, grid.n_sb["m"] + 1):
        if not b["m"][f - 1]:
            continue
        ovl = overlap_index_sets(grid, "m", f)
        total = 1 + sum(b["s"][j - 1] for j in ovl["s"])
        if total > 1:
            viol["C2"].append(("m", f))
    used_bw = sum(grid.sb_width_khz(x) * int(np.sum(b[x])) for x in SERVICES)
    if used_bw + grid.guard_sm_khz + grid.guard_md_khz > grid.total_bw_khz + 1e-9:
        viol["C3"].append(("total", used_bw + grid.guard_sm_khz + grid.guard_md_khz))
    return BwpReport(feasible=not any(viol.values()), violations=viol)
