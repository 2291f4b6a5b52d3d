"""Paired (predicted, actual) channel synthesis for AP-UE and LSat-UE links.

Hybrid Rician model: gain = sqrt(PL) * (sqrt(K/(K+1)) h_los
+ sqrt(1/(K+1)) h_nlos) with h_nlos = sqrt(xi) hbar + sqrt(1-xi) delta.
The map-derived components (PL, h_los, hbar) are shared between the predicted
and the actual channel of a link; only the unmodeled draw delta differs, so
xi = 1 makes the two identical.  Channels are redrawn i.i.d. per TF and held
constant across the TSs of a TF.
"""

from dataclasses import dataclass, field

import numpy as np

from .grid import RbGrid, SERVICES, TN_SERVICES, SN_SERVICES
from .rng import substream, uniform_phase
from .scenario import Scenario, blockage_query, propagate_orbit
from .units import SPEED_OF_LIGHT, db_to_linear, dbm_to_watt


@dataclass(frozen=True)
class ChannelParams:
    carrier_ghz: float = 3.4
    k_factor: float = 5.0              # linear Rician K-tilde
    xi: float = 0.5                    # deterministic-NLoS fraction, in [0, 1]
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0
    ap_gain_dbi: float = 8.0
    sat_gain_dbi: float = 30.0
    ue_gain_dbi: float = 0.0
    nlos_excess_tn_db: float = 20.0
    nlos_excess_sn_db: float = 20.0
    reflector_radius_m: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if self.k_factor < 0.0:
            raise ValueError("K-factor must be non-negative")


def noise_power(params: ChannelParams, x: str, grid: RbGrid) -> float:
    """Per-sub-band noise power sigma^2_x in watts: PSD + NF over w_x."""
    w_hz = grid.sb_width_khz(x) * 1e3
    return float(dbm_to_watt(params.noise_psd_dbm_hz + params.noise_figure_db
                             + 10.0 * np.log10(w_hz)))


def path_loss(link_type: str, distance_m: float, carrier_ghz: float,
              los: bool, params: ChannelParams | None = None) -> float:
    """Linear power *loss* (>= 1): FSPL times the configured NLoS excess.

    Antenna gains are not included here; the synthesis folds them in.
    """
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    params = params or ChannelParams(carrier_ghz=carrier_ghz)
    fspl_db = 20.0 * np.log10(4.0 * np.pi * distance_m * carrier_ghz * 1e9
                              / SPEED_OF_LIGHT)
    excess = 0.0
    if not los:
        excess = (params.nlos_excess_tn_db if link_type == "tn"
                  else params.nlos_excess_sn_db)
    return float(db_to_linear(fspl_db + excess))


@dataclass
class ChannelView:
    """Power gains of one world ("pred" or "act"), normalized access helpers.

    hd: (N, K, Fd, T); hm: (N, K, Fm, T); gm: (K, Fm, T); gs: (K, Fs, T),
    where T is the global TF count and F the full SB counts.
    """
    hd: np.ndarray
    hm: np.ndarray
    gm: np.ndarray
    gs: np.ndarray
    noise: dict  # service -> sigma^2 watts


@dataclass
class ChannelSet:
    """Predicted/actual paired gains plus complex coefficients per link."""
    pred: ChannelView
    act: ChannelView
    params: ChannelParams
    grid: RbGrid = field(repr=False)

    def view(self, which: str) -> ChannelView:
        return {"pred": self.pred, "act": self.act,
                "predicted": self.pred, "actual": self.act}[which]


def _link_geometry(params: ChannelParams, boxes, tx_pos, rx_pos, link_type):
    los, n_ref = blockage_query(boxes, tx_pos, rx_pos, params.reflector_radius_m)
    dist = float(np.linalg.norm(np.asarray(tx_pos) - np.asarray(rx_pos)))
    pl_loss = path_loss(link_type, dist, params.carrier_ghz, los, params)
    gains_db = params.ue_gain_dbi + (params.ap_gain_dbi if link_type == "tn"
                                     else params.sat_gain_dbi)
    pl_lin = db_to_linear(gains_db) / pl_loss
    return los, n_ref, dist, pl_lin


def _sb_frequencies_hz(grid: RbGrid, x: str, carrier_ghz: float) -> np.ndarray:
    offs = np.array([grid.sb_center_offset_khz(x, f)
                     for f in range(1, grid.n_sb[x] + 1)])
    return carrier_ghz * 1e9 - grid.total_bw_khz * 1e3 / 2.0 + offs * 1e3


def _synth_vec(params: ChannelParams, grid: RbGrid, seed, link_key, x,
               los, n_ref, dist, pl_lin):
    """Complex (pred, act) gains across all SBs of service x for one link-TF.

    Deterministic in (seed, link_key): LoS phase from geometry, hbar phase
    from a hash of the link identity, delta from a named substream.
    """
    freqs = _sb_frequencies_hz(grid, x, params.carrier_ghz)
    tau = dist / SPEED_OF_LIGHT
    h_los = np.exp(-2j * np.pi * freqs * tau)
    k_eff = params.k_factor if los else 0.0
    hbar_amp = 1.0 if n_ref > 0 else 0.0
    hbar_phase = uniform_phase(seed, "hbar", *link_key)
    hbar = hbar_amp * np.exp(1j * (hbar_phase + np.pi * np.arange(len(freqs))
                                   * 0.37))
    rng = substream(seed, "delta", *link_key)
    draws = (rng.standard_normal((2, len(freqs)))
             + 1j * rng.standard_normal((2, len(freqs)))) / np.sqrt(2.0)
    out = []
    for which in (0, 1):
        h_nlos = np.sqrt(params.xi) * hbar + np.sqrt(1.0 - params.xi) * draws[which]
        g = np.sqrt(pl_lin) * (np.sqrt(k_eff / (k_eff + 1.0)) * h_los
                               + np.sqrt(1.0 / (k_eff + 1.0)) * h_nlos)
        out.append(g)
    return out[0], out[1]


def synth_link(params: ChannelParams, scenario: Scenario, grid: RbGrid,
               seed: int, link: tuple, f: int, t: int):
    """Spec-level scalar op: (predicted, actual) complex gain for one RB.

    ``link`` is ("tn", n, k, x) or ("sn", k, x); t is the global 1-based TF
    index.  Channels are constant over the TSs of a TF.
    """
    kind = link[0]
    geo = scenario.geometry
    if kind == "tn":
        _, n, k, x = link
        tx = geo.ap_positions[n]
    else:
        _, k, x = link
        n = -1
        tx = propagate_orbit(geo.orbit, t)
    rx = geo.ue_tracks[k, t - 1]
    los, n_ref, dist, pl_lin = _link_geometry(params, geo.boxes, tx, rx, kind)
    key = (kind, n, k, x, t)
    pred, act = _synth_vec(params, grid=grid, seed=seed,
                           link_key=key, x=x, los=los, n_ref=n_ref,
                           dist=dist, pl_lin=pl_lin)
    return pred[f - 1], act[f - 1]


def build_channels(params: ChannelParams, scenario: Scenario, grid: RbGrid,
                   seed: int) -> ChannelSet:
    """Synthesize the full (pred, act) power-gain tables for all links/TFs."""
    geo = scenario.geometry
    N, K, T = geo.n_aps, geo.n_ues, grid.n_tf_total()
    shapes = {"d": grid.n_sb["d"], "m": grid.n_sb["m"], "s": grid.n_sb["s"]}
    hd = np.zeros((2, N, K, shapes["d"], T))
    hm = np.zeros((2, N, K, shapes["m"], T))
    gm = np.zeros((2, K, shapes["m"], T))
    gs = np.zeros((2, K, shapes["s"], T))
    svc = scenario.traffic.ue_service
    for t in range(1, T + 1):
        sat = propagate_orbit(geo.orbit, t)
        for k in range(K):
            rx = geo.ue_tracks[k, t - 1]
            if svc[k] in TN_SERVICES:
                for n in range(N):
                    los, n_ref, dist, pl = _link_geometry(
                        params, geo.boxes, geo.ap_positions[n], rx, "tn")
                    for x, dest in (("d", hd), ("m", hm)):
                        if svc[k] == "d" and x == "m":
                            continue
                        if svc[k] == "m" and x == "d":
                            continue
                        p, a = _synth_vec(params, grid, seed,
                                          ("tn", n, k, x, t), x,
                                          los, n_ref, dist, pl)
                        dest[0, n, k, :, t - 1] = np.abs(p) ** 2
                        dest[1, n, k, :, t - 1] = np.abs(a) ** 2
            if svc[k] in SN_SERVICES:
                los, n_ref, dist, pl = _link_geometry(
                    params, geo.boxes, sat, rx, "sn")
                x = "m" if svc[k] == "m" else "s"
                dest = gm if x == "m" else gs
                p, a = _synth_vec(params, grid, seed, ("sn", -1, k, x, t), x,
                                  los, n_ref, dist, pl)
                dest[0, k, :, t - 1] = np.abs(p) ** 2
                dest[1, k, :, t - 1] = np.abs(a) ** 2
    noise = {x: noise_power(params, x, grid) for x in SERVICES}
    pred = ChannelView(hd[0], hm[0], gm[0], gs[0], noise)
    act = ChannelView(hd[1], hm[1], gm[1], gs[1], noise)
    return ChannelSet(pred=pred, act=act, params=params, grid=grid)
