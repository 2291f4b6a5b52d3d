"""Digital-twin world model: geometry, blockage map, traffic and realizations.

The scene lives in a local tangent frame: the origin sits on the Earth surface,
z points to zenith, the Earth center is at (0, 0, -R_E).  UE tracks are stored
per TF for both the actual world and the DT's prediction; arrival realizations
come in an (actual, predicted) pair, where the prediction carries the per-epoch
Poisson means instead of the realized draws.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .grid import RbGrid, SERVICES, N_SF_PER_TF, T_TF_MS
from .rng import substream
from .units import EARTH_RADIUS, GM_EARTH

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class OrbitParams:
    altitude_m: float = 500e3
    inclination_rad: float = 0.6
    phase_rad: float = 0.0

    @property
    def radius_m(self):
        return EARTH_RADIUS + self.altitude_m

    @property
    def angular_rate(self):
        """Circular-orbit angular speed sqrt(GM/r^3), rad/s."""
        return float(np.sqrt(GM_EARTH / self.radius_m ** 3))


def propagate_orbit(orbit: OrbitParams, t: int) -> np.ndarray:
    """Satellite position in the scene frame at TF index t (1-based).

    Deterministic circular orbit through the scene zenith at t=1, phase=0.
    """
    theta = orbit.phase_rad + orbit.angular_rate * (t - 1) * (T_TF_MS * 1e-3)
    center = np.array([0.0, 0.0, -EARTH_RADIUS])
    zenith = np.array([0.0, 0.0, 1.0])
    horiz = np.array([np.cos(orbit.inclination_rad), np.sin(orbit.inclination_rad), 0.0])
    return center + orbit.radius_m * (np.cos(theta) * zenith + np.sin(theta) * horiz)


@dataclass(frozen=True)
class Box:
    """Axis-aligned building box (open: boundary grazing does not block)."""
    center: tuple
    size: tuple

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        s = np.asarray(self.size, dtype=float)
        return c - 0.5 * s, c + 0.5 * s


def segment_hits_box(p0, p1, box: Box) -> bool:
    """Slab test for segment-AABB intersection with the open-box convention."""
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    lo, hi = box.bounds()
    t0, t1 = 0.0, 1.0
    for ax in range(3):
        if abs(d[ax]) < 1e-12:
            if p0[ax] <= lo[ax] or p0[ax] >= hi[ax]:
                return False
            continue
        ta = (lo[ax] - p0[ax]) / d[ax]
        tb = (hi[ax] - p0[ax]) / d[ax]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 >= t1:
            return False
    return True


def blockage_query(boxes, tx, rx, reflector_radius_m: float = 100.0):
    """LoS flag and nearby-reflector count for the tx-rx segment."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    los = not any(segment_hits_box(tx, rx, box) for box in boxes)
    mid = 0.5 * (tx + rx)
    n_ref = sum(
        1 for box in boxes
        if np.linalg.norm(np.asarray(box.center, dtype=float) - mid) <= reflector_radius_m
    )
    return los, n_ref


@dataclass
class WorldGeometry:
    ap_positions: np.ndarray          # (N, 3) m
    ue_tracks: np.ndarray             # (K, n_tf_total, 3) actual positions
    ue_tracks_predicted: np.ndarray   # (K, n_tf_total, 3) DT-predicted
    orbit: OrbitParams
    boxes: list

    @property
    def n_aps(self):
        return self.ap_positions.shape[0]

    @property
    def n_ues(self):
        return self.ue_tracks.shape[0]


@dataclass
class TrafficModel:
    """Poisson packet-count traffic with fixed packet sizes (bits)."""

    ue_service: list                       # per-UE class in {"d","m","s"}
    mean_packets: dict = field(default_factory=lambda: {"d": 1.0, "m": 1.0, "s": 1.0})
    packet_bits: dict = field(default_factory=lambda: {"d": 2048.0, "m": 4e5, "s": 4e5})

    def __post_init__(self):
        if any(v < 0 for v in self.mean_packets.values()):
            raise ValueError("arrival means must be non-negative")
        if any(x not in SERVICES for x in self.ue_service):
            raise ValueError("unknown service class")

    def ues_of(self, x):
        return [k for k, s in enumerate(self.ue_service) if s == x]

    def mean_bits(self, x):
        return self.mean_packets[x] * self.packet_bits[x]


@dataclass
class Realization:
    """Arrival trace in bits: DS per SF (only DL-window serving SFs are
    populated), MS/SS per TF (injected at the first TS of the TF)."""

    kind: str                 # "actual" | "predicted"
    ds_bits: np.ndarray       # (K, n_tf_total * 10)
    tf_bits: np.ndarray       # (K, n_tf_total)

    def cycle_ds(self, grid: RbGrid, c: int):
        """DS arrivals of 0-based cycle c, shape (K, n_tf * 10)."""
        lo = c * grid.n_tf * N_SF_PER_TF
        return self.ds_bits[:, lo: lo + grid.n_tf * N_SF_PER_TF]

    def cycle_tf(self, grid: RbGrid, c: int):
        lo = c * grid.n_tf
        return self.tf_bits[:, lo: lo + grid.n_tf]


def _window_sf_mask(grid: RbGrid) -> np.ndarray:
    mask = np.zeros(grid.n_tf_total() * N_SF_PER_TF, dtype=bool)
    per_tf = np.zeros(N_SF_PER_TF, dtype=bool)
    per_tf[: grid.n_sf_tn_dl] = True
    mask[:] = np.tile(per_tf, grid.n_tf_total())
    return mask


def sample_arrivals(traffic: TrafficModel, grid: RbGrid, seed: int) -> Realization:
    """Actual Poisson draws over the whole horizon, reproducible under seed."""
    n_tf = grid.n_tf_total()
    K = len(traffic.ue_service)
    ds = np.zeros((K, n_tf * N_SF_PER_TF))
    tf = np.zeros((K, n_tf))
    win = _window_sf_mask(grid)
    for k, x in enumerate(traffic.ue_service):
        rng = substream(seed, "arrivals", k)
        if x == "d":
            counts = rng.poisson(traffic.mean_packets["d"], size=n_tf * N_SF_PER_TF)
            ds[k] = counts * traffic.packet_bits["d"]
            ds[k, ~win] = 0.0
        else:
            counts = rng.poisson(traffic.mean_packets[x], size=n_tf)
            tf[k] = counts * traffic.packet_bits[x]
    return Realization("actual", ds, tf)


def predict_realization(traffic: TrafficModel, grid: RbGrid,
                        arrival_error: float = 0.0, seed: int = 0) -> Realization:
    """DT-predicted arrivals: the per-epoch Poisson means (optionally jittered
    by a relative Gaussian error, default exact means)."""
    n_tf = grid.n_tf_total()
    K = len(traffic.ue_service)
    ds = np.zeros((K, n_tf * N_SF_PER_TF))
    tf = np.zeros((K, n_tf))
    win = _window_sf_mask(grid)
    for k, x in enumerate(traffic.ue_service):
        if x == "d":
            ds[k, win] = traffic.mean_bits("d")
        else:
            tf[k, :] = traffic.mean_bits(x)
    if arrival_error > 0.0:
        rng = substream(seed, "dt-arrival-error")
        ds *= np.maximum(0.0, 1.0 + arrival_error * rng.standard_normal(ds.shape))
        tf *= np.maximum(0.0, 1.0 + arrival_error * rng.standard_normal(tf.shape))
    return Realization("predicted", ds, tf)


def perturb_tracks(tracks: np.ndarray, sigma_pos_m: float, seed: int) -> np.ndarray:
    """DT-predicted positions: actual + zero-mean isotropic Gaussian noise."""
    if sigma_pos_m <= 0.0:
        return tracks.copy()
    rng = substream(seed, "dt-position-error")
    return tracks + sigma_pos_m * rng.standard_normal(tracks.shape)


@dataclass
class Scenario:
    geometry: WorldGeometry
    traffic: TrafficModel
    actual: Realization
    predicted: Realization
    seed: int

    def ues_of(self, x):
        return self.traffic.ues_of(x)


def generate_world(n_aps: int, ue_service: list, grid: RbGrid, seed: int,
                   cell_spacing_m: float = 200.0, ap_height_m: float = 10.0,
                   ue_height_m: float = 1.5, ue_speed_ms: float = 1.4,
                   n_boxes: int = 12, sigma_pos_m: float = 1.0,
                   orbit: OrbitParams | None = None) -> WorldGeometry:
    """APs on a jittered grid, pedestrian waypoint UE tracks, random boxes."""
    rng = substream(seed, "world")
    side = int(np.ceil(np.sqrt(n_aps)))
    extent = side * cell_spacing_m
    ap_xy = []
    for i in range(n_aps):
        gx, gy = i % side, i // side
        ap_xy.append([(gx + 0.5) * cell_spacing_m, (gy + 0.5) * cell_spacing_m])
    ap_positions = np.column_stack([np.asarray(ap_xy), np.full(n_aps, ap_height_m)])

    K = len(ue_service)
    n_tf = grid.n_tf_total()
    t_step = T_TF_MS * 1e-3
    tracks = np.zeros((K, n_tf, 3))
    for k in range(K):
        pos = rng.uniform(0, extent, size=2)
        wp = rng.uniform(0, extent, size=2)
        for t in range(n_tf):
            to_wp = wp - pos
            dist = np.linalg.norm(to_wp)
            if dist < 1.0:
                wp = rng.uniform(0, extent, size=2)
                to_wp = wp - pos
                dist = np.linalg.norm(to_wp)
            pos = pos + to_wp / max(dist, 1e-9) * ue_speed_ms * t_step
            tracks[k, t, :2] = pos
            tracks[k, t, 2] = ue_height_m
    predicted = perturb_tracks(tracks, sigma_pos_m, seed)

    boxes = []
    for _ in range(n_boxes):
        center = [rng.uniform(0, extent), rng.uniform(0, extent),
                  rng.uniform(5.0, 15.0)]
        size = [rng.uniform(20.0, 60.0), rng.uniform(20.0, 60.0),
                rng.uniform(10.0, 30.0)]
        boxes.append(Box(tuple(center), tuple(size)))

    return WorldGeometry(ap_positions=ap_positions, ue_tracks=tracks,
                         ue_tracks_predicted=predicted,
                         orbit=orbit or OrbitParams(), boxes=boxes)


def generate_scenario(n_aps: int, ue_service: list, grid: RbGrid, seed: int,
                      traffic: TrafficModel | None = None,
                      sigma_pos_m: float = 1.0, arrival_error: float = 0.0,
                      **world_kwargs) -> Scenario:
    traffic = traffic or TrafficModel(ue_service=list(ue_service))
    geometry = generate_world(n_aps, ue_service, grid, seed,
                              sigma_pos_m=sigma_pos_m, **world_kwargs)
    actual = sample_arrivals(traffic, grid, seed)
    predicted = predict_realization(traffic, grid, arrival_error, seed)
    return Scenario(geometry=geometry, traffic=traffic,
                    actual=actual, predicted=predicted, seed=seed)


# ---------------------------------------------------------------------------
# Serialization (JSON schema, exact replay)
# ---------------------------------------------------------------------------

def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": sc.seed,
        "geometry": {
            "ap_positions": sc.geometry.ap_positions.tolist(),
            "ue_tracks": sc.geometry.ue_tracks.tolist(),
            "ue_tracks_predicted": sc.geometry.ue_tracks_predicted.tolist(),
            "orbit": asdict(sc.geometry.orbit),
            "boxes": [asdict(b) for b in sc.geometry.boxes],
        },
        "traffic": {
            "ue_service": list(sc.traffic.ue_service),
            "mean_packets": sc.traffic.mean_packets,
            "packet_bits": sc.traffic.packet_bits,
        },
        "actual": {"ds_bits": sc.actual.ds_bits.tolist(),
                   "tf_bits": sc.actual.tf_bits.tolist()},
        "predicted": {"ds_bits": sc.predicted.ds_bits.tolist(),
                      "tf_bits": sc.predicted.tf_bits.tolist()},
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scenario schema {d.get('schema_version')}")
    g = d["geometry"]
    geometry = WorldGeometry(
        ap_positions=np.asarray(g["ap_positions"], dtype=float),
        ue_tracks=np.asarray(g["ue_tracks"], dtype=float),
        ue_tracks_predicted=np.asarray(g["ue_tracks_predicted"], dtype=float),
        orbit=OrbitParams(**g["orbit"]),
        boxes=[Box(tuple(b["center"]), tuple(b["size"])) for b in g["boxes"]],
    )
    traffic = TrafficModel(ue_service=list(d["traffic"]["ue_service"]),
                           mean_packets=dict(d["traffic"]["mean_packets"]),
                           packet_bits=dict(d["traffic"]["packet_bits"]))
    actual = Realization("actual", np.asarray(d["actual"]["ds_bits"], dtype=float),
                         np.asarray(d["actual"]["tf_bits"], dtype=float))
    predicted = Realization("predicted",
                            np.asarray(d["predicted"]["ds_bits"], dtype=float),
                            np.asarray(d["predicted"]["tf_bits"], dtype=float))
    return Scenario(geometry, traffic, actual, predicted, int(d["seed"]))


def save_scenario(sc: Scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(sc), fh)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))
