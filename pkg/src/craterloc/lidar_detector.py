"""Three-stage crater detection in LIDAR point clouds.

1. Back walls: points whose normals face the sensor and tilt away from
   vertical, clustered by fixed-radius connectivity.
2. Rims: the front rim is the first no-data to data transition found by
   casting vertical rays into the voxel grid while walking from the cluster
   centroid back toward the sensor; the back rim is the farthest cluster point
   whose normal faces the provisional center.
3. Matching: a parametric bowl for every map candidate of similar diameter is
   slid over a grid of placements around the provisional center and scored
   against the voxels; the best placement of the best candidate wins if its
   score clears the acceptance threshold.

Stages 1 and 2 work in the gravity-aligned frame returned by
``fit_ground_plane_and_align``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .detections import CraterDetection, rover_to_site, site_to_rover
from .geometry import (NormalField, PointCloud, VoxelIndex, estimate_normals,
                       fit_ground_plane_and_align, neighbor_pairs, raycast_first_transition, voxelize)
from .landmarks import LandmarkDb, LandmarkRecord
from .state import RoverState
from .terrain import CraterSpec, crater_profile

ZONE_INTERIOR, ZONE_RIM, ZONE_PRE_RIM = 0, 1, 2
ZONE_NAMES = {ZONE_INTERIOR: "interior", ZONE_RIM: "rim", ZONE_PRE_RIM: "pre_rim_occlusion"}


@dataclass
class LidarDetectorConfig:
    voxel_size: float = 0.25
    patch_radius: float = 0.3
    normal_range_scale: float = 0.016
    min_neighbors: int = 5
    min_planarity: float = 0.05
    toward_sensor_deg: float = 60.0
    min_tilt_deg: float = 15.0
    cluster_radius_voxels: float = 3.0
    min_cluster_size: int = 20
    front_rim_min_gap: float = 0.75
    max_walk: float = 40.0
    toward_center_deg: float = 60.0
    rim_band_voxels: float = 1.0
    near_diagonals: float = 1.0
    rim_search_diagonals: float = 2.0
    rim_range_scale: float = 0.01  # m of extra rim closeness per m of range
    higher_voxels: float = 2.0
    pre_rim_penalty: float = 1.0
    rim_missing_penalty: float = 1.0
    rim_far_penalty: float = 1.0
    interior_penalty: float = 1.0
    occlusion_margin: float = 0.25
    model_rim_ratio: float = 0.04
    accept_fraction: float = -0.35
    grid_extent: float = 2.0
    grid_pitch: float = 0.25
    tie_fraction: float = 0.02
    diam_tol: float = 0.3
    sensing_radius: float = 30.0
    diam_min: float = 5.0
    diam_max: float = 20.0
    map_sigma: float = 0.5
    position_gate: float = 3.0
    default_sensor_range: float = 15.0
    default_sensor_height: float = 1.5
    thin_size: float = 0.1

    @property
    def voxel_diagonal(self) -> float:
        return self.voxel_size * math.sqrt(3.0)


class RimEstimationError(RuntimeError):
    """Stage 2 could not form a hypothesis from a cluster."""


class NoFrontRim(RimEstimationError):
    pass


class NoBackRim(RimEstimationError):
    pass


@dataclass
class BackwallCluster:
    indices: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    centroid: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class CraterHypothesis:
    front_rim: np.ndarray
    back_rim: np.ndarray
    center_xy: np.ndarray
    diameter_est: float

    @classmethod
    def from_rims(cls, front, back) -> "CraterHypothesis":
        front = np.asarray(front, dtype=float)
        back = np.asarray(back, dtype=float)
        return cls(front, back, 0.5 * (front[:2] + back[:2]), float(np.linalg.norm(back[:2] - front[:2])))


@dataclass
class ParametricCraterModel:
    landmark_id: str
    diameter: float
    depth: float
    offsets: np.ndarray  # (N, 3) sample positions relative to the center at datum
    zones: np.ndarray  # (N,) zone codes

    def __len__(self) -> int:
        return len(self.offsets)

    def zone_count(self, zone) -> int:
        return int(np.count_nonzero(self.zones == zone))


# ---------------------------------------------------------------- stage 1

def thin_cloud(cloud: PointCloud, cell: float) -> PointCloud:
    """Keep the first point of every ``cell``-sized voxel.

    Close-range returns are far denser than the normal patch needs; thinning
    bounds the neighbor-pair count without changing the far field.
    """
    if cell <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / cell).astype(np.int64)
    keys -= keys.min(0)
    span = keys.max(0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, first = np.unique(flat, return_index=True)
    return cloud.subset(np.sort(first))


def toward_sensor_mask(points, normals: NormalField, sensor_origin, cfg: LidarDetectorConfig):
    n = normals.normals
    horiz = np.hypot(n[:, 0], n[:, 1])
    tilt_ok = horiz >= math.sin(math.radians(cfg.min_tilt_deg))
    to_sensor = np.asarray(sensor_origin)[:2] - points[:, :2]
    dist = np.linalg.norm(to_sensor, axis=1)
    cosang = np.einsum("ij,ij->i", n[:, :2], to_sensor) / np.maximum(horiz * dist, 1e-12)
    bearing_ok = cosang >= math.cos(math.radians(cfg.toward_sensor_deg))
    return normals.valid & tilt_ok & bearing_ok


def find_backwall_clusters(cloud: PointCloud, normals: NormalField,
                           cfg: LidarDetectorConfig | None = None) -> list[BackwallCluster]:
    """Connected groups of sensor-facing, tilted surface points."""
    cfg = cfg or LidarDetectorConfig()
    keep = np.flatnonzero(toward_sensor_mask(cloud.points, normals, cloud.sensor_origin, cfg))
    if len(keep) < cfg.min_cluster_size:
        return []
    pts = cloud.points[keep]
    i, j = neighbor_pairs(pts, cfg.cluster_radius_voxels * cfg.voxel_size)
    graph = coo_matrix((np.ones(len(i)), (i, j)), shape=(len(pts), len(pts)))
    n_comp, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels, minlength=n_comp)
    clusters = []
    for lab in np.flatnonzero(sizes >= cfg.min_cluster_size):
        members = np.flatnonzero(labels == lab)
        idx = keep[members]
        p = cloud.points[idx]
        clusters.append(BackwallCluster(idx, p, normals.normals[idx], p.mean(0)))
    clusters.sort(key=lambda c: -len(c))
    return clusters


# ---------------------------------------------------------------- stage 2

def find_front_rim(index: VoxelIndex, centroid, sensor_origin, cfg: LidarDetectorConfig):
    """Walk from the centroid toward the sensor, one vertical ray per column.

    Returns the hit of the first data column that follows a run of no-data
    columns at least ``front_rim_min_gap`` long.
    """
    start = np.asarray(centroid, dtype=float)[:2]
    toward = np.asarray(sensor_origin, dtype=float)[:2] - start
    length = float(np.linalg.norm(toward))
    if length < 1e-9 or len(index) == 0:
        raise NoFrontRim("cluster centroid coincides with the sensor")
    toward /= length
    z_top = (index.bounds[1][2] + 2) * index.voxel_size
    step = cfg.voxel_size
    gap = 0.0
    for k in range(1, int(min(length, cfg.max_walk) / step)):
        q = start + toward * (k * step)
        hit = raycast_first_transition(index, (q[0], q[1], z_top), (0.0, 0.0, -1.0))
        if hit is None:
            gap += step
            continue
        if gap >= cfg.front_rim_min_gap:
            return np.array([q[0], q[1], hit[2]])
        gap = 0.0
    raise NoFrontRim("no data transition between the cluster and the sensor")


def backrim_candidates(cluster: BackwallCluster, center, cfg: LidarDetectorConfig) -> np.ndarray:
    """Indices (into the cluster) of points whose normal faces the 3D point ``center``."""
    to_center = np.asarray(center, dtype=float) - cluster.points
    dist = np.linalg.norm(to_center, axis=1)
    cosang = np.einsum("ij,ij->i", cluster.normals, to_center) / np.maximum(dist, 1e-12)
    return np.flatnonzero(cosang >= math.cos(math.radians(cfg.toward_center_deg)))


def estimate_rim_geometry(index: VoxelIndex, cluster: BackwallCluster, normals: NormalField | None,
                          sensor_origin, cfg: LidarDetectorConfig | None = None) -> CraterHypothesis:
    """Front rim by vertical ray casting, back rim from re-filtered normals.

    ``normals`` is accepted for interface symmetry; the cluster already carries
    the normals of its members.
    """
    cfg = cfg or LidarDetectorConfig()
    if len(cluster) == 0:
        raise NoBackRim("empty cluster")
    front = find_front_rim(index, cluster.centroid, sensor_origin, cfg)
    center0 = 0.5 * (front + cluster.centroid)
    keep = backrim_candidates(cluster, center0, cfg)
    if len(keep) == 0:
        raise NoBackRim("no cluster normal faces the provisional center")
    bearing = cluster.centroid[:2] - np.asarray(sensor_origin, dtype=float)[:2]
    bearing /= np.linalg.norm(bearing)
    pts = cluster.points[keep]
    along = (pts[:, :2] - front[:2]) @ bearing
    far = int(np.argmax(along))
    if along[far] <= 0:
        raise NoBackRim("back rim candidates lie in front of the front rim")
    back_xy = front[:2] + bearing * along[far]
    back = np.array([back_xy[0], back_xy[1], pts[far, 2]])
    return CraterHypothesis.from_rims(front, back)


# ---------------------------------------------------------------- stage 3

def model_spec(landmark: LandmarkRecord, cfg: LidarDetectorConfig) -> CraterSpec:
    rim = min(cfg.model_rim_ratio * landmark.diameter, 0.5 * landmark.depth)
    return CraterSpec(landmark.id, (0.0, 0.0), landmark.diameter, landmark.depth, rim)


def sight_clearance(spec: CraterSpec, xy, z, sensor, steps=64) -> np.ndarray:
    """Lowest height of each sample's sight line above the model surface.

    Negative values mean the bowl itself hides the sample from ``sensor``
    (all coordinates relative to the crater center at datum).
    """
    sensor = np.asarray(sensor, dtype=float)
    t = (np.arange(1, steps) / steps)[None, :]
    px = sensor[0] + t * (xy[:, :1] - sensor[0])
    py = sensor[1] + t * (xy[:, 1:2] - sensor[1])
    line = sensor[2] + t * (z[:, None] - sensor[2])
    surf = crater_profile(spec, np.hypot(px, py))
    return np.min(line - surf, axis=1)


def build_parametric_model(landmark: LandmarkRecord, cfg: LidarDetectorConfig | None = None,
                           sensor_offset=None) -> ParametricCraterModel:
    """Bowl samples on a ``voxel_size`` grid, tagged rim / interior / occluded near wall.

    ``sensor_offset`` is the sensor position relative to the crater center at
    datum height; by default the sensor sits ``default_sensor_range`` beyond the
    near rim on the -x side. Interior samples hidden behind the near rim crest
    (by at least ``occlusion_margin`` of height) form the pre-rim occlusion zone.
    """
    cfg = cfg or LidarDetectorConfig()
    spec = model_spec(landmark, cfg)
    R = spec.radius
    band = cfg.rim_band_voxels * cfg.voxel_size
    pitch = cfg.voxel_size
    n = int(math.ceil((R + band) / pitch))
    g = pitch * np.arange(-n, n + 1)
    gx, gy = np.meshgrid(g, g)
    r = np.hypot(gx, gy).ravel()
    inside = r <= R + band
    xy = np.column_stack([gx.ravel()[inside], gy.ravel()[inside]])
    r = r[inside]
    z = crater_profile(spec, r)
    zones = np.full(len(r), ZONE_INTERIOR, dtype=np.int8)
    zones[np.abs(r - R) <= band] = ZONE_RIM

    if sensor_offset is None:
        sensor_offset = (-(R + cfg.default_sensor_range), 0.0, cfg.default_sensor_height)
    s = np.asarray(sensor_offset, dtype=float)
    clearance = sight_clearance(spec, xy, z, s)
    # rim samples the sensor cannot see carry no rim evidence
    zones[(zones == ZONE_RIM) & (clearance < 0.0)] = ZONE_INTERIOR
    zones[(zones == ZONE_INTERIOR) & (clearance < -cfg.occlusion_margin)] = ZONE_PRE_RIM
    offsets = np.column_stack([xy, z])
    return ParametricCraterModel(landmark.id, landmark.diameter, landmark.depth, offsets, zones)


class OccupancyLookup:
    """Dense view of a voxel index over an xy window: nearest-voxel distance and column tops."""

    def __init__(self, index: VoxelIndex, xy_min, xy_max, z_range=None, pad_cells=6, top_window=1):
        v = index.voxel_size
        self.voxel_size = v
        lo = np.floor(np.asarray(xy_min, dtype=float) / v).astype(np.int64) - pad_cells
        hi = np.floor(np.asarray(xy_max, dtype=float) / v).astype(np.int64) + pad_cells
        cells = index.cells
        sel = cells[(cells[:, 0] >= lo[0]) & (cells[:, 0] <= hi[0]) &
                    (cells[:, 1] >= lo[1]) & (cells[:, 1] <= hi[1])]
        z_lo, z_hi = (int(math.floor(z_range[0] / v)) - pad_cells,
                      int(math.floor(z_range[1] / v)) + pad_cells) if z_range else (0, 0)
        if len(sel):
            z_lo = min(z_lo, int(sel[:, 2].min())) if z_range else int(sel[:, 2].min()) - pad_cells
            z_hi = max(z_hi, int(sel[:, 2].max())) if z_range else int(sel[:, 2].max()) + pad_cells
        self.lo = np.array([lo[0], lo[1], z_lo])
        shape = (int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1), int(z_hi - z_lo + 1))
        occ = np.zeros(shape, dtype=bool)
        if len(sel):
            k = sel - self.lo
            occ[k[:, 0], k[:, 1], k[:, 2]] = True
        self.occ = occ
        self.empty = not occ.any()
        if self.empty:
            self.dist = np.full(shape, np.inf)
        else:
            self.dist = ndimage.distance_transform_edt(~occ) * v
        top = np.where(occ.any(axis=2), shape[2] - 1 - np.argmax(occ[:, :, ::-1], axis=2), -10 ** 6)
        self.top_nbhd = top if top_window <= 1 else ndimage.maximum_filter(top, size=top_window, mode="constant",
                                                                           cval=-10 ** 6)

    def cells_of(self, pts) -> tuple[np.ndarray, np.ndarray]:
        k = np.floor(pts / self.voxel_size).astype(np.int64) - self.lo
        inside = np.all((k >= 0) & (k < np.array(self.occ.shape)), axis=-1)
        return np.where(inside[..., None], k, 0), inside


def score_placements(lookup: OccupancyLookup, model: ParametricCraterModel, placements,
                     ground_z=0.0, cfg: LidarDetectorConfig | None = None, sensor_xy=(0.0, 0.0)) -> np.ndarray:
    """Score of the model centered at each (x, y) placement; 0 is a perfect fit."""
    cfg = cfg or LidarDetectorConfig()
    placements = np.atleast_2d(np.asarray(placements, dtype=float))
    shift = np.column_stack([placements, np.full(len(placements), ground_z)])
    pts = shift[:, None, :] + model.offsets[None, :, :]
    k, inside = lookup.cells_of(pts)
    dist = np.where(inside, lookup.dist[k[..., 0], k[..., 1], k[..., 2]], np.inf)
    top = np.where(inside, lookup.top_nbhd[k[..., 0], k[..., 1]], -10 ** 6)
    zones = model.zones[None, :]
    diag = cfg.voxel_diagonal
    near = dist <= cfg.near_diagonals * diag
    pen = np.zeros(dist.shape)
    # the near wall is in shadow: any return at or above it contradicts the model
    seen = near | (inside & (top >= k[..., 2]))
    pen -= np.where((zones == ZONE_PRE_RIM) & seen, cfg.pre_rim_penalty, 0.0)
    rim = zones == ZONE_RIM
    # returns thin out with range; rim closeness grows with the sample's distance to the sensor
    spread = cfg.rim_range_scale * np.hypot(pts[..., 0] - sensor_xy[0], pts[..., 1] - sensor_xy[1])
    missing = dist > cfg.rim_search_diagonals * diag + spread
    close = dist <= cfg.near_diagonals * diag + spread
    pen -= np.where(rim & missing, cfg.rim_missing_penalty, 0.0)
    pen -= np.where(rim & ~missing & ~close, cfg.rim_far_penalty, 0.0)
    higher = top - k[..., 2] >= cfg.higher_voxels
    pen -= np.where((zones == ZONE_INTERIOR) & inside & higher, cfg.interior_penalty, 0.0)
    return pen.sum(axis=1)


def score_placement(index: VoxelIndex, model: ParametricCraterModel, placement_xy, ground_z=0.0,
                    cfg: LidarDetectorConfig | None = None, sensor_xy=(0.0, 0.0)) -> float:
    cfg = cfg or LidarDetectorConfig()
    p = np.asarray(placement_xy, dtype=float)
    reach = np.abs(model.offsets[:, :2]).max(initial=0.0) + cfg.voxel_diagonal * 3
    zr = (ground_z + model.offsets[:, 2].min(initial=0.0), ground_z + model.offsets[:, 2].max(initial=0.0))
    lookup = OccupancyLookup(index, p - reach, p + reach, zr)
    return float(score_placements(lookup, model, p[None, :], ground_z, cfg, sensor_xy)[0])


def placement_grid(center_xy, cfg: LidarDetectorConfig) -> np.ndarray:
    n = int(round(cfg.grid_extent / cfg.grid_pitch))
    g = cfg.grid_pitch * np.arange(-n, n + 1)
    gx, gy = np.meshgrid(g, g)
    offsets = np.column_stack([gx.ravel(), gy.ravel()])
    # nearest-to-center first so ties resolve toward the hypothesis
    order = np.argsort(np.hypot(offsets[:, 0], offsets[:, 1]), kind="stable")
    return np.asarray(center_xy, dtype=float)[:2] + offsets[order]


def refine_placement(grid, scores, n_samples, cfg: LidarDetectorConfig) -> np.ndarray:
    """Mean of the placements scoring within ``tie_fraction`` of the best.

    Nearby placements often tie; averaging them removes the bias of picking
    one grid node.
    """
    top = float(np.max(scores))
    near = scores >= top - cfg.tie_fraction * n_samples
    return grid[near].mean(axis=0)


def similar_diameter(hyp_diameter, candidate_diameter, tol) -> bool:
    return abs(hyp_diameter - candidate_diameter) <= tol * candidate_diameter


def match_candidates(index: VoxelIndex, hypothesis: CraterHypothesis, candidates, cfg=None,
                     ground_z=0.0, sensor_origin=(0.0, 0.0, 0.0)) -> CraterDetection | None:
    """Best-scoring candidate placement around the hypothesis center, if accepted.

    The returned detection is expressed in the frame of ``index``.
    """
    cfg = cfg or LidarDetectorConfig()
    best = None
    grid = placement_grid(hypothesis.center_xy, cfg)
    sensor = np.asarray(sensor_origin, dtype=float)
    for cand in candidates:
        if not similar_diameter(hypothesis.diameter_est, cand.diameter, cfg.diam_tol):
            continue
        offset = sensor - np.array([hypothesis.center_xy[0], hypothesis.center_xy[1], ground_z])
        model = build_parametric_model(cand, cfg, offset)
        reach = cand.diameter / 2 + cfg.rim_band_voxels * cfg.voxel_size + cfg.grid_extent
        zr = (ground_z + model.offsets[:, 2].min(), ground_z + model.offsets[:, 2].max())
        lookup = OccupancyLookup(index, hypothesis.center_xy - reach, hypothesis.center_xy + reach, zr)
        scores = score_placements(lookup, model, grid, ground_z, cfg, sensor[:2])
        k = int(np.argmax(scores))
        score = float(scores[k])
        threshold = cfg.accept_fraction * len(model)
        if score < threshold:
            continue
        normalized = score / max(len(model), 1)
        if best is None or normalized > best[0]:
            best = (normalized, cand, refine_placement(grid, scores, len(model), cfg))
    if best is None:
        return None
    normalized, cand, xy = best
    return CraterDetection((float(xy[0]), float(xy[1])), cand.diameter, normalized, cand.id, "lidar",
                           (float(xy[0]), float(xy[1])))


# ---------------------------------------------------------------- pipeline

@dataclass
class LidarDebug:
    """Intermediate products of ``detect_lidar`` for inspection and tests."""
    alignment: object = None
    clusters: list = field(default_factory=list)
    hypotheses: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def detect_lidar(cloud: PointCloud, prior: RoverState, db: LandmarkDb,
                 cfg: LidarDetectorConfig | None = None, debug: LidarDebug | None = None):
    """Full pipeline on a sensor-frame cloud; detections are returned in the site frame.

    Only points within reach of a map candidate are processed: the pose prior
    bounds where a candidate can appear.
    """
    cfg = cfg or LidarDetectorConfig()
    if not np.all(np.isfinite(prior.covariance)):
        raise ValueError("prior covariance must be finite")
    three_sigma = 3.0 * prior.sigma_max()
    candidates = db.query_radius(prior.position, three_sigma + cfg.sensing_radius,
                                 (cfg.diam_min, cfg.diam_max))
    if not candidates:
        return []
    aligned = fit_ground_plane_and_align(cloud)
    rot, ground_z = aligned.rotation, aligned.ground_z
    if debug is not None:
        debug.alignment = aligned
    pts = aligned.cloud.points
    sensor = np.asarray(aligned.cloud.sensor_origin)

    # predicted candidate centers in the aligned frame
    gate = three_sigma + 3.0 * cfg.map_sigma + cfg.position_gate
    pred = []
    for cand in candidates:
        rx, ry = site_to_rover(cand.position, prior.pose)
        pred.append((rot @ np.array([rx, ry, 0.0]))[:2])
    pred = np.array(pred)
    radii = np.array([c.diameter / 2 for c in candidates]) + gate
    d2c = np.linalg.norm(pts[:, None, :2] - pred[None, :, :], axis=2)
    roi = np.any(d2c <= radii[None, :] + 1.0, axis=1)
    if not roi.any():
        return []
    roi_cloud = thin_cloud(aligned.cloud.subset(roi), cfg.thin_size)
    normals = estimate_normals(roi_cloud, cfg.patch_radius, cfg.min_neighbors, cfg.min_planarity,
                               cfg.normal_range_scale)
    clusters = find_backwall_clusters(roi_cloud, normals, cfg)
    index = voxelize(aligned.cloud, cfg.voxel_size)
    if debug is not None:
        debug.clusters = clusters

    found: dict[str, CraterDetection] = {}
    for cluster in clusters:
        try:
            hyp = estimate_rim_geometry(index, cluster, normals, sensor, cfg)
        except RimEstimationError as exc:
            if debug is not None:
                debug.failures.append(str(exc))
            continue
        if debug is not None:
            debug.hypotheses.append(hyp)
        near = [c for c, p, r in zip(candidates, pred, radii)
                if np.linalg.norm(p - hyp.center_xy) <= r]
        det = match_candidates(index, hyp, near, cfg, ground_z, sensor)
        if det is None:
            continue
        prev = found.get(det.landmark_id)
        if prev is None or det.score > prev.score:
            found[det.landmark_id] = det

    out = []
    for det in found.values():
        p_sensor = rot.T @ np.array([det.center_xy[0], det.center_xy[1], ground_z])
        rover_xy = (float(p_sensor[0]), float(p_sensor[1]))
        site = rover_to_site(rover_xy, prior.pose)
        near_rim = max(math.hypot(*rover_xy) - det.diameter / 2, 0.0)
        out.append(CraterDetection(site, det.diameter, det.score, det.landmark_id, "lidar",
                                   rover_xy, near_rim))
    out.sort(key=lambda d: d.landmark_id)
    return out
