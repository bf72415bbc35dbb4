"""Absolute rover localization against a crater landmark map.

Dead reckoning grows the position covariance with distance; crater
detections are associated to map landmarks and fused as position fixes.
Heading is treated as known (star-camera attitude), so the measurement model
is linear in position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .detections import CraterDetection, site_to_rover
from .landmarks import LandmarkDb, LandmarkRecord
from .state import RoverState, wrap_angle


class SingularFusion(ValueError):
    """Measurement covariance is not positive semi-definite or the fusion is singular."""


@dataclass
class OdometrySegment:
    delta_forward: float  # m
    delta_heading: float = 0.0  # rad, applied before moving
    drift_fraction: float = 0.02

    def __post_init__(self):
        if self.drift_fraction < 0:
            raise ValueError("drift_fraction must be >= 0")


@dataclass
class MatchSet:
    pairs: list = field(default_factory=list)  # (CraterDetection, LandmarkRecord)
    residuals: list = field(default_factory=list)  # m, detection site position to landmark

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def landmark_ids(self) -> list[str]:
        return [rec.id for _, rec in self.pairs]


@dataclass
class LocalizerConfig:
    drift_reference_m: float = 100.0  # distance at which 1-sigma drift equals drift x distance
    sensing_radius: float = 30.0
    diam_tol: float = 0.3
    consistency_tol: float = 1.0
    gate_sigmas: float = 3.0
    map_sigma: float = 0.5  # m per axis, landmark registration error
    heading_sigma_deg: float = 0.1
    min_meas_sigma: float = 0.1  # m per axis
    local_map_distance: float = 100.0
    innovation_gate_p: float = 0.999  # fixes whose innovation falls outside this chi-square(2) mass are rejected

    def pair_tolerance(self) -> float:
        """Allowed disagreement of two matches on the rover position.

        ``consistency_tol`` covers detector error; each landmark-to-landmark
        distance also carries two independent map errors, gated at ``gate_sigmas``.
        """
        return math.hypot(self.consistency_tol, self.gate_sigmas * math.sqrt(2.0) * self.map_sigma)


# ---------------------------------------------------------------- dead reckoning

def drift_sigma(distance: float, drift_fraction: float, reference_m: float = 100.0) -> float:
    """Per-axis 1-sigma dead-reckoning error accumulated over ``distance``.

    Variance grows linearly with distance and equals ``(drift * reference)^2``
    after ``reference_m`` of travel.
    """
    return drift_fraction * math.sqrt(abs(distance) * reference_m)


def propagate(state: RoverState, odo: OdometrySegment, seed=None, reference_m=100.0) -> RoverState:
    """Move along the (known) heading and add dead-reckoning noise.

    ``seed`` may be an int, a ``numpy.random.Generator`` or None (no noise is
    drawn, only the covariance grows).
    """
    heading = wrap_angle(state.heading + odo.delta_heading)
    step = np.array([math.cos(heading), math.sin(heading)]) * odo.delta_forward
    sigma = drift_sigma(odo.delta_forward, odo.drift_fraction, reference_m)
    noise = np.zeros(2)
    if sigma > 0 and seed is not None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        noise = rng.normal(0.0, sigma, 2)
    return RoverState(state.position + step + noise, heading, state.covariance + np.eye(2) * sigma ** 2,
                      state.distance_traveled + abs(odo.delta_forward))


# ---------------------------------------------------------------- measurement model

def _fill_nearest(row) -> np.ndarray:
    """Replace NaNs with the nearest finite entry of the row (0 if there is none)."""
    row = np.asarray(row, dtype=float)
    ok = np.flatnonzero(np.isfinite(row))
    if not len(ok):
        return np.zeros_like(row)
    nearest = ok[np.argmin(np.abs(np.arange(len(row))[:, None] - ok[None, :]), axis=1)]
    return row[nearest]


class DetectorErrorModel:
    """Per-axis detector center error by crater diameter and near-rim range.

    Tables hold the errors measured by the evaluation harness: the mean error
    along the sensor-to-crater line (``range_bias``) and the RMS radial error
    left after removing it. Lookups clamp to the table edges and interpolate
    bilinearly.
    """

    def __init__(self, method, diameters, ranges, radial_rms, floor=0.1, range_bias=None):
        self.method = method
        self.diameters = np.asarray(diameters, dtype=float)
        self.ranges = np.asarray(ranges, dtype=float)
        shape = (len(self.diameters), len(self.ranges))
        self.radial_rms = np.asarray(radial_rms, dtype=float).reshape(shape)
        self.floor = float(floor)
        # cells with no detections inherit the largest measured error
        worst = np.nanmax(self.radial_rms) if np.isfinite(self.radial_rms).any() else 1.0
        self.radial_rms = np.where(np.isfinite(self.radial_rms), self.radial_rms, worst)
        bias = np.zeros(shape) if range_bias is None else np.asarray(range_bias, dtype=float).reshape(shape)
        self.range_bias = np.array([_fill_nearest(row) for row in bias])

    @staticmethod
    def _interp_index(grid, v):
        if len(grid) == 1:
            return 0, 0, 0.0
        v = min(max(v, grid[0]), grid[-1])
        i = int(np.clip(np.searchsorted(grid, v) - 1, 0, len(grid) - 2))
        f = (v - grid[i]) / (grid[i + 1] - grid[i])
        return i, i + 1, f

    def _lookup(self, table, diameter, range_m) -> float:
        i0, i1, fi = self._interp_index(self.diameters, diameter)
        j0, j1, fj = self._interp_index(self.ranges, range_m if math.isfinite(range_m) else self.ranges[-1])
        return float((1 - fi) * (1 - fj) * table[i0, j0] + fi * (1 - fj) * table[i1, j0]
                     + (1 - fi) * fj * table[i0, j1] + fi * fj * table[i1, j1])

    def sigma(self, diameter, range_m) -> float:
        """Per-axis 1-sigma center error (m) after the bias correction."""
        return max(self._lookup(self.radial_rms, diameter, range_m) / math.sqrt(2.0), self.floor)

    def bias(self, diameter, range_m) -> float:
        """Mean center error along the line of sight (m); negative means too close."""
        return self._lookup(self.range_bias, diameter, range_m)

    @classmethod
    def from_json(cls, d: dict) -> "DetectorErrorModel":
        # tables with a bias column store the spread left after removing it
        rms = d["residual_rms_m"] if "range_bias_m" in d else d["radial_rms_m"]
        bias = d.get("range_bias_m")
        rows = [[math.nan if v is None else v for v in row] for row in bias] if bias is not None else None
        return cls(d["method"], d["diameters_m"], d["ranges_m"],
                   [[math.nan if v is None else v for v in row] for row in rms], d.get("floor_m", 0.1), rows)

    def to_json(self) -> dict:
        return {"method": self.method, "diameters_m": self.diameters.tolist(), "ranges_m": self.ranges.tolist(),
                "residual_rms_m": self.radial_rms.tolist(), "range_bias_m": self.range_bias.tolist(),
                "floor_m": self.floor}

    @classmethod
    def load(cls, path) -> "DetectorErrorModel":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def packaged(cls, method: str) -> "DetectorErrorModel":
        """Error table shipped with the package for ``method`` ("lidar" or "stereo")."""
        text = resources.files("craterloc").joinpath("data", f"{method}_errors.json").read_text()
        return cls.from_json(json.loads(text))


def detection_offset(det: CraterDetection, error_models: dict | None = None) -> np.ndarray:
    """Heading-aligned rover-to-crater offset, with the calibrated range bias removed."""
    off = np.asarray(det.center_rover, dtype=float)
    model = (error_models or {}).get(det.method)
    dist = float(np.hypot(*off))
    if model is None or dist == 0.0:
        return off
    return off * (1.0 - model.bias(det.diameter, det.range_m) / dist)


def implied_position(det: CraterDetection, rec: LandmarkRecord, heading: float,
                     error_models: dict | None = None) -> np.ndarray:
    """Rover position implied by matching ``det`` to ``rec``."""
    c, s = math.cos(heading), math.sin(heading)
    off = detection_offset(det, error_models)
    return np.asarray(rec.position) - np.array([c * off[0] - s * off[1], s * off[0] + c * off[1]])


def measurement_covariance(det: CraterDetection, error_models: dict | None, cfg: LocalizerConfig,
                           include_map=True) -> np.ndarray:
    """Per-axis detector error, heading error lever arm and (optionally) map error."""
    model = (error_models or {}).get(det.method)
    sigma = model.sigma(det.diameter, det.range_m) if model is not None else 0.5
    sigma = max(sigma, cfg.min_meas_sigma)
    lever = float(np.hypot(*detection_offset(det))) * math.radians(cfg.heading_sigma_deg)
    var = sigma ** 2 + lever ** 2 + (cfg.map_sigma ** 2 if include_map else 0.0)
    return np.eye(2) * var


# ---------------------------------------------------------------- association

def _candidates_for(det, db_candidates, prior: RoverState, cfg: LocalizerConfig, meas_sigma):
    pos = np.asarray(det.center_xy)
    gate = cfg.gate_sigmas * math.sqrt(prior.sigma_max() ** 2 + meas_sigma ** 2 + cfg.map_sigma ** 2) \
        + cfg.consistency_tol
    out = []
    for rec in db_candidates:
        if det.landmark_id is not None and rec.id != det.landmark_id:
            continue
        if abs(det.diameter - rec.diameter) > cfg.diam_tol * rec.diameter:
            continue
        resid = float(np.linalg.norm(np.asarray(rec.position) - pos))
        if resid <= gate:
            out.append((resid, rec))
    out.sort(key=lambda t: t[0])
    return out


def associate(detections, db: LandmarkDb, prior: RoverState, cfg: LocalizerConfig | None = None,
              error_models: dict | None = None) -> MatchSet:
    """Largest mutually consistent assignment of detections to landmarks.

    Consistency means every pair of matches agrees on the rover translation
    within ``cfg.pair_tolerance()``. Among equally large sets the one with the
    smallest total residual wins. Detections carrying a landmark id (LIDAR
    model matches) only consider that landmark.
    """
    cfg = cfg or LocalizerConfig()
    dets = list(detections)
    if not dets or len(db) == 0:
        return MatchSet()
    radius = cfg.gate_sigmas * prior.sigma_max() + cfg.sensing_radius
    cands = db.query_radius(prior.position, radius)
    options = []
    for det in dets:
        meas = math.sqrt(measurement_covariance(det, error_models, cfg, include_map=False)[0, 0])
        options.append(_candidates_for(det, cands, prior, cfg, meas))
    implied = [[implied_position(d, rec, prior.heading, error_models) for _, rec in opts]
               for d, opts in zip(dets, options)]

    tol = cfg.pair_tolerance()
    order = sorted(range(len(dets)), key=lambda i: len(options[i]))
    best = {"n": 0, "cost": math.inf, "choice": {}}

    def search(k, choice, used, cost):
        n = len(choice)
        remaining = sum(1 for i in order[k:] if options[i])
        if n + remaining < best["n"]:
            return
        if k == len(order):
            if n > best["n"] or (n == best["n"] and cost < best["cost"]):
                best.update(n=n, cost=cost, choice=dict(choice))
            return
        i = order[k]
        for j, (resid, rec) in enumerate(options[i]):
            if rec.id in used:
                continue
            p = implied[i][j]
            if all(np.linalg.norm(p - implied[i2][j2]) <= tol for i2, j2 in choice.items()):
                choice[i] = j
                used.add(rec.id)
                search(k + 1, choice, used, cost + resid ** 2)
                used.discard(rec.id)
                del choice[i]
        search(k + 1, choice, used, cost)

    search(0, {}, set(), 0.0)
    ms = MatchSet()
    for i in sorted(best["choice"]):
        resid, rec = options[i][best["choice"][i]]
        ms.pairs.append((dets[i], rec))
        ms.residuals.append(resid)
    return ms


# ---------------------------------------------------------------- fusion

def _check_psd(r: np.ndarray):
    if not np.all(np.isfinite(r)) or not np.allclose(r, r.T, atol=1e-12) or np.linalg.eigvalsh(r)[0] < -1e-12:
        raise SingularFusion("measurement covariance must be finite, symmetric and PSD")


def update(state: RoverState, matches: MatchSet, error_models: dict | None = None,
           cfg: LocalizerConfig | None = None, meas_cov=None) -> RoverState:
    """Covariance-weighted least-squares fusion of the matched position fixes.

    ``meas_cov`` overrides the per-match covariance: a 2x2 array, or a callable
    ``(detection, landmark) -> 2x2``. Each fix is applied as a Kalman step, which
    equals the batch information-form solution and stays exact when a
    covariance is zero.
    """
    cfg = cfg or LocalizerConfig()
    if len(matches) == 0:
        raise ValueError("update needs at least one match")
    x = state.position.copy()
    P = state.covariance.copy()
    for det, rec in matches.pairs:
        if meas_cov is None:
            R = measurement_covariance(det, error_models, cfg)
        elif callable(meas_cov):
            R = np.asarray(meas_cov(det, rec), dtype=float)
        else:
            R = np.asarray(meas_cov, dtype=float)
        _check_psd(R)
        z = implied_position(det, rec, state.heading, error_models)
        S = P + R
        if abs(np.linalg.det(S)) < 1e-18:
            raise SingularFusion("prior and measurement are both exact")
        K = P @ np.linalg.inv(S)
        x = x + K @ (z - x)
        P = (np.eye(2) - K) @ P
        P = 0.5 * (P + P.T)
    return RoverState(x, state.heading, P, state.distance_traveled)


class LocalMapFilter:
    """Rover position plus the map errors of recently seen landmarks.

    A landmark's map error is common to every observation of it, so repeated
    fixes from one crater are not independent. Each active landmark gets its
    own position state (initialized from the map with ``map_sigma``); it is
    dropped once the rover has moved ``local_map_distance`` past its last
    sighting.
    """

    def __init__(self, state: RoverState, cfg: LocalizerConfig | None = None):
        self.cfg = cfg or LocalizerConfig()
        self.x = state.position.astype(float).copy()
        self.P = state.covariance.astype(float).copy()
        self.heading = state.heading
        self.distance = state.distance_traveled
        self.slots: dict[str, int] = {}
        self.last_seen: dict[str, float] = {}

    @property
    def state(self) -> RoverState:
        return RoverState(self.x[:2].copy(), self.heading, self.P[:2, :2].copy(), self.distance)

    def propagate(self, odo: OdometrySegment, rng=None):
        s = propagate(self.state, odo, rng, self.cfg.drift_reference_m)
        q = s.covariance - self.P[:2, :2]
        self.x[:2] = s.position
        self.P[:2, :2] += q
        self.heading = s.heading
        self.distance = s.distance_traveled
        self._expire()

    def _expire(self):
        stale = [k for k, d in self.last_seen.items() if self.distance - d > self.cfg.local_map_distance]
        if not stale:
            return
        keep = [0, 1]
        for lid, slot in sorted(self.slots.items(), key=lambda t: t[1]):
            if lid not in stale:
                keep += [slot, slot + 1]
        self.x = self.x[keep]
        self.P = self.P[np.ix_(keep, keep)]
        live = sorted((s, lid) for lid, s in self.slots.items() if lid not in stale)
        self.slots = {lid: 2 + 2 * k for k, (_, lid) in enumerate(live)}
        for lid in stale:
            self.last_seen.pop(lid)

    def _slot(self, rec: LandmarkRecord) -> int:
        if rec.id not in self.slots:
            n = len(self.x)
            self.x = np.concatenate([self.x, np.asarray(rec.position, dtype=float)])
            P = np.zeros((n + 2, n + 2))
            P[:n, :n] = self.P
            P[n:, n:] = np.eye(2) * self.cfg.map_sigma ** 2
            self.P = P
            self.slots[rec.id] = n
        return self.slots[rec.id]

    def update(self, matches: MatchSet, error_models: dict | None = None, extra_var: dict | None = None) -> list:
        """Apply each match and return the applied pairs.

        ``extra_var`` maps ``id(detection)`` to added per-axis variance. A match
        whose normalized innovation exceeds the chi-square(2) quantile at
        ``innovation_gate_p`` is treated as a detector outlier and skipped.
        """
        # chi-square with 2 DoF has the closed-form quantile -2 ln(1 - p)
        gate = -2.0 * math.log1p(-self.cfg.innovation_gate_p) if self.cfg.innovation_gate_p < 1 else math.inf
        applied = []
        for det, rec in matches.pairs:
            j = self._slot(rec)
            self.last_seen[rec.id] = self.distance
            R = measurement_covariance(det, error_models, self.cfg, include_map=False)
            R = R + np.eye(2) * (extra_var or {}).get(id(det), 0.0)
            _check_psd(R)
            # measurement: rotated detection offset = landmark - rover
            c, s = math.cos(self.heading), math.sin(self.heading)
            off = detection_offset(det, error_models)
            z = np.array([c * off[0] - s * off[1], s * off[0] + c * off[1]])
            H = np.zeros((2, len(self.x)))
            H[:, :2] = -np.eye(2)
            H[:, j:j + 2] = np.eye(2)
            S = H @ self.P @ H.T + R
            if abs(np.linalg.det(S)) < 1e-18:
                raise SingularFusion("innovation covariance is singular")
            S_inv = np.linalg.inv(S)
            y = z - H @ self.x
            if float(y @ S_inv @ y) > gate:
                continue
            K = self.P @ H.T @ S_inv
            self.x = self.x + K @ y
            I_KH = np.eye(len(self.x)) - K @ H
            self.P = I_KH @ self.P @ I_KH.T + K @ R @ K.T
            self.P = 0.5 * (self.P + self.P.T)
            applied.append((det, rec))
        return applied


# ---------------------------------------------------------------- traverse

@dataclass
class TraverseConfig:
    step_m: float = 1.0
    update_every_m: float = 10.0
    drift_fraction: float = 0.02
    initial_sigma: float = 0.5  # m per axis
    detector: str = "lidar"  # "lidar" | "stereo" | "none"
    lidar_max_range: float = 30.0  # m, beyond the sensing radius nothing is used
    buffer_distance: float = 100.0  # m an unmatched detection stays eligible
    # LIDAR detections scoring below this are marginal matches, often meters off; they are not used as fixes
    min_lidar_fix_score: float = -0.05

    def __post_init__(self):
        if not (self.step_m > 0 and self.update_every_m > 0):
            raise ValueError("step_m and update_every_m must be > 0")
        if self.detector not in ("lidar", "stereo", "none"):
            raise ValueError(f"unknown detector {self.detector!r}")


@dataclass
class TraverseStep:
    t: int
    truth_xy: tuple[float, float]
    est_xy: tuple[float, float]
    cov: list
    n_matches: int
    matched_ids: list
    sensed: bool = False
    error: str | None = None

    def to_json(self) -> dict:
        d = {"t": self.t, "truth_xy": list(self.truth_xy), "est_xy": list(self.est_xy), "cov": self.cov,
             "n_matches": self.n_matches, "matched_ids": self.matched_ids, "sensed": self.sensed}
        if self.error is not None:
            d["error"] = self.error
        return d

    @property
    def error_vec(self) -> np.ndarray:
        return np.asarray(self.est_xy) - np.asarray(self.truth_xy)

    def nees(self) -> float:
        e = self.error_vec
        return float(e @ np.linalg.solve(np.asarray(self.cov), e))


@dataclass
class TraverseLog:
    steps: list = field(default_factory=list)
    seed: int = 0

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for s in self.steps:
                f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TraverseLog":
        steps = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                steps.append(TraverseStep(d["t"], tuple(d["truth_xy"]), tuple(d["est_xy"]), d["cov"],
                                          d["n_matches"], d["matched_ids"], d.get("sensed", False),
                                          d.get("error")))
        return cls(steps)

    def errors(self) -> np.ndarray:
        return np.array([s.error_vec for s in self.steps])

    def three_sigma(self) -> np.ndarray:
        """3x the largest 1-sigma axis of the estimated covariance, per step."""
        return np.array([3.0 * math.sqrt(max(np.linalg.eigvalsh(np.asarray(s.cov))[-1], 0.0))
                         for s in self.steps])


def route_headings(route) -> list[tuple[float, float]]:
    """(length, heading) of each route leg."""
    pts = np.asarray(route, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("route needs at least two (x, y) waypoints")
    legs = []
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        length = float(np.hypot(*d))
        if length > 0:
            legs.append((length, math.atan2(d[1], d[0])))
    return legs


def load_route(path) -> list[tuple[float, float]]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["waypoints"]
    return [(float(p[0]), float(p[1])) for p in data]


def _scene_at(scenes, xy):
    for sc in scenes:
        if bool(sc.heightfield.contains(xy[0], xy[1])):
            return sc
    raise ValueError(f"rover position {tuple(xy)} lies outside every scene footprint")


def _sense(scene, pose, est: RoverState, db, cfg: TraverseConfig, cfgs: dict, seed):
    """Simulate the sensor at the true pose and detect relative to the estimate."""
    from dataclasses import replace

    here = replace(scene, rover_pose=tuple(float(v) for v in pose))
    if cfg.detector == "lidar":
        from .lidar_detector import detect_lidar
        from .sensors import LidarConfig, simulate_lidar

        lcfg = cfgs.get("lidar_sensor") or LidarConfig(max_range=cfg.lidar_max_range)
        if not db.query_radius(est.position, 3.0 * est.sigma_max() + cfg.lidar_max_range):
            return []
        cloud = simulate_lidar(here, lcfg, seed)
        dets = detect_lidar(cloud, est, db, cfgs.get("lidar_detector"))
        return [d for d in dets if d.score >= cfg.min_lidar_fix_score]
    from .sensors import simulate_stereo
    from .stereo_detector import detect_stereo

    dmap, _ = simulate_stereo(here, cfgs.get("stereo_sensor"), seed)
    return detect_stereo(dmap, cfgs.get("stereo_detector"), est.pose)


def run_traverse(scenes, route, db: LandmarkDb, cfg: TraverseConfig | None = None, seed=0,
                 cfgs: dict | None = None, error_models: dict | None = None,
                 loc_cfg: LocalizerConfig | None = None) -> TraverseLog:
    """Drive ``route`` exactly in truth while the estimate dead-reckons and takes fixes.

    ``cfgs`` may hold "lidar_sensor", "lidar_detector", "stereo_sensor" and
    "stereo_detector" overrides. Error models default to the packaged tables.
    """
    from .terrain import SceneTruth

    cfg = cfg or TraverseConfig()
    loc_cfg = loc_cfg or LocalizerConfig()
    cfgs = cfgs or {}
    if isinstance(scenes, SceneTruth):
        scenes = [scenes]
    if error_models is None and cfg.detector != "none":
        error_models = {cfg.detector: DetectorErrorModel.packaged(cfg.detector)}
    legs = route_headings(route)
    ss = np.random.SeedSequence(seed)
    drift_ss, init_ss, sense_ss = ss.spawn(3)
    drift_rng = np.random.default_rng(drift_ss)
    init_rng = np.random.default_rng(init_ss)
    truth = np.asarray(route[0], dtype=float)
    heading = legs[0][1]
    est0 = truth + init_rng.normal(0.0, cfg.initial_sigma, 2)
    filt = LocalMapFilter(RoverState(est0, heading, np.eye(2) * cfg.initial_sigma ** 2), loc_cfg)
    log = TraverseLog(seed=int(seed))
    buffer: list[tuple[CraterDetection, float, np.ndarray]] = []  # detection, distance seen, site xy
    since_update = 0.0
    t = 0

    def record(n=0, ids=(), sensed=False, error=None):
        st = filt.state
        log.steps.append(TraverseStep(t, (float(truth[0]), float(truth[1])),
                                      (float(st.position[0]), float(st.position[1])),
                                      st.covariance.tolist(), n, list(ids), sensed, error))

    record()
    for length, leg_heading in legs:
        n_steps = max(int(math.ceil(length / cfg.step_m - 1e-9)), 1)
        step = length / n_steps
        for k in range(n_steps):
            dh = wrap_angle(leg_heading - filt.heading) if k == 0 else 0.0
            heading = leg_heading
            truth = truth + step * np.array([math.cos(heading), math.sin(heading)])
            filt.propagate(OdometrySegment(step, dh, cfg.drift_fraction), drift_rng)
            t += 1
            since_update += step
            if cfg.detector == "none" or since_update + 1e-9 < cfg.update_every_m:
                record()
                continue
            since_update = 0.0
            try:
                est = filt.state
                pose = (truth[0], truth[1], heading)
                sense_seed = int(sense_ss.spawn(1)[0].generate_state(1)[0])
                dets = _sense(_scene_at(scenes, truth), pose, est, db, cfg, cfgs, sense_seed)
                # buffered detections: re-express relative to the current estimate
                pool = list(dets)
                extra = {}
                for det, dist, site in buffer:
                    rel = site_to_rover(site, est.pose)
                    moved = CraterDetection(tuple(float(v) for v in site), det.diameter, det.score,
                                            det.landmark_id, det.method, rel, det.range_m)
                    pool.append(moved)
                    # dead-reckoning error accrued since the sighting
                    extra[id(moved)] = drift_sigma(filt.distance - dist, cfg.drift_fraction,
                                                   loc_cfg.drift_reference_m) ** 2
                matches = associate(pool, db, est, loc_cfg, error_models)
                applied = filt.update(matches, error_models, extra) if len(matches) else []
                used = {id(d) for d, _ in matches.pairs}
                # buffered sightings keep the site position they had when seen; a fix
                # moves the estimate but not the dead-reckoned chain they hang off
                shift = filt.state.position - est.position
                kept = []
                for i, (det, dist, site) in enumerate(buffer):
                    if id(pool[len(dets) + i]) not in used and filt.distance - dist <= cfg.buffer_distance:
                        kept.append((det, dist, np.asarray(site) + shift))
                for det in dets:
                    if id(det) not in used:
                        kept.append((det, filt.distance, np.asarray(det.center_xy) + shift))
                buffer = kept
                record(len(applied), [rec.id for _, rec in applied], True)
            except Exception as exc:  # noqa: BLE001 - a failed step is logged and the traverse continues
                record(sensed=True, error=f"{type(exc).__name__}: {exc}")
    return log


def traverse_world(length=500.0, density_per_100m=3.5, seed=0, cell_size=0.1, diameters=(5.0, 12.0),
                   lateral_gap=(3.0, 10.0), roughness=0.03, margin=40.0):
    """Straight east-bound route with craters scattered beside it.

    Craters are stratified along the route (one per ``100 / density`` meters)
    on a random side, with the near rim ``lateral_gap`` meters off the route.
    Returns ``(scene, route)``.
    """
    from .terrain import CraterSpec, synthesize_scene

    rng = np.random.default_rng(seed)
    n = max(int(round(density_per_100m * length / 100.0)), 0)
    pitch = length / max(n, 1)
    craters = []
    for i in range(n):
        d = float(rng.uniform(*diameters))
        side = 1.0 if rng.random() < 0.5 else -1.0
        y = side * (0.5 * d + float(rng.uniform(*lateral_gap)))
        for _ in range(20):
            x = float((i + rng.uniform(0.1, 0.9)) * pitch)
            spec = CraterSpec.make(f"T{i:03d}", (x, y), d)
            if all(math.dist(spec.center_xy, c.center_xy) >= spec.radius + c.radius + 2.0 for c in craters):
                craters.append(spec)
                break
    half_y = max((abs(c.center_xy[1]) + c.diameter for c in craters), default=0.0) + margin / 2
    width = length + 2 * margin
    scene = synthesize_scene(craters, (width, 2 * half_y), cell_size, roughness, seed,
                             rover_pose=(0.0, 0.0, 0.0), center=(0.5 * length, 0.0))
    scene.metadata.update({"kind": "traverse", "length_m": float(length),
                           "density_per_100m": float(density_per_100m)})
    return scene, [(0.0, 0.0), (float(length), 0.0)]
