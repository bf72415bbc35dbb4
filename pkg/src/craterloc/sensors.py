"""Geometric LIDAR and stereo simulation against a heightfield.

Rays are cast with a per-azimuth terrain profile: the terrain is sampled once
along each azimuth at half-cell spacing, the running maximum of the elevation
angle seen from the sensor gives the first hit of every ray on that azimuth
(a single sorted search), and the bracketing interval is refined by bisection.
Occlusion falls out of the running maximum.

Sensor frame: origin at the sensor (LIDAR head or left camera), x along the
rover heading, y to the left, z up.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .geometry import PointCloud
from .terrain import HeightField, SceneTruth

_ANGLE_STRIDE = 8.0  # row offset for flattened searches; exceeds any angle span


@dataclass
class LidarConfig:
    vertical_fov: float = 75.0  # deg
    horizontal_fov: float = 360.0  # deg
    vertical_res: float = 0.333  # deg
    horizontal_res: float = 0.333  # deg
    height: float = 1.5  # m
    tilt: float = 23.0  # deg, downward shift of the vertical fan
    range_noise_sigma: float = 0.02  # m
    max_range: float = 60.0  # m

    def __post_init__(self):
        if not (self.vertical_res > 0 and self.horizontal_res > 0):
            raise ValueError("angular resolutions must be > 0")
        if not (0 < self.vertical_fov <= 360 and 0 < self.horizontal_fov <= 360):
            raise ValueError("fov values must be in (0, 360]")
        if not self.height > 0:
            raise ValueError("height must be > 0")

    def azimuths(self) -> np.ndarray:
        """Azimuth offsets (rad) from the rover heading."""
        n = int(math.floor(self.horizontal_fov / self.horizontal_res + 1e-9))
        if self.horizontal_fov < 360:
            n += 1
            start = -0.5 * self.horizontal_fov
        else:
            start = 0.0
        return np.radians(start + self.horizontal_res * np.arange(n))

    def elevations(self) -> np.ndarray:
        n = int(math.floor(self.vertical_fov / self.vertical_res + 1e-9)) + 1
        return np.radians(-self.tilt - 0.5 * self.vertical_fov + self.vertical_res * np.arange(n))


@dataclass
class StereoConfig:
    image_size: int = 1024  # px, square
    hfov: float = 90.0  # deg
    baseline: float = 0.30  # m
    camera_height: float = 1.5  # m
    disparity_noise_sigma: float = 0.25  # px
    tilt: float = 20.0  # deg down
    dropout_p: float = 0.5
    discontinuity_m: float = 0.5
    max_range: float = 60.0  # m

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError("baseline must be > 0")
        if not 0 < self.hfov < 180:
            raise ValueError("hfov must be in (0, 180)")
        if self.image_size < 2:
            raise ValueError("image_size must be >= 2")

    @property
    def focal_px(self) -> float:
        return 0.5 * self.image_size / math.tan(math.radians(0.5 * self.hfov))

    @property
    def principal_point(self) -> float:
        return 0.5 * (self.image_size - 1)

    def axes(self) -> np.ndarray:
        """Rows are the camera right, down and forward axes in the sensor frame."""
        t = math.radians(self.tilt)
        x_c = np.array([0.0, -1.0, 0.0])
        z_c = np.array([math.cos(t), 0.0, -math.sin(t)])
        y_c = np.cross(z_c, x_c)
        return np.stack([x_c, y_c, z_c])

    def ray_directions(self, u, v) -> np.ndarray:
        """Sensor-frame ray for pixel (u=col, v=row), scaled to unit optical-axis depth."""
        f, c = self.focal_px, self.principal_point
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        cam = np.stack([(u - c) / f, (v - c) / f, np.ones_like(u)], axis=-1)
        return cam @ self.axes()

    def triangulate(self, u, v, disparity) -> np.ndarray:
        """Sensor-frame points from pixel coordinates and disparities."""
        depth = self.focal_px * self.baseline / np.asarray(disparity, dtype=float)
        return self.ray_directions(u, v) * depth[..., None]

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(u, v, depth) of sensor-frame points."""
        cam = np.asarray(points, dtype=float) @ self.axes().T
        f, c = self.focal_px, self.principal_point
        z = cam[..., 2]
        return c + f * cam[..., 0] / z, c + f * cam[..., 1] / z, z


@dataclass
class DisparityMap:
    disparity: np.ndarray  # (H, W) px, NaN where invalid
    camera: StereoConfig = field(default_factory=StereoConfig)
    rover_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def width(self) -> int:
        return self.disparity.shape[1]

    @property
    def height(self) -> int:
        return self.disparity.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.disparity)

    def save(self, path) -> None:
        """``<path>.f32`` float32 raster (NaN = invalid) and ``<path>.json`` sidecar."""
        path = Path(path)
        self.disparity.astype("<f4").tofile(path.with_suffix(".f32"))
        meta = {"width": self.width, "height": self.height, "dtype": "float32-le",
                "layout": "row-major, row 0 at image top", "invalid": "NaN",
                "camera": asdict(self.camera),
                "rover_pose": {"x_m": self.rover_pose[0], "y_m": self.rover_pose[1],
                               "heading_rad": self.rover_pose[2]}}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DisparityMap":
        path = Path(path)
        sidecar = path.with_suffix(".json")
        if not sidecar.exists():
            raise FileNotFoundError(f"disparity sidecar {sidecar} not found")
        meta = json.loads(sidecar.read_text())
        raw = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
        shape = (int(meta["height"]), int(meta["width"]))
        if raw.size != shape[0] * shape[1]:
            raise ValueError(f"{path}: raster has {raw.size} values, sidecar says {shape}")
        pose = meta.get("rover_pose", {})
        return cls(raw.reshape(shape).astype(float), StereoConfig(**meta.get("camera", {})),
                   (pose.get("x_m", 0.0), pose.get("y_m", 0.0), pose.get("heading_rad", 0.0)))


def _exit_distance(hf: HeightField, x, y, az) -> np.ndarray:
    """Horizontal distance from (x, y) to the footprint edge along each azimuth."""
    x0, y0, x1, y1 = hf.bounds
    c, s = np.cos(az), np.sin(az)
    with np.errstate(divide="ignore"):
        tx = np.where(c > 0, (x1 - x) / c, np.where(c < 0, (x0 - x) / c, np.inf))
        ty = np.where(s > 0, (y1 - y) / s, np.where(s < 0, (y0 - y) / s, np.inf))
    return np.minimum(tx, ty)


def cast_rays(hf: HeightField, origin, az_grid, ray_az, ray_el, max_distance, step=None,
              bisect_iters=6, chunk=96) -> np.ndarray:
    """Horizontal distance to the first terrain hit of each ray, NaN for misses.

    ``ray_az`` indexes ``az_grid`` (rad, site frame); ``ray_el`` is the ray
    elevation (rad). The sensor must be above the terrain.
    """
    ox, oy, oz = (float(v) for v in origin)
    step = 0.5 * hf.cell_size if step is None else float(step)
    az_grid = np.asarray(az_grid, dtype=float)
    ray_az = np.asarray(ray_az, dtype=np.intp)
    ray_el = np.asarray(ray_el, dtype=float)
    reach = np.minimum(_exit_distance(hf, ox, oy, az_grid), max_distance)
    n_steps = max(int(math.ceil(float(reach.max(initial=0.0)) / step)), 1)
    s = step * np.arange(1, n_steps + 1)
    out = np.full(len(ray_az), np.nan)
    order = np.argsort(ray_az, kind="stable")
    sorted_az = ray_az[order]
    tan_el = np.tan(ray_el)

    for a0 in range(0, len(az_grid), chunk):
        a1 = min(a0 + chunk, len(az_grid))
        lo_i, hi_i = np.searchsorted(sorted_az, [a0, a1])
        if lo_i == hi_i:
            continue
        rays = order[lo_i:hi_i]
        az = az_grid[a0:a1]
        ca, sa = np.cos(az)[:, None], np.sin(az)[:, None]
        h = hf.sample(ox + s * ca, oy + s * sa)
        h[s[None, :] > reach[a0:a1, None]] = np.nan
        ang = np.arctan2(h - oz, s)
        ang[np.isnan(ang)] = -4.0
        horizon = np.maximum.accumulate(ang, axis=1)
        rows = np.arange(a1 - a0)[:, None] * _ANGLE_STRIDE
        flat = (horizon + rows).ravel()
        local = ray_az[rays] - a0
        k = np.searchsorted(flat, ray_el[rays] + local * _ANGLE_STRIDE, side="left") - local * n_steps
        hit = k < n_steps
        rays, local, k = rays[hit], local[hit], k[hit]
        lo = np.where(k > 0, s[np.maximum(k - 1, 0)], 0.0)
        hi = s[k]
        cx, sx = np.cos(az_grid[a0 + local]), np.sin(az_grid[a0 + local])
        te = tan_el[rays]
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            g = hf.sample(ox + mid * cx, oy + mid * sx) - (oz + mid * te)
            above = g >= 0
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        # secant step inside the final bracket
        g_lo = hf.sample(ox + lo * cx, oy + lo * sx) - (oz + lo * te)
        g_hi = hf.sample(ox + hi * cx, oy + hi * sx) - (oz + hi * te)
        denom = g_hi - g_lo
        frac = np.where((denom > 0) & (g_lo < 0), -g_lo / np.where(denom > 0, denom, 1.0), 1.0)
        out[rays] = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    return out


def sensor_position(scene: SceneTruth, height) -> tuple[float, float, float]:
    x, y, _ = scene.rover_pose
    ground = scene.heightfield.sample(x, y)
    if not np.isfinite(ground):
        raise ValueError("rover pose lies outside the scene footprint")
    return (float(x), float(y), float(ground) + float(height))


def lidar_ray_grid(cfg: LidarConfig):
    """(azimuth offsets, elevations) of every ray, flattened azimuth-major."""
    az = cfg.azimuths()
    el = cfg.elevations()
    return np.repeat(np.arange(len(az)), len(el)), np.tile(el, len(az))


def simulate_lidar(scene: SceneTruth, cfg: LidarConfig | None = None, seed=0) -> PointCloud:
    """One return per grid ray that hits terrain within ``max_range``, in the sensor frame."""
    cfg = cfg or LidarConfig()
    sx, sy, sz = sensor_position(scene, cfg.height)
    heading = scene.rover_pose[2]
    az_grid = heading + cfg.azimuths()
    ray_az, ray_el = lidar_ray_grid(cfg)
    s_hit = cast_rays(scene.heightfield, (sx, sy, sz), az_grid, ray_az, ray_el, cfg.max_range)
    slant = s_hit / np.cos(ray_el)
    keep = np.isfinite(s_hit) & (slant <= cfg.max_range)
    ray_az, ray_el, slant = ray_az[keep], ray_el[keep], slant[keep]
    rng = np.random.default_rng(seed)
    if cfg.range_noise_sigma > 0:
        slant = slant + rng.normal(0.0, cfg.range_noise_sigma, size=slant.shape)
    az = cfg.azimuths()[ray_az]
    ce = np.cos(ray_el)
    pts = np.column_stack([slant * ce * np.cos(az), slant * ce * np.sin(az), slant * np.sin(ray_el)])
    return PointCloud(pts, "sensor", (0.0, 0.0, 0.0))


def true_depth_image(scene: SceneTruth, cfg: StereoConfig) -> np.ndarray:
    """Optical-axis depth per pixel of the left camera, NaN where nothing is hit."""
    n = cfg.image_size
    sx, sy, sz = sensor_position(scene, cfg.camera_height)
    heading = scene.rover_pose[2]
    vv, uu = np.mgrid[0:n, 0:n]
    d = cfg.ray_directions(uu.ravel(), vv.ravel())
    dxy = np.hypot(d[:, 0], d[:, 1])
    phi = np.arctan2(d[:, 1], d[:, 0])
    el = np.arctan2(d[:, 2], dxy)
    dphi = 0.5 / cfg.focal_px
    lo = float(phi.min())
    n_az = int(math.ceil((float(phi.max()) - lo) / dphi)) + 1
    az_grid = heading + lo + dphi * np.arange(n_az)
    ray_az = np.rint((phi - lo) / dphi).astype(np.intp)
    s_hit = cast_rays(scene.heightfield, (sx, sy, sz), az_grid, ray_az, el, cfg.max_range)
    depth = s_hit / dxy
    slant = depth * np.linalg.norm(d, axis=1)
    depth[~(slant <= cfg.max_range)] = np.nan
    return depth.reshape(n, n)


def discontinuity_mask(depth: np.ndarray, threshold) -> np.ndarray:
    """Pixels whose 3x3 neighborhood spans a depth discontinuity.

    A discontinuity is a second difference of depth above ``threshold`` along
    rows or columns, which ignores the smooth depth ramp of oblique ground.
    """
    z = np.where(np.isfinite(depth), depth, np.nan)
    jump = np.zeros(z.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        dv = np.abs(z[:-2] - 2 * z[1:-1] + z[2:]) > threshold
        dh = np.abs(z[:, :-2] - 2 * z[:, 1:-1] + z[:, 2:]) > threshold
    jump[1:-1] |= dv
    jump[:, 1:-1] |= dh
    return binary_dilation(jump, structure=np.ones((3, 3), dtype=bool))


def simulate_stereo(scene: SceneTruth, cfg: StereoConfig | None = None, seed=0):
    """Disparity map of the left camera plus the cloud triangulated from it."""
    cfg = cfg or StereoConfig()
    depth = true_depth_image(scene, cfg)
    f, b = cfg.focal_px, cfg.baseline
    rng = np.random.default_rng(seed)
    disp = f * b / depth
    if cfg.disparity_noise_sigma > 0:
        disp = disp + rng.normal(0.0, cfg.disparity_noise_sigma, size=disp.shape)
    drop = discontinuity_mask(depth, cfg.discontinuity_m) & (rng.random(disp.shape) < cfg.dropout_p)
    disp[drop | ~(disp > 0)] = np.nan
    dmap = DisparityMap(disp, cfg, tuple(scene.rover_pose))
    return dmap, disparity_to_cloud(dmap)


def disparity_to_cloud(dmap: DisparityMap) -> PointCloud:
    vv, uu = np.nonzero(dmap.valid)
    pts = dmap.camera.triangulate(uu, vv, dmap.disparity[vv, uu])
    return PointCloud(pts, "sensor", (0.0, 0.0, 0.0))
