"""Synthetic cratered terrain with exact ground truth.

A scene is a raster heightfield built from a band-limited fractal base
surface plus a sum of closed-form crater profiles. The bowl interior is a
spherical cap through the rim circle; outside the rim a raised annulus decays
to zero with a cubic smoothstep at one diameter from the center.

Grid convention: node (row, col) sits at
``(origin_x + col * cell_size, origin_y + row * cell_size)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_DEPTH_RATIO = 0.2
DEFAULT_RIM_RATIO = 0.04
DEFAULT_CELL_SIZE = 0.05
DEFAULT_ROUGHNESS = 0.03
DEFAULT_CORRELATION_LENGTH = 1.0


@dataclass(frozen=True)
class CraterSpec:
    id: str
    center_xy: tuple[float, float]
    diameter: float
    depth: float
    rim_height: float = 0.0

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"crater {self.id}: diameter must be > 0")
        if not 0 < self.depth <= self.diameter:
            raise ValueError(f"crater {self.id}: need 0 < depth <= diameter")
        if not 0 <= self.rim_height < self.depth:
            raise ValueError(f"crater {self.id}: need 0 <= rim_height < depth")

    @classmethod
    def make(cls, id, center_xy, diameter, depth=None, rim_height=None) -> "CraterSpec":
        """Build a crater with the default depth/diameter and rim/diameter ratios."""
        if depth is None:
            depth = DEFAULT_DEPTH_RATIO * diameter
        if rim_height is None:
            rim_height = min(DEFAULT_RIM_RATIO * diameter, 0.5 * depth)
        return cls(str(id), (float(center_xy[0]), float(center_xy[1])),
                   float(diameter), float(depth), float(rim_height))

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter

    def to_json(self) -> dict:
        return {"id": self.id, "x_m": self.center_xy[0], "y_m": self.center_xy[1],
                "diameter_m": self.diameter, "depth_m": self.depth,
                "rim_height_m": self.rim_height}

    @classmethod
    def from_json(cls, d: dict) -> "CraterSpec":
        return cls(str(d["id"]), (float(d["x_m"]), float(d["y_m"])), float(d["diameter_m"]),
                   float(d["depth_m"]), float(d.get("rim_height_m", 0.0)))


def crater_profile(spec: CraterSpec, radial_distance):
    """Elevation offset of a crater at horizontal distance(s) from its center.

    Returns ``-depth`` at the center, ``+rim_height`` on the rim circle and
    exactly 0 from one diameter outward. Accepts scalars or arrays.
    """
    r = np.abs(np.asarray(radial_distance, dtype=float))
    R = spec.radius
    h = spec.depth + spec.rim_height
    inside = r <= R
    rr = np.minimum(r, R)
    if h <= R:
        sphere_r = (R * R + h * h) / (2.0 * h)
        bowl = -spec.depth + sphere_r - np.sqrt(np.maximum(sphere_r * sphere_r - rr * rr, 0.0))
    else:
        # a cap taller than a hemisphere is not a graph over the disk
        bowl = -spec.depth + h * (1.0 - np.sqrt(np.maximum(1.0 - (rr / R) ** 2, 0.0)))
    t = np.clip((r - R) / R, 0.0, 1.0)
    annulus = spec.rim_height * (1.0 - 3.0 * t * t + 2.0 * t ** 3)
    out = np.where(inside, bowl, annulus)
    return float(out) if out.ndim == 0 else out


@dataclass
class HeightField:
    origin_xy: tuple[float, float]
    cell_size: float
    elevation: np.ndarray  # (n_rows, n_cols), meters

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        self.elevation = np.asarray(self.elevation, dtype=float)
        if self.elevation.ndim != 2 or min(self.elevation.shape) < 2:
            raise ValueError("elevation must be a 2D grid of at least 2x2 nodes")
        if not np.all(np.isfinite(self.elevation)):
            raise ValueError("elevation must be finite everywhere")

    @property
    def n_rows(self) -> int:
        return self.elevation.shape[0]

    @property
    def n_cols(self) -> int:
        return self.elevation.shape[1]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of the node footprint."""
        x0, y0 = self.origin_xy
        return (x0, y0, x0 + (self.n_cols - 1) * self.cell_size,
                y0 + (self.n_rows - 1) * self.cell_size)

    def contains(self, x, y):
        x0, y0, x1, y1 = self.bounds
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        x0, y0 = self.origin_xy
        xs = x0 + np.arange(self.n_cols) * self.cell_size
        ys = y0 + np.arange(self.n_rows) * self.cell_size
        return np.meshgrid(xs, ys)

    def sample(self, x, y):
        """Bilinear elevation at (x, y); NaN outside the footprint."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        fc = (x - self.origin_xy[0]) / self.cell_size
        fr = (y - self.origin_xy[1]) / self.cell_size
        ok = (fc >= 0) & (fc <= self.n_cols - 1) & (fr >= 0) & (fr <= self.n_rows - 1)
        fc = np.where(ok, fc, 0.0)
        fr = np.where(ok, fr, 0.0)
        c0 = np.minimum(fc.astype(np.intp), self.n_cols - 2)
        r0 = np.minimum(fr.astype(np.intp), self.n_rows - 2)
        tc = fc - c0
        tr = fr - r0
        z = self.elevation
        top = z[r0, c0] * (1 - tc) + z[r0, c0 + 1] * tc
        bot = z[r0 + 1, c0] * (1 - tc) + z[r0 + 1, c0 + 1] * tc
        out = np.where(ok, top * (1 - tr) + bot * tr, np.nan)
        return float(out) if out.ndim == 0 else out

    def save(self, path) -> None:
        """Write ``<path>.f32`` (little-endian float32, row-major) and ``<path>.json``."""
        path = Path(path)
        self.elevation.astype("<f4").tofile(path.with_suffix(".f32"))
        meta = {"origin_x_m": self.origin_xy[0], "origin_y_m": self.origin_xy[1],
                "cell_size_m": self.cell_size, "n_rows": self.n_rows, "n_cols": self.n_cols,
                "dtype": "float32-le", "layout": "row-major, row index increases with y"}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "HeightField":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        raw = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
        shape = (int(meta["n_rows"]), int(meta["n_cols"]))
        if raw.size != shape[0] * shape[1]:
            raise ValueError(f"{path}: raster has {raw.size} values, sidecar says {shape}")
        return cls((float(meta["origin_x_m"]), float(meta["origin_y_m"])),
                   float(meta["cell_size_m"]), raw.reshape(shape).astype(float))


@dataclass
class SceneTruth:
    heightfield: HeightField
    craters: list[CraterSpec]
    rover_pose: tuple[float, float, float]  # x, y, heading (rad)
    seed: int
    roughness: float = 0.0
    metadata: dict = field(default_factory=dict)

    def crater(self, crater_id: str) -> CraterSpec:
        for c in self.craters:
            if c.id == crater_id:
                return c
        raise KeyError(crater_id)

    def truth_json(self) -> dict:
        return {"seed": self.seed, "roughness_m": self.roughness,
                "rover_pose": {"x_m": self.rover_pose[0], "y_m": self.rover_pose[1],
                               "heading_rad": self.rover_pose[2]},
                "craters": [c.to_json() for c in self.craters],
                "metadata": self.metadata}

    def save(self, stem) -> None:
        """Write ``<stem>_dem.f32``, ``<stem>_dem.json`` and ``<stem>_truth.json``."""
        stem = Path(stem)
        self.heightfield.save(stem.parent / f"{stem.name}_dem")
        (stem.parent / f"{stem.name}_truth.json").write_text(
            json.dumps(self.truth_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, stem) -> "SceneTruth":
        stem = Path(stem)
        hf = HeightField.load(stem.parent / f"{stem.name}_dem")
        t = json.loads((stem.parent / f"{stem.name}_truth.json").read_text())
        pose = t["rover_pose"]
        return cls(hf, [CraterSpec.from_json(c) for c in t["craters"]],
                   (pose["x_m"], pose["y_m"], pose["heading_rad"]), int(t["seed"]),
                   float(t.get("roughness_m", 0.0)), t.get("metadata", {}))


def fractal_surface(shape, cell_size, rms, seed, correlation_length=DEFAULT_CORRELATION_LENGTH,
                    spectral_exponent=4.0):
    """Gaussian random surface with a power-law spectrum rolled off below ``1/correlation_length``.

    The result is rescaled so its sample RMS is exactly ``rms``.
    """
    if rms <= 0:
        return np.zeros(shape)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(shape)
    ky = np.fft.fftfreq(shape[0], d=cell_size)
    kx = np.fft.rfftfreq(shape[1], d=cell_size)
    k = np.hypot(ky[:, None], kx[None, :])
    amp = (1.0 + (k * correlation_length) ** 2) ** (-spectral_exponent / 4.0)
    surf = np.fft.irfft2(np.fft.rfft2(white) * amp, s=shape)
    surf -= surf.mean()
    return surf * (rms / np.sqrt(np.mean(surf ** 2)))


def _check_layout(craters, bounds, rover_pose, cell_size):
    x0, y0, x1, y1 = bounds
    for c in craters:
        if cell_size > c.diameter / 20.0:
            raise ValueError(f"crater {c.id}: cell_size {cell_size} exceeds diameter/20")
        cx, cy = c.center_xy
        if cx - c.diameter < x0 or cx + c.diameter > x1 or cy - c.diameter < y0 or cy + c.diameter > y1:
            raise ValueError(f"crater {c.id} extends past the scene footprint")
    for i, a in enumerate(craters):
        for b in craters[i + 1:]:
            if math.dist(a.center_xy, b.center_xy) < a.radius + b.radius:
                raise ValueError(f"craters {a.id} and {b.id} have overlapping bowls")
    ids = [c.id for c in craters]
    if len(set(ids)) != len(ids):
        raise ValueError("crater ids must be unique")
    if rover_pose is not None:
        rx, ry = rover_pose[0], rover_pose[1]
        if not (x0 <= rx <= x1 and y0 <= ry <= y1):
            raise ValueError("rover pose lies outside the scene footprint")
        for c in craters:
            if math.dist((rx, ry), c.center_xy) <= c.radius + 1.0:
                raise ValueError(f"rover pose is inside (or within 1 m of) crater {c.id}")


def add_craters(elevation, xs, ys, craters: Sequence[CraterSpec], cell_size):
    """Add crater profiles in place, touching only each crater's support window."""
    x0, y0 = xs[0, 0], ys[0, 0]
    for c in craters:
        cx, cy = c.center_xy
        c_lo = max(int(math.floor((cx - c.diameter - x0) / cell_size)), 0)
        c_hi = min(int(math.ceil((cx + c.diameter - x0) / cell_size)) + 1, elevation.shape[1])
        r_lo = max(int(math.floor((cy - c.diameter - y0) / cell_size)), 0)
        r_hi = min(int(math.ceil((cy + c.diameter - y0) / cell_size)) + 1, elevation.shape[0])
        sub_r = np.hypot(xs[r_lo:r_hi, c_lo:c_hi] - cx, ys[r_lo:r_hi, c_lo:c_hi] - cy)
        elevation[r_lo:r_hi, c_lo:c_hi] += crater_profile(c, sub_r)
    return elevation


def synthesize_scene(craters: Sequence[CraterSpec], extent, cell_size=DEFAULT_CELL_SIZE,
                     roughness=DEFAULT_ROUGHNESS, seed=0, rover_pose=None, center=(0.0, 0.0),
                     correlation_length=DEFAULT_CORRELATION_LENGTH) -> SceneTruth:
    """Build a square (or ``(width, height)``) scene centered on ``center``.

    ``rover_pose`` defaults to the footprint center with heading 0.
    """
    craters = list(craters)
    if np.isscalar(extent):
        width = height = float(extent)
    else:
        width, height = (float(e) for e in extent)
    if craters and min(width, height) < 2.0 * max(c.diameter for c in craters):
        raise ValueError("extent must be at least twice the largest crater diameter")
    if not cell_size > 0:
        raise ValueError("cell_size must be > 0")
    n_cols = int(round(width / cell_size)) + 1
    n_rows = int(round(height / cell_size)) + 1
    origin = (center[0] - 0.5 * (n_cols - 1) * cell_size, center[1] - 0.5 * (n_rows - 1) * cell_size)
    if rover_pose is None:
        rover_pose = (float(center[0]), float(center[1]), 0.0)
    rover_pose = tuple(float(v) for v in rover_pose)
    bounds = (origin[0], origin[1], origin[0] + (n_cols - 1) * cell_size,
              origin[1] + (n_rows - 1) * cell_size)
    _check_layout(craters, bounds, rover_pose, cell_size)

    elevation = fractal_surface((n_rows, n_cols), cell_size, roughness, seed, correlation_length)
    xs = origin[0] + np.arange(n_cols) * cell_size
    ys = origin[1] + np.arange(n_rows) * cell_size
    gx, gy = np.meshgrid(xs, ys)
    add_craters(elevation, gx, gy, craters, cell_size)
    hf = HeightField(origin, float(cell_size), elevation)
    return SceneTruth(hf, craters, rover_pose, int(seed), float(roughness))


SWEEP_DIAMETERS = (5.0, 7.0, 10.0, 12.0, 15.0, 17.0, 20.0)
SWEEP_RANGES = tuple(float(r) for r in range(5, 21))
SWEEP_APPROACHES = (0.0, 90.0, 180.0, 270.0)


def approach_scene(diameter, near_rim_range, approach_deg=0.0, seed=0, cell_size=DEFAULT_CELL_SIZE,
                   roughness=DEFAULT_ROUGHNESS, depth=None, rim_height=None, margin=8.0,
                   crater_id="C0") -> SceneTruth:
    """One crater at the origin with the rover facing it from ``near_rim_range`` meters.

    ``approach_deg`` is the direction from which the rover approaches, measured
    counter-clockwise from +x; the rover sits on that side and looks at the crater.
    """
    crater = CraterSpec.make(crater_id, (0.0, 0.0), diameter, depth, rim_height)
    dist = near_rim_range + crater.radius
    a = math.radians(approach_deg)
    rx, ry = dist * math.cos(a), dist * math.sin(a)
    heading = math.atan2(-ry, -rx)
    if heading <= -math.pi:
        heading += 2 * math.pi
    half = max(dist + margin, crater.diameter + margin)
    half = math.ceil(half / cell_size) * cell_size
    scene = synthesize_scene([crater], 2 * half, cell_size, roughness, seed,
                             rover_pose=(rx, ry, heading), center=(0.0, 0.0))
    scene.metadata.update({"near_rim_range_m": float(near_rim_range),
                           "approach_deg": float(approach_deg)})
    return scene
