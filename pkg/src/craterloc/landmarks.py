"""Orbital crater landmark map with a uniform-grid spatial index."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .terrain import SceneTruth

SENSING_DIAMETER_RANGE = (5.0, 20.0)


@dataclass(frozen=True)
class LandmarkRecord:
    id: str
    position: tuple[float, float]
    diameter: float
    depth: float

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"landmark {self.id}: diameter must be > 0")
        if not self.depth > 0:
            raise ValueError(f"landmark {self.id}: depth must be > 0")

    def to_json(self) -> dict:
        return {"id": self.id, "x_m": self.position[0], "y_m": self.position[1],
                "diameter_m": self.diameter, "depth_m": self.depth}

    @classmethod
    def from_json(cls, d: dict) -> "LandmarkRecord":
        return cls(str(d["id"]), (float(d["x_m"]), float(d["y_m"])),
                   float(d["diameter_m"]), float(d["depth_m"]))


class LandmarkDb:
    """Read-only after construction."""

    def __init__(self, records=(), cell_size=50.0):
        self.cell_size = float(cell_size)
        self.records: list[LandmarkRecord] = list(records)
        self._by_id = {}
        self._grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i, rec in enumerate(self.records):
            if rec.id in self._by_id:
                raise ValueError(f"duplicate landmark id {rec.id!r}")
            self._by_id[rec.id] = rec
            self._grid[self._cell(rec.position)].append(i)
        self._grid = dict(self._grid)

    def _cell(self, xy) -> tuple[int, int]:
        return (math.floor(xy[0] / self.cell_size), math.floor(xy[1] / self.cell_size))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, landmark_id) -> LandmarkRecord:
        return self._by_id[landmark_id]

    def query_radius(self, center, radius, diam_range=None) -> list[LandmarkRecord]:
        """Records within ``radius`` of ``center`` whose diameter lies in ``diam_range`` (inclusive)."""
        if radius < 0:
            raise ValueError("radius must be >= 0")
        cx, cy = float(center[0]), float(center[1])
        lo_d, hi_d = diam_range if diam_range is not None else (-math.inf, math.inf)
        c0 = self._cell((cx - radius, cy - radius))
        c1 = self._cell((cx + radius, cy + radius))
        out = []
        r2 = radius * radius
        if (c1[0] - c0[0] + 1) * (c1[1] - c0[1] + 1) > len(self._grid):
            keys = [k for k in self._grid if c0[0] <= k[0] <= c1[0] and c0[1] <= k[1] <= c1[1]]
        else:
            keys = [(i, j) for i in range(c0[0], c1[0] + 1) for j in range(c0[1], c1[1] + 1)]
        for key in keys:
            for idx in self._grid.get(key, ()):
                rec = self.records[idx]
                dx = rec.position[0] - cx
                dy = rec.position[1] - cy
                if dx * dx + dy * dy <= r2 and lo_d <= rec.diameter <= hi_d:
                    out.append(rec)
        return out

    def save(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "LandmarkDb":
        records = []
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(LandmarkRecord.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad landmark record ({exc})") from None
        return cls(records)


def query_radius(db: LandmarkDb, center, radius, diam_range=None) -> list[LandmarkRecord]:
    return db.query_radius(center, radius, diam_range)


def db_from_scene(scenes, position_noise_sigma=0.5, seed=0) -> LandmarkDb:
    """One record per crater, positions perturbed by isotropic Gaussian noise."""
    if isinstance(scenes, SceneTruth):
        scenes = [scenes]
    rng = np.random.default_rng(seed)
    records = []
    for scene in scenes:
        for c in scene.craters:
            dx, dy = rng.normal(0.0, position_noise_sigma, 2) if position_noise_sigma > 0 else (0.0, 0.0)
            records.append(LandmarkRecord(c.id, (c.center_xy[0] + float(dx), c.center_xy[1] + float(dy)),
                                          c.diameter, c.depth))
    return LandmarkDb(records)
