"""Crater detection records shared by both detectors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass


@dataclass
class CraterDetection:
    center_xy: tuple[float, float]  # site frame, computed from the pose prior
    diameter: float
    score: float
    landmark_id: str | None
    method: str  # "lidar" | "stereo"
    center_rover: tuple[float, float] = (0.0, 0.0)  # heading-aligned offset from the rover
    range_m: float = math.nan  # sensor to near rim

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")
        if not self.diameter > 0:
            raise ValueError("detection diameter must be > 0")
        if self.method not in ("lidar", "stereo"):
            raise ValueError(f"unknown method {self.method!r}")

    def to_json(self) -> dict:
        return {"center_xy": [self.center_xy[0], self.center_xy[1]], "diameter": self.diameter,
                "score": self.score, "landmark_id": self.landmark_id, "method": self.method,
                "center_rover_xy": [self.center_rover[0], self.center_rover[1]]}

    @classmethod
    def from_json(cls, d: dict) -> "CraterDetection":
        rover = d.get("center_rover_xy", (0.0, 0.0))
        return cls((float(d["center_xy"][0]), float(d["center_xy"][1])), float(d["diameter"]),
                   float(d["score"]), d.get("landmark_id"), d["method"],
                   (float(rover[0]), float(rover[1])))


def rover_to_site(offset_xy, pose) -> tuple[float, float]:
    x, y, heading = pose
    c, s = math.cos(heading), math.sin(heading)
    return (x + c * offset_xy[0] - s * offset_xy[1], y + s * offset_xy[0] + c * offset_xy[1])


def site_to_rover(point_xy, pose) -> tuple[float, float]:
    x, y, heading = pose
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = point_xy[0] - x, point_xy[1] - y
    return (c * dx + s * dy, -s * dx + c * dy)


def write_detections(path, detections) -> None:
    with open(path, "w") as f:
        json.dump([d.to_json() for d in detections], f, indent=2)
        f.write("\n")


def read_detections(path) -> list[CraterDetection]:
    with open(path) as f:
        return [CraterDetection.from_json(d) for d in json.load(f)]
