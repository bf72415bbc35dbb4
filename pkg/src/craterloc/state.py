"""Rover position estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a <= -math.pi else a


@dataclass
class RoverState:
    position: np.ndarray  # (2,) meters, site frame
    heading: float  # rad
    covariance: np.ndarray = field(default_factory=lambda: np.eye(2))  # m^2
    distance_traveled: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(2, 2)
        self.heading = wrap_angle(float(self.heading))
        if not np.all(np.isfinite(self.covariance)):
            raise ValueError("covariance must be finite")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.covariance)[0] < -1e-9:
            raise ValueError("covariance must be positive semi-definite")

    @property
    def pose(self) -> tuple[float, float, float]:
        return (float(self.position[0]), float(self.position[1]), self.heading)

    def sigma_max(self) -> float:
        """Largest 1-sigma axis of the position covariance."""
        return math.sqrt(max(float(np.linalg.eigvalsh(self.covariance)[-1]), 0.0))

    @classmethod
    def at(cls, x, y, heading=0.0, sigma=1.0) -> "RoverState":
        return cls(np.array([x, y], dtype=float), heading, np.eye(2) * sigma ** 2)
