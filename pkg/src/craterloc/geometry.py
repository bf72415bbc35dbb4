"""Point-cloud primitives shared by both detectors.

Ground-plane alignment, local-plane normals, voxel occupancy and integer
voxel ray traversal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree


class DegenerateCloud(ValueError):
    """The cloud does not support a ground-plane fit."""


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    frame: str = "sensor"
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.frame not in ("sensor", "site"):
            raise ValueError(f"unknown frame {self.frame!r}")
        self.sensor_origin = tuple(float(v) for v in self.sensor_origin)
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.sensor_origin)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.points[mask], self.frame, self.sensor_origin)

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)) -> "PointCloud":
        rotation = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float)
        origin = rotation @ np.asarray(self.sensor_origin) + t
        return PointCloud(self.points @ rotation.T + t, self.frame, tuple(origin))


@dataclass
class NormalField:
    normals: np.ndarray  # (N, 3), zero rows where invalid
    valid: np.ndarray  # (N,) bool


class GroundAlignment(NamedTuple):
    cloud: PointCloud
    rotation: np.ndarray
    ground_z: float
    inlier_fraction: float


def rotation_between(a, b) -> np.ndarray:
    """Proper rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # antiparallel: half-turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / (s * s))


def fit_plane_irls(points, rounds=3, weights=None):
    """Weighted total-least-squares plane, reweighted ``rounds`` times.

    Returns ``(normal, centroid, residuals)`` with signed point-to-plane residuals.
    Weights follow a Cauchy function of residual / robust scale.
    """
    pts = np.asarray(points, dtype=float)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    normal = centroid = None
    for it in range(rounds + 1):
        centroid = (w[:, None] * pts).sum(0) / w.sum()
        d = pts - centroid
        cov = (w[:, None] * d).T @ d / w.sum()
        evals, evecs = np.linalg.eigh(cov)
        if evals[1] <= 1e-12 * max(evals[2], 1e-300):
            raise DegenerateCloud("points are collinear; plane is undetermined")
        normal = evecs[:, 0]
        resid = d @ normal
        if it == rounds:
            break
        scale = 1.4826 * np.median(np.abs(resid - np.median(resid)))
        scale = max(scale, 1e-9)
        w = 1.0 / (1.0 + (resid / (2.385 * scale)) ** 2)
    return normal, centroid, resid


def fit_ground_plane_and_align(cloud: PointCloud, rounds=3, inlier_tol=0.2,
                               min_inlier_fraction=0.3, min_points=100) -> GroundAlignment:
    """Robustly fit the ground plane and rotate the cloud so its normal is +Z.

    The rotation is about the frame origin; ``ground_z`` is the fitted plane
    height in the rotated frame.
    """
    if len(cloud) < min_points:
        raise DegenerateCloud(f"need at least {min_points} points, got {len(cloud)}")
    normal, centroid, resid = fit_plane_irls(cloud.points, rounds)
    inlier_fraction = float(np.mean(np.abs(resid) <= inlier_tol))
    if inlier_fraction < min_inlier_fraction:
        raise DegenerateCloud(f"ground plane inlier fraction {inlier_fraction:.2f} "
                              f"below {min_inlier_fraction}")
    side = float(np.dot(normal, np.asarray(cloud.sensor_origin) - centroid))
    if abs(side) < 1e-9:
        side = normal[2]
    up = normal if side >= 0 else -normal
    rot = rotation_between(up, [0.0, 0.0, 1.0])
    aligned = cloud.transformed(rot)
    ground_z = float(rot[2] @ centroid)
    return GroundAlignment(aligned, rot, ground_z, inlier_fraction)


def neighbor_pairs(points, radius) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric (i, j) index pairs with 0 < |p_i - p_j| <= radius."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty(0, np.intp), np.empty(0, np.intp)
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return i, j


def estimate_normals(cloud: PointCloud, patch_radius=0.3, min_neighbors=5,
                     min_planarity=0.05, range_scale=0.0) -> NormalField:
    """Least-squares local-plane normals, flipped toward the sensor.

    The patch radius is ``max(patch_radius, range_scale * range)``, rounded up
    to one of a few geometric levels, so sparse far returns still get a usable
    neighborhood. A point is valid when it has at least ``min_neighbors`` other
    points in its patch and the neighborhood spreads in two directions: the
    middle covariance eigenvalue is at least ``min_planarity`` times the
    largest.
    """
    if not patch_radius > 0:
        raise ValueError("patch_radius must be > 0")
    pts = cloud.points
    n = len(pts)
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return NormalField(normals, valid)
    sensor = np.asarray(cloud.sensor_origin)
    if range_scale > 0:
        want = np.maximum(patch_radius, range_scale * np.linalg.norm(pts - sensor, axis=1))
        level = np.ceil(np.log(want / patch_radius) / np.log(1.25) - 1e-9).astype(int)
    else:
        level = np.zeros(n, dtype=int)
    tree = cKDTree(pts)
    for lev in np.unique(level):
        rows = np.flatnonzero(level == lev)
        radius = patch_radius * 1.25 ** lev
        sub = cKDTree(pts[rows])
        pairs = sub.sparse_distance_matrix(tree, radius, output_type="ndarray")
        i_loc, j = pairs["i"], pairs["j"]
        i = rows[i_loc]
        other = i != j
        i, j = i[other], j[other]
        _plane_normals(pts, sensor, rows, i, j, min_neighbors, min_planarity, normals, valid)
    return NormalField(normals, valid)


def _plane_normals(pts, sensor, rows, i, j, min_neighbors, min_planarity, normals, valid):
    n = len(pts)
    count = np.bincount(i, minlength=n)
    cand = np.zeros(n, dtype=bool)
    cand[rows] = count[rows] >= min_neighbors
    if not cand.any():
        return
    # neighborhood moments include the point itself; centered on it for conditioning
    d = pts[j] - pts[i]
    m1 = np.zeros((n, 3))
    m2 = np.zeros((n, 3, 3))
    for a in range(3):
        m1[:, a] = np.bincount(i, weights=d[:, a], minlength=n)
        for b in range(a, 3):
            m2[:, a, b] = np.bincount(i, weights=d[:, a] * d[:, b], minlength=n)
            m2[:, b, a] = m2[:, a, b]
    idx = np.flatnonzero(cand)
    k = (count[idx] + 1).astype(float)
    mean = m1[idx] / k[:, None]
    cov = m2[idx] / k[:, None, None] - mean[:, :, None] * mean[:, None, :]
    evals, evecs = np.linalg.eigh(cov)
    planar = evals[:, 1] >= min_planarity * np.maximum(evals[:, 2], 1e-300)
    nrm = evecs[:, :, 0]
    flip = np.einsum("ij,ij->i", nrm, sensor - pts[idx]) < 0
    nrm[flip] *= -1.0
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    normals[idx[planar]] = nrm[planar]
    valid[idx[planar]] = True


@dataclass
class VoxelIndex:
    voxel_size: float
    cells: np.ndarray  # (M, 3) unique occupied integer cells
    occupied: frozenset = field(repr=False, default=frozenset())

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Inclusive (min_cell, max_cell) box, or None when empty."""
        if len(self.cells) == 0:
            return None
        return self.cells.min(0), self.cells.max(0)

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, cell) -> bool:
        return tuple(int(c) for c in cell) in self.occupied

    def cell_of(self, point) -> tuple[int, int, int]:
        return tuple(int(v) for v in np.floor(np.asarray(point, dtype=float) / self.voxel_size))

    def cell_center(self, cell) -> np.ndarray:
        return (np.asarray(cell, dtype=float) + 0.5) * self.voxel_size

    def contains_points(self, points) -> np.ndarray:
        cells = np.floor(np.asarray(points, dtype=float).reshape(-1, 3) / self.voxel_size).astype(np.int64)
        return np.array([tuple(c) in self.occupied for c in cells.tolist()], dtype=bool)


def unique_rows(cells: np.ndarray) -> np.ndarray:
    """Lexicographically sorted unique rows of an (N, 3) integer array."""
    if len(cells) == 0:
        return cells.reshape(0, 3)
    lo = cells.min(0)
    span = cells.max(0) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2.0 ** 62:
        return np.unique(cells, axis=0)
    key = ((cells[:, 0] - lo[0]) * span[1] + (cells[:, 1] - lo[1])) * span[2] + (cells[:, 2] - lo[2])
    _, first = np.unique(key, return_index=True)
    return cells[first]


def voxelize(cloud: PointCloud | np.ndarray, voxel_size=0.25) -> VoxelIndex:
    """Occupied cells are exactly ``floor(p / voxel_size)`` over the points."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be > 0")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    cells = unique_rows(np.floor(pts / voxel_size).astype(np.int64))
    occupied = frozenset(map(tuple, cells.tolist()))
    return VoxelIndex(float(voxel_size), cells, occupied)


def raycast_first_transition(index: VoxelIndex, start, direction, max_cells=100000):
    """Center of the first occupied cell reached after at least one empty cell.

    Traversal is an exact integer cell walk. Cells outside the occupancy box
    count as empty. Returns None when the ray leaves the box without a
    transition.
    """
    direction = np.asarray(direction, dtype=float)
    norm = float(np.linalg.norm(direction))
    if not math.isclose(norm, 1.0, rel_tol=1e-6):
        raise ValueError("direction must be a unit vector")
    if len(index) == 0:
        return None
    lo, hi = index.bounds
    p0 = np.asarray(start, dtype=float) / index.voxel_size
    cell = np.floor(p0).astype(np.int64)
    step = np.sign(direction).astype(np.int64)

    # jump straight to the box if the start is outside it
    t_enter, t_exit = 0.0, math.inf
    for a in range(3):
        if direction[a] == 0.0:
            if p0[a] < lo[a] or p0[a] >= hi[a] + 1:
                return None
            continue
        t1 = (lo[a] - p0[a]) / direction[a]
        t2 = (hi[a] + 1 - p0[a]) / direction[a]
        t_enter = max(t_enter, min(t1, t2))
        t_exit = min(t_exit, max(t1, t2))
    if t_enter > t_exit:
        return None
    seen_empty = False
    if t_enter > 0.0:
        seen_empty = True
        p0 = p0 + direction * t_enter
        cell = np.floor(p0).astype(np.int64)
        # the entry point may sit on the far face of a boundary cell
        cell = np.minimum(np.maximum(cell, lo), hi)

    for _ in range(max_cells):
        if np.any(cell < lo) or np.any(cell > hi):
            return None
        if tuple(cell.tolist()) in index.occupied:
            if seen_empty:
                return index.cell_center(cell)
        else:
            seen_empty = True
        # parametric distance to the next boundary on each axis, recomputed from integers
        best_t, best_axis = math.inf, -1
        for a in range(3):
            if step[a] == 0:
                continue
            boundary = cell[a] + (1 if step[a] > 0 else 0)
            t = (boundary - p0[a]) / direction[a]
            if t < best_t:
                best_t, best_axis = t, a
        if best_axis < 0:
            return None
        cell[best_axis] += step[best_axis]
    return None
