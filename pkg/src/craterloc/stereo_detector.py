"""Crater detection in disparity maps.

The ground is modeled as a plane in (column, row, disparity) space. In the
residual after removing it, a crater shows two signatures stacked vertically
in each image column: a sharp drop in disparity at the near rim (the interior
behind it is hidden), and above that a smooth, nearly linear rise across the
visible far wall. Far-wall segments are grouped into regions, rim jumps are
chained into contours, and each contour is paired with the region directly
above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .detections import CraterDetection, rover_to_site
from .sensors import DisparityMap, StereoConfig


class DegenerateDisparity(ValueError):
    """Too few or collinear valid pixels for a plane fit."""


@dataclass
class StereoDetectorConfig:
    min_valid_px: int = 1000
    plane_rounds: int = 3
    window_px: int = 15
    min_window_fill: float = 0.6  # fraction of valid pixels a window needs
    lin_tol: float = 0.3  # px RMS about the window line
    slope_min: float = 0.06  # px of residual per row, going up
    slope_max: float = 0.5
    # slope over mean disparity: far walls sit near 0.01-0.05, rough ground close to the camera far below
    rel_slope_min: float = 0.009
    wall_mean_max: float = math.inf  # px; optional cap on the window mean residual
    wall_rel_mean_max: float = math.inf  # optional cap on mean residual over mean disparity
    min_region_px: int = 50
    region_link_cols: int = 3  # column gaps bridged when labeling regions
    jump_sigmas: float = 4.0
    jump_threshold: float | None = None  # px; default jump_sigmas x disparity noise
    min_relative_jump: float = 0.1  # jump / near-side disparity
    max_invalid_gap: int = 6  # px of dropout allowed inside a jump
    pair_rows: int = 3  # rows within which a second pixel joins a side mean
    contour_row_tol: int = 2
    min_contour_cols: int = 8
    min_overlap: float = 0.5
    max_pair_gap_px: int = 12  # rows between a contour and the bottom of its region
    min_diameter: float = 2.0
    max_diameter: float = 40.0

    def jump_px(self, noise_sigma: float) -> float:
        if self.jump_threshold is not None:
            return self.jump_threshold
        return self.jump_sigmas * noise_sigma


@dataclass
class DisparityPlane:
    A: float
    B: float
    C: float
    D: float
    rms: float = 0.0

    def __post_init__(self):
        if self.A == 0 and self.B == 0 and self.C == 0:
            raise ValueError("plane normal must be nonzero")

    def predict(self, x, y):
        """Disparity on the plane at column ``x`` and row ``y``."""
        return -(self.A * np.asarray(x, dtype=float) + self.B * np.asarray(y, dtype=float) + self.D) / self.C

    def coefficients(self) -> np.ndarray:
        return np.array([self.A, self.B, self.C, self.D])


@dataclass
class ResidualMap:
    residual: np.ndarray  # (H, W) px, NaN where invalid
    disparity: np.ndarray

    @property
    def height(self) -> int:
        return self.residual.shape[0]

    @property
    def width(self) -> int:
        return self.residual.shape[1]

    @property
    def invalid(self) -> np.ndarray:
        return ~np.isfinite(self.residual)


@dataclass
class FarWallRegion:
    rows: np.ndarray
    cols: np.ndarray
    segments: dict = field(default_factory=dict)  # column -> (top row, bottom row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(row_min, row_max, col_min, col_max), inclusive."""
        return (int(self.rows.min()), int(self.rows.max()), int(self.cols.min()), int(self.cols.max()))


@dataclass
class RimContour:
    cols: np.ndarray  # one entry per column, increasing
    rows: np.ndarray  # near-side row of the jump in each column
    jumps: np.ndarray  # px

    @property
    def mean_jump(self) -> float:
        return float(np.mean(self.jumps))

    def __len__(self) -> int:
        return len(self.cols)


def fit_disparity_plane(dmap: DisparityMap, rounds=3, min_valid=1000) -> DisparityPlane:
    """Iteratively reweighted least-squares plane d = a x + b y + c over valid pixels."""
    disp = dmap.disparity
    rows, cols = np.nonzero(np.isfinite(disp))
    if len(rows) < min_valid:
        raise DegenerateDisparity(f"need at least {min_valid} valid pixels, got {len(rows)}")
    d = disp[rows, cols].astype(float)
    # centered coordinates keep the normal equations well conditioned
    xc, yc = cols.mean(), rows.mean()
    X = np.column_stack([cols - xc, rows - yc, np.ones(len(rows))])
    if np.linalg.matrix_rank(X[:, :2] - X[:, :2].mean(0)) < 2:
        raise DegenerateDisparity("valid pixels are collinear")
    w = np.ones(len(d))
    for _ in range(max(int(rounds), 1)):
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(X * sw[:, None], d * sw, rcond=None)
        resid = d - X @ coef
        scale = max(1.4826 * float(np.median(np.abs(resid - np.median(resid)))), 1e-9)
        w = 1.0 / (1.0 + (resid / (2.385 * scale)) ** 2)
    a, b, c0 = coef
    c = c0 - a * xc - b * yc
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return DisparityPlane(-float(a), -float(b), 1.0, -float(c), rms)


def compute_residual_map(dmap: DisparityMap, plane: DisparityPlane) -> ResidualMap:
    h, w = dmap.disparity.shape
    yy, xx = np.mgrid[0:h, 0:w]
    return ResidualMap(dmap.disparity - plane.predict(xx, yy), dmap.disparity)


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sums over vertical windows [r, r + w) for every start row r."""
    c = np.cumsum(np.vstack([np.zeros((1, a.shape[1])), a]), axis=0)
    return c[w:] - c[:-w]


def farwall_mask(rmap: ResidualMap, cfg: StereoDetectorConfig | None = None) -> np.ndarray:
    """Pixels covered by at least one window that looks like a far crater wall."""
    cfg = cfg or StereoDetectorConfig()
    r = rmap.residual
    h, _ = r.shape
    w = cfg.window_px
    if h < w:
        return np.zeros(r.shape, dtype=bool)
    valid = np.isfinite(r)
    vf = valid.astype(float)
    r0 = np.where(valid, r, 0.0)
    # rows measured upward, relative to the image center for conditioning
    t = (0.5 * h - np.arange(h, dtype=float))[:, None] * np.ones((1, r.shape[1]))
    n = _window_sums(vf, w)
    s_t = _window_sums(vf * t, w)
    s_tt = _window_sums(vf * t * t, w)
    s_r = _window_sums(r0, w)
    s_rr = _window_sums(r0 * r0, w)
    s_rt = _window_sums(r0 * t, w)
    s_d = _window_sums(np.where(valid, rmap.disparity, 0.0), w)
    full = n >= max(cfg.min_window_fill * w, 3)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s_r / n
        mean_d = s_d / n
        sxx = s_tt - s_t * s_t / n
        slope = (s_rt - s_t * s_r / n) / sxx
        sse = s_rr - n * mean ** 2 - slope ** 2 * sxx
        rms = np.sqrt(np.maximum(sse, 0.0) / np.maximum(n - 2, 1))
        ok = full & (rms <= cfg.lin_tol) & (slope >= cfg.slope_min) & (slope <= cfg.slope_max) \
            & (slope >= cfg.rel_slope_min * mean_d) \
            & (mean <= cfg.wall_mean_max) & (mean <= cfg.wall_rel_mean_max * mean_d)
    # pixel v is covered by window starts in [v - w + 1, v]
    cs = np.cumsum(np.vstack([np.zeros((1, ok.shape[1])), ok]), axis=0)
    v = np.arange(h)
    hi = np.minimum(v, h - w) + 1
    lo = np.maximum(v - w + 1, 0)
    return ((cs[hi] - cs[lo]) > 0) & valid


def find_farwall_regions(rmap: ResidualMap, cfg: StereoDetectorConfig | None = None) -> list[FarWallRegion]:
    cfg = cfg or StereoDetectorConfig()
    mask = farwall_mask(rmap, cfg)
    link = max(int(cfg.region_link_cols), 0)
    linked = ndimage.binary_dilation(mask, structure=np.ones((1, 2 * link + 1), dtype=bool)) if link else mask
    labels, n = ndimage.label(linked, structure=np.ones((3, 3), dtype=bool))
    labels = np.where(mask, labels, 0)
    regions = []
    if n == 0:
        return regions
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    for lab in np.flatnonzero(sizes >= cfg.min_region_px):
        if lab == 0:
            continue
        rows, cols = np.nonzero(labels == lab)
        segs = {}
        for c in np.unique(cols):
            rc = rows[cols == c]
            segs[int(c)] = (int(rc.min()), int(rc.max()))
        regions.append(FarWallRegion(rows, cols, segs))
    regions.sort(key=lambda g: (g.bbox[2], g.bbox[0]))
    return regions


def jump_map(rmap: ResidualMap, cfg: StereoDetectorConfig | None = None, noise_sigma=0.25):
    """(mask, jump) of pixels sitting just below a drop in residual going up.

    Works on the valid pixels of each column: the drop compares the mean of a
    pixel and the next valid one below with the mean of the two valid pixels
    above, which may sit up to ``max_invalid_gap`` rows higher.
    """
    cfg = cfg or StereoDetectorConfig()
    r = rmap.residual
    h, w = r.shape
    mask = np.zeros(r.shape, dtype=bool)
    jump = np.zeros(r.shape)
    idx = np.flatnonzero(np.isfinite(r).T)  # column-major: down each column
    if len(idx) < 4:
        return mask, jump
    col, row = np.divmod(idx, h)
    rr = r[row, col]
    dd = rmap.disparity[row, col]
    k = np.arange(1, len(idx))
    n = len(idx)
    # nearest valid neighbors; pairs are averaged only when the second pixel is close
    kb = np.minimum(k + 1, n - 1)
    ka = np.maximum(k - 2, 0)
    same = col[k - 1] == col[k]
    gap_ok = row[k] - row[k - 1] - 1 <= cfg.max_invalid_gap
    pair_b = (kb != k) & (col[kb] == col[k]) & (row[kb] - row[k] <= cfg.pair_rows)
    pair_a = (ka != k - 1) & (col[ka] == col[k]) & (row[k - 1] - row[ka] <= cfg.pair_rows)
    below = np.where(pair_b, 0.5 * (rr[k] + rr[kb]), rr[k])
    above = np.where(pair_a, 0.5 * (rr[k - 1] + rr[ka]), rr[k - 1])
    j = below - above
    near_d = np.where(pair_b, 0.5 * (dd[k] + dd[kb]), dd[k])
    hit = same & gap_ok & (j >= cfg.jump_px(noise_sigma)) & (j >= cfg.min_relative_jump * near_d)
    mask[row[k[hit]], col[k[hit]]] = True
    jump[row[k[hit]], col[k[hit]]] = j[hit]
    return mask, jump


def find_rim_contours(rmap: ResidualMap, cfg: StereoDetectorConfig | None = None,
                      noise_sigma=0.25) -> list[RimContour]:
    cfg = cfg or StereoDetectorConfig()
    mask, jump = jump_map(rmap, cfg, noise_sigma)
    if not mask.any():
        return []
    tol = max(int(cfg.contour_row_tol), 0)
    linked = ndimage.binary_dilation(mask, structure=np.ones((2 * tol + 1, 1), dtype=bool)) if tol else mask
    labels, n = ndimage.label(linked, structure=np.ones((3, 3), dtype=bool))
    labels = np.where(mask, labels, 0)
    contours = []
    rows_all, cols_all = np.nonzero(labels)
    labs = labels[rows_all, cols_all]
    order = np.lexsort((rows_all, cols_all, labs))
    rows_all, cols_all, labs = rows_all[order], cols_all[order], labs[order]
    bounds = np.flatnonzero(np.diff(labs)) + 1
    for rows, cols in zip(np.split(rows_all, bounds), np.split(cols_all, bounds)):
        ucols, first = np.unique(cols, return_index=True)
        if len(ucols) < cfg.min_contour_cols:
            continue
        # strongest jump in each column
        pick = []
        for k, start in enumerate(first):
            stop = first[k + 1] if k + 1 < len(first) else len(cols)
            rr = rows[start:stop]
            pick.append(rr[int(np.argmax(jump[rr, ucols[k]]))])
        pick = np.array(pick)
        contours.append(RimContour(ucols, pick, jump[pick, ucols]))
    contours.sort(key=lambda c: (int(c.cols[0]), int(c.rows[0])))
    return contours


def _column_runs(region: FarWallRegion) -> dict:
    order = np.lexsort((region.rows, region.cols))
    cols, rows = region.cols[order], region.rows[order]
    cuts = np.flatnonzero(np.diff(cols)) + 1
    return {int(c[0]): r for c, r in zip(np.split(cols, cuts), np.split(rows, cuts))}


def _top_above(rows: np.ndarray, rim_row: int, max_gap: int, max_skip=4):
    """Top row of the run of region pixels that starts within ``max_gap`` rows above ``rim_row``."""
    above = rows[(rows < rim_row) & (rows >= rim_row - max_gap)]
    if len(above) == 0:
        return None
    k = int(np.searchsorted(rows, above.max()))
    while k > 0 and rows[k] - rows[k - 1] <= max_skip:
        k -= 1
    return int(rows[k])


def _region_above(contour: RimContour, regions, cfg: StereoDetectorConfig):
    """Region with the largest share of contour columns whose wall starts just above the rim."""
    best, best_overlap = None, 0.0
    for region in regions:
        runs = _column_runs(region)
        hits = {}
        for c, r in zip(contour.cols.tolist(), contour.rows.tolist()):
            rows = runs.get(c)
            if rows is None:
                continue
            top = _top_above(rows, r, cfg.max_pair_gap_px)
            if top is not None:
                hits[c] = top
        overlap = len(hits) / len(contour)
        if overlap >= cfg.min_overlap and overlap > best_overlap:
            best, best_overlap = (region, hits), overlap
    return best, best_overlap


def pair_and_estimate(regions, contours, dmap: DisparityMap, stereo_cfg: StereoConfig | None = None,
                      cfg: StereoDetectorConfig | None = None, pose=None) -> list[CraterDetection]:
    """Pair each rim contour with the far-wall region just above it and locate the crater.

    The near rim is triangulated from the contour's lower side, the far rim
    from the region's top edge, both as medians over the shared columns.
    ``pose`` defaults to the pose recorded with the disparity map.
    """
    cfg = cfg or StereoDetectorConfig()
    cam = stereo_cfg or dmap.camera
    pose = dmap.rover_pose if pose is None else pose
    disp = dmap.disparity
    dets = []
    used = set()
    for contour in sorted(contours, key=lambda c: -c.mean_jump * len(c)):
        found, overlap = _region_above(contour, regions, cfg)
        if found is None:
            continue
        region, tops = found
        if id(region) in used:
            continue
        rim_rows = dict(zip(contour.cols.tolist(), contour.rows.tolist()))
        near_u, near_v, near_d, far_u, far_v, far_d = [], [], [], [], [], []
        for c, top in tops.items():
            v = rim_rows[c]
            d = np.nanmean(disp[v:v + 2, c])
            df = disp[top, c]
            if np.isfinite(d) and np.isfinite(df) and d > 0 and df > 0:
                near_u.append(c), near_v.append(v), near_d.append(d)
                far_u.append(c), far_v.append(top), far_d.append(df)
        if len(near_u) < cfg.min_contour_cols // 2 + 1:
            continue
        near = np.median(cam.triangulate(np.array(near_u), np.array(near_v), np.array(near_d)), axis=0)
        far = np.median(cam.triangulate(np.array(far_u), np.array(far_v), np.array(far_d)), axis=0)
        diameter = float(np.hypot(*(far[:2] - near[:2])))
        if not cfg.min_diameter <= diameter <= cfg.max_diameter:
            continue
        if np.hypot(*far[:2]) <= np.hypot(*near[:2]):
            continue
        used.add(id(region))
        center = 0.5 * (near[:2] + far[:2])
        rover_xy = (float(center[0]), float(center[1]))
        score = float(overlap * contour.mean_jump)
        dets.append(CraterDetection(rover_to_site(rover_xy, pose), diameter, score, None, "stereo",
                                    rover_xy, float(np.hypot(*near[:2]))))
    dets.sort(key=lambda d: (d.center_rover[0], d.center_rover[1]))
    return dets


def detect_stereo(dmap: DisparityMap, cfg: StereoDetectorConfig | None = None, pose=None):
    """Plane fit, residual, regions, contours and pairing in one call."""
    cfg = cfg or StereoDetectorConfig()
    plane = fit_disparity_plane(dmap, cfg.plane_rounds, cfg.min_valid_px)
    rmap = compute_residual_map(dmap, plane)
    regions = find_farwall_regions(rmap, cfg)
    contours = find_rim_contours(rmap, cfg, dmap.camera.disparity_noise_sigma)
    return pair_and_estimate(regions, contours, dmap, dmap.camera, cfg, pose)
