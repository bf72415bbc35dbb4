"""Monte Carlo evaluation of the crater detectors.

Each trial builds a one-crater scene at a given near-rim range and approach
angle, simulates the sensor and runs a detector. A detection whose center
lies within ``max(0.25 D, 1 m)`` of the truth is a true positive. Reports give
the detection probability per (diameter, range) with a Wilson 95% interval
and the 3-sigma center error, taken as 3x the radial RMS error of the true
positives.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .landmarks import LandmarkDb, LandmarkRecord
from .state import RoverState
from .terrain import SWEEP_APPROACHES, SWEEP_DIAMETERS, SWEEP_RANGES, approach_scene

TRIAL_FIELDS = ["diameter_m", "range_m", "approach_deg", "seed", "detected", "err_x_m", "err_y_m"]
CELL_FIELDS = ["diameter_m", "range_m", "n", "n_detected", "pd", "pd_lo", "pd_hi", "rms_err_m",
               "n_false", "tp_radius_m"]
SIGMA_RANGE = (15.0, 20.0)


@dataclass
class SweepGrid:
    diameters: list
    ranges: list
    approach_angles: list = field(default_factory=lambda: list(SWEEP_APPROACHES))
    seeds_per_cell: int = 40

    def __post_init__(self):
        self.diameters = [float(v) for v in self.diameters]
        self.ranges = [float(v) for v in self.ranges]
        self.approach_angles = [float(v) for v in self.approach_angles]
        if self.seeds_per_cell < 1:
            raise ValueError("seeds_per_cell must be >= 1")
        if any(r <= 0 for r in self.ranges) or any(d <= 0 for d in self.diameters):
            raise ValueError("diameters and ranges must be > 0")

    @property
    def is_empty(self) -> bool:
        return not (self.diameters and self.ranges and self.approach_angles)

    @classmethod
    def full(cls, seeds_per_cell=40) -> "SweepGrid":
        """7 diameters x 16 ranges (5-20 m at 1 m) x 4 approach angles."""
        return cls(list(SWEEP_DIAMETERS), list(SWEEP_RANGES), list(SWEEP_APPROACHES),
                   seeds_per_cell)

    def trials(self):
        """(cell index, diameter, range, approach, repetition); seeds cycle the approach angles."""
        cell = 0
        for d in self.diameters:
            for r in self.ranges:
                for k in range(self.seeds_per_cell):
                    if self.approach_angles:
                        yield cell, d, r, self.approach_angles[k % len(self.approach_angles)], k
                cell += 1


@dataclass
class TrialResult:
    diameter_m: float
    range_m: float
    approach_deg: float
    seed: int
    detected: bool
    err_x_m: float = math.nan
    err_y_m: float = math.nan
    n_false: int = 0
    failure: str | None = None


def tp_radius(diameter: float) -> float:
    return max(0.25 * diameter, 1.0)


def wilson_interval(k: int, n: int, confidence=0.95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    z = float(norm.ppf(0.5 + confidence / 2))
    p = k / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def trial_seed(master_seed: int, cell: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), cell, rep]).generate_state(1)[0])


def run_trial(detector: str, diameter, range_m, approach, seed, cfgs: dict | None = None,
              prior_sigma=1.0, cell_size=0.05) -> TrialResult:
    """One scene, one scan, one detector call; failures count as misses."""
    cfgs = cfgs or {}
    res = TrialResult(float(diameter), float(range_m), float(approach), int(seed), False)
    try:
        scene = approach_scene(diameter, range_m, approach, seed=seed, cell_size=cell_size)
        truth = np.asarray(scene.craters[0].center_xy)
        pose = scene.rover_pose
        if detector == "lidar":
            from .lidar_detector import detect_lidar
            from .sensors import simulate_lidar

            cloud = simulate_lidar(scene, cfgs.get("lidar_sensor"), seed)
            c = scene.craters[0]
            db = LandmarkDb([LandmarkRecord(c.id, c.center_xy, c.diameter, c.depth)])
            prior = RoverState.at(pose[0], pose[1], pose[2], prior_sigma)
            dets = detect_lidar(cloud, prior, db, cfgs.get("lidar_detector"))
        elif detector == "stereo":
            from .sensors import simulate_stereo
            from .stereo_detector import detect_stereo

            dmap, _ = simulate_stereo(scene, cfgs.get("stereo_sensor"), seed)
            dets = detect_stereo(dmap, cfgs.get("stereo_detector"), pose)
        else:
            raise ValueError(f"unknown detector {detector!r}")
    except Exception as exc:  # noqa: BLE001 - per-trial failures are recorded as misses
        res.failure = f"{type(exc).__name__}: {exc}"
        return res
    errs = [np.asarray(d.center_xy) - truth for d in dets]
    dist = [float(np.hypot(*e)) for e in errs]
    if dist and min(dist) <= tp_radius(diameter):
        i = int(np.argmin(dist))
        res.detected = True
        res.err_x_m, res.err_y_m = float(errs[i][0]), float(errs[i][1])
        res.n_false = len(dets) - 1
    else:
        res.n_false = len(dets)
    return res


@dataclass
class CellSummary:
    diameter_m: float
    range_m: float
    n: int
    n_detected: int
    pd: float
    pd_lo: float
    pd_hi: float
    rms_err_m: float
    n_false: int
    tp_radius_m: float


@dataclass
class KppReport:
    detector: str
    grid: SweepGrid
    seed: int
    trials: list = field(default_factory=list)

    def cells(self) -> list[CellSummary]:
        out = []
        by_cell: dict[tuple[float, float], list[TrialResult]] = {}
        for t in self.trials:
            by_cell.setdefault((t.diameter_m, t.range_m), []).append(t)
        for d in self.grid.diameters:
            for r in self.grid.ranges:
                ts = by_cell.get((d, r), [])
                k = sum(t.detected for t in ts)
                lo, hi = wilson_interval(k, len(ts))
                out.append(CellSummary(d, r, len(ts), k, k / len(ts) if ts else math.nan, lo, hi,
                                       _rms([t for t in ts if t.detected]), sum(t.n_false for t in ts),
                                       tp_radius(d)))
        return out

    def cell(self, diameter, range_m) -> CellSummary:
        for c in self.cells():
            if c.diameter_m == float(diameter) and c.range_m == float(range_m):
                return c
        raise KeyError((diameter, range_m))

    def three_sigma(self, diameter, ranges=SIGMA_RANGE) -> tuple[float, int]:
        """3x radial RMS error of true positives with range in ``ranges`` (inclusive), and their count."""
        tps = [t for t in self.trials if t.detected and t.diameter_m == float(diameter)
               and ranges[0] <= t.range_m <= ranges[1]]
        return 3.0 * _rms(tps), len(tps)

    def error_table(self) -> dict:
        """Per-(diameter, range) error table in the layout the localizer loads.

        ``range_bias_m`` is the mean true-positive error along the rover-to-crater
        line; ``residual_rms_m`` is the radial RMS left after removing it.
        """
        keys = [(d, r) for d in self.grid.diameters for r in self.grid.ranges]
        tps = {k: [] for k in keys}
        for t in self.trials:
            if t.detected and (t.diameter_m, t.range_m) in tps:
                tps[(t.diameter_m, t.range_m)].append(t)
        stats = {k: _bias_stats(v) for k, v in tps.items()}

        def table(i):
            return [[None if math.isnan(stats[(d, r)][i]) else round(stats[(d, r)][i], 4) for r in self.grid.ranges]
                    for d in self.grid.diameters]

        return {"method": self.detector, "diameters_m": self.grid.diameters, "ranges_m": self.grid.ranges,
                "radial_rms_m": table(0), "range_bias_m": table(1), "residual_rms_m": table(2),
                "floor_m": 0.1, "seed": self.seed, "seeds_per_cell": self.grid.seeds_per_cell}

    def summary_json(self) -> dict:
        return {"detector": self.detector, "seed": self.seed, "grid": asdict(self.grid),
                "tp_radius_rule": "max(0.25*D, 1 m)",
                "sigma_ranges_m": list(SIGMA_RANGE),
                "three_sigma_m": {f"{d:g}": _finite(self.three_sigma(d)[0]) for d in self.grid.diameters},
                "three_sigma_n": {f"{d:g}": self.three_sigma(d)[1] for d in self.grid.diameters},
                "cells": [{k: _finite(v) for k, v in asdict(c).items()} for c in self.cells()]}


def _rms(trials) -> float:
    if not trials:
        return math.nan
    e = np.array([[t.err_x_m, t.err_y_m] for t in trials])
    return float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))


def _bias_stats(trials) -> tuple[float, float, float]:
    """(radial RMS, mean error along the line of sight, radial RMS after removing that mean)."""
    if not trials:
        return math.nan, math.nan, math.nan
    e = np.array([[t.err_x_m, t.err_y_m] for t in trials])
    a = np.radians([t.approach_deg for t in trials])
    # the rover sits on the approach side, so it looks along -(cos a, sin a)
    u = -np.column_stack([np.cos(a), np.sin(a)])
    bias = float(np.mean(np.sum(e * u, axis=1)))
    resid = e - bias * u
    return (float(np.sqrt(np.mean(np.sum(e ** 2, axis=1)))), bias,
            float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1)))))


def _finite(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def _run_one(args):
    return run_trial(*args)


def run_sweep(detector: str, grid: SweepGrid, cfgs: dict | None = None, seed=0, workers=1,
              progress=None) -> KppReport:
    """Run every trial of ``grid``; results do not depend on ``workers``."""
    if detector not in ("lidar", "stereo"):
        raise ValueError(f"unknown detector {detector!r}")
    jobs = [(detector, d, r, a, trial_seed(seed, cell, rep), cfgs)
            for cell, d, r, a, rep in grid.trials()]
    report = KppReport(detector, grid, int(seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = pool.map(_run_one, jobs, chunksize=4)
            for i, res in enumerate(results):
                report.trials.append(res)
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            report.trials.append(_run_one(job))
            if progress:
                progress(i + 1, len(jobs))
    return report


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 6))
    return str(v)


def trials_csv(report: KppReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_FIELDS)
    for t in report.trials:
        w.writerow([_fmt(getattr(t, f)) for f in TRIAL_FIELDS])
    return buf.getvalue()


def cells_csv(report: KppReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CELL_FIELDS)
    for c in report.cells():
        w.writerow([_fmt(getattr(c, f)) for f in CELL_FIELDS])
    return buf.getvalue()


def read_trials_csv(path) -> list[TrialResult]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(TrialResult(float(row["diameter_m"]), float(row["range_m"]), float(row["approach_deg"]),
                                   int(row["seed"]), row["detected"] == "1",
                                   float(row["err_x_m"]) if row["err_x_m"] else math.nan,
                                   float(row["err_y_m"]) if row["err_y_m"] else math.nan))
    return out


def emit_report(report: KppReport, out_dir, formats=("csv", "json"), stem=None) -> list[Path]:
    """Write ``<stem>_trials.csv``, ``<stem>_cells.csv`` and ``<stem>.json``; returns the paths."""
    out_dir = Path(out_dir)
    stem = stem or f"kpp_{report.detector}"
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            for suffix, text in (("_trials.csv", trials_csv(report)), ("_cells.csv", cells_csv(report))):
                p = out_dir / f"{stem}{suffix}"
                p.write_text(text)
                written.append(p)
        if "json" in formats:
            p = out_dir / f"{stem}.json"
            p.write_text(json.dumps(report.summary_json(), indent=2, sort_keys=True) + "\n")
            written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc.strerror or exc}") from exc
    return written
