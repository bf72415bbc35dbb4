"""Regenerate the detector error tables shipped in ``craterloc/data``.

Usage: python3 scripts/build_error_tables.py [lidar|stereo ...]
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from craterloc.evalkit import SweepGrid, run_sweep

GRIDS = {
    "lidar": SweepGrid([5, 10, 15, 20], [5, 8, 12, 16, 20, 25, 30], seeds_per_cell=16),
    "stereo": SweepGrid([5, 10, 15, 20], [5, 8, 12, 16, 20, 25, 30], seeds_per_cell=8),
}
OUT = Path(__file__).resolve().parents[1] / "src" / "craterloc" / "data"


def main(methods):
    for method in methods:
        report = run_sweep(method, GRIDS[method], seed=2024)
        path = OUT / f"{method}_errors.json"
        path.write_text(json.dumps(report.error_table(), indent=2) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main(sys.argv[1:] or ["lidar", "stereo"])
