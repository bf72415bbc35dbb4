from __future__ import annotations

import math

import numpy as np
import pytest

from craterloc.landmarks import SENSING_DIAMETER_RANGE, LandmarkDb, LandmarkRecord, db_from_scene
from craterloc.terrain import CraterSpec, HeightField, SceneTruth


def _random_db(n, seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-500, 500, (n, 2))
    d = rng.uniform(1, 40, n)
    return LandmarkDb([LandmarkRecord(f"L{i}", (float(x), float(y)), float(dd), 0.2 * float(dd))
                       for i, ((x, y), dd) in enumerate(zip(xy, d))])


def test_query_radius_zero_hits_exact_record():
    db = _random_db(50, 0)
    rec = db.records[7]
    assert rec in db.query_radius(rec.position, 0.0)


def test_query_radius_matches_brute_force():
    db = _random_db(10_000, 1)
    rng = np.random.default_rng(2)
    pos = np.array([r.position for r in db.records])
    diam = np.array([r.diameter for r in db.records])
    for _ in range(100):
        c = rng.uniform(-550, 550, 2)
        radius = float(rng.uniform(0, 120))
        dr = tuple(sorted(rng.uniform(0, 45, 2))) if rng.random() < 0.5 else None
        got = sorted(r.id for r in db.query_radius(c, radius, dr))
        ok = np.sum((pos - c) ** 2, axis=1) <= radius * radius
        if dr is not None:
            ok &= (diam >= dr[0]) & (diam <= dr[1])
        assert got == sorted(db.records[i].id for i in np.flatnonzero(ok))


def test_sensing_envelope():
    assert SENSING_DIAMETER_RANGE == (5.0, 20.0)
    db = _random_db(2000, 3)
    assert all(5 <= r.diameter <= 20 for r in db.query_radius((0, 0), 1e4, SENSING_DIAMETER_RANGE))


def _scene(n, seed=0):
    rng = np.random.default_rng(seed)
    craters = [CraterSpec.make(f"C{i}", tuple(rng.uniform(-1000, 1000, 2)), 8.0) for i in range(n)]
    hf = HeightField((-1100.0, -1100.0), 100.0, np.zeros((23, 23)))
    return SceneTruth(hf, craters, (0.0, 0.0, 0.0), seed)


def test_db_from_scene_noise_free_and_count():
    sc = _scene(20)
    db = db_from_scene(sc, 0.0)
    assert len(db) == 20
    for c in sc.craters:
        r = db[c.id]
        assert r.position == c.center_xy and r.diameter == c.diameter and r.depth == c.depth


def test_db_from_scene_noise_statistics():
    sc = _scene(1000)
    db = db_from_scene(sc, 0.5, seed=9)
    e = np.array([np.subtract(db[c.id].position, c.center_xy) for c in sc.craters])
    rms = np.sqrt(np.mean(e ** 2, axis=0))
    assert np.all((rms >= 0.45) & (rms <= 0.55))


def test_round_trip(tmp_path):
    db = _random_db(30, 4)
    db.save(tmp_path / "db.jsonl")
    assert LandmarkDb.load(tmp_path / "db.jsonl").records == db.records


def test_bad_records_rejected(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "a", "x_m": 0, "y_m": 0, "diameter_m": 5}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        LandmarkDb.load(p)
    with pytest.raises(ValueError, match="duplicate"):
        LandmarkDb([LandmarkRecord("a", (0, 0), 5, 1), LandmarkRecord("a", (1, 0), 5, 1)])
    with pytest.raises(ValueError):
        LandmarkDb().query_radius((0, 0), -1.0)
    assert math.isfinite(LandmarkDb().cell_size)
