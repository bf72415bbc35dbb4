from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from craterloc.detections import CraterDetection, site_to_rover
from craterloc.landmarks import LandmarkDb, LandmarkRecord
from craterloc.localizer import (DetectorErrorModel, LocalizerConfig, LocalMapFilter, MatchSet, OdometrySegment,
                                 SingularFusion, TraverseConfig, TraverseLog, associate, detection_offset,
                                 drift_sigma, implied_position, propagate, run_traverse, traverse_world, update)
from craterloc.state import RoverState
from craterloc.terrain import synthesize_scene

CFG = LocalizerConfig()


def _det(site_xy, diameter, prior: RoverState, true_pose, landmark_id=None, method="stereo"):
    """Detection of a crater at ``site_xy`` seen from ``true_pose``, placed using the prior."""
    rel = site_to_rover(site_xy, true_pose)
    c, s = math.cos(prior.heading), math.sin(prior.heading)
    center = (prior.position[0] + c * rel[0] - s * rel[1], prior.position[1] + s * rel[0] + c * rel[1])
    return CraterDetection(center, diameter, 1.0, landmark_id, method, rel, float(np.hypot(*rel)))


# ---------------------------------------------------------------- propagate

def test_zero_drift_moves_exactly():
    s = RoverState.at(1.0, 2.0, 0.0, 0.3)
    out = propagate(s, OdometrySegment(10.0, 0.0, 0.0), seed=5)
    np.testing.assert_array_equal(out.position, [11.0, 2.0])
    np.testing.assert_array_equal(out.covariance, s.covariance)
    assert out.distance_traveled == 10.0


def test_heading_change_applied_before_moving():
    out = propagate(RoverState.at(0, 0, 0.0), OdometrySegment(2.0, math.pi / 2, 0.0))
    np.testing.assert_allclose(out.position, [0.0, 2.0], atol=1e-12)


def test_covariance_trace_strictly_increases():
    s = RoverState.at(0, 0, 0.3, 0.1)
    for _ in range(5):
        nxt = propagate(s, OdometrySegment(1.0))
        assert np.trace(nxt.covariance) > np.trace(s.covariance)
        s = nxt


def test_drift_negative_rejected():
    with pytest.raises(ValueError):
        OdometrySegment(1.0, 0.0, -0.01)


def test_random_walk_monte_carlo():
    # 1000 runs of 100 one-meter steps at 2% drift
    rng = np.random.default_rng(11)
    finals = np.empty((1000, 2))
    for k in range(1000):
        s = RoverState.at(0, 0, 0.0, 0.0)
        for _ in range(100):
            s = propagate(s, OdometrySegment(1.0), rng)
        finals[k] = s.position - [100.0, 0.0]
    rms = np.sqrt(np.mean(finals ** 2, axis=0))
    assert np.all((rms >= 1.7) & (rms <= 2.3))
    # and the filter covariance matches the sample covariance
    predicted = s.covariance[0, 0]
    assert predicted == pytest.approx(4.0, rel=1e-9)
    np.testing.assert_allclose(rms ** 2, predicted, rtol=0.15)


def test_drift_sigma_reference():
    assert drift_sigma(100.0, 0.02) == pytest.approx(2.0)
    assert drift_sigma(400.0, 0.02) == pytest.approx(4.0)
    assert drift_sigma(0.0, 0.02) == 0.0


# ---------------------------------------------------------------- association

def _oracle(dets, records, prior, cfg):
    """Exhaustive search: the consistent assignment with the most pairs, then least squared residual."""
    best = (0, math.inf, {})
    opts = []
    for d in dets:
        o = [None]
        for r in records:
            if abs(d.diameter - r.diameter) <= cfg.diam_tol * r.diameter:
                o.append(r)
        opts.append(o)
    for combo in itertools.product(*opts):
        chosen = {i: r for i, r in enumerate(combo) if r is not None}
        ids = [r.id for r in chosen.values()]
        if len(set(ids)) < len(ids):
            continue
        imp = {i: implied_position(dets[i], r, prior.heading) for i, r in chosen.items()}
        if any(np.linalg.norm(imp[a] - imp[b]) > cfg.pair_tolerance() for a, b in itertools.combinations(imp, 2)):
            continue
        cost = sum(float(np.linalg.norm(np.asarray(r.position) - dets[i].center_xy)) ** 2 for i, r in chosen.items())
        if (len(chosen), -cost) > (best[0], -best[1]):
            best = (len(chosen), cost, chosen)
    return {i: r.id for i, r in best[2].items()}


def _assignment(ms: MatchSet, dets):
    return {dets.index(d): r.id for d, r in ms.pairs}


def test_single_detection_paired():
    true_pose = (0.0, 0.0, 0.0)
    prior = RoverState.at(0.5, -0.3, 0.0, 1.0)
    db = LandmarkDb([LandmarkRecord("a", (12.0, 3.0), 8.0, 1.5)])
    det = _det((12.0, 3.0), 8.2, prior, true_pose)
    ms = associate([det], db, prior, CFG)
    assert ms.landmark_ids == ["a"]
    assert ms.residuals[0] == pytest.approx(math.hypot(0.5, -0.3))


def test_spurious_detection_dropped():
    true_pose = (0.0, 0.0, 0.4)
    prior = RoverState.at(1.5, 1.0, 0.4, 2.0)
    recs = [LandmarkRecord("a", (10.0, 8.0), 6.0, 1.0), LandmarkRecord("b", (14.0, -4.0), 9.0, 1.8),
            LandmarkRecord("c", (20.0, 9.0), 7.0, 1.4)]
    db = LandmarkDb(recs)
    dets = [_det((10.0, 8.0), 6.0, prior, true_pose), _det((14.0, -4.0), 9.0, prior, true_pose),
            # an unmapped feature 10 m from crater c that looks like it
            _det((20.0, -1.0), 7.0, prior, true_pose)]
    ms = associate(dets, db, prior, CFG)
    assert _assignment(ms, dets) == {0: "a", 1: "b"}
    assert _assignment(ms, dets) == _oracle(dets, recs, prior, CFG)


def test_map_noise_does_not_split_true_matches():
    # dropping a true match whenever two map errors disagree would bias fixes toward the prior
    cfg = LocalizerConfig()
    rng = np.random.default_rng(11)
    true_pose = (0.0, 0.0, 0.0)
    prior = RoverState.at(0.0, 0.0, 0.0, 0.5)
    kept = 0
    for _ in range(400):
        n = rng.normal(0.0, cfg.map_sigma, (2, 2))
        recs = [LandmarkRecord("a", (12.0 + n[0, 0], 6.0 + n[0, 1]), 8.0, 1.5),
                LandmarkRecord("b", (15.0 + n[1, 0], -7.0 + n[1, 1]), 10.0, 2.0)]
        dets = [_det((12.0, 6.0), 8.0, prior, true_pose), _det((15.0, -7.0), 10.0, prior, true_pose)]
        kept += len(associate(dets, LandmarkDb(recs), prior, cfg)) == 2
    # analytic drop rate exp(-tol^2 / (4 map_sigma^2)) is about 0.4%
    assert kept / 400 >= 0.98


def test_large_prior_error_recovers_assignment():
    true_pose = (0.0, 0.0, 0.0)
    prior = RoverState.at(-7.0, 7.0, 0.0, 4.0)  # about 10 m off
    recs = [LandmarkRecord("small", (15.0, 15.0), 5.0, 1.0), LandmarkRecord("big", (15.0, -15.0), 12.0, 2.4)]
    db = LandmarkDb(recs)
    dets = [_det((15.0, 15.0), 5.3, prior, true_pose), _det((15.0, -15.0), 11.0, prior, true_pose)]
    ms = associate(dets, db, prior, CFG)
    assert _assignment(ms, dets) == {0: "small", 1: "big"} == _oracle(dets, recs, prior, CFG)


@pytest.mark.parametrize("seed", range(15))
def test_associate_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    true_pose = (0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
    prior = RoverState.at(*rng.normal(0, 1.5, 2), true_pose[2], 2.0)
    recs = [LandmarkRecord(f"L{i}", tuple(rng.uniform(-20, 20, 2)), float(rng.uniform(5, 12)), 1.0)
            for i in range(6)]
    db = LandmarkDb(recs)
    dets = [_det(np.asarray(r.position) + rng.normal(0, 0.2, 2), r.diameter * rng.uniform(0.9, 1.1), prior, true_pose)
            for r in rng.choice(recs, 3, replace=False)]
    dets += [_det(tuple(rng.uniform(-20, 20, 2)), float(rng.uniform(5, 12)), prior, true_pose)]
    ms = associate(dets, db, prior, CFG)
    oracle = _oracle(dets, recs, prior, CFG)
    assert len(ms) == len(oracle)
    assert _assignment(ms, dets) == oracle


def test_landmark_id_restricts_candidates():
    prior = RoverState.at(0, 0, 0.0, 0.5)
    db = LandmarkDb([LandmarkRecord("a", (10.0, 0.0), 8.0, 1.5), LandmarkRecord("b", (10.5, 0.0), 8.0, 1.5)])
    det = _det((10.0, 0.0), 8.0, prior, (0.0, 0.0, 0.0), landmark_id="b", method="lidar")
    assert associate([det], db, prior, CFG).landmark_ids == ["b"]


def test_associate_empty_inputs():
    prior = RoverState.at(0, 0)
    assert len(associate([], LandmarkDb([LandmarkRecord("a", (1, 1), 5.0, 1.0)]), prior)) == 0
    det = _det((5.0, 0.0), 5.0, prior, (0.0, 0.0, 0.0))
    assert len(associate([det], LandmarkDb([]), prior)) == 0


def test_association_translation_invariance():
    rng = np.random.default_rng(3)
    recs = [LandmarkRecord(f"L{i}", tuple(rng.uniform(-20, 20, 2)), float(rng.uniform(5, 12)), 1.0)
            for i in range(6)]
    true_pose = (0.0, 0.0, 0.7)
    prior = RoverState.at(1.0, -1.0, 0.7, 2.0)
    dets = [_det(r.position, r.diameter, prior, true_pose) for r in recs[:4]]
    base = _assignment(associate(dets, LandmarkDb(recs), prior, CFG), dets)
    shift = np.array([1234.5, -876.25])
    recs2 = [LandmarkRecord(r.id, tuple(np.asarray(r.position) + shift), r.diameter, r.depth) for r in recs]
    prior2 = RoverState(prior.position + shift, prior.heading, prior.covariance)
    dets2 = [CraterDetection(tuple(np.asarray(d.center_xy) + shift), d.diameter, d.score, d.landmark_id, d.method,
                             d.center_rover, d.range_m) for d in dets]
    assert _assignment(associate(dets2, LandmarkDb(recs2), prior2, CFG), dets2) == base
    assert len(base) == 4


# ---------------------------------------------------------------- update

def _match(prior, site, true_pose, diameter=8.0):
    rec = LandmarkRecord("m", tuple(site), diameter, 1.5)
    return MatchSet([(_det(site, diameter, prior, true_pose), rec)], [0.0])


def test_exact_measurement_wins():
    prior = RoverState.at(3.0, -2.0, 0.2, 10.0)
    ms = _match(prior, (15.0, 4.0), (0.0, 0.0, 0.2))
    post = update(prior, ms, meas_cov=np.zeros((2, 2)))
    np.testing.assert_allclose(post.position, [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(post.covariance, 0.0, atol=1e-12)


def test_scalar_information_arithmetic():
    prior = RoverState.at(0.0, 0.0, 0.0, 10.0)
    post = update(prior, _match(prior, (10.0, 0.0), (1.0, 1.0, 0.0)), meas_cov=np.eye(2))
    np.testing.assert_allclose(np.diag(post.covariance), 1.0 / (1.0 / 100 + 1.0), rtol=1e-12)
    np.testing.assert_allclose(post.position, np.array([1.0, 1.0]) * 100 / 101, rtol=1e-12)


def test_more_matches_never_worse():
    prior = RoverState.at(0.0, 0.0, 0.0, 5.0)
    true_pose = (0.5, -0.5, 0.0)
    sites = [(10.0, 5.0), (12.0, -6.0), (20.0, 1.0)]
    recs = [LandmarkRecord(f"m{i}", s, 8.0, 1.5) for i, s in enumerate(sites)]
    pairs = [(_det(s, 8.0, prior, true_pose), r) for s, r in zip(sites, recs)]
    em = {"stereo": DetectorErrorModel("stereo", [5.0, 20.0], [5.0, 20.0], [[0.5, 1.0], [0.8, 1.5]])}
    all3 = update(prior, MatchSet(pairs, [0.0] * 3), em)
    singles = [update(prior, MatchSet([p], [0.0]), em) for p in pairs]
    assert np.trace(all3.covariance) <= min(np.trace(s.covariance) for s in singles) + 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_update_contracts_covariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 2))
    prior = RoverState(rng.normal(size=2), 0.3, a @ a.T + 0.1 * np.eye(2))
    ms = _match(prior, rng.uniform(5, 20, 2), (0.0, 0.0, 0.3))
    b = rng.normal(size=(2, 2))
    post = update(prior, ms, meas_cov=b @ b.T)
    assert np.trace(post.covariance) <= np.trace(prior.covariance) + 1e-12
    # Loewner order: prior - posterior is PSD
    assert np.linalg.eigvalsh(prior.covariance - post.covariance)[0] >= -1e-10


def test_update_rejects_bad_covariance():
    prior = RoverState.at(0, 0, 0.0, 1.0)
    ms = _match(prior, (10.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(SingularFusion):
        update(prior, ms, meas_cov=np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(SingularFusion):
        update(prior, ms, meas_cov=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(SingularFusion):
        update(RoverState.at(0, 0, 0.0, 0.0), ms, meas_cov=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        update(prior, MatchSet())


def test_local_map_filter_counts_map_error_once():
    # repeated fixes on one crater cannot beat its map error
    cfg = LocalizerConfig(map_sigma=1.0)
    filt = LocalMapFilter(RoverState.at(0, 0, 0.0, 10.0), cfg)
    em = {"stereo": DetectorErrorModel("stereo", [5.0], [5.0], [0.1], floor=0.01)}
    for _ in range(50):
        ms = _match(filt.state, (10.0, 0.0), (0.0, 0.0, 0.0))
        filt.update(ms, em)
    var = np.diag(filt.state.covariance)
    assert np.all(var >= 0.9 * cfg.map_sigma ** 2)
    # naive independent fusion would have shrunk it far below
    naive = RoverState.at(0, 0, 0.0, 10.0)
    for _ in range(50):
        naive = update(naive, _match(naive, (10.0, 0.0), (0.0, 0.0, 0.0)), em, cfg)
    assert naive.covariance[0, 0] < 0.1


def test_local_map_forgets_old_landmarks():
    cfg = LocalizerConfig(local_map_distance=20.0)
    filt = LocalMapFilter(RoverState.at(0, 0, 0.0, 1.0), cfg)
    filt.update(_match(filt.state, (10.0, 0.0), (0.0, 0.0, 0.0)))
    assert filt.x.shape == (4,)
    for _ in range(21):
        filt.propagate(OdometrySegment(1.0))
    assert filt.x.shape == (2,) and filt.slots == {}


def test_error_model_lookup():
    em = DetectorErrorModel("lidar", [5.0, 10.0], [5.0, 15.0], [[0.2, 0.4], [math.nan, 1.0]], floor=0.05)
    assert em.sigma(5.0, 5.0) == pytest.approx(0.2 / math.sqrt(2))
    assert em.sigma(5.0, 10.0) == pytest.approx(0.3 / math.sqrt(2))
    assert em.sigma(1.0, 1.0) == pytest.approx(0.2 / math.sqrt(2))  # clamped
    assert em.sigma(10.0, 5.0) == pytest.approx(1.0 / math.sqrt(2))  # empty cell takes the worst value
    assert DetectorErrorModel.from_json(em.to_json()).sigma(7.5, 10.0) == pytest.approx(em.sigma(7.5, 10.0))


def test_range_bias_correction():
    table = {"method": "lidar", "diameters_m": [5.0, 10.0], "ranges_m": [10.0, 20.0, 30.0],
             "radial_rms_m": [[0.3, 0.5, None], [0.3, 0.5, None]],
             "residual_rms_m": [[0.1, 0.2, None], [0.1, 0.2, None]],
             "range_bias_m": [[-0.2, -0.4, None], [-0.2, -0.4, None]], "floor_m": 0.01}
    em = DetectorErrorModel.from_json(table)
    assert em.sigma(5.0, 10.0) == pytest.approx(0.1 / math.sqrt(2))
    assert em.bias(5.0, 15.0) == pytest.approx(-0.3)
    assert em.bias(5.0, 30.0) == pytest.approx(-0.4)  # gaps take the nearest measured bias
    det = CraterDetection((0.0, 0.0), 5.0, 1.0, None, "lidar", (6.0, 8.0), 15.0)
    # a detection 0.3 m short is pushed 0.3 m out along the line of sight
    assert np.allclose(detection_offset(det, {"lidar": em}), [6.0 * 10.3 / 10.0, 8.0 * 10.3 / 10.0])
    assert np.allclose(detection_offset(det), [6.0, 8.0])
    assert np.allclose(detection_offset(det, {"stereo": em}), [6.0, 8.0])
    # a table without a bias column uses its radial RMS and no correction
    legacy = DetectorErrorModel.from_json({k: v for k, v in table.items() if k in
                                           ("method", "diameters_m", "ranges_m", "radial_rms_m", "floor_m")})
    assert legacy.bias(5.0, 15.0) == 0.0
    assert legacy.sigma(5.0, 10.0) == pytest.approx(0.3 / math.sqrt(2))


@pytest.mark.parametrize("method", ["lidar", "stereo"])
def test_packaged_error_tables_load(method):
    em = DetectorErrorModel.packaged(method)
    assert em.method == method
    assert 0 < em.sigma(5.0, 15.0) < 5.0


# ---------------------------------------------------------------- traverse

@pytest.fixture(scope="module")
def blank_scene():
    return synthesize_scene([], (560.0, 40.0), 0.5, roughness=0.0, seed=0, center=(250.0, 0.0))


def test_zero_drift_no_detections_tracks_truth(blank_scene):
    cfg = TraverseConfig(drift_fraction=0.0, initial_sigma=0.0, detector="none")
    log = run_traverse(blank_scene, [(0.0, 0.0), (100.0, 0.0), (100.0, 10.0)], LandmarkDb([]), cfg, seed=1)
    assert len(log.steps) == 111
    np.testing.assert_allclose(log.errors(), 0.0, atol=1e-9)
    assert log.steps[-1].truth_xy == pytest.approx((100.0, 10.0))


def test_no_update_terminal_error_matches_random_walk(blank_scene):
    cfg = TraverseConfig(drift_fraction=0.02, initial_sigma=0.5, detector="none")
    finals = np.array([run_traverse(blank_scene, [(0.0, 0.0), (500.0, 0.0)], LandmarkDb([]), cfg, seed=s)
                       .steps[-1].error_vec for s in range(300)])
    expected_var = 0.5 ** 2 + drift_sigma(500.0, 0.02) ** 2
    np.testing.assert_allclose(np.mean(finals ** 2, axis=0), expected_var, rtol=0.2)


def test_traverse_log_roundtrip(tmp_path, blank_scene):
    cfg = TraverseConfig(detector="none")
    log = run_traverse(blank_scene, [(0.0, 0.0), (30.0, 0.0)], LandmarkDb([]), cfg, seed=4)
    p = tmp_path / "t.jsonl"
    log.write_jsonl(p)
    back = TraverseLog.read_jsonl(p)
    assert [s.to_json() for s in back.steps] == [s.to_json() for s in log.steps]
    assert np.all(np.diff(log.three_sigma()) > 0)


def test_route_outside_scene_is_logged(blank_scene):
    cfg = TraverseConfig(detector="lidar", update_every_m=5.0)
    db = LandmarkDb([LandmarkRecord("a", (0.0, 500.0), 8.0, 1.5)])
    log = run_traverse(blank_scene, [(540.0, 0.0), (560.0, 0.0)], db, cfg, seed=0)
    errs = [s.error for s in log.steps if s.error]
    assert errs and "outside every scene" in errs[0]
    assert len(log.steps) == 21


def test_short_lidar_traverse_takes_fixes():
    scene, route = traverse_world(length=60.0, density_per_100m=5.0, seed=2)
    from craterloc.landmarks import db_from_scene

    db = db_from_scene(scene, 0.5, seed=2)
    cfg = TraverseConfig(update_every_m=10.0)
    log = run_traverse(scene, route, db, cfg, seed=2)
    assert sum(s.n_matches for s in log.steps) >= 2
    errs = np.hypot(*log.errors().T)
    assert np.all(errs <= log.three_sigma() + 1e-9)
    assert log.three_sigma()[-1] < 5.0
