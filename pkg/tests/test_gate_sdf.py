import numpy as np
import pytest

from gatemppi.gate_sdf import (GateGeometry, GatePose, LabeledPoints, SampleClass, SamplingRegion,
                               distance_to_frame, frame_occupancy, guide_sdf, radial_distance,
                               sample_training_points, world_guide_sdf)
from gatemppi.geometry import RngStream

G = GateGeometry()


def test_radial_distance_cases():
    assert radial_distance([5.0, 0, 0]) == 0
    assert radial_distance([0, 0.3, -0.7]) == 0.7
    for x, a in [(1.0, 0.4), (-3.0, -2.0), (0.0, 0.0)]:
        assert radial_distance([x, a, a]) == abs(a)


def test_guide_sdf_cases():
    assert guide_sdf([0, 0, 0], G) == 0.5
    assert guide_sdf([0, 0.5, 0], G) == 0
    assert np.isclose(guide_sdf([2, 0, 0], G), 1.2279, atol=1e-4)
    assert np.isclose(guide_sdf([2, 0, 0], G), 0.5 + 2 * np.tan(np.radians(20)), atol=1e-15)


def test_guide_sdf_matches_direct_formula():
    p = np.random.default_rng(0).uniform(-6, 6, size=(10000, 3))
    ref = [0.5 + abs(x) * np.tan(np.pi / 9) - max(abs(y), abs(z)) for x, y, z in p]
    assert np.abs(guide_sdf(p, G) - ref).max() < 1e-12


def test_guide_sdf_symmetries():
    p = np.random.default_rng(1).normal(size=(500, 3))
    s = guide_sdf(p, G)
    for flip in ([-1, 1, 1], [1, -1, 1], [1, 1, -1]):
        assert np.array_equal(guide_sdf(p * flip, G), s)
    assert np.array_equal(guide_sdf(p[:, [0, 2, 1]], G), s)


def test_world_guide_sdf():
    p = np.random.default_rng(2).normal(size=(50, 3))
    assert np.allclose(world_guide_sdf(p, GatePose(), G), guide_sdf(p, G))
    assert np.isclose(world_guide_sdf([1, 0, 0], GatePose.at([1, 0, 0]), G), G.c)
    pose = GatePose.at([3, -1, 2], yaw=0.7)
    assert np.allclose(world_guide_sdf(pose.transform.apply(p), pose, G), guide_sdf(p, G))


def test_frame_occupancy_cases():
    assert not frame_occupancy([0, 0, 0], G)
    assert frame_occupancy([0, 0.6, 0], G)
    assert not frame_occupancy([1.0, 0.6, 0], G)
    assert not frame_occupancy([0, 0.8, 0], G)


def test_distance_to_frame_consistent_with_occupancy():
    p = np.random.default_rng(3).uniform(-1, 1, size=(20000, 3))
    d = distance_to_frame(p, G)
    assert np.array_equal(d == 0, frame_occupancy(p, G))
    assert np.isclose(distance_to_frame([0, 0, 0], G), 0.5)
    assert np.isclose(distance_to_frame([1.05, 0.6, 0], G), 1.0)


def test_geometry_validation():
    with pytest.raises(ValueError):
        GateGeometry(inner_half_width=0.8, outer_half_width=0.75)
    with pytest.raises(ValueError):
        GateGeometry(thickness=0)
    with pytest.raises(ValueError):
        GateGeometry(cone_angle=np.pi / 2)


def test_sampling_class_properties():
    region = SamplingRegion()
    lp = sample_training_points(G, RngStream(0), (400, 200, 200, 200), region)
    assert len(lp) == 1000
    assert np.array_equal(np.bincount(lp.cls), [400, 200, 200, 200])
    assert np.allclose(lp.sdf, guide_sdf(lp.points, G))
    near = lp.cls == SampleClass.NEAR_SURFACE
    assert np.all(np.abs(lp.sdf[near]) < region.eps_surface)
    assert np.all(lp.sdf[lp.cls == SampleClass.INTERIOR] > 0)
    coll = lp.points[lp.cls == SampleClass.COLLISION_PRONE]
    assert np.all(distance_to_frame(coll, G) <= region.collision_margin)
    glob = lp.points[lp.cls == SampleClass.GLOBAL_UNIFORM]
    assert np.all((glob >= region.box_low) & (glob <= region.box_high))


def test_sampling_reproducible_and_validated():
    a = sample_training_points(G, RngStream(5, 1), (10, 10, 10, 10))
    b = sample_training_points(G, RngStream(5, 1), (10, 10, 10, 10))
    assert np.array_equal(a.points, b.points)
    assert len(sample_training_points(G, RngStream(0), (0, 0, 0, 0))) == 0
    with pytest.raises(ValueError):
        sample_training_points(G, RngStream(0), (-1, 0, 0, 0))


def test_labeled_points_csv_round_trip(tmp_path):
    lp = sample_training_points(G, RngStream(2), (5, 5, 5, 5))
    lp32 = LabeledPoints(lp.points.astype(np.float32), lp.sdf.astype(np.float32), lp.cls)
    lp32.to_csv(tmp_path / "p.csv")
    back = LabeledPoints.from_csv(tmp_path / "p.csv")
    assert np.array_equal(back.points.astype(np.float32), lp32.points)
    assert np.array_equal(back.sdf.astype(np.float32), lp32.sdf)
    assert np.array_equal(back.cls, lp.cls)
