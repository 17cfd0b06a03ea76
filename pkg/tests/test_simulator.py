import numpy as np
import pytest

from cluster_ba.ba_problem import aggregate_world_cluster, total_cost
from cluster_ba.core_geom import Pose, sym_eig3
from cluster_ba.point_cluster import scatter
from cluster_ba.simulator import (GENERATOR, PERTURB_PRESETS, ROOM_FACES, RoomParams,
                                  add_noise, build_preset, cast_rays, gen_random_planes_scene,
                                  gen_room_scene, perturb_trajectory, room_trajectory,
                                  scene_to_problem)
from cluster_ba.uncertainty import pose_error

EPS = np.finfo(float).eps


@pytest.fixture(scope="module")
def room():
    return gen_room_scene(RoomParams(), seed=0)


def rounding_floor(problem, poses):
    """Cost floor of exact data stored in double precision."""
    lam1 = sum(sym_eig3(scatter(aggregate_world_cluster(f, poses))).lam[0]
               for f in problem.features)
    return 16 * EPS * lam1


# --- room -----------------------------------------------------------------------

def test_room_params():
    p = RoomParams()
    assert p.points_per_scan == 28_800
    assert p.trajectory_length == pytest.approx(92.0)
    with pytest.raises(ValueError):
        RoomParams(num_poses=1)
    with pytest.raises(ValueError):
        RoomParams(extents=(30, 20, -1))


def test_ray_down_hits_floor():
    p = RoomParams()
    pts, face = cast_rays(np.array([0.0, 0.0, 2.0]), np.array([[0.0, 0.0, -1.0]]), p)
    np.testing.assert_array_equal(pts, [[0, 0, 0]])
    assert ROOM_FACES[face[0]] == "floor"


def test_ray_up_escapes_open_ceiling():
    pts, face = cast_rays(np.array([0.0, 0.0, 2.0]), np.array([[0.0, 0.0, 1.0]]), RoomParams())
    assert face[0] == -1


def test_room_trajectory_is_equally_spaced():
    p = RoomParams()
    poses = room_trajectory(p)
    xy = np.array([T.t[:2] for T in poses])
    gaps = np.linalg.norm(np.diff(np.r_[xy, xy[:1]], axis=0), axis=1)
    # straight segments have the nominal spacing; corners cut it short
    assert np.isclose(np.median(gaps), p.trajectory_length / p.num_poses)
    assert np.all(np.abs(xy[:, 0]) <= 14) and np.all(np.abs(xy[:, 1]) <= 9)


def test_room_points_lie_on_faces(room):
    for fd, obs in zip(room.feature_defs, room.gt_association):
        assert abs(np.linalg.norm(fd.n) - 1) <= 1e-12
        for j, idx in obs.items():
            w = room.gt_poses[j].apply(room.scans[j][idx])
            assert np.abs((w - fd.q) @ fd.n).max() <= 1e-10


def test_room_counts_and_determinism(room):
    total = room.num_poses * RoomParams().points_per_scan
    assert room.num_points + room.misses == total
    assert 0 < room.misses < total / 2
    assert room.num_points == sum(len(i) for obs in room.gt_association for i in obs.values())
    again = gen_room_scene(RoomParams(), seed=0)
    assert again.misses == room.misses
    assert all(np.array_equal(a, b) for a, b in zip(room.scans, again.scans))
    assert room.meta["generator"] == GENERATOR


# --- random planes ----------------------------------------------------------------

def test_single_point_scene():
    s = gen_random_planes_scene(1, 1, 1, seed=0)
    fd = s.feature_defs[0]
    w = s.gt_poses[0].apply(s.scans[0])
    assert w.shape == (1, 3)
    assert abs((w[0] - fd.q) @ fd.n) <= 1e-12


def test_nominal_point_count():
    assert gen_random_planes_scene(40, 40, 40, seed=0).num_points == 64_000


def test_random_planes_layout():
    s = gen_random_planes_scene(5, 4, 30, seed=1)
    for fd, obs in zip(s.feature_defs, s.gt_association):
        assert sorted(obs) == [0, 1, 2, 3]
        assert np.all(np.abs(fd.q) <= 10)
        for j, idx in obs.items():
            w = s.gt_poses[j].apply(s.scans[j][idx])
            assert np.abs((w - fd.q) @ fd.n).max() <= 1e-12 * 20
            # bounded 4 m x 4 m patch
            assert np.abs(w - fd.q).max() <= 2 * np.sqrt(2) + 1e-9


def test_zero_cost_at_ground_truth():
    s = gen_random_planes_scene(40, 40, 40, seed=2)
    problem, _ = scene_to_problem(s)
    assert abs(total_cost(problem, s.gt_poses)) <= rounding_floor(problem, s.gt_poses)


def test_determinism():
    a = gen_random_planes_scene(3, 3, 10, seed=5)
    b = gen_random_planes_scene(3, 3, 10, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.scans, b.scans))
    assert all(x == y for x, y in zip(a.gt_poses, b.gt_poses))
    c = gen_random_planes_scene(3, 3, 10, seed=6)
    assert not np.array_equal(a.scans[0], c.scans[0])


def test_invalid_sizes():
    with pytest.raises(ValueError):
        gen_random_planes_scene(0, 3, 3, seed=0)


# --- noise and perturbation -----------------------------------------------------------

def test_zero_noise_is_identity():
    s = gen_random_planes_scene(2, 2, 5, seed=0)
    n = add_noise(s, 0.0, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(s.scans, n.scans))
    with pytest.raises(ValueError):
        add_noise(s, -1.0, seed=1)


def test_noise_standard_deviation():
    s = gen_random_planes_scene(10, 10, 1000, seed=0)
    n = add_noise(s, 0.05, seed=3)
    d = np.concatenate([b - a for a, b in zip(s.scans, n.scans)]).ravel()
    assert len(d) >= 100_000
    assert abs(d.std() / 0.05 - 1) < 0.01
    assert n.sigma_p == 0.05


def test_noisy_points_within_sanity_band():
    s = add_noise(gen_random_planes_scene(5, 5, 200, seed=4), 0.05, seed=5)
    for fd, obs in zip(s.feature_defs, s.gt_association):
        for j, idx in obs.items():
            w = s.gt_poses[j].apply(s.scans[j][idx])
            assert np.abs((w - fd.q) @ fd.n).max() <= 6 * 0.05


def test_perturbation_zero_and_statistics():
    rng = np.random.default_rng(0)
    base = [Pose(np.eye(3), rng.normal(size=3)) for _ in range(100_000)]
    same = perturb_trajectory(base[:10], 0.0, 0.0, seed=1)
    assert all(a == b for a, b in zip(same, base[:10]))
    rot, trans = PERTURB_PRESETS["paper-init"]
    assert rot == pytest.approx(np.deg2rad(2)) and trans == 0.1
    out = perturb_trajectory(base, rot, trans, seed=2)
    d = np.array([pose_error(b, o) for b, o in zip(base, out)])
    sd = d.std(axis=0)
    np.testing.assert_allclose(sd[:3] / rot, 1, atol=0.02)
    np.testing.assert_allclose(sd[3:] / trans, 1, atol=0.02)


# --- problem construction ----------------------------------------------------------

def test_scene_to_problem_nominal():
    s = gen_random_planes_scene(40, 40, 40, seed=0)
    problem, noises = scene_to_problem(s)
    assert problem.num_features == 40 and problem.num_poses == 40
    assert all(len(f.pose_idx) == 40 and set(f.counts) == {40.0} for f in problem.features)
    assert sum(f.num_points for f in problem.features) == s.num_points
    assert len(noises) == 40 and len(noises[0]) == 40


def test_presets_reproducible():
    a, ia, cfg = build_preset("small", 9)
    b, ib, _ = build_preset("small", 9)
    assert cfg["M_p"] == 5 and cfg["M_f"] == 6 and cfg["N"] == 50
    assert all(np.array_equal(x, y) for x, y in zip(a.scans, b.scans))
    assert all(x == y for x, y in zip(ia, ib))
    with pytest.raises(KeyError):
        build_preset("nope", 0)
