"""Synthetic scenes: random planar patches and a lidar sweeping a room.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``; the same
seed reproduces a scene bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ba_problem import PLANE, BAProblem, Feature
from .core_geom import Pose, boxplus, so3_exp
from .point_cluster import cluster_from_points, cluster_noise

GENERATOR = "numpy.random.PCG64"


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class FeatureDef:
    kind: str
    n: np.ndarray
    q: np.ndarray


@dataclass
class Scene:
    """Ground-truth poses, local scans and the exact point association.

    ``gt_association[i]`` maps a 0-based pose index to the indices of the
    points of feature ``i`` inside that pose's scan.
    """

    gt_poses: list
    scans: list
    gt_association: list
    feature_defs: list
    sigma_p: float = 0.0
    misses: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_poses(self):
        return len(self.gt_poses)

    @property
    def num_points(self):
        return int(sum(len(s) for s in self.scans))

    def world_points(self, poses=None):
        poses = self.gt_poses if poses is None else poses
        return np.concatenate([T.apply(s) for T, s in zip(poses, self.scans)])


def random_rotation(rng):
    """Uniformly distributed rotation (normalized Gaussian quaternion)."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _plane_basis(n):
    a = np.eye(3)[np.argmin(np.abs(n))]
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def gen_random_planes_scene(M_f, M_p, N, seed, half_extent=10.0, patch=4.0) -> Scene:
    """``M_f`` square plane patches seen by ``M_p`` random poses, ``N`` points each."""
    if min(M_f, M_p, N) < 1:
        raise ValueError("M_f, M_p and N must be at least 1")
    rng = make_rng(seed)
    defs = []
    for _ in range(M_f):
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        q = rng.uniform(-half_extent, half_extent, 3)
        defs.append(FeatureDef(PLANE, n, q))
    poses = [Pose(random_rotation(rng), rng.uniform(-half_extent, half_extent, 3))
             for _ in range(M_p)]
    scans = []
    assoc = [dict() for _ in range(M_f)]
    for j, T in enumerate(poses):
        chunks = []
        for i, fd in enumerate(defs):
            e1, e2 = _plane_basis(fd.n)
            ab = rng.uniform(-patch / 2, patch / 2, (N, 2))
            pw = fd.q + ab[:, :1] * e1 + ab[:, 1:] * e2
            chunks.append((pw - T.t) @ T.R)
            assoc[i][j] = np.arange(i * N, (i + 1) * N)
        scans.append(np.concatenate(chunks))
    meta = {"kind": "random-planes", "M_f": M_f, "M_p": M_p, "N": N, "seed": seed,
            "generator": GENERATOR}
    return Scene(poses, scans, assoc, defs, meta=meta)


@dataclass(frozen=True)
class RoomParams:
    """Cuboid room with an open ceiling and a 16-channel spinning lidar.

    The floor is ``z = 0``; x and y are centered on the room.  The sensor
    follows a rectangle inset by ``margin`` from the walls at ``height``.
    """

    extents: tuple = (30.0, 20.0, 8.0)
    num_poses: int = 100
    channels: int = 16
    azimuth_steps: int = 1800
    elevation_deg: float = 15.0
    height: float = 2.0
    margin: float = 1.0

    def __post_init__(self):
        if min(self.extents) <= 0:
            raise ValueError("room extents must be positive")
        if self.num_poses < 2:
            raise ValueError("num_poses must be at least 2")
        X, Y, Z = self.extents
        if not (0 < self.margin < min(X, Y) / 2 and 0 < self.height < Z):
            raise ValueError("trajectory does not fit inside the room")

    @property
    def points_per_scan(self):
        return self.channels * self.azimuth_steps

    @property
    def trajectory_length(self):
        X, Y, _ = self.extents
        return 2.0 * ((X - 2 * self.margin) + (Y - 2 * self.margin))


# faces that return points; the ceiling is open
ROOM_FACES = ("floor", "wall_x_min", "wall_x_max", "wall_y_min", "wall_y_max")


def _room_face_defs(params):
    X, Y, _ = params.extents
    return [
        FeatureDef(PLANE, np.array([0.0, 0.0, 1.0]), np.zeros(3)),
        FeatureDef(PLANE, np.array([1.0, 0.0, 0.0]), np.array([-X / 2, 0.0, 0.0])),
        FeatureDef(PLANE, np.array([-1.0, 0.0, 0.0]), np.array([X / 2, 0.0, 0.0])),
        FeatureDef(PLANE, np.array([0.0, 1.0, 0.0]), np.array([0.0, -Y / 2, 0.0])),
        FeatureDef(PLANE, np.array([0.0, -1.0, 0.0]), np.array([0.0, Y / 2, 0.0])),
    ]


def room_trajectory(params: RoomParams):
    """Poses equally spaced by arc length, heading along the direction of travel."""
    X, Y, _ = params.extents
    a, b = X / 2 - params.margin, Y / 2 - params.margin
    corners = np.array([[-a, -b], [a, -b], [a, b], [-a, b], [-a, -b]])
    seg = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    poses = []
    for k in range(params.num_poses):
        s = k * cum[-1] / params.num_poses
        i = min(np.searchsorted(cum, s, side="right") - 1, 3)
        u = (s - cum[i]) / seg[i]
        xy = corners[i] + u * (corners[i + 1] - corners[i])
        dxy = corners[i + 1] - corners[i]
        yaw = np.arctan2(dxy[1], dxy[0])
        poses.append(Pose(so3_exp([0.0, 0.0, yaw]), [xy[0], xy[1], params.height]))
    return poses


def scanner_directions(params: RoomParams, phase=0.0):
    """Unit ray directions ``(channels * azimuth_steps, 3)`` in the sensor frame."""
    el = np.deg2rad(np.linspace(-params.elevation_deg, params.elevation_deg, params.channels))
    az = phase + 2.0 * np.pi * np.arange(params.azimuth_steps) / params.azimuth_steps
    E, A = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)


def cast_rays(origin, dirs, params: RoomParams):
    """First hit of each ray on the room's inner faces.

    Returns ``(points, face)`` with ``face = -1`` for rays leaving through
    the open ceiling.  ``face`` indexes :data:`ROOM_FACES`.
    """
    X, Y, Z = params.extents
    # planes: floor, x-, x+, y-, y+, ceiling
    axis = np.array([2, 0, 0, 1, 1, 2])
    value = np.array([0.0, -X / 2, X / 2, -Y / 2, Y / 2, Z])
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (value[None, :] - origin[axis][None, :]) / dirs[:, axis]
    s = np.where(s > 0, s, np.inf)
    k = np.argmin(s, axis=1)
    dist = s[np.arange(len(dirs)), k]
    pts = origin + dist[:, None] * dirs
    # snap the hit coordinate onto its face exactly
    rows = np.arange(len(dirs))
    pts[rows, axis[k]] = value[k]
    face = np.where((k == 5) | ~np.isfinite(dist), -1, k)
    return pts, face


def gen_room_scene(params: RoomParams | None = None, seed=0) -> Scene:
    """Noiseless scans of the room along its rectangular trajectory.

    The seed sets a random azimuth phase per scan.
    """
    params = params or RoomParams()
    rng = make_rng(seed)
    poses = room_trajectory(params)
    defs = _room_face_defs(params)
    scans, misses = [], 0
    assoc = [dict() for _ in defs]
    step = 2.0 * np.pi / params.azimuth_steps
    for j, T in enumerate(poses):
        dirs = scanner_directions(params, rng.uniform(0.0, step)) @ T.R.T
        pts, face = cast_rays(T.t, dirs, params)
        keep = face >= 0
        misses += int((~keep).sum())
        pts, face = pts[keep], face[keep]
        scans.append((pts - T.t) @ T.R)
        for i in range(len(defs)):
            idx = np.flatnonzero(face == i)
            if len(idx):
                assoc[i][j] = idx
    meta = {"kind": "room", "extents": list(params.extents), "M_p": params.num_poses,
            "seed": seed, "generator": GENERATOR}
    return Scene(poses, scans, assoc, defs, misses=misses, meta=meta)


def add_noise(scene: Scene, sigma_p, seed) -> Scene:
    """Add i.i.d. isotropic Gaussian noise to every local point."""
    if sigma_p < 0:
        raise ValueError("sigma_p must be nonnegative")
    if sigma_p == 0:
        return replace(scene, scans=[s.copy() for s in scene.scans])
    rng = make_rng(seed)
    scans = [s + sigma_p * rng.standard_normal(s.shape) for s in scene.scans]
    total = float(np.hypot(scene.sigma_p, sigma_p))
    return replace(scene, scans=scans, sigma_p=total)


def perturb_trajectory(poses, sigma_rot, sigma_trans, seed):
    """Left-perturb every pose by an independent Gaussian 6-vector."""
    rng = make_rng(seed)
    scale = np.array([sigma_rot] * 3 + [sigma_trans] * 3, dtype=float)
    out = []
    for T in poses:
        d = scale * rng.standard_normal(6)
        out.append(boxplus(T, d))
    return out


def scene_to_problem(scene: Scene, use_gt_association=True, poses=None,
                     voxel_params=None, sigma_p=None):
    """Build the clustered problem and per-observation cluster noise.

    Returns ``(problem, noises)`` where ``noises[i][j]`` is the
    :class:`ClusterNoise` of feature ``i`` at pose ``j``, built from the
    measured points with per-point noise ``sigma_p`` (defaults to the
    scene's accumulated noise level).
    """
    sigma = scene.sigma_p if sigma_p is None else sigma_p
    if not use_gt_association:
        from .voxel_assoc import associate
        poses = scene.gt_poses if poses is None else poses
        problem, table = associate(scene.scans, poses, voxel_params, return_table=True)
    else:
        table = scene.gt_association
        feats = []
        for i, obs in enumerate(table):
            kind = scene.feature_defs[i].kind
            feats.append(Feature(kind, {j: cluster_from_points(scene.scans[j][idx])
                                        for j, idx in obs.items()}))
        problem = BAProblem(feats, scene.num_poses)
    noises = [{j: cluster_noise(C, sigma) for j, C in f.observations.items()}
              for f in problem.features]
    return problem, noises


# named configurations used by the CLI and the experiments
PERTURB_PRESETS = {"paper-init": (np.deg2rad(2.0), 0.1)}

PRESETS = {
    "virtual-nominal": {"kind": "random-planes", "M_f": 40, "M_p": 40, "N": 40,
                        "sigma_p": 0.05, "init": "paper-init"},
    "desk": {"kind": "random-planes", "M_f": 15, "M_p": 20, "N": 50,
             "sigma_p": 0.05, "init": "paper-init"},
    "small": {"kind": "random-planes", "M_f": 6, "M_p": 5, "N": 50,
              "sigma_p": 0.05, "init": "paper-init"},
    "room-v1": {"kind": "room", "sigma_p": 0.02, "init": "paper-init"},
}


def seeds_for(seed):
    """Independent sub-seeds for scene, noise and initial perturbation."""
    scene_ss, noise_ss, init_ss = np.random.SeedSequence(seed).spawn(3)
    return scene_ss, noise_ss, init_ss


def build_preset(name, seed, sigma_p=None, **overrides):
    """Generate ``(scene_noisy, init_poses, config)`` for a named preset."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = dict(PRESETS[name])
    cfg.update(overrides)
    if sigma_p is not None:
        cfg["sigma_p"] = sigma_p
    s_scene, s_noise, s_init = seeds_for(seed)
    if cfg["kind"] == "room":
        scene = gen_room_scene(RoomParams(**cfg.get("room", {})), s_scene)
    else:
        scene = gen_random_planes_scene(cfg["M_f"], cfg["M_p"], cfg["N"], s_scene)
    scene.meta.update(preset=name, seed=seed)
    noisy = add_noise(scene, cfg["sigma_p"], s_noise)
    rot, trans = PERTURB_PRESETS[cfg["init"]] if isinstance(cfg["init"], str) else cfg["init"]
    init = perturb_trajectory(scene.gt_poses, rot, trans, s_init)
    return noisy, init, cfg
