"""Cross-scan feature association by adaptive octree voxelization.

Points of all scans are mapped to the world with the initial poses and
hashed into root voxels of edge ``L``.  A voxel whose points look planar
(``lam3 / lam2 < gamma``) becomes one plane feature; otherwise it is cut
into 8 octants, down to ``max_layer`` cuts.  Voxels that still fail at the
last layer, or hold fewer than ``min_points`` points, are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ba_problem import EDGE, PLANE, BAProblem, Feature
from .core_geom import sym_eig3
from .errors import NoConstraintsError
from .point_cluster import cluster_from_points


@dataclass(frozen=True)
class VoxelParams:
    root_size: float = 1.0
    max_layer: int = 3
    min_points: int = 20
    gamma: float = 1.0 / 25.0
    detect_edges: bool = False

    def __post_init__(self):
        if not self.root_size > 0:
            raise ValueError("root_size must be positive")
        if self.max_layer < 0:
            raise ValueError("max_layer must be nonnegative")
        if self.min_points < 3:
            raise ValueError("min_points must be at least 3")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


def world_hash_key(point, L):
    """Integer cell of a point; cells are closed-low ``[k L, (k + 1) L)``."""
    if not L > 0:
        raise ValueError("cell size must be positive")
    k = np.floor(np.asarray(point, dtype=float) / L).astype(np.int64)
    return tuple(int(x) for x in k)


def hash_keys(points, L):
    """Vectorized :func:`world_hash_key` for ``(n, 3)`` points."""
    return np.floor(np.asarray(points, dtype=float) / L).astype(np.int64)


def _group_ids(keys):
    """Dense group ids for integer key rows, numbered in sorted key order."""
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    ks = keys[order]
    new = np.concatenate([[True], np.any(ks[1:] != ks[:-1], axis=1)])
    gid_sorted = np.cumsum(new) - 1
    gid = np.empty(len(keys), dtype=np.int64)
    gid[order] = gid_sorted
    return gid, ks[new]


def _voxel_scatter(pts, gid, G):
    """Counts and scatter matrices of points grouped by ``gid``."""
    n = np.bincount(gid, minlength=G).astype(float)
    mean = np.stack([np.bincount(gid, pts[:, a], G) for a in range(3)], 1) / np.maximum(n, 1)[:, None]
    c = pts - mean[gid]
    A = np.empty((G, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            A[:, a, b] = A[:, b, a] = np.bincount(gid, c[:, a] * c[:, b], G)
    return n, A / np.maximum(n, 1)[:, None, None]


def _classify(A, params):
    lam = sym_eig3(A).lam
    kind = np.full(len(A), None, dtype=object)
    with np.errstate(divide="ignore", invalid="ignore"):
        plane = (lam[:, 1] > 0) & (lam[:, 2] / lam[:, 1] < params.gamma)
        kind[plane] = PLANE
        if params.detect_edges:
            edge = ~plane & (lam[:, 0] > 0) & (lam[:, 1] / lam[:, 0] < params.gamma)
            kind[edge] = EDGE
    return kind


def voxelize(world, params: VoxelParams):
    """Accepted voxels as ``(kind, layer, key, point_indices)``.

    Cutting an aligned cell into octants yields the aligned grid of half
    the size, so each layer re-hashes the still-unassigned points at
    ``L / 2**layer``.  Output is ordered by layer, then voxel key.
    """
    active = np.arange(len(world))
    found = []
    for layer in range(params.max_layer + 1):
        if len(active) == 0:
            break
        size = params.root_size / 2 ** layer
        gid, keys = _group_ids(hash_keys(world[active], size))
        G = len(keys)
        n, A = _voxel_scatter(world[active], gid, G)
        testable = n >= params.min_points
        kind = np.full(G, None, dtype=object)
        if testable.any():
            kind[testable] = _classify(A[testable], params)
        accepted = kind != None  # noqa: E711
        if accepted.any():
            order = np.argsort(gid, kind="stable")
            bounds = np.searchsorted(gid[order], np.arange(G + 1))
            for g in np.flatnonzero(accepted):
                found.append((kind[g], layer, tuple(int(x) for x in keys[g]),
                              active[order[bounds[g]:bounds[g + 1]]]))
        # failed but testable voxels are cut further; small ones are dropped
        active = active[(testable & ~accepted)[gid]]
    return found


def associate(scans, init_poses, params: VoxelParams | None = None, return_table=False):
    """Build a problem from raw local scans and an initial trajectory.

    With ``return_table`` the per-feature observation table (pose ->
    local point indices) is returned as well.
    """
    params = params or VoxelParams()
    if len(scans) != len(init_poses):
        raise ValueError(f"{len(scans)} scans but {len(init_poses)} poses")
    scans = [np.asarray(s, dtype=float).reshape(-1, 3) for s in scans]
    sizes = [len(s) for s in scans]
    if sum(sizes) == 0:
        raise NoConstraintsError("no points to associate")
    world = np.concatenate([T.apply(s) for T, s in zip(init_poses, scans)])
    pose_of = np.repeat(np.arange(len(scans)), sizes)
    offset = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    local_of = np.arange(len(world)) - offset[pose_of]

    found = voxelize(world, params)
    if not found:
        raise NoConstraintsError("adaptive voxelization found no features")

    feats, table = [], []
    for kind, _, _, idx in found:
        idx = np.sort(idx)
        poses = pose_of[idx]
        obs, rows = {}, {}
        for j in np.unique(poses):
            sel = local_of[idx[poses == j]]
            obs[int(j)] = cluster_from_points(scans[j][sel])
            rows[int(j)] = sel
        feats.append(Feature(kind, obs))
        table.append(rows)
    problem = BAProblem(feats, len(scans))
    return (problem, table) if return_table else problem
