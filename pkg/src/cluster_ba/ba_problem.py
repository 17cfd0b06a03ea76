"""Bundle-adjustment cost over point clusters and its analytic derivatives.

Pose ``j`` owns columns ``[6j, 6j + 6)`` of the Jacobian row and Hessian,
ordered ``(dphi, dt)`` as in :func:`core_geom.boxplus`.  Pose indices are
0-based.

Derivatives of one feature are evaluated in a frame whose origin is the
feature centroid (the cost is translation invariant, so this only changes
the parameterization) and then mapped back to the world-origin
perturbation.  Working about the centroid avoids the cancellation that raw
moments suffer far from the origin.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core_geom import Pose, poses_to_arrays, sym_eig3
from .errors import DegenerateFeatureError
from .point_cluster import PointCluster

PLANE = "plane"
EDGE = "edge"
MIN_POINTS = {PLANE: 3, EDGE: 2}

# relative eigengap below which a 1/(lam_l - lam_k) term is dropped
GAP_TOL = 1e-10


class Feature:
    """A plane or edge with per-pose local clusters.

    ``observations`` maps a 0-based pose index to the cluster of that scan's
    points in the scan's own frame.
    """

    __slots__ = ("kind", "observations", "pose_idx", "counts", "means", "scatters", "num_points")

    def __init__(self, kind: str, observations: Mapping[int, PointCluster]):
        if kind not in MIN_POINTS:
            raise ValueError(f"unknown feature kind {kind!r}")
        obs = {int(j): C for j, C in sorted(observations.items()) if C.N > 0}
        self.kind = kind
        self.observations = obs
        self.pose_idx = np.array(list(obs), dtype=np.intp)
        self.counts = np.array([C.N for C in obs.values()], dtype=float)
        self.means = np.array([C.mean for C in obs.values()]).reshape(-1, 3)
        self.scatters = np.array([C.S for C in obs.values()]).reshape(-1, 3, 3)
        self.num_points = int(sum(C.N for C in obs.values()))
        for a in (self.pose_idx, self.counts, self.means, self.scatters):
            a.setflags(write=False)

    def check(self, index=None):
        need = MIN_POINTS[self.kind]
        if self.num_points < need:
            raise DegenerateFeatureError(
                f"{self.kind} needs at least {need} points, has {self.num_points}", index)

    def __repr__(self):
        return f"Feature({self.kind!r}, poses={self.pose_idx.tolist()}, N={self.num_points})"


@dataclass
class BAProblem:
    features: list
    num_poses: int

    def __post_init__(self):
        for i, f in enumerate(self.features):
            if len(f.pose_idx) and (f.pose_idx.min() < 0 or f.pose_idx.max() >= self.num_poses):
                raise ValueError(f"feature {i} references a pose outside [0, {self.num_poses})")

    @property
    def num_features(self):
        return len(self.features)


@dataclass
class DerivativeBundle:
    cost: float
    J: np.ndarray
    H: np.ndarray
    gap_drops: int = 0


@dataclass
class FeatureDerivatives:
    """Sparse per-feature result.

    ``J`` has one 6-row per observed pose in ``pose_idx``; the Hessian is
    ``blockdiag(D) + V^T diag(alpha) V`` with ``V`` of shape ``(r, 6m)``.
    For each cost eigenvalue ``l`` the rows of ``V`` are the centroid term
    followed by ``g_kl`` for every kept ``k`` outside the cost eigenvalues.
    """

    cost: float
    pose_idx: np.ndarray
    J: np.ndarray
    D: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    gap_drops: int = 0

    def hessian_blocks(self):
        """Dense ``(6m, 6m)`` Hessian over the observed poses."""
        m = len(self.pose_idx)
        H = (self.V.T * self.alpha) @ self.V
        for a in range(m):
            H[6 * a:6 * a + 6, 6 * a:6 * a + 6] += self.D[a]
        return 0.5 * (H + H.T)


def _world_moments(feature: Feature, Rs, ts):
    R = Rs[feature.pose_idx]
    mw = np.einsum("mij,mj->mi", R, feature.means) + ts[feature.pose_idx]
    Sw = R @ feature.scatters @ np.swapaxes(R, 1, 2)
    n = feature.counts
    N = n.sum()
    mbar = (n @ mw) / N
    d = mw - mbar
    S = Sw.sum(axis=0) + np.einsum("m,mi,mj->ij", n, d, d)
    return N, mbar, d, Sw, 0.5 * (S + S.T)


def _as_arrays(poses):
    if isinstance(poses, tuple) and len(poses) == 2 and isinstance(poses[0], np.ndarray):
        return poses
    return poses_to_arrays(poses)


def aggregate_world_cluster(feature: Feature, poses: Sequence[Pose]) -> PointCluster:
    """Merge of every observed local cluster mapped into the world frame."""
    if len(feature.pose_idx) == 0:
        return PointCluster.empty()
    Rs, ts = _as_arrays(poses)
    N, mbar, _, _, S = _world_moments(feature, Rs, ts)
    return PointCluster(int(N), mbar, S)


def _cost_from_lam(kind, lam):
    return lam[..., 2] if kind == PLANE else lam[..., 1] + lam[..., 2]


def feature_cost(feature: Feature, poses, index=None) -> float:
    """Plane: smallest scatter eigenvalue.  Edge: sum of the two smallest."""
    feature.check(index)
    Rs, ts = _as_arrays(poses)
    N, _, _, _, S = _world_moments(feature, Rs, ts)
    lam = sym_eig3(S / N).lam
    return float(_cost_from_lam(feature.kind, lam))


def total_cost(problem: BAProblem, poses) -> float:
    if not problem.features:
        return 0.0
    A = _scatters(problem, _as_arrays(poses))
    lam = sym_eig3(A).lam
    return _sum_costs(problem, lam)


def rounding_scale(problem: BAProblem, poses) -> float:
    """Sum of scatter traces over features; sets the rounding floor of the cost."""
    if not problem.features:
        return 0.0
    return float(np.trace(_scatters(problem, _as_arrays(poses)), axis1=1, axis2=2).sum())


def _scatters(problem, arrays):
    Rs, ts = arrays
    A = np.empty((problem.num_features, 3, 3))
    for i, f in enumerate(problem.features):
        f.check(i)
        N, _, _, _, S = _world_moments(f, Rs, ts)
        A[i] = S / N
    return A


def _sum_costs(problem, lam):
    total = 0.0
    for i, f in enumerate(problem.features):
        total += float(_cost_from_lam(f.kind, lam[i]))
    return total


def _feature_derivs(feature: Feature, Rs, ts, eig, index=None) -> FeatureDerivatives:
    feature.check(index)
    N, mbar, d, Sw, S = _world_moments(feature, Rs, ts)
    lam, U = eig
    n = feature.counts
    m = len(n)
    # uncentered second moments of each observation about the centroid
    Sig = Sw + n[:, None, None] * np.einsum("mi,mj->mij", d, d)
    trace = lam.sum()
    gap_tol = GAP_TOL * max(abs(trace), np.finfo(float).tiny)

    def y(k, l):
        # derivative piece of u_k^T A u_l from the u_k-side
        uk, ul = U[:, k], U[:, l]
        w = Sig @ ul
        out = np.empty((m, 6))
        out[:, :3] = np.cross(w, uk)
        out[:, 3:] = (n * (d @ ul))[:, None] * uk
        return out

    def c_vec(u):
        out = np.empty((m, 6))
        out[:, :3] = n[:, None] * np.cross(d, u)
        out[:, 3:] = n[:, None] * u
        return out

    def d_blocks(u):
        w = Sig @ u
        K = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
        uw = np.einsum("i,mj->mij", u, w)
        rr = -K @ Sig @ K + 0.5 * (uw + np.swapaxes(uw, 1, 2)) \
            - (w @ u)[:, None, None] * np.eye(3)
        dxu = np.cross(d, u)
        out = np.empty((m, 6, 6))
        out[:, :3, :3] = rr
        out[:, :3, 3:] = n[:, None, None] * np.einsum("mi,j->mij", dxu, u)
        out[:, 3:, :3] = np.swapaxes(out[:, :3, 3:], 1, 2)
        out[:, 3:, 3:] = n[:, None, None] * np.outer(u, u)
        return (2.0 / N) * out

    if feature.kind == PLANE:
        ls = (2,)
        cost = lam[2]
    else:
        ls = (1, 2)
        cost = lam[1] + lam[2]

    J = np.zeros((m, 6))
    D = np.zeros((m, 6, 6))
    vecs, alphas = [], []
    drops = 0
    for l in ls:
        J += (2.0 / N) * y(l, l)
        D += d_blocks(U[:, l])
        vecs.append(c_vec(U[:, l]))
        alphas.append(-2.0 / N ** 2)
        for k in range(3):
            if k == l or k in ls:
                # for edges the (1, 2) and (2, 1) terms cancel exactly
                continue
            gap = lam[l] - lam[k]
            if abs(gap) < gap_tol:
                drops += 1
                continue
            vecs.append((y(k, l) + y(l, k)) / N)
            alphas.append(2.0 / gap)

    # centroid frame -> world-origin perturbation
    Jt = J[:, 3:].copy()
    J[:, :3] += np.cross(mbar, Jt)
    V = np.array(vecs)
    V[:, :, :3] += np.cross(mbar, V[:, :, 3:])
    B = -np.array([[0.0, -mbar[2], mbar[1]], [mbar[2], 0.0, -mbar[0]], [-mbar[1], mbar[0], 0.0]])
    Xrr, Xrt, Xtr, Xtt = D[:, :3, :3], D[:, :3, 3:], D[:, 3:, :3], D[:, 3:, 3:]
    BT = B.T
    D2 = np.empty_like(D)
    D2[:, :3, :3] = Xrr + BT @ Xtr + Xrt @ B + BT @ Xtt @ B
    D2[:, :3, 3:] = Xrt + BT @ Xtt
    D2[:, 3:, :3] = Xtr + Xtt @ B
    D2[:, 3:, 3:] = Xtt
    jm = np.einsum("mi,j->mij", Jt, mbar)
    D2[:, :3, :3] += 0.5 * (jm + np.swapaxes(jm, 1, 2)) - (Jt @ mbar)[:, None, None] * np.eye(3)

    return FeatureDerivatives(float(cost), feature.pose_idx, J, D2,
                              V.reshape(len(vecs), 6 * m), np.array(alphas), drops)


def feature_derivatives(feature: Feature, poses, index=None) -> FeatureDerivatives:
    """Cost, Jacobian and Hessian of one feature over its observed poses."""
    Rs, ts = _as_arrays(poses)
    feature.check(index)
    N, _, _, _, S = _world_moments(feature, Rs, ts)
    return _feature_derivs(feature, Rs, ts, sym_eig3(S / N), index)


def default_threads():
    env = os.environ.get("CLUSTER_BA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def assemble(problem: BAProblem, poses, threads=None, timings=None) -> DerivativeBundle:
    """Dense cost, Jacobian and Hessian of the whole problem.

    Features are evaluated (optionally on ``threads`` workers) and reduced
    in feature order, so the result does not depend on the thread count.
    """
    Rs, ts = _as_arrays(poses)
    M = problem.num_poses
    dim = 6 * M
    if not problem.features:
        return DerivativeBundle(0.0, np.zeros(dim), np.zeros((dim, dim)))
    A = _scatters(problem, (Rs, ts))
    eig = sym_eig3(A)
    feats = problem.features
    threads = default_threads() if threads is None else max(1, int(threads))

    def work(i):
        return _feature_derivs(feats[i], Rs, ts, (eig.lam[i], eig.U[i]), i)

    if threads > 1 and len(feats) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, range(len(feats))))
    else:
        results = [work(i) for i in range(len(feats))]

    cost = 0.0
    J = np.zeros((M, 6))
    H = np.zeros((M, 6, M, 6))
    rows = sum(len(r.alpha) for r in results)
    V = np.zeros((rows, M, 6))
    alpha = np.empty(rows)
    drops = 0
    r0 = 0
    for r in results:
        cost += r.cost
        J[r.pose_idx] += r.J
        H[r.pose_idx, :, r.pose_idx, :] += r.D
        k = len(r.alpha)
        V[r0:r0 + k, r.pose_idx] = r.V.reshape(k, -1, 6)
        alpha[r0:r0 + k] = r.alpha
        r0 += k
        drops += r.gap_drops
    V = V.reshape(rows, dim)
    H = H.reshape(dim, dim) + (V.T * alpha) @ V
    H = 0.5 * (H + H.T)
    return DerivativeBundle(cost, J.reshape(dim), H, drops)
