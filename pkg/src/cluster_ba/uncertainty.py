"""Pose covariance from cluster noise, pose errors and NEES."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .ba_problem import PLANE, BAProblem, Feature, assemble
from .core_geom import Pose, poses_to_arrays, so3_log, sym_eig3
from .errors import UnobservableProblem
from .point_cluster import VECH_INDEX

FD_REL_STEP = 1e-6


@dataclass
class PoseCovariance:
    """Covariance over the perturbations of poses ``1..M-1`` (pose 0 fixed)."""

    Sigma: np.ndarray

    @property
    def dim(self):
        return len(self.Sigma)

    def pose_block(self, j):
        """6x6 block of pose ``j`` (``j >= 1``)."""
        if j < 1:
            raise IndexError("pose 0 is held fixed and has no covariance block")
        k = 6 * (j - 1)
        return self.Sigma[k:k + 6, k:k + 6]

    def std(self):
        return np.sqrt(np.clip(np.diag(self.Sigma), 0.0, None))


def _basis_deltas(feature: Feature):
    """Local (mean, S) changes for +-h along each of the 9 moment directions.

    Returns ``(obs, dmean, dS, h)`` with one row per (observation, basis,
    sign); ``h`` is the signed step.
    """
    m = len(feature.pose_idx)
    n = feature.counts
    means = feature.means
    rows_obs, dmean, dS, steps = [], [], [], []
    for a in range(m):
        P = feature.scatters[a] + n[a] * np.outer(means[a], means[a])
        v = n[a] * means[a]
        hP = FD_REL_STEP * max(1.0, np.abs(P).max())
        hv = FD_REL_STEP * max(1.0, np.abs(v).max())
        for k in range(9):
            for sgn in (1.0, -1.0):
                dP = np.zeros((3, 3))
                dv = np.zeros(3)
                if k < 6:
                    i, j = VECH_INDEX[k]
                    h = sgn * hP
                    dP[i, j] = dP[j, i] = h
                else:
                    h = sgn * hv
                    dv[k - 6] = h
                mu = means[a]
                # raw-moment shift expressed on the centered form
                dS.append(dP - np.outer(mu, dv) - np.outer(dv, mu) - np.outer(dv, dv) / n[a])
                dmean.append(dv / n[a])
                rows_obs.append(a)
                steps.append(h)
    return np.array(rows_obs), np.array(dmean), np.array(dS), np.array(steps)


def _batched_jacobians(feature: Feature, Rs, ts, obs, dmean, dS):
    """Feature Jacobians (K, m, 6) with observation ``obs[k]`` altered."""
    K = len(obs)
    m = len(feature.pose_idx)
    R = Rs[feature.pose_idx]
    n = feature.counts
    N = n.sum()
    means = np.broadcast_to(feature.means, (K, m, 3)).copy()
    scat = np.broadcast_to(feature.scatters, (K, m, 3, 3)).copy()
    rk = np.arange(K)
    means[rk, obs] += dmean
    scat[rk, obs] += dS
    mw = np.einsum("mij,kmj->kmi", R, means) + ts[feature.pose_idx]
    Sw = R @ scat @ np.swapaxes(R, 1, 2)
    mbar = np.einsum("m,kmi->ki", n, mw) / N
    d = mw - mbar[:, None, :]
    S = Sw.sum(axis=1) + np.einsum("m,kmi,kmj->kij", n, d, d)
    eig = sym_eig3(S / N)
    Sig = Sw + n[None, :, None, None] * np.einsum("kmi,kmj->kmij", d, d)
    ls = (2,) if feature.kind == PLANE else (1, 2)
    J = np.zeros((K, m, 6))
    for l in ls:
        u = eig.U[:, :, l]
        w = np.einsum("kmij,kj->kmi", Sig, u)
        J[:, :, :3] += np.cross(w, u[:, None, :])
        J[:, :, 3:] += (n * np.einsum("kmi,ki->km", d, u))[:, :, None] * u[:, None, :]
    J *= 2.0 / N
    J[:, :, :3] += np.cross(mbar[:, None, :], J[:, :, 3:])
    return J


def feature_noise_jacobian(feature: Feature, poses):
    """``dJ / dC`` of one feature: array ``(m, 6m, 9)`` per observation."""
    Rs, ts = poses_to_arrays(poses) if not isinstance(poses, tuple) else poses
    obs, dmean, dS, h = _basis_deltas(feature)
    J = _batched_jacobians(feature, Rs, ts, obs, dmean, dS)
    m = len(feature.pose_idx)
    J = J.reshape(m, 9, 2, 6 * m)
    h = h.reshape(m, 9, 2)
    G = (J[:, :, 0] - J[:, :, 1]) / (h[:, :, 0] - h[:, :, 1])[:, :, None]
    return np.swapaxes(G, 1, 2)


def pose_covariance(problem: BAProblem, poses_opt, cluster_noises, threads=None) -> PoseCovariance:
    """Sandwich covariance ``H^-1 (sum G Sigma_C G^T) H^-1`` with pose 0 fixed.

    ``cluster_noises[i][j]`` is the :class:`ClusterNoise` of feature ``i``
    observed at pose ``j``.
    """
    M = problem.num_poses
    dim = 6 * (M - 1)
    if dim == 0:
        return PoseCovariance(np.zeros((0, 0)))
    bundle = assemble(problem, poses_opt, threads=threads)
    Hr = bundle.H[6:, 6:]
    try:
        cf = scipy.linalg.cho_factor(Hr, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise UnobservableProblem("reduced Hessian is not positive definite") from exc
    arrays = poses_to_arrays(poses_opt)
    full = np.zeros((6 * M, 6 * M))
    for i, f in enumerate(problem.features):
        if len(f.pose_idx) == 0:
            continue
        G = feature_noise_jacobian(f, arrays)
        noise = cluster_noises[i]
        Sig = np.array([noise[int(j)].Sigma for j in f.pose_idx])
        B = np.einsum("apk,akl,aql->pq", G, Sig, G)
        cols = (6 * f.pose_idx[:, None] + np.arange(6)).ravel()
        full[np.ix_(cols, cols)] += B
    mid = full[6:, 6:]
    X = scipy.linalg.cho_solve(cf, mid)
    Sigma = scipy.linalg.cho_solve(cf, X.T)
    return PoseCovariance(0.5 * (Sigma + Sigma.T))


def pose_error(est: Pose, gt: Pose):
    """Perturbation ``d`` with ``boxplus(est, d) == gt`` (exact)."""
    if est == gt:
        return np.zeros(6)
    dR = gt.R @ est.R.T
    return np.concatenate([so3_log(dR), gt.t - dR @ est.t])


def align_to_first(est_poses, gt_poses):
    """Left-multiply the estimate so its first pose coincides with ground truth."""
    T = gt_poses[0] @ est_poses[0].inverse()
    out = [T @ P for P in est_poses]
    out[0] = gt_poses[0]
    return out


def stacked_error(est_poses, gt_poses):
    """Errors of poses ``1..M-1`` stacked into one vector."""
    if len(est_poses) != len(gt_poses):
        raise ValueError("pose lists differ in length")
    return np.concatenate([pose_error(e, g) for e, g in zip(est_poses[1:], gt_poses[1:])]) \
        if len(est_poses) > 1 else np.zeros(0)


def nees(est_poses, gt_poses, cov: PoseCovariance) -> float:
    """``e^T Sigma^-1 e`` over poses ``1..M-1``; see :func:`normalized_nees`."""
    e = stacked_error(est_poses, gt_poses)
    return nees_from_error(e, cov.Sigma)


def nees_from_error(e, Sigma) -> float:
    e = np.asarray(e, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (len(e), len(e)):
        raise ValueError(f"covariance shape {Sigma.shape} does not match error length {len(e)}")
    try:
        cf = scipy.linalg.cho_factor(Sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is singular; NEES undefined") from exc
    return float(e @ scipy.linalg.cho_solve(cf, e))


def normalized_nees(est_poses, gt_poses, cov: PoseCovariance) -> float:
    return nees(est_poses, gt_poses, cov) / cov.dim
