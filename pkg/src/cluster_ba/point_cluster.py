"""Point-cluster coordinates and their algebra.

A cluster summarizes a point set by its count ``N``, first moment
``v = sum p`` and second moment ``P = sum p p^T``.  Internally the values are
held as ``(N, mean, S)`` with ``S`` the scatter about the mean; ``P`` and
``v`` are recovered on demand.  The centered form keeps the small eigenvalues
of planar clusters accurate when points sit tens of meters from the origin,
where ``P / N - v v^T / N^2`` would cancel catastrophically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_geom import Pose
from .errors import EmptyClusterError

# vech ordering of the 9-dim cluster perturbation: upper triangle of dP
# row-major, then dv
VECH_INDEX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCluster:
    """Immutable point-cluster coordinate.

    Build with :func:`cluster_from_points` or :meth:`from_moments`.
    """

    N: int
    mean: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        n = int(self.N)
        if n < 0 or n != self.N:
            raise ValueError(f"point count must be a nonnegative integer, got {self.N!r}")
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        S = np.asarray(self.S, dtype=float).reshape(3, 3)
        if n == 0:
            mean = np.zeros(3)
            S = np.zeros((3, 3))
        object.__setattr__(self, "N", n)
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "S", _frozen(0.5 * (S + S.T)))

    @classmethod
    def empty(cls):
        return cls(0, np.zeros(3), np.zeros((3, 3)))

    @classmethod
    def from_moments(cls, P, v, N):
        """Build from raw moments ``(P, v, N)``."""
        N = int(N)
        if N == 0:
            return cls.empty()
        v = np.asarray(v, dtype=float)
        m = v / N
        return cls(N, m, np.asarray(P, dtype=float) - np.outer(v, v) / N)

    @property
    def P(self):
        return self.S + self.N * np.outer(self.mean, self.mean)

    @property
    def v(self):
        return self.N * self.mean

    @property
    def matrix(self):
        """The symmetric 4x4 coordinate ``[[P, v], [v^T, N]]``."""
        C = np.empty((4, 4))
        C[:3, :3] = self.P
        C[:3, 3] = C[3, :3] = self.v
        C[3, 3] = self.N
        return C

    def __add__(self, other):
        return merge(self, other)

    def __eq__(self, other):
        if not isinstance(other, PointCluster):
            return NotImplemented
        return (self.N == other.N and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.S, other.S))

    def __repr__(self):
        return f"PointCluster(N={self.N}, mean={self.mean.tolist()}, S={self.S.tolist()})"


def cluster_from_points(points) -> PointCluster:
    """Cluster coordinate of a point list (``(n, 3)``, ``n`` may be 0)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return PointCluster.empty()
    m = pts.sum(axis=0) / n
    d = pts - m
    # second pass correction keeps the mean exact to rounding
    m = m + d.sum(axis=0) / n
    d = pts - m
    return PointCluster(n, m, d.T @ d)


def transform(T: Pose, C: PointCluster) -> PointCluster:
    """Cluster of the rigidly transformed point set."""
    if C.N == 0:
        return C
    return PointCluster(C.N, T.R @ C.mean + T.t, T.R @ C.S @ T.R.T)


def merge(C1: PointCluster, C2: PointCluster) -> PointCluster:
    """Cluster of the union of two point sets (parallel-axis update)."""
    if C1.N == 0:
        return C2
    if C2.N == 0:
        return C1
    n = C1.N + C2.N
    m = (C1.N * C1.mean + C2.N * C2.mean) / n
    d = C2.mean - C1.mean
    S = C1.S + C2.S + (C1.N * C2.N / n) * np.outer(d, d)
    return PointCluster(n, m, S)


def merge_all(clusters) -> PointCluster:
    out = PointCluster.empty()
    for C in clusters:
        out = merge(out, C)
    return out


def scatter(C: PointCluster):
    """Covariance of the underlying points about their centroid."""
    if C.N == 0:
        raise EmptyClusterError("empty cluster has no scatter matrix")
    return C.S / C.N


def perturb_moments(C: PointCluster, d9) -> PointCluster:
    """Cluster with raw moments shifted to ``(P + dP, v + dv)``.

    ``d9`` is ``(vech(dP), dv)`` in the :data:`VECH_INDEX` ordering.  The
    update is applied to the centered form directly to avoid cancellation.
    """
    d9 = np.asarray(d9, dtype=float)
    dP = np.zeros((3, 3))
    for k, (a, b) in enumerate(VECH_INDEX):
        dP[a, b] = dP[b, a] = d9[k]
    dv = d9[6:]
    m = C.mean
    S = C.S + dP - np.outer(m, dv) - np.outer(dv, m) - np.outer(dv, dv) / C.N
    return PointCluster(C.N, m + dv / C.N, S)


@dataclass(frozen=True, eq=False)
class ClusterNoise:
    """Linearized covariance of ``(vech(dP), dv)`` from isotropic point noise."""

    Sigma: np.ndarray
    sigma_p: float

    def __post_init__(self):
        object.__setattr__(self, "Sigma", _frozen(np.asarray(self.Sigma).reshape(9, 9)))
        object.__setattr__(self, "sigma_p", float(self.sigma_p))

    def scaled(self, sigma_p):
        """Same points, different per-point noise level."""
        if self.sigma_p == 0.0:
            raise ValueError("cannot rescale a zero-noise cluster covariance")
        return ClusterNoise(self.Sigma * (sigma_p / self.sigma_p) ** 2, sigma_p)


def cluster_noise(C: PointCluster, sigma_p) -> ClusterNoise:
    """Noise covariance of a cluster's moments, from the moments alone.

    Summing ``B_k B_k^T`` over points only involves ``P``, ``v`` and ``N``:
    ``cov(dP_ab, dP_cd) = s^2 (d_ac P_bd + d_ad P_bc + d_bc P_ad + d_bd P_ac)``,
    ``cov(dP_ab, dv_c) = s^2 (d_ac v_b + d_bc v_a)``, ``cov(dv) = s^2 N I``.
    """
    if sigma_p < 0:
        raise ValueError("sigma_p must be nonnegative")
    P, v, N = C.P, C.v, C.N
    I = np.eye(3)
    Sig = np.zeros((9, 9))
    for i, (a, b) in enumerate(VECH_INDEX):
        for j, (c, d) in enumerate(VECH_INDEX):
            Sig[i, j] = (I[a, c] * P[b, d] + I[a, d] * P[b, c]
                         + I[b, c] * P[a, d] + I[b, d] * P[a, c])
        for c in range(3):
            Sig[i, 6 + c] = Sig[6 + c, i] = I[a, c] * v[b] + I[b, c] * v[a]
    Sig[6:, 6:] = N * I
    return ClusterNoise(sigma_p ** 2 * Sig, sigma_p)


def cluster_noise_from_points(points, sigma_p) -> ClusterNoise:
    return cluster_noise(cluster_from_points(points), sigma_p)
