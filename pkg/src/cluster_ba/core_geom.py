"""Rigid poses, the left (global) boxplus retraction, SO(3) exp/log and a
closed-form symmetric 3x3 eigensolver.

Conventions
-----------
A pose maps local points to the world: ``p_w = R @ p + t``.
Perturbations are 6-vectors ordered ``(dphi, dt)`` and act on the left::

    T [+] d = (exp([dphi]) R, dt + exp([dphi]) t)

so the translation is rotated by the perturbation as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import NearPiError

SMALL_ANGLE = 1e-7
NEAR_PI_TOL = 1e-6


def skew(v):
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``.

    Works on a single 3-vector or any stack ``(..., 3)``.
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape + (3,))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi):
    """Rodrigues formula, vectorized over leading axes."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # series: sin(x)/x = 1 - x^2/6, (1 - cos x)/x^2 = 1/2 - x^2/24
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(phi)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Rotation vector of ``R``; raises :class:`NearPiError` near pi."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta > np.pi - NEAR_PI_TOL:
        raise NearPiError(f"rotation angle {theta!r} is within {NEAR_PI_TOL} of pi")
    if theta < SMALL_ANGLE:
        return (1.0 + theta * theta / 6.0) * w
    return (theta / s) * w


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform of one scan: rotation ``R`` (3x3) and translation ``t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.R @ other.R, self.R @ other.t + self.t)
        return NotImplemented

    def apply(self, points):
        """Map local points ``(n, 3)`` to the world frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def allclose(self, other, atol=1e-12):
        return bool(np.allclose(self.R, other.R, rtol=0, atol=atol)
                    and np.allclose(self.t, other.t, rtol=0, atol=atol))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def boxplus(T, d):
    """Left perturbation ``(exp([dphi]) R, dt + exp([dphi]) t)``.

    ``d`` is a 6-vector ``(dphi, dt)``.
    """
    d = np.asarray(d, dtype=float)
    E = so3_exp(d[:3])
    return Pose(E @ T.R, d[3:] + E @ T.t)


def boxplus_all(poses: Sequence[Pose], delta):
    """Apply a stacked ``6 * len(poses)`` perturbation pose by pose."""
    delta = np.asarray(delta, dtype=float).reshape(len(poses), 6)
    E = so3_exp(delta[:, :3])
    return [Pose(E[j] @ T.R, delta[j, 3:] + E[j] @ T.t) for j, T in enumerate(poses)]


def poses_to_arrays(poses: Sequence[Pose]):
    """Stack poses into ``(M, 3, 3)`` rotations and ``(M, 3)`` translations."""
    if len(poses) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.stack([T.R for T in poses]), np.stack([T.t for T in poses])


# ---------------------------------------------------------------------------
# symmetric 3x3 eigendecomposition


class EigenDecomp3(NamedTuple):
    """Eigenvalues sorted descending and matching eigenvectors as columns."""

    lam: np.ndarray
    U: np.ndarray


_PAIRS = ((0, 1), (0, 2), (1, 2))


def _trig_eigenvalues(a):
    q = np.trace(a, axis1=-2, axis2=-1) / 3.0
    p1 = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
    p2 = ((a[:, 0, 0] - q) ** 2 + (a[:, 1, 1] - q) ** 2 + (a[:, 2, 2] - q) ** 2
          + 2.0 * p1)
    p = np.sqrt(p2 / 6.0)
    flat = p == 0.0
    ps = np.where(flat, 1.0, p)
    B = (a - q[:, None, None] * np.eye(3)) / ps[:, None, None]
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    return np.stack([e1, e2, e3], axis=-1)


def _null_vector(a, lam):
    """Unit vector (approximately) spanning the null space of ``a - lam I``."""
    M = a - lam[:, None, None] * np.eye(3)
    c = np.stack([np.cross(M[:, 0], M[:, 1]),
                  np.cross(M[:, 0], M[:, 2]),
                  np.cross(M[:, 1], M[:, 2])], axis=1)
    norms = np.linalg.norm(c, axis=-1)
    best = np.argmax(norms, axis=1)
    idx = np.arange(len(a))
    v = c[idx, best]
    n = norms[idx, best]
    bad = n <= 1e-300
    v = np.where(bad[:, None], np.array([1.0, 0.0, 0.0]), v)
    return v / np.where(bad, 1.0, n)[:, None]


def _any_orthogonal(v):
    # pick the coordinate axis least aligned with v
    axis = np.argmin(np.abs(v), axis=1)
    e = np.eye(3)[axis]
    w = np.cross(v, e)
    return w / np.linalg.norm(w, axis=1)[:, None]


def _initial_basis(a, lam):
    n = len(a)
    iso_first = (lam[:, 0] - lam[:, 1]) >= (lam[:, 1] - lam[:, 2])
    lam_a = np.where(iso_first, lam[:, 0], lam[:, 2])
    lam_b = np.where(iso_first, lam[:, 2], lam[:, 0])
    va = _null_vector(a, lam_a)
    vb = _null_vector(a, lam_b)
    vb = vb - np.einsum("ni,ni->n", vb, va)[:, None] * va
    nb = np.linalg.norm(vb, axis=1)
    bad = nb < 1e-8
    if bad.any():
        vb[bad] = _any_orthogonal(va[bad])
        nb[bad] = 1.0
    vb = vb / nb[:, None]
    vm = np.cross(vb, va)
    U = np.empty((n, 3, 3))
    U[:, :, 1] = vm
    U[:, :, 0] = np.where(iso_first[:, None], va, vb)
    U[:, :, 2] = np.where(iso_first[:, None], vb, va)
    return U


def _jacobi_polish(a, U, max_sweeps=8):
    B = np.swapaxes(U, 1, 2) @ a @ U
    for _ in range(max_sweeps):
        off = np.abs(B[:, 0, 1]) + np.abs(B[:, 0, 2]) + np.abs(B[:, 1, 2])
        size = np.abs(B).max(axis=(1, 2))
        # per-matrix stopping keeps results independent of batch layout
        todo = off > 1e-17 * np.maximum(size, 1e-300)
        if not todo.any():
            break
        for p, q in _PAIRS:
            bpq = B[:, p, q]
            active = todo & (np.abs(bpq) > 1e-300)
            denom = np.where(active, 2.0 * bpq, 1.0)
            theta = (B[:, q, q] - B[:, p, p]) / denom
            tt = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            tt = np.where(theta == 0.0, 1.0, tt)
            tt = np.where(active, tt, 0.0)
            c = 1.0 / np.sqrt(tt * tt + 1.0)
            s = tt * c
            G = np.broadcast_to(np.eye(3), B.shape).copy()
            G[:, p, p] = c
            G[:, q, q] = c
            G[:, p, q] = s
            G[:, q, p] = -s
            B = np.swapaxes(G, 1, 2) @ B @ G
            U = U @ G
    return U, np.diagonal(B, axis1=1, axis2=2).copy()


def sym_eig3(A) -> EigenDecomp3:
    """Eigendecomposition of symmetric 3x3 matrices (single or stacked).

    Closed-form (trigonometric) eigenvalues seed cross-product eigenvectors,
    which are then refined by a cyclic Jacobi pass on ``U^T A U``.  Output
    eigenvalues are sorted descending; each eigenvector has its
    largest-magnitude component positive (lowest index wins ties).
    """
    A = np.asarray(A, dtype=float)
    batch = A.shape[:-2]
    a = A.reshape(-1, 3, 3)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    scale = np.abs(a).max(axis=(1, 2))
    scale = np.where(scale > 0.0, scale, 1.0)
    a = a / scale[:, None, None]

    lam0 = _trig_eigenvalues(a)
    U = _initial_basis(a, lam0)
    U, lam = _jacobi_polish(a, U)

    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1) * scale[:, None]
    U = np.take_along_axis(U, order[:, None, :], axis=2)
    # re-normalize, then fix signs
    U = U / np.linalg.norm(U, axis=1, keepdims=True)
    big = np.argmax(np.abs(U), axis=1)
    lead = np.take_along_axis(U, big[:, None, :], axis=1)[:, 0, :]
    U = U * np.where(lead < 0.0, -1.0, 1.0)[:, None, :]
    return EigenDecomp3(lam.reshape(batch + (3,)), U.reshape(batch + (3, 3)))
