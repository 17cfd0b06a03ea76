import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cluster_ba.core_geom import (Pose, boxplus, boxplus_all, skew, so3_exp, so3_log,
                                  sym_eig3)
from cluster_ba.errors import NearPiError
from oracles import expm_series, random_pose

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)


def Rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


# --- skew ------------------------------------------------------------------

def test_skew_zero():
    np.testing.assert_array_equal(skew([0, 0, 0]), np.zeros((3, 3)))


def test_skew_cross_identity():
    np.testing.assert_array_equal(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])


@given(vec3, vec3)
def test_skew_matches_cross_and_is_antisymmetric(v, w):
    K = skew(v)
    np.testing.assert_allclose(K @ w, np.cross(v, w), atol=1e-12)
    np.testing.assert_array_equal(K.T, -K)


def test_skew_batched():
    v = np.random.default_rng(0).normal(size=(5, 3))
    K = skew(v)
    assert K.shape == (5, 3, 3)
    for a, b in zip(K, v):
        np.testing.assert_array_equal(a, skew(b))


# --- so3_exp / so3_log -----------------------------------------------------

def test_exp_zero_is_identity():
    np.testing.assert_array_equal(so3_exp([0, 0, 0]), np.eye(3))


def test_exp_quarter_turn_about_x():
    R = so3_exp([np.pi / 2, 0, 0])
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


def test_exp_matches_taylor_series():
    phi = np.array([0.3, -0.2, 0.1])
    np.testing.assert_allclose(so3_exp(phi), expm_series(phi, 20), rtol=0, atol=1e-12)


def test_exp_small_angle_branch_matches_series():
    phi = np.array([3e-8, -1e-8, 2e-8])
    np.testing.assert_allclose(so3_exp(phi), expm_series(phi, 4), rtol=0, atol=1e-16)


def test_log_identity():
    np.testing.assert_array_equal(so3_log(np.eye(3)), np.zeros(3))


def test_log_exp_round_trip():
    np.testing.assert_allclose(so3_log(so3_exp([0.1, 0.2, 0.3])), [0.1, 0.2, 0.3], atol=1e-10)


def test_log_tiny_rotation():
    R = expm_series([0, 0, 1e-9], 3)
    np.testing.assert_allclose(so3_log(R), [0, 0, 1e-9], rtol=0, atol=1e-15)


def test_log_near_pi_raises():
    with pytest.raises(NearPiError):
        so3_log(so3_exp([np.pi - 1e-8, 0, 0]))
    with pytest.raises(ValueError):
        so3_log(np.diag([1.0, -1.0, -1.0]))


def test_round_trip_many_axes():
    rng = np.random.default_rng(1)
    axes = rng.normal(size=(10_000, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    phi = axes * rng.uniform(0, np.pi - 1e-3, (10_000, 1))
    R = so3_exp(phi)
    back = np.array([so3_log(r) for r in R])
    np.testing.assert_allclose(so3_exp(back), R, rtol=0, atol=1e-9)


@given(vec3)
def test_exp_is_rotation(phi):
    R = so3_exp(phi)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


# --- Pose / boxplus --------------------------------------------------------

def test_pose_is_read_only_and_composes():
    rng = np.random.default_rng(2)
    A, B = random_pose(rng), random_pose(rng)
    with pytest.raises(ValueError):
        A.R[0, 0] = 2.0
    np.testing.assert_allclose((A @ B).matrix, A.matrix @ B.matrix, atol=1e-12)
    assert (A @ A.inverse()).allclose(Pose.identity())
    p = rng.normal(size=(4, 3))
    np.testing.assert_allclose(A.apply(p), (A.matrix @ np.c_[p, np.ones(4)].T).T[:, :3])


def test_boxplus_zero():
    T = random_pose(np.random.default_rng(3))
    assert boxplus(T, np.zeros(6)) == T


def test_boxplus_rotates_translation():
    T = Pose(np.eye(3), [1, 0, 0])
    out = boxplus(T, [0, 0, np.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(out.R, Rz(np.pi / 2), atol=1e-15)
    np.testing.assert_allclose(out.t, [0, 1, 0], atol=1e-15)


def test_boxplus_first_order_inverse():
    rng = np.random.default_rng(4)
    T = random_pose(rng, 5)
    for scale in (1e-3, 1e-4):
        d = scale * rng.normal(size=6) / np.sqrt(6)
        back = boxplus(boxplus(T, d), -d)
        err = max(np.abs(back.R - T.R).max(), np.abs(back.t - T.t).max())
        assert err <= 10 * np.linalg.norm(d) ** 2 * (1 + np.linalg.norm(T.t))


def test_boxplus_first_order_expansion():
    rng = np.random.default_rng(5)
    T = random_pose(rng, 2)
    d = 1e-3 * rng.normal(size=6) / np.sqrt(6)
    out = boxplus(T, d)
    K = skew(d[:3])
    R1 = T.R + K @ T.R
    t1 = T.t + K @ T.t + d[3:]
    bound = 10 * np.linalg.norm(d) ** 2 * (1 + np.linalg.norm(T.t))
    assert np.abs(out.R - R1).max() <= bound
    assert np.abs(out.t - t1).max() <= bound


def test_boxplus_all_matches_single():
    rng = np.random.default_rng(6)
    poses = [random_pose(rng) for _ in range(3)]
    d = rng.normal(size=18) * 0.1
    out = boxplus_all(poses, d)
    for j, T in enumerate(poses):
        assert out[j].allclose(boxplus(T, d[6 * j:6 * j + 6]), atol=1e-15)


def test_orthonormality_after_many_updates():
    rng = np.random.default_rng(7)
    T = random_pose(rng)
    for _ in range(10_000):
        T = boxplus(T, 0.05 * rng.normal(size=6))
    assert np.abs(T.R @ T.R.T - np.eye(3)).max() <= 1e-9
    assert abs(np.linalg.det(T.R) - 1) <= 1e-9


# --- sym_eig3 ----------------------------------------------------------------

def check_decomp(A, lam, U):
    scale = max(1.0, abs(lam[0]))
    assert lam[0] >= lam[1] >= lam[2]
    for l in range(3):
        np.testing.assert_allclose(A @ U[:, l], lam[l] * U[:, l], rtol=0, atol=1e-10 * scale)
    G = U.T @ U
    assert np.abs(G - np.diag(np.diag(G))).max() <= 1e-9
    np.testing.assert_allclose(np.diag(G), 1.0, rtol=0, atol=1e-12)


def test_eig_diagonal():
    lam, U = sym_eig3(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_array_equal(lam, [3, 2, 1])
    np.testing.assert_array_equal(U, np.eye(3)[:, [1, 2, 0]])


def test_eig_rank_one_sign_rule():
    q = np.array([0.2, -0.9, 0.3])
    q /= np.linalg.norm(q)
    lam, U = sym_eig3(np.outer(q, q))
    np.testing.assert_allclose(lam, [1, 0, 0], atol=1e-15)
    # largest-magnitude component made positive
    np.testing.assert_allclose(U[:, 0], -q, atol=1e-14)


def test_eig_sign_rule_on_all_vectors():
    A = np.random.default_rng(8).normal(size=(200, 3, 3))
    A = A + np.swapaxes(A, 1, 2)
    U = sym_eig3(A).U
    lead = np.take_along_axis(U, np.argmax(np.abs(U), axis=1)[:, None, :], axis=1)
    assert np.all(lead > 0)


def test_eig_reconstruction_random():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(10_000, 3, 3))
    A = A + np.swapaxes(A, 1, 2)
    lam, U = sym_eig3(A)
    rec = U @ (lam[:, :, None] * np.swapaxes(U, 1, 2))
    np.testing.assert_allclose(rec, A, rtol=0, atol=1e-10)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(A)[:, ::-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("A", [
    np.zeros((3, 3)),
    np.eye(3) * 2.5,
    np.diag([1.0, 1.0, 1e-20]),
    np.diag([5.0, 1.0, 1.0]),
    np.array([[1.0, 1e-17, 0], [1e-17, 1.0, 0], [0, 0, 1.0]]),
    np.full((3, 3), 1e-300),
    np.diag([1e12, 1.0, 1e-12]),
])
def test_eig_degenerate_and_extreme(A):
    lam, U = sym_eig3(A)
    check_decomp(A, lam, U)


@settings(max_examples=300)
@given(arrays(np.float64, (3, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_eig_properties(M):
    A = M + M.T
    lam, U = sym_eig3(A)
    scale = max(1.0, np.abs(lam).max())
    assert lam[0] >= lam[1] >= lam[2]
    np.testing.assert_allclose(A @ U, U * lam, rtol=0, atol=1e-10 * scale)
    np.testing.assert_allclose(U.T @ U, np.eye(3), rtol=0, atol=1e-9)


@given(arrays(np.float64, (3, 3), elements=st.floats(-100, 100, allow_nan=False)),
       st.permutations(range(3)))
def test_eig_permutation_invariant(M, perm):
    A = M + M.T
    B = A[np.ix_(perm, perm)]
    np.testing.assert_allclose(sym_eig3(A).lam, sym_eig3(B).lam, rtol=0,
                               atol=1e-12 * max(1.0, np.abs(A).max()))


def test_eig_batch_layout_does_not_change_results():
    rng = np.random.default_rng(10)
    A = rng.normal(size=(50, 3, 3))
    A = A + np.swapaxes(A, 1, 2)
    full = sym_eig3(A)
    for k in (0, 17, 49):
        one = sym_eig3(A[k])
        np.testing.assert_array_equal(one.lam, full.lam[k])
        np.testing.assert_array_equal(one.U, full.U[k])
