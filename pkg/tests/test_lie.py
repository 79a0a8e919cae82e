import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatpose import lie
from splatpose.lie import RigidTransform, Twist

FD_STEP = 1e-5


def fd_point_left(p):
    J = np.zeros((3, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = FD_STEP
        J[:, i] = (lie.exp_se3(e).apply(p) - lie.exp_se3(-e).apply(p)) / (2 * FD_STEP)
    return J


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def test_hat3_examples():
    assert np.array_equal(lie.hat3([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(lie.hat3([1, 2, 3]), np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0]]))
    v = np.random.default_rng(0).normal(size=3)
    assert np.allclose(lie.hat3(v) @ v, 0, atol=1e-15)
    assert np.allclose(lie.vee3(lie.hat3(v)), v)


def test_exp_se3_examples():
    T = lie.exp_se3(np.zeros(6))
    assert np.array_equal(T.R, np.eye(3)) and np.array_equal(T.t, np.zeros(3))
    T = lie.exp_se3(Twist([0, 0, 0], [0, 0, np.pi / 2]))
    assert np.allclose(T.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    assert np.allclose(T.t, 0)


def test_exp_so3_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = rng.normal(size=3)
        assert np.allclose(lie.exp_so3(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


def test_log_se3_examples():
    tw = lie.log_se3(RigidTransform.identity())
    assert np.allclose(tw.as_vector(), 0)
    tw = lie.log_se3(RigidTransform(np.eye(3), [1, 0, 0]))
    assert np.allclose(tw.rho, [1, 0, 0]) and np.allclose(tw.phi, 0)


def test_exp_log_roundtrip_random():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(phi)
        tau = np.r_[rng.normal(size=3), phi]
        back = lie.log_se3(lie.exp_se3(tau)).as_vector()
        assert np.abs(back - tau).max() < 1e-9


def test_log_near_pi_and_small_angles():
    for ang in (np.pi - 1e-7, 1e-10, 0.0):
        phi = np.array([0.0, ang, 0.0])
        back = lie.log_so3(lie.exp_so3(phi))
        assert np.allclose(back, phi, atol=1e-7)


def test_log_rejects_invalid():
    with pytest.raises(ValueError):
        lie.log_se3(RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_compose_inverse_property(v, p):
    T = lie.exp_se3(np.asarray(v) * np.r_[1, 1, 1, 0.5, 0.5, 0.5])
    I = T @ T.inverse()
    assert np.allclose(I.matrix(), np.eye(4), atol=1e-9)
    assert np.allclose(T.inverse().apply(T.apply(np.asarray(p))), p, atol=1e-9)


def test_jac_point_left_examples():
    J = lie.jac_point_left([1, 2, 3])
    expect = np.hstack([np.eye(3), [[0, 3, -2], [-3, 0, 1], [2, -1, 0]]])
    assert np.array_equal(J, expect)
    assert np.array_equal(lie.jac_point_left([0, 0, 0]), np.hstack([np.eye(3), np.zeros((3, 3))]))


def test_jac_point_left_fd():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = rng.normal(size=3)
        assert rel(lie.jac_point_left(p), fd_point_left(p)) < 1e-6


def test_jac_point_right_examples_and_fd():
    assert np.array_equal(lie.jac_point_right(RigidTransform.identity(), [1, 2, 3]), lie.jac_point_left([1, 2, 3]))
    rng = np.random.default_rng(4)
    T = RigidTransform(lie.exp_so3(rng.normal(size=3)), rng.normal(size=3))
    assert np.allclose(lie.jac_point_right(T, np.zeros(3)), np.hstack([T.R, np.zeros((3, 3))]))
    for _ in range(200):
        T = RigidTransform(lie.exp_so3(rng.normal(size=3)), rng.normal(size=3))
        p = rng.normal(size=3)
        J = np.zeros((3, 6))
        for i in range(6):
            e = np.zeros(6)
            e[i] = FD_STEP
            J[:, i] = ((T @ lie.exp_se3(e)).apply(p) - (T @ lie.exp_se3(-e)).apply(p)) / (2 * FD_STEP)
        assert rel(lie.jac_point_right(T, p), J) < 1e-6


def fd_rot(R, side):
    """D[a] = dR/dphi_a by central differences."""
    out = np.zeros((3, 3, 3))
    for a in range(3):
        e = np.zeros(3)
        e[a] = FD_STEP
        if side == "left":
            out[a] = (lie.exp_so3(e) @ R - lie.exp_so3(-e) @ R) / (2 * FD_STEP)
        else:
            out[a] = (R @ lie.exp_so3(e) - R @ lie.exp_so3(-e)) / (2 * FD_STEP)
    return out


def test_jac_rot_left_identity_blocks():
    D = lie.jac_rot_left(np.eye(3))
    for j in range(3):
        assert np.array_equal(D[j], -lie.hat3(np.eye(3)[j]))


def test_jac_rot_left_fd_and_first_order():
    rng = np.random.default_rng(5)
    for _ in range(200):
        R = lie.exp_so3(rng.normal(size=3))
        D = lie.jac_rot_left(R)  # D[j][i, a] = dR[i, j]/dphi_a
        F = fd_rot(R, "left")  # F[a][i, j]
        assert rel(np.einsum("jia->aij", D), F) < 1e-6
    delta = 1e-6
    R = lie.exp_so3(rng.normal(size=3))
    change = lie.exp_so3([0, 0, delta]) @ R - R
    for j in range(3):
        assert np.allclose(change[:, j], delta * np.cross([0, 0, 1], R[:, j]), atol=1e-11)


def test_jac_rot_right_identity_and_fd():
    DL, DR = lie.jac_rot_left(np.eye(3)), lie.jac_rot_right(np.eye(3))
    # left: column-Jacobians; right: row-Jacobians.  At R = I they describe the same tensor.
    assert np.allclose(np.einsum("jia->aij", DL), np.einsum("ija->aij", DR))
    rng = np.random.default_rng(6)
    for _ in range(200):
        R = lie.exp_so3(rng.normal(size=3))
        assert rel(np.einsum("ija->aij", lie.jac_rot_right(R)), fd_rot(R, "right")) < 1e-6
    R = lie.exp_so3(rng.normal(size=3))
    assert np.allclose(R @ lie.exp_so3(np.zeros(3)) - R, 0)


def test_rotation_grad_contractions():
    rng = np.random.default_rng(7)
    R = lie.exp_so3(rng.normal(size=3))
    G = rng.normal(size=(3, 3))
    for side, fn in (("left", lie.rotation_grad_left), ("right", lie.rotation_grad_right)):
        F = fd_rot(R, side)
        assert np.allclose(fn(G, R), np.einsum("ij,aij->a", G, F), atol=1e-8)


def test_quaternion_roundtrip_and_scipy():
    rng = np.random.default_rng(8)
    q = rng.normal(size=(100, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    R = lie.quat_to_rotmat(q)
    ref = Rotation.from_quat(np.c_[q[:, 1:], q[:, :1]]).as_matrix()
    assert np.allclose(R, ref, atol=1e-12)
    q2 = lie.rotmat_to_quat(R)
    assert np.allclose(np.abs(np.sum(q * q2, axis=1)), 1.0, atol=1e-12)


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform.from_matrix(np.eye(3))
    assert not RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()
