"""SE(3) / so(3) algebra.

Twists are ordered ``[rho, phi]`` (translation first).  Jacobians follow the
same column order.  Left perturbation means ``exp(tau) @ T`` (motion expressed
in the camera frame), right perturbation means ``T @ exp(tau)`` (motion
expressed in the object frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Twist:
    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``R`` and translation ``t`` mapping object points into the camera frame."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t))):
            return False
        return bool(
            np.abs(self.R.T @ self.R - np.eye(3)).max() < tol
            and abs(np.linalg.det(self.R) - 1.0) < tol
        )

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self @ other``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)


def hat3(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def vee3(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def exp_so3(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    W = hat3(phi)
    W2 = W @ W
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W2
    return np.eye(3) + (np.sin(theta) / theta) * W + ((1.0 - np.cos(theta)) / theta**2) * W2


def left_jacobian_so3(phi) -> np.ndarray:
    """The V matrix of the SE(3) exponential, ``t = V(phi) @ rho``."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    W = hat3(phi)
    W2 = W @ W
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W2 / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta**2) * W
        + ((theta - np.sin(theta)) / theta**3) * W2
    )


def log_so3(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < SMALL_ANGLE:
        # R ~ I + W + W^2/2, antisymmetric part gives phi to second order
        return vee3(0.5 * (R - R.T))
    if np.pi - theta < 1e-6:
        # sin(theta) ~ 0: axis from the largest diagonal of (R + I) / 2 = a a^T
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        axis /= np.linalg.norm(axis)
        # resolve the sign so that the small antisymmetric residue agrees
        s = vee3(R - R.T)
        if np.dot(s, axis) < 0:
            axis = -axis
        return theta * axis
    return vee3(R - R.T) * (theta / (2.0 * np.sin(theta)))


def exp_se3(tau) -> RigidTransform:
    if isinstance(tau, Twist):
        rho, phi = tau.rho, tau.phi
    else:
        v = np.asarray(tau, dtype=float).reshape(6)
        rho, phi = v[:3], v[3:]
    return RigidTransform(exp_so3(phi), left_jacobian_so3(phi) @ rho)


def log_se3(T: RigidTransform) -> Twist:
    if not T.is_valid(1e-6):
        raise ValueError("log_se3: transform is not a valid rigid motion")
    phi = log_so3(T.R)
    rho = np.linalg.solve(left_jacobian_so3(phi), T.t)
    return Twist(rho, phi)


def jac_point_left(p_c) -> np.ndarray:
    """d(exp(tau) p_c)/d tau at tau = 0: ``[I | -hat(p_c)]``.

    Accepts a single point (returns (3, 6)) or an (N, 3) array (returns (N, 3, 6)).
    """
    P = np.asarray(p_c, dtype=float)
    single = P.ndim == 1
    P = P.reshape(-1, 3)
    J = np.zeros((P.shape[0], 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, 0, 4] = P[:, 2]
    J[:, 0, 5] = -P[:, 1]
    J[:, 1, 3] = -P[:, 2]
    J[:, 1, 5] = P[:, 0]
    J[:, 2, 3] = P[:, 1]
    J[:, 2, 4] = -P[:, 0]
    return J[0] if single else J


def jac_point_right(T: RigidTransform, p_m) -> np.ndarray:
    """d(T exp(tau) p_m)/d tau at tau = 0: ``R [I | -hat(p_m)]``; batches like ``jac_point_left``."""
    return T.R @ jac_point_left(p_m)


def jac_rot_left(R) -> np.ndarray:
    """Derivative of ``Exp(phi) R`` w.r.t. phi at 0.

    Returned as ``D`` with shape (3, 3, 3) where ``D[j]`` is the 3x3 Jacobian of
    column ``R[:, j]`` with respect to phi, i.e. ``-hat3(R[:, j])``.
    """
    R = np.asarray(R, dtype=float)
    return np.stack([-hat3(R[:, j]) for j in range(3)])


def jac_rot_right(R) -> np.ndarray:
    """Derivative of ``R Exp(phi)`` w.r.t. phi at 0.

    Returned as ``D`` with shape (3, 3, 3) where ``D[i]`` is the 3x3 Jacobian of
    row ``R[i, :]`` (as a column vector) with respect to phi.  Row i of
    ``R hat(phi)`` is ``hat(phi)^T r_i = r_i x phi = hat(r_i) phi``.
    """
    R = np.asarray(R, dtype=float)
    return np.stack([hat3(R[i, :]) for i in range(3)])


def rotation_grad_left(G: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Contract dL/dR (3x3) with ``jac_rot_left`` to get dL/dphi."""
    D = jac_rot_left(R)
    # D[j][i, a] = dR[i, j] / dphi_a
    return np.einsum("ij,jia->a", G, D)


def rotation_grad_right(G: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Contract dL/dR (3x3) with ``jac_rot_right`` to get dL/dphi."""
    D = jac_rot_right(R)
    # D[i][j, a] = dR[i, j] / dphi_a
    return np.einsum("ij,ija->a", G, D)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(vee3(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R) -> np.ndarray:
    """(w, x, y, z) quaternions with w >= 0; accepts (3, 3) or (N, 3, 3)."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    for n, M in enumerate(R):
        tr = np.trace(M)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q[n] = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        else:
            i = int(np.argmax(np.diag(M)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + M[i, i] - M[j, j] - M[k, k])
            v = np.empty(3)
            v[i] = 0.25 * s
            v[j] = (M[j, i] + M[i, j]) / s
            v[k] = (M[k, i] + M[i, k]) / s
            q[n] = [(M[k, j] - M[j, k]) / s, *v]
        if q[n, 0] < 0:
            q[n] = -q[n]
    return q[0] if single else q
