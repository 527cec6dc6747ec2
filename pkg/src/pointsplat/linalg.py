"""Small fixed-size linear algebra: 3-vectors, 3x3 matrices, quaternions.

Conventions used throughout the package:
  * vectors are float64 numpy arrays of shape (3,)
  * Mat3 / Mat4 are row-major arrays of shape (3, 3) / (4, 4); pose Mat4
    carries a (0, 0, 0, 1) bottom row
  * quaternions are (w, x, y, z) arrays of shape (4,)

Most functions broadcast over leading axes so the renderer can apply them
to whole Gaussian sets at once.
"""

from __future__ import annotations

import numpy as np

MAT3_DET_EPS = 1e-12
SYM2_DET_EPS = 1e-12


class SingularMatrixError(ValueError):
    """Inverse requested for a matrix whose determinant is below threshold."""

    def __init__(self, message: str, det: float):
        super().__init__(f"{message} (det={det:.6e})")
        self.det = det


def quat_normalize(q):
    """Normalize quaternion(s) to unit length. Zero quaternion is an error."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def quat_to_rotation(q):
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes internally.

    Broadcasts (..., 4) -> (..., 3, 3). Output is orthonormal with det +1
    for any nonzero input.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def quat_rotation_jacobian(q_unit):
    """Partial derivatives of quat_to_rotation w.r.t. a *unit* quaternion.

    Returns an array of shape (..., 4, 3, 3): component c holds dR/dq_c.
    Callers chain through the normalization Jacobian separately; see
    quat_normalize_backward.
    """
    q = np.asarray(q_unit, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    jac = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    # dR/dw
    jac[..., 0, 0, 0] = zero
    jac[..., 0, 0, 1] = -2.0 * z
    jac[..., 0, 0, 2] = 2.0 * y
    jac[..., 0, 1, 0] = 2.0 * z
    jac[..., 0, 1, 1] = zero
    jac[..., 0, 1, 2] = -2.0 * x
    jac[..., 0, 2, 0] = -2.0 * y
    jac[..., 0, 2, 1] = 2.0 * x
    jac[..., 0, 2, 2] = zero
    # dR/dx
    jac[..., 1, 0, 0] = zero
    jac[..., 1, 0, 1] = 2.0 * y
    jac[..., 1, 0, 2] = 2.0 * z
    jac[..., 1, 1, 0] = 2.0 * y
    jac[..., 1, 1, 1] = -4.0 * x
    jac[..., 1, 1, 2] = -2.0 * w
    jac[..., 1, 2, 0] = 2.0 * z
    jac[..., 1, 2, 1] = 2.0 * w
    jac[..., 1, 2, 2] = -4.0 * x
    # dR/dy
    jac[..., 2, 0, 0] = -4.0 * y
    jac[..., 2, 0, 1] = 2.0 * x
    jac[..., 2, 0, 2] = 2.0 * w
    jac[..., 2, 1, 0] = 2.0 * x
    jac[..., 2, 1, 1] = zero
    jac[..., 2, 1, 2] = 2.0 * z
    jac[..., 2, 2, 0] = -2.0 * w
    jac[..., 2, 2, 1] = 2.0 * z
    jac[..., 2, 2, 2] = -4.0 * y
    # dR/dz
    jac[..., 3, 0, 0] = -4.0 * z
    jac[..., 3, 0, 1] = -2.0 * w
    jac[..., 3, 0, 2] = 2.0 * x
    jac[..., 3, 1, 0] = 2.0 * w
    jac[..., 3, 1, 1] = -4.0 * z
    jac[..., 3, 1, 2] = 2.0 * y
    jac[..., 3, 2, 0] = 2.0 * x
    jac[..., 3, 2, 1] = 2.0 * y
    jac[..., 3, 2, 2] = zero
    return jac


def quat_normalize_backward(q_raw, grad_unit):
    """Pull a gradient w.r.t. the unit quaternion back to the raw one.

    With qhat = q / |q| the Jacobian is (I - qhat qhat^T) / |q|.
    Broadcasts over leading axes.
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norm = np.sqrt(np.sum(q_raw * q_raw, axis=-1, keepdims=True))
    qhat = q_raw / norm
    dot = np.sum(qhat * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - qhat * dot) / norm


def mat3_det(m):
    m = np.asarray(m, dtype=np.float64)
    return (
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def mat3_inverse(m):
    """Closed-form 3x3 inverse via the adjugate. |det| must exceed 1e-12."""
    m = np.asarray(m, dtype=np.float64)
    det = mat3_det(m)
    if abs(det) <= MAT3_DET_EPS:
        raise SingularMatrixError("3x3 matrix is singular", float(det))
    adj = np.empty((3, 3), dtype=np.float64)
    adj[0, 0] = m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]
    adj[0, 1] = m[0, 2] * m[2, 1] - m[0, 1] * m[2, 2]
    adj[0, 2] = m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]
    adj[1, 0] = m[1, 2] * m[2, 0] - m[1, 0] * m[2, 2]
    adj[1, 1] = m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
    adj[1, 2] = m[0, 2] * m[1, 0] - m[0, 0] * m[1, 2]
    adj[2, 0] = m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]
    adj[2, 1] = m[0, 1] * m[2, 0] - m[0, 0] * m[2, 1]
    adj[2, 2] = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return adj / det


def sym2_inverse(s):
    """Exact inverse of 2x2 symmetric matrices, shape (..., 2, 2).

    Raises SingularMatrixError (carrying the offending determinant) when
    any determinant falls below 1e-12; the renderer's +0.3 px^2 low-pass
    keeps determinants >= 0.09 so this never fires on the hot path.
    """
    s = np.asarray(s, dtype=np.float64)
    a = s[..., 0, 0]
    b = s[..., 0, 1]
    d = s[..., 1, 1]
    det = a * d - b * b
    if np.any(det < SYM2_DET_EPS):
        raise SingularMatrixError(
            "2x2 symmetric matrix is near-singular", float(np.min(det))
        )
    inv = np.empty_like(s)
    inv[..., 0, 0] = d / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return inv


def rotation_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_rotation(theta_x, theta_y, theta_z):
    """Composite rotation Rz(tz) @ Ry(ty) @ Rx(tx)."""
    return rotation_z(theta_z) @ rotation_y(theta_y) @ rotation_x(theta_x)
