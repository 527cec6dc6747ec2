"""Unit tests for the fixed-size linear algebra kernels.

Derived expectations are computed through independent routes: direct
matrix products for residual checks, numpy.linalg for reference inverses,
and central finite differences for the quaternion Jacobian.
"""

import numpy as np
import pytest

from pointsplat.linalg import (
    SingularMatrixError,
    euler_rotation,
    mat3_inverse,
    quat_normalize_backward,
    quat_rotation_jacobian,
    quat_to_rotation,
    sym2_inverse,
)


class TestQuatToRotation:
    def test_identity_quaternion(self):
        np.testing.assert_allclose(
            quat_to_rotation(np.array([1.0, 0.0, 0.0, 0.0])), np.eye(3)
        )

    def test_z_axis_90_degrees(self):
        # (cos 45, 0, 0, sin 45) rotates (1, 0, 0) onto (0, 1, 0).
        c = np.cos(np.pi / 4)
        rot = quat_to_rotation(np.array([c, 0.0, 0.0, c]))
        np.testing.assert_allclose(rot @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                                   atol=1e-12)

    def test_random_quaternions_are_proper_rotations(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            q = rng.normal(size=4)
            rot = quat_to_rotation(q)
            np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-9)
            assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)

    def test_unnormalized_input_is_normalized_internally(self):
        q = np.array([2.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(quat_to_rotation(q), np.eye(3))

    def test_zero_quaternion_raises(self):
        with pytest.raises(ValueError, match="zero quaternion"):
            quat_to_rotation(np.zeros(4))

    def test_batched_shape(self):
        rng = np.random.default_rng(5)
        q = rng.normal(size=(7, 4))
        assert quat_to_rotation(q).shape == (7, 3, 3)


class TestQuatJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        h = 1e-7
        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            jac = quat_rotation_jacobian(q)

            def rot_unit(qv):
                # Raw quadratic form, no normalization: the Jacobian is
                # for the unit-sphere-embedded polynomial.
                w, x, y, z = qv
                return np.array([
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ])

            for c in range(4):
                dq = np.zeros(4)
                dq[c] = h
                fd = (rot_unit(q + dq) - rot_unit(q - dq)) / (2 * h)
                np.testing.assert_allclose(jac[c], fd, atol=1e-6)

    def test_normalize_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        h = 1e-7
        for _ in range(10):
            q = rng.normal(size=4) * 2.0
            up = rng.normal(size=4)  # upstream gradient on the unit quat
            grad = quat_normalize_backward(q, up)
            for c in range(4):
                dq = np.zeros(4)
                dq[c] = h
                f_plus = np.dot(up, (q + dq) / np.linalg.norm(q + dq))
                f_minus = np.dot(up, (q - dq) / np.linalg.norm(q - dq))
                assert grad[c] == pytest.approx((f_plus - f_minus) / (2 * h),
                                                abs=1e-6)


class TestMat3Inverse:
    def test_identity(self):
        np.testing.assert_allclose(mat3_inverse(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        np.testing.assert_allclose(
            mat3_inverse(np.diag([2.0, 4.0, 8.0])), np.diag([0.5, 0.25, 0.125])
        )

    def test_random_residual(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            m = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
            np.testing.assert_allclose(m @ mat3_inverse(m), np.eye(3), atol=1e-9)

    def test_double_inverse_is_identity(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            m = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
            np.testing.assert_allclose(mat3_inverse(mat3_inverse(m)), m, atol=1e-8)

    def test_singular_raises_with_det(self):
        m = np.ones((3, 3))
        with pytest.raises(SingularMatrixError) as err:
            mat3_inverse(m)
        assert err.value.det == pytest.approx(0.0, abs=1e-12)


class TestSym2Inverse:
    def test_uniform_diagonal(self):
        s = np.diag([25.3, 25.3])
        np.testing.assert_allclose(sym2_inverse(s), np.diag([1 / 25.3, 1 / 25.3]))

    def test_identity(self):
        np.testing.assert_allclose(sym2_inverse(np.eye(2)), np.eye(2))

    def test_random_psd_residual(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            a = rng.normal(size=(2, 2))
            s = a @ a.T + 0.3 * np.eye(2)
            np.testing.assert_allclose(s @ sym2_inverse(s), np.eye(2), atol=1e-10)

    def test_batched(self):
        rng = np.random.default_rng(37)
        a = rng.normal(size=(5, 2, 2))
        s = a @ np.transpose(a, (0, 2, 1)) + 0.3 * np.eye(2)
        inv = sym2_inverse(s)
        np.testing.assert_allclose(s @ inv, np.broadcast_to(np.eye(2), (5, 2, 2)),
                                   atol=1e-10)

    def test_near_singular_error_carries_det(self):
        s = np.array([[1e-7, 0.0], [0.0, 1e-7]])
        with pytest.raises(SingularMatrixError) as err:
            sym2_inverse(s)
        assert err.value.det == pytest.approx(1e-14, rel=1e-6)


class TestEulerRotation:
    def test_zero_angles_identity(self):
        np.testing.assert_allclose(euler_rotation(0.0, 0.0, 0.0), np.eye(3))

    def test_z_quarter_turn(self):
        rot = euler_rotation(0.0, 0.0, np.pi / 2)
        np.testing.assert_allclose(rot @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                                   atol=1e-12)
