import numpy as np
import pytest
from scipy.stats import special_ortho_group

from flowprompt import geometry
from flowprompt.errors import InputError

Z = np.array([0.0, 0.0, 1.0])
X = np.array([1.0, 0.0, 0.0])


def random_rotations(n, seed=0):
    return special_ortho_group.rvs(3, size=n, random_state=np.random.default_rng(seed))


class TestAxisAngle:
    def test_zero_angle_is_identity(self):
        np.testing.assert_allclose(geometry.rot_from_axis_angle(Z, 0.0), np.eye(3), atol=1e-12)

    def test_quarter_turn_about_z(self):
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(geometry.rot_from_axis_angle(Z, np.pi / 2), expected, atol=1e-12)

    def test_half_turn_about_x(self):
        np.testing.assert_allclose(
            geometry.rot_from_axis_angle(X, np.pi), np.diag([1.0, -1.0, -1.0]), atol=1e-12
        )

    def test_non_unit_axis_rejected(self):
        with pytest.raises(InputError):
            geometry.rot_from_axis_angle([0.0, 0.0, 2.0], 0.3)


class TestEncode:
    def test_identity(self):
        np.testing.assert_allclose(geometry.rot6d_encode(np.eye(3)), [1, 0, 0, 0, 1, 0], atol=0)

    def test_quarter_turn_columns(self):
        r = geometry.rot_from_axis_angle(Z, np.pi / 2)
        np.testing.assert_allclose(geometry.rot6d_encode(r), [0, 1, 0, -1, 0, 0], atol=1e-12)

    def test_half_turn_columns(self):
        r = geometry.rot_from_axis_angle(X, np.pi)
        np.testing.assert_allclose(geometry.rot6d_encode(r), [1, 0, 0, 0, -1, 0], atol=1e-12)


class TestDecode:
    def test_identity(self):
        np.testing.assert_allclose(geometry.rot6d_decode([1, 0, 0, 0, 1, 0]), np.eye(3), atol=1e-12)

    def test_scale_invariance_simple(self):
        np.testing.assert_allclose(geometry.rot6d_decode([2, 0, 0, 0, 3, 0]), np.eye(3), atol=1e-12)

    def test_gram_schmidt_removes_overlap(self):
        # second column (1,1,0) projects onto the first; orthogonalized to (0,1,0)
        np.testing.assert_allclose(geometry.rot6d_decode([1, 0, 0, 1, 1, 0]), np.eye(3), atol=1e-12)

    def test_zero_first_column_raises(self):
        with pytest.raises(InputError):
            geometry.rot6d_decode([0, 0, 0, 0, 1, 0])

    def test_parallel_columns_raise(self):
        with pytest.raises(InputError):
            geometry.rot6d_decode([1, 0, 0, 2, 0, 0])

    def test_never_silent_nan(self):
        # near-degenerate but above eps must still produce a valid rotation
        v = np.array([1.0, 0.0, 0.0, 1.0, 1e-7, 0.0])
        r = geometry.rot6d_decode(v)
        assert np.all(np.isfinite(r))
        assert geometry.is_rotation_matrix(r, tol=1e-8)


class TestGeodesic:
    def test_self_distance_zero(self):
        r = geometry.rot_from_axis_angle(Z, 0.7)
        assert geometry.geodesic_dist(r, r) == pytest.approx(0.0, abs=1e-7)

    def test_quarter_turn(self):
        r = geometry.rot_from_axis_angle(Z, np.pi / 2)
        assert geometry.geodesic_dist(np.eye(3), r) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_half_turn(self):
        r = geometry.rot_from_axis_angle(X, np.pi)
        assert geometry.geodesic_dist(np.eye(3), r) == pytest.approx(np.pi, abs=1e-7)


class TestProperties:
    def test_roundtrip_on_random_rotations(self):
        rs = random_rotations(512, seed=1)
        decoded = geometry.rot6d_decode(geometry.rot6d_encode(rs))
        np.testing.assert_allclose(decoded, rs, atol=1e-9)

    def test_decode_encode_decode_idempotent(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(256, 6))
        once = geometry.rot6d_decode(v)
        twice = geometry.rot6d_decode(geometry.rot6d_encode(once))
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_per_column_scale_invariance(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(256, 6))
        s1 = rng.uniform(0.1, 10.0, size=(256, 1))
        s2 = rng.uniform(0.1, 10.0, size=(256, 1))
        scaled = np.concatenate([v[:, :3] * s1, v[:, 3:] * s2], axis=1)
        np.testing.assert_allclose(
            geometry.rot6d_decode(scaled), geometry.rot6d_decode(v), atol=1e-9
        )

    def test_continuity_under_small_perturbation(self):
        rng = np.random.default_rng(4)
        rs = random_rotations(256, seed=5)
        v = geometry.rot6d_encode(rs)
        delta = rng.normal(size=v.shape)
        delta *= 1e-6 / np.linalg.norm(delta, axis=-1, keepdims=True)
        diff = np.abs(geometry.rot6d_decode(v + delta) - geometry.rot6d_decode(v))
        assert diff.max() <= 1e-4

    def test_decode_output_always_valid(self):
        rng = np.random.default_rng(6)
        v = rng.normal(size=(512, 6))
        assert geometry.is_rotation_matrix(geometry.rot6d_decode(v), tol=1e-8)

    def test_heading_roundtrip(self):
        angles = np.linspace(-np.pi + 1e-9, np.pi, 64)
        r = geometry.rot_about_z(angles)
        np.testing.assert_allclose(geometry.heading_from_rot(r), angles, atol=1e-12)
