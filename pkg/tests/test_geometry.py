import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cbctkit.geometry import (
    DetectorGeometry,
    ProjectionMatrix,
    RigidTransform,
    ViewAngles,
    angular_distance,
    pose_to_matrix,
    retarget_matrix,
    rotation_z,
)


@pytest.fixture
def geom():
    return DetectorGeometry()


class TestViewAngles:
    def test_phi_wraps(self):
        assert ViewAngles(365.0, 90.0).phi == pytest.approx(5.0)
        assert ViewAngles(-10.0, 90.0).phi == pytest.approx(350.0)

    def test_theta_range_enforced(self):
        with pytest.raises(ValueError):
            ViewAngles(0.0, 30.0)
        with pytest.raises(ValueError):
            ViewAngles(0.0, 140.0)


class TestDetectorGeometry:
    def test_rejects_bad_distances(self):
        with pytest.raises(ValueError):
            DetectorGeometry(source_isocenter_distance=1000.0,
                             source_detector_distance=600.0)

    def test_rejects_nonpositive_pitch(self):
        with pytest.raises(ValueError):
            DetectorGeometry(pixel_pitch=0.0)


class TestPoseToMatrix:
    def test_origin_projects_to_principal_point(self, geom):
        p = pose_to_matrix(ViewAngles(0.0, 90.0), geom)
        assert p.project(np.zeros(3)) == pytest.approx(geom.principal_point)

    def test_origin_on_principal_point_for_any_pose(self, geom):
        for phi, theta in [(10, 47), (123, 90), (300, 135), (47.5, 72.5)]:
            p = pose_to_matrix(ViewAngles(phi, theta), geom)
            assert p.project(np.zeros(3)) == pytest.approx(geom.principal_point)

    def test_rotation_symmetry(self, geom):
        p0 = pose_to_matrix(ViewAngles(0.0, 90.0), geom)
        p90 = pose_to_matrix(ViewAngles(90.0, 90.0), geom)
        r = 25.0
        np.testing.assert_allclose(
            p90.project(np.array([r, 0.0, 0.0])),
            p0.project(np.array([0.0, r, 0.0])),
            atol=1e-9,
        )

    def test_magnification_at_isocenter(self, geom):
        p = pose_to_matrix(ViewAngles(0.0, 90.0), geom)
        uv0 = p.project(np.array([0.0, 0.0, 0.0]))
        uv1 = p.project(np.array([0.0, 0.0, 1.0]))
        shift_mm = (uv1 - uv0) * geom.pixel_pitch
        assert np.linalg.norm(shift_mm) == pytest.approx(geom.magnification,
                                                         rel=1e-9)

    def test_matches_hand_assembled_composition(self, geom):
        """Independent oracle: intrinsics x frame rotation, composed with a
        world rotation about z (scipy rotations, no library geometry code)."""
        phi, theta = 30.0, 75.0
        tilt = Rotation.from_rotvec(np.deg2rad(theta - 90.0) * np.array([0, 1, 0]))
        u = tilt.apply([0.0, -1.0, 0.0])
        v = tilt.apply([0.0, 0.0, 1.0])
        w = tilt.apply([-1.0, 0.0, 0.0])
        source = -geom.source_isocenter_distance * w
        rot = np.vstack([u, v, w])
        f = geom.source_detector_distance / geom.pixel_pitch
        cu, cv = geom.principal_point
        intr = np.array([[f, 0, cu], [0, f, cv], [0, 0, 1.0]])
        p0 = intr @ np.hstack([rot, -(rot @ source)[:, None]])
        hom = np.eye(4)
        hom[:3, :3] = Rotation.from_rotvec(
            np.deg2rad(phi) * np.array([0, 0, 1])).as_matrix()
        expected = p0 @ hom

        actual = pose_to_matrix(ViewAngles(phi, theta), geom).entries
        np.testing.assert_allclose(actual, expected, atol=1e-9)

    def test_theta_out_of_range_rejected(self):
        # The range error surfaces at pose construction.
        with pytest.raises(ValueError):
            ViewAngles(0.0, 144.9)
        with pytest.raises(ValueError):
            ViewAngles(0.0, 44.9)

    def test_injective_in_pose(self, geom):
        poses = [(p, t) for p in (0.0, 11.0, 180.0, 271.0)
                 for t in (45.0, 77.0, 90.0, 135.0)]
        mats = [pose_to_matrix(ViewAngles(p, t), geom).entries for p, t in poses]
        for i in range(len(mats)):
            for j in range(i + 1, len(mats)):
                assert np.max(np.abs(mats[i] - mats[j])) > 1e-6

    def test_source_position_matches_convention(self, geom):
        p = pose_to_matrix(ViewAngles(0.0, 90.0), geom)
        np.testing.assert_allclose(
            p.source_position(),
            [geom.source_isocenter_distance, 0.0, 0.0], atol=1e-9)


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidTransform(r, np.zeros(3))

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(3)
        rot = Rotation.random(random_state=7).as_matrix()
        t = RigidTransform(rot, rng.normal(size=3))
        pts = rng.normal(size=(5, 3))
        np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts,
                                   atol=1e-12)


class TestRetargetMatrix:
    def test_identity_is_noop(self, geom):
        p = pose_to_matrix(ViewAngles(20.0, 80.0), geom)
        out = retarget_matrix(p, RigidTransform(np.eye(3), np.zeros(3)))
        np.testing.assert_allclose(out.entries, p.entries, atol=0.0)

    def test_pure_translation(self, geom):
        p = pose_to_matrix(ViewAngles(0.0, 90.0), geom)
        d = np.array([3.0, -7.0, 2.0])
        out = retarget_matrix(p, RigidTransform(np.eye(3), d))
        x = np.array([5.0, 1.0, -4.0])
        np.testing.assert_allclose(out.project(x), p.project(x - d), atol=1e-9)

    def test_rotation_about_z(self, geom):
        p = pose_to_matrix(ViewAngles(0.0, 90.0), geom)
        t = RigidTransform(rotation_z(90.0), np.zeros(3))
        x = np.array([1.0, 0.0, 0.0])
        # Projecting through the output equals projecting the inverse-rotated
        # point through the input: Rz(-90) (1,0,0) = (0,-1,0).
        np.testing.assert_allclose(
            retarget_matrix(p, t).project(x),
            p.project(np.array([0.0, -1.0, 0.0])),
            atol=1e-9,
        )

    def test_double_retarget_roundtrip(self, geom):
        rng = np.random.default_rng(11)
        p = pose_to_matrix(ViewAngles(33.0, 101.0), geom)
        rot = Rotation.random(random_state=5).as_matrix()
        t = RigidTransform(rot, rng.normal(scale=20.0, size=3))
        back = retarget_matrix(retarget_matrix(p, t), t.inverse())
        np.testing.assert_allclose(back.entries, p.entries, atol=1e-9)

    def test_project_transform_consistency(self, geom):
        rng = np.random.default_rng(2)
        p = pose_to_matrix(ViewAngles(150.0, 60.0), geom)
        for k in range(10):
            rot = Rotation.random(random_state=k).as_matrix()
            t = RigidTransform(rot, rng.normal(scale=10.0, size=3))
            x = rng.normal(scale=30.0, size=3)
            lhs = retarget_matrix(p, t).project(x)
            rhs = p.project(t.inverse().apply(x))
            np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestProjectionMatrixType:
    def test_rejects_singular_left_block(self):
        m = np.zeros((3, 4))
        m[0, 0] = m[1, 1] = 1.0
        with pytest.raises(ValueError):
            ProjectionMatrix(m)

    def test_source_is_homogeneous_null(self, geom):
        p = pose_to_matrix(ViewAngles(77.0, 66.0), geom)
        s = p.source_position()
        hom = p.entries @ np.append(s, 1.0)
        np.testing.assert_allclose(hom, 0.0, atol=1e-6)


class TestAngularDistance:
    def test_identical_is_zero(self):
        a = np.array([[0.0, 90.0], [5.0, 92.0], [10.0, 94.0]])
        assert angular_distance(a, a) == (0.0, 0.0)

    def test_constant_offset(self):
        a = np.array([[5.0 * t, 90.0] for t in range(8)])
        b = a.copy()
        b[:, 1] += 5.0
        mean, std = angular_distance(a, b)
        assert mean == pytest.approx(5.0)
        assert std == pytest.approx(0.0)

    def test_elementwise_oracle(self):
        phis = np.arange(10) * 5.0
        ta = np.array([90, 95, 100, 100, 95, 90, 85, 80, 85, 90.0])
        tb = np.array([90, 90, 95, 105, 100, 90, 80, 80, 90, 85.0])
        a = np.stack([phis, ta], axis=1)
        b = np.stack([phis, tb], axis=1)
        diffs = np.abs(ta - tb)
        mean, std = angular_distance(a, b)
        assert mean == pytest.approx(diffs.mean())
        assert std == pytest.approx(diffs.std())

    def test_length_mismatch_rejected(self):
        a = np.zeros((3, 2))
        a[:, 1] = 90.0
        b = np.zeros((4, 2))
        b[:, 1] = 90.0
        with pytest.raises(ValueError):
            angular_distance(a, b)

    def test_phi_mismatch_rejected(self):
        a = np.array([[0.0, 90.0], [5.0, 90.0]])
        b = np.array([[0.0, 90.0], [10.0, 90.0]])
        with pytest.raises(ValueError):
            angular_distance(a, b)
