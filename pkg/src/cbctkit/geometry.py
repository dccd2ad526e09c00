"""C-arm pose parameterization and projection-matrix algebra.

World convention (shared by every module):

* isocenter at the world origin, +z along the phantom's long axis,
* ``phi`` (degrees) rotates the source about z; ``phi = 0`` puts the
  source on the +x axis and increasing phi makes the scene appear
  rotated by +phi on the detector,
* ``theta`` (degrees) tilts the source-detector axis out of the
  circular scan plane about the in-plane tangent; ``theta = 90`` is the
  untilted plane, the sampled interval is [45, 135],
* detector u runs along the in-plane tangent (pixel columns), v along
  the tilt direction (pixel rows), pixel (0, 0) at the detector corner.

All public interfaces use degrees and millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

THETA_MIN = 45.0
THETA_MAX = 135.0


@dataclass(frozen=True)
class ViewAngles:
    """A C-arm pose: in-plane angle phi, out-of-plane angle theta."""

    phi: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "phi", float(self.phi) % 360.0)
        object.__setattr__(self, "theta", float(self.theta))
        if not THETA_MIN <= self.theta <= THETA_MAX:
            raise ValueError(
                f"theta={self.theta} outside sampled interval "
                f"[{THETA_MIN}, {THETA_MAX}]"
            )


@dataclass(frozen=True)
class DetectorGeometry:
    """Flat-panel detector and source distances, all in mm."""

    rows: int = 72
    cols: int = 96
    pixel_pitch: float = 2.0
    source_isocenter_distance: float = 600.0
    source_detector_distance: float = 1000.0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("detector dimensions must be positive")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        if self.source_isocenter_distance <= 0:
            raise ValueError("source-isocenter distance must be positive")
        if self.source_detector_distance <= self.source_isocenter_distance:
            raise ValueError(
                "source-detector distance must exceed source-isocenter distance"
            )

    @property
    def principal_point(self) -> tuple[float, float]:
        """(u, v) detector pixel hit by the central ray."""
        return (self.cols - 1) / 2.0, (self.rows - 1) / 2.0

    @property
    def magnification(self) -> float:
        return self.source_detector_distance / self.source_isocenter_distance


def full_scale_detector() -> DetectorGeometry:
    """Full-scale C-arm panel: 620x480 pixels at 0.31 mm pitch."""
    return DetectorGeometry(rows=480, cols=620, pixel_pitch=0.31)


@dataclass(frozen=True)
class ProjectionMatrix:
    """3x4 homogeneous mapping from world mm to detector pixels."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.shape != (3, 4):
            raise ValueError(f"projection matrix must be 3x4, got {e.shape}")
        if np.linalg.matrix_rank(e[:, :3]) != 3:
            raise ValueError("left 3x3 block of projection matrix is singular")
        object.__setattr__(self, "entries", e)

    def source_position(self) -> np.ndarray:
        """World position whose homogeneous image is the zero vector."""
        m = self.entries
        return -np.linalg.solve(m[:, :3], m[:, 3])

    def project(self, points) -> np.ndarray:
        """Project world points (mm) to (u, v) pixel coordinates.

        ``points`` is (3,) or (n, 3); returns matching (2,) or (n, 2).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        hom = np.hstack([pts, np.ones((pts.shape[0], 1))])
        img = hom @ self.entries.T
        uv = img[:, :2] / img[:, 2:3]
        return uv[0] if np.ndim(points) == 1 else uv

    def ray_directions(self, pixels) -> np.ndarray:
        """Unnormalized world directions from the source through pixels.

        ``pixels`` is (n, 2) in (u, v) order; directions point away from
        the source toward the detector.
        """
        px = np.asarray(pixels, dtype=np.float64)
        hom = np.hstack([px, np.ones((px.shape[0], 1))])
        return hom @ np.linalg.inv(self.entries[:, :3]).T


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.rotation
        h[:3, 3] = self.translation
        return h


def rotation_z(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    a = np.deg2rad(angle_deg)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(a) * k + (1.0 - np.cos(a)) * (k @ k)


def pose_to_matrix(angles: ViewAngles, geom: DetectorGeometry) -> ProjectionMatrix:
    """Build the projection matrix of a (phi, theta) pose.

    The phi = 0 camera is assembled explicitly; other in-plane angles are
    obtained by composing with a world rotation about z, which makes
    ``project(P(phi), x) == project(P(0), Rz(phi) @ x)`` hold exactly.
    The world origin always lands on the principal point and the
    magnification at the isocenter is sdd/sid.
    """
    if not THETA_MIN <= angles.theta <= THETA_MAX:
        raise ValueError(f"theta={angles.theta} outside [{THETA_MIN}, {THETA_MAX}]")

    th = np.deg2rad(angles.theta)
    # Source direction at phi = 0: polar angle theta from +z, tilting about
    # the in-plane tangent (0, -1, 0); theta = 90 lies in the scan plane.
    d = np.array([np.sin(th), 0.0, np.cos(th)])
    u_axis = np.array([0.0, -1.0, 0.0])
    v_axis = np.array([-np.cos(th), 0.0, np.sin(th)])
    w_axis = -d  # principal axis, source -> detector

    sid = geom.source_isocenter_distance
    sdd = geom.source_detector_distance
    source = sid * d

    rot = np.vstack([u_axis, v_axis, w_axis])
    f = sdd / geom.pixel_pitch
    cu, cv = geom.principal_point
    intrinsics = np.array([[f, 0.0, cu], [0.0, f, cv], [0.0, 0.0, 1.0]])

    p0 = intrinsics @ np.hstack([rot, -(rot @ source)[:, None]])
    hom = np.eye(4)
    hom[:3, :3] = rotation_z(angles.phi)
    return ProjectionMatrix(p0 @ hom)


def retarget_matrix(p_flat: ProjectionMatrix, t: RigidTransform) -> ProjectionMatrix:
    """Re-express a projection matrix for a rigidly moved object.

    Returns the matrix composed with the inverse rigid action, so that
    projecting x through the result equals projecting t^-1(x) through the
    input.
    """
    return ProjectionMatrix(p_flat.entries @ t.inverse().as_homogeneous())


def angular_distance(a, b) -> tuple[float, float]:
    """Mean and standard deviation of |theta_a - theta_b| per view.

    ``a`` and ``b`` are (n, 2) arrays of (phi, theta) degrees with equal
    length and identical phi sequences.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"trajectory length mismatch: {a.shape} vs {b.shape}")
    if not np.allclose(a[:, 0], b[:, 0], atol=1e-9):
        raise ValueError("trajectories do not share the same phi sequence")
    diff = np.abs(a[:, 1] - b[:, 1])
    return float(np.mean(diff)), float(np.std(diff))
