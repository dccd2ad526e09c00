"""Procedural screw phantom: a wooden block with a bone rod, two gel
cylinders, and two threaded titanium screws converging on the target
point at the isocenter, jittered per seed.

Volumes are isotropic voxel grids whose voxel-center lattice contains
the world origin (the grid is offset half a voxel from being centered),
so the target voxel sits exactly on the rotation axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .geometry import rotation_about_axis, rotation_z


class Material(IntEnum):
    AIR = 0
    SOFT_TISSUE = 1
    WOOD = 2
    BONE = 3
    TITANIUM = 4


# Nominal densities in g/cm^3.
DENSITY = {
    Material.AIR: 0.0012,
    Material.SOFT_TISSUE: 1.00,
    Material.WOOD: 0.60,
    Material.BONE: 1.90,
    Material.TITANIUM: 4.50,
}


@dataclass(frozen=True)
class ScrewSpec:
    """Threaded screw as a solid of revolution around its axis.

    The radius is modulated sinusoidally along the axis between
    ``shaft_radius - thread_depth`` and ``shaft_radius`` with period
    ``thread_pitch``; ``thread_depth = 0`` degenerates to a cylinder.
    """

    length: float = 32.0
    shaft_radius: float = 3.0
    thread_depth: float = 0.8
    thread_pitch: float = 3.2
    tip_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        tip = np.asarray(self.tip_position, dtype=np.float64).reshape(3)
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("screw axis must be normalized within 1e-9")
        if self.thread_depth >= self.shaft_radius:
            raise ValueError("thread depth must be smaller than shaft radius")
        if self.thread_pitch <= 0:
            raise ValueError("thread pitch must be positive")
        object.__setattr__(self, "tip_position", tip)
        object.__setattr__(self, "axis", axis)

    @property
    def center(self) -> np.ndarray:
        return self.tip_position + 0.5 * self.length * self.axis

    def radius_at(self, t):
        """Local radius at axial coordinate t in [0, length] mm."""
        t = np.asarray(t, dtype=np.float64)
        swing = 0.5 * self.thread_depth
        return (self.shaft_radius - swing) + swing * np.sin(
            2.0 * np.pi * t / self.thread_pitch
        )

    def analytic_volume(self) -> float:
        """Volume of the solid of revolution in mm^3 (fine quadrature)."""
        t = np.linspace(0.0, self.length, 20001)
        r = self.radius_at(t)
        return float(np.trapezoid(np.pi * r * r, t))


@dataclass
class MaterialVolume:
    """Labeled voxel grid with per-voxel densities (g/cm^3).

    Voxel (i, j, k) spans ``[origin + i*h, origin + (i+1)*h)`` along x,
    etc.; the origin is chosen so voxel centers land on integer multiples
    of the voxel size, with one center exactly at the world origin.
    """

    labels: np.ndarray
    densities: np.ndarray
    voxel_size: float
    screws: tuple[ScrewSpec, ...] = ()

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.densities = np.ascontiguousarray(self.densities, dtype=np.float64)
        if self.labels.shape != self.densities.shape:
            raise ValueError("label and density grids must share a shape")
        if min(self.labels.shape) < 8:
            raise ValueError("volume must be at least 8 voxels per axis")
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def origin(self) -> np.ndarray:
        """World position of the low corner of voxel (0, 0, 0)."""
        return volume_origin(self.shape, self.voxel_size)

    def voxel_centers_world(self):
        """World coordinates of voxel centers, one 1-d array per axis."""
        return tuple(
            self.origin[ax] + (np.arange(self.shape[ax]) + 0.5) * self.voxel_size
            for ax in range(3)
        )

    def world_to_voxel(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=np.float64) - self.origin) / self.voxel_size

    def nearest_voxel(self, point) -> tuple[int, int, int]:
        """Index of the voxel whose center is nearest to a world point."""
        idx = np.rint(self.world_to_voxel(point) - 0.5).astype(int)
        return tuple(np.clip(idx, 0, np.asarray(self.shape) - 1))


def volume_origin(shape, voxel_size: float) -> np.ndarray:
    """Low-corner origin of the voxel-center-on-origin grid convention."""
    return -voxel_size * (0.5 * np.asarray(shape, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class PhantomParams:
    """Shape and jitter configuration of the procedural phantom.

    The two screws aim at the isocenter from opposite sides: their axis
    lines pass ``screw_impact`` mm from the target, their centers sit
    ``screw_standoff`` mm behind it along the axis, and the whole pair is
    rotated by ``screw_azimuth`` in the scan plane.
    """

    dims: tuple[int, int, int] = (96, 96, 96)
    voxel_size: float = 1.0
    block_extent: tuple[float, float, float] = (78.0, 34.0, 56.0)
    bone_radius: float = 10.0
    bone_length: float = 56.0
    cylinder_radius: float = 10.0
    cylinder_length: float = 56.0
    cylinder_offsets: tuple[tuple[float, float], ...] = ((18.0, -24.0), (-18.0, 24.0))
    screw: ScrewSpec = field(default_factory=ScrewSpec)
    screw_azimuth: float = 15.0
    screw_standoff: float = 21.5
    screw_impact: float = 1.8
    jitter_translation: float = 10.0
    jitter_tilt: float = 10.0


def _fill_box(labels, densities, centers, center, extent, material):
    cx, cy, cz = centers
    inx = np.abs(cx - center[0]) <= extent[0] / 2.0
    iny = np.abs(cy - center[1]) <= extent[1] / 2.0
    inz = np.abs(cz - center[2]) <= extent[2] / 2.0
    mask = inx[:, None, None] & iny[None, :, None] & inz[None, None, :]
    labels[mask] = material
    densities[mask] = DENSITY[material]


def _fill_zcylinder(labels, densities, centers, center, radius, length, material):
    cx, cy, cz = centers
    r2 = (cx[:, None] - center[0]) ** 2 + (cy[None, :] - center[1]) ** 2
    inr = r2 <= radius * radius
    inz = np.abs(cz - center[2]) <= length / 2.0
    mask = inr[:, :, None] & inz[None, None, :]
    labels[mask] = material
    densities[mask] = DENSITY[material]


def _screw_mask(vol: MaterialVolume, screw: ScrewSpec) -> np.ndarray:
    """Voxels covered by the screw solid, by 4x4x4 subvoxel majority.

    Subvoxel sampling keeps the voxelized titanium mass stable when the
    screw is translated or tilted (plain center sampling aliases the
    thread and swings the count by several percent across seeds).
    """
    cx, cy, cz = vol.voxel_centers_world()
    # Bounding box of the screw with one-voxel margin keeps this cheap.
    ends = np.stack([screw.tip_position,
                     screw.tip_position + screw.length * screw.axis])
    lo_w = ends.min(axis=0) - screw.shaft_radius - vol.voxel_size
    hi_w = ends.max(axis=0) + screw.shaft_radius + vol.voxel_size
    lo = np.maximum(np.floor(vol.world_to_voxel(lo_w)).astype(int), 0)
    hi = np.minimum(np.ceil(vol.world_to_voxel(hi_w)).astype(int),
                    np.asarray(vol.shape))

    mask = np.zeros(vol.shape, dtype=bool)
    sub = (np.arange(4) - 1.5) * (vol.voxel_size / 4.0)
    votes = np.zeros(tuple(hi - lo), dtype=np.uint8)
    for dx in sub:
        for dy in sub:
            for dz in sub:
                gx, gy, gz = np.meshgrid(
                    cx[lo[0]:hi[0]] + dx, cy[lo[1]:hi[1]] + dy,
                    cz[lo[2]:hi[2]] + dz, indexing="ij")
                rel = np.stack([gx - screw.tip_position[0],
                                gy - screw.tip_position[1],
                                gz - screw.tip_position[2]], axis=-1)
                t = rel @ screw.axis
                radial = rel - t[..., None] * screw.axis
                dist2 = np.sum(radial * radial, axis=-1)
                inside = ((t >= 0.0) & (t <= screw.length)
                          & (dist2 <= screw.radius_at(t) ** 2))
                votes += inside
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = votes >= 32
    return mask


def _screw_inside(vol_shape, voxel_size, screw: ScrewSpec) -> bool:
    origin = volume_origin(vol_shape, voxel_size)
    high = origin + voxel_size * np.asarray(vol_shape, dtype=np.float64)
    ends = [screw.tip_position, screw.tip_position + screw.length * screw.axis]
    for end in ends:
        if np.any(end - screw.shaft_radius < origin) or np.any(
            end + screw.shaft_radius > high
        ):
            return False
    return True


def _segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0, p1] and [q0, q1]."""
    # Dense sampling is plenty at phantom scale and avoids degenerate cases.
    ts = np.linspace(0.0, 1.0, 200)
    a = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
    b = q0[None, :] + ts[:, None] * (q1 - q0)[None, :]
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(d.min())


def insert_screw(vol: MaterialVolume, screw: ScrewSpec) -> MaterialVolume:
    """Return a copy of the volume with the screw stamped in as titanium."""
    if not _screw_inside(vol.shape, vol.voxel_size, screw):
        raise ValueError("screw protrudes outside the volume")
    mask = _screw_mask(vol, screw)
    labels = vol.labels.copy()
    densities = vol.densities.copy()
    labels[mask] = Material.TITANIUM
    densities[mask] = DENSITY[Material.TITANIUM]
    return MaterialVolume(
        labels, densities, vol.voxel_size, screws=vol.screws + (screw,)
    )


def build_phantom(params: PhantomParams, seed: int) -> MaterialVolume:
    """Construct a jittered phantom; deterministic for a given (params, seed)."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = params.dims
    labels = np.full((nx, ny, nz), Material.AIR, dtype=np.uint8)
    densities = np.full((nx, ny, nz), DENSITY[Material.AIR], dtype=np.float64)
    shell = MaterialVolume(labels, densities, params.voxel_size)
    centers = shell.voxel_centers_world()

    jt = params.jitter_translation
    # The block and bone rod stay close to the target so the screws keep
    # biting bone; the gel cylinders move freely.
    anatomy_shift = rng.uniform(-1.0, 1.0, size=3) * jt * np.array([0.1, 0.1, 0.5])
    _fill_box(labels, densities, centers, anatomy_shift, params.block_extent,
              Material.WOOD)
    for off in params.cylinder_offsets:
        shift = rng.uniform(-1.0, 1.0, size=3) * jt * np.array([1.0, 1.0, 0.5])
        _fill_zcylinder(
            labels, densities, centers,
            np.array([off[0], off[1], 0.0]) + shift,
            params.cylinder_radius, params.cylinder_length, Material.SOFT_TISSUE,
        )
    _fill_zcylinder(labels, densities, centers, anatomy_shift,
                    params.bone_radius, params.bone_length, Material.BONE)

    vol = MaterialVolume(labels, densities, params.voxel_size)
    base = params.screw
    pair_rot = rng.uniform(-params.jitter_tilt, params.jitter_tilt)
    pair_dz = rng.uniform(-0.25 * jt, 0.25 * jt)
    # Tilts are resampled when a draw would bring the screws closer than
    # their diameter; at default bounds this is rare.
    screws = None
    for _ in range(50):
        candidate = []
        for side in (0.0, 180.0):
            place = side + pair_rot + params.screw_azimuth
            along = rotation_z(place) @ np.array([1.0, 0.0, 0.0])
            lateral = rotation_z(place) @ np.array([0.0, 1.0, 0.0])
            center = (params.screw_standoff * along
                      + params.screw_impact * lateral
                      + np.array([0.0, 0.0, pair_dz]))
            azimuth = 0.3 * rng.uniform(-params.jitter_tilt, params.jitter_tilt)
            elevation = rng.uniform(-params.jitter_tilt, params.jitter_tilt)
            axis = rotation_z(azimuth) @ along
            axis = rotation_about_axis(rotation_z(place + azimuth)
                                       @ np.array([0.0, 1.0, 0.0]),
                                       elevation) @ axis
            axis /= np.linalg.norm(axis)
            # The axis points tip -> head; the tip is the end facing the
            # target, so the body extends outward from the center.
            tip = center - 0.5 * base.length * axis
            candidate.append(replace(base, tip_position=tip, axis=axis))
        d = _segment_distance(
            candidate[0].tip_position,
            candidate[0].tip_position + candidate[0].length * candidate[0].axis,
            candidate[1].tip_position,
            candidate[1].tip_position + candidate[1].length * candidate[1].axis,
        )
        if d >= 2.0 * base.shaft_radius:
            screws = candidate
            break
    if screws is None:
        raise ValueError("screws overlap for every sampled orientation")
    for screw in screws:
        vol = insert_screw(vol, screw)
    return vol


def screw_midpoint_roi(vol: MaterialVolume) -> tuple[int, int, int]:
    """Voxel whose center is nearest the midpoint of the two screw centers."""
    if len(vol.screws) < 2:
        raise ValueError("volume does not carry two screws")
    mid = 0.5 * (vol.screws[0].center + vol.screws[1].center)
    return vol.nearest_voxel(mid)
