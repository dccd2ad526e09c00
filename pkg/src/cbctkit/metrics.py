"""Reconstruction quality metrics: screw FWHM, thread-frequency peak,
and SSIM against the ground-truth reconstruction.

Conventions pinned here (only relative comparisons across trajectories
matter): FWHM baseline is the median of the outer quarter of profile
samples; the thread metric uses the unitary DFT of the transversally
averaged axial profile; SSIM uses a 7x7 uniform window with the dynamic
range taken from the reference argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter

from .phantom import ScrewSpec, volume_origin
from .recon import ReconVolume


@dataclass(frozen=True)
class ProfileSpec:
    """A sampling line perpendicular to a screw axis."""

    center: np.ndarray
    direction: np.ndarray
    axis: np.ndarray
    half_length: float = 10.0
    spacing: float = 0.25

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        d = d / np.linalg.norm(d)
        a = a / np.linalg.norm(a)
        if abs(np.dot(d, a)) > 1e-6:
            raise ValueError("profile direction must be perpendicular to the axis")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "axis", a)


@dataclass(frozen=True)
class PatchSpec:
    """Axis-aligned voxel box enclosing a screw's thread region."""

    corner: tuple[int, int, int]
    dims: tuple[int, int, int]
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        object.__setattr__(self, "axis", a / np.linalg.norm(a))

    @property
    def axis_dim(self) -> int:
        return int(np.argmax(np.abs(self.axis)))


def _sample_profile(volume: np.ndarray, voxel_size: float, spec: ProfileSpec):
    ts = np.arange(-spec.half_length, spec.half_length + 1e-9, spec.spacing)
    points = spec.center[None, :] + ts[:, None] * spec.direction[None, :]
    origin = volume_origin(volume.shape, voxel_size)
    coords = (points - origin[None, :]) / voxel_size - 0.5
    values = map_coordinates(volume, coords.T, order=1, mode="nearest")
    return ts, values


def _profile_fwhm(ts: np.ndarray, values: np.ndarray) -> float:
    n = len(values)
    k = max(1, n // 8)
    baseline = float(np.median(np.concatenate([values[:k], values[-k:]])))
    peak_idx = int(np.argmax(values))
    peak = float(values[peak_idx])
    if peak <= baseline or not np.isfinite(peak):
        raise ValueError("screw not found: no peak above baseline")
    half = baseline + 0.5 * (peak - baseline)

    def crossing(idx, step):
        prev = idx
        cur = idx + step
        while 0 <= cur < n and values[cur] >= half:
            prev, cur = cur, cur + step
        if cur < 0 or cur >= n:
            raise ValueError("screw not found: half-max crossing outside profile")
        frac = (values[prev] - half) / (values[prev] - values[cur])
        return ts[prev] + frac * (ts[cur] - ts[prev])

    left = crossing(peak_idx, -1)
    right = crossing(peak_idx, +1)
    return float(right - left)


def fwhm(vol: ReconVolume, spec: ProfileSpec) -> float:
    """Full width at half maximum along one profile, in mm."""
    ts, values = _sample_profile(vol.values, vol.voxel_size, spec)
    return _profile_fwhm(ts, values)


def screw_profiles(screw: ScrewSpec, fractions=(0.25, 0.75),
                   half_length: float = 10.0, spacing: float = 0.25):
    """Profile specs at the configured axial positions of a screw.

    The profile direction is perpendicular to the screw axis and to the
    lateral separation of the screw pair (the y-ish direction), so the
    line does not graze the partner screw.
    """
    direction = np.cross(screw.axis, [0.0, 1.0, 0.0])
    if np.linalg.norm(direction) < 1e-6:
        direction = np.cross(screw.axis, [1.0, 0.0, 0.0])
    direction = direction / np.linalg.norm(direction)
    direction = direction - np.dot(direction, screw.axis) * screw.axis
    direction = direction / np.linalg.norm(direction)
    specs = []
    for frac in fractions:
        center = screw.tip_position + frac * screw.length * screw.axis
        specs.append(ProfileSpec(center, direction, screw.axis,
                                 half_length, spacing))
    return specs


def screw_fwhm(vol: ReconVolume, screw: ScrewSpec, fractions=(0.25, 0.75),
               half_length: float = 10.0, spacing: float = 0.25) -> float:
    """FWHM averaged over the configured positions along the shaft."""
    specs = screw_profiles(screw, fractions, half_length, spacing)
    return float(np.mean([fwhm(vol, s) for s in specs]))


def thread_peak(vol: ReconVolume, spec: PatchSpec, pitch: float) -> float:
    """Magnitude of the thread-frequency component of the screw patch.

    The patch is normalized to zero mean and unit variance, averaged over
    the two transverse axes, and the unitary DFT of the resulting axial
    profile is read at the bin nearest 1/pitch cycles/mm.
    """
    i, j, k = spec.corner
    di, dj, dk = spec.dims
    if min(di, dj, dk) < 2:
        raise ValueError("patch dims must be at least 2 voxels")
    shape = vol.values.shape
    if i < 0 or j < 0 or k < 0 or i + di > shape[0] or j + dj > shape[1] \
            or k + dk > shape[2]:
        raise ValueError("patch extends outside the volume")
    patch = vol.values[i:i + di, j:j + dj, k:k + dk]
    std = float(patch.std())
    if std == 0.0:
        return 0.0
    patch = (patch - patch.mean()) / std
    axes = [0, 1, 2]
    axes.remove(spec.axis_dim)
    profile = patch.mean(axis=tuple(axes))
    n = len(profile)
    spectrum = np.abs(np.fft.fft(profile)) / np.sqrt(n)
    freqs = np.fft.fftfreq(n, d=vol.voxel_size)
    positive = freqs[: n // 2 + 1]
    bin_idx = int(np.argmin(np.abs(positive - 1.0 / pitch)))
    return float(spectrum[bin_idx])


def screw_thread_patch(screw: ScrewSpec, vol_shape, voxel_size: float,
                       length_voxels: int = 16, width_voxels: int = 12,
                       height_voxels: int = 8) -> PatchSpec:
    """Patch around the central thread region of a screw."""
    origin = volume_origin(vol_shape, voxel_size)
    center_vox = np.rint((screw.center - origin) / voxel_size - 0.5).astype(int)
    axis_dim = int(np.argmax(np.abs(screw.axis)))
    dims = [width_voxels, width_voxels, height_voxels]
    dims[axis_dim] = length_voxels
    if axis_dim != 2:
        dims[2] = height_voxels
    corner = [int(np.clip(center_vox[d] - dims[d] // 2, 0,
                          vol_shape[d] - dims[d])) for d in range(3)]
    return PatchSpec(tuple(corner), tuple(dims), screw.axis)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity of slice ``a`` against reference slice ``b``.

    Uniform window, dynamic range taken as max - min of the reference;
    the mean runs over windows fully inside the slices.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"slice shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-d slices")
    dynamic_range = float(b.max() - b.min())
    if dynamic_range == 0.0:
        dynamic_range = 1.0
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    mu_a = uniform_filter(a, window)
    mu_b = uniform_filter(b, window)
    var_a = uniform_filter(a * a, window) - mu_a * mu_a
    var_b = uniform_filter(b * b, window) - mu_b * mu_b
    cov = uniform_filter(a * b, window) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    half = window // 2
    valid = ssim_map[half:ssim_map.shape[0] - half, half:ssim_map.shape[1] - half]
    return float(valid.mean())


def screws_slice_index(vol_shape, voxel_size: float, screws) -> int:
    """Index of the axial slice through the screw centers."""
    origin = volume_origin(vol_shape, voxel_size)
    mid_z = float(np.mean([s.center[2] for s in screws]))
    return int(np.clip(np.rint((mid_z - origin[2]) / voxel_size - 0.5),
                       0, vol_shape[2] - 1))
