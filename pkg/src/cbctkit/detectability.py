"""Per-view detectability index from local MTF/NPS.

The local responses come from the penalized-likelihood construction:
project a unit impulse at the region of interest into the view(s),
weight by the expected detector counts, backproject into a small patch
(the Fisher-information kernel), and read MTF and NPS off its DFT. The
detectability index then contracts MTF, NPS, and a band-pass task
function over the frequency grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _ray
from .geometry import DetectorGeometry, ProjectionMatrix, ViewAngles, pose_to_matrix
from .phantom import MaterialVolume, screw_midpoint_roi, volume_origin
from .projector import (
    DEFAULT_ATTENUATION,
    AttenuationTable,
    Spectrum,
    default_spectrum,
    polychromatic_project,
)


@dataclass(frozen=True)
class FrequencyGrid:
    """Cubic DFT frequency grid of an N^3 patch (cycles/mm)."""

    n: int = 16
    voxel_size: float = 1.0

    def __post_init__(self):
        if self.n < 8 or self.n > 32 or (self.n & (self.n - 1)) != 0:
            raise ValueError("patch size must be a power of two in [8, 32]")
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")

    @property
    def freqs(self) -> np.ndarray:
        return np.fft.fftfreq(self.n, d=self.voxel_size)

    def radial_frequencies(self) -> np.ndarray:
        f = self.freqs
        fx, fy, fz = np.meshgrid(f, f, f, indexing="ij")
        return np.sqrt(fx * fx + fy * fy + fz * fz)


@dataclass(frozen=True)
class TaskFunction:
    """Isotropic difference-of-Gaussians band-pass |W(f)|.

    W(f) = exp(-(f - fc)^2 / 2s^2) - exp(-(f + fc)^2 / 2s^2) with f = |f|,
    which is nonnegative, peaks near the center frequency, and is exactly
    zero at f = 0. The default center sits at the default screw's thread
    frequency, 1 / (3.2 mm pitch).
    """

    center_frequency: float = 0.3125
    bandwidth: float = 0.2

    def __post_init__(self):
        if self.center_frequency <= 0 or self.bandwidth <= 0:
            raise ValueError("center frequency and bandwidth must be positive")

    def values_on(self, grid: FrequencyGrid) -> np.ndarray:
        f = grid.radial_frequencies()
        s2 = 2.0 * self.bandwidth**2
        w = np.exp(-((f - self.center_frequency) ** 2) / s2) - np.exp(
            -((f + self.center_frequency) ** 2) / s2
        )
        return np.maximum(w, 0.0)


@dataclass
class LocalResponse:
    """Local MTF and NPS sampled on a FrequencyGrid."""

    mtf: np.ndarray
    nps: np.ndarray
    roi_voxel: tuple[int, int, int]


def detectability_detector() -> DetectorGeometry:
    """Detector used for the index computation.

    Finer than the acquisition panel so the impulse footprint always
    spans several rays; the index is a property of object and pose, not
    of the readout binning.
    """
    return DetectorGeometry(rows=144, cols=192, pixel_pitch=1.0)


@dataclass
class DetectabilityConfig:
    """Everything view_detectability needs besides the volume and pose."""

    roi: tuple[int, int, int] | None = None
    patch_n: int = 16
    beta: float = 0.01
    task: TaskFunction = field(default_factory=TaskFunction)
    spectrum: Spectrum = field(default_factory=default_spectrum)
    table: AttenuationTable = DEFAULT_ATTENUATION
    geom: DetectorGeometry = field(default_factory=detectability_detector)

    def grid(self, voxel_size: float) -> FrequencyGrid:
        return FrequencyGrid(self.patch_n, voxel_size)

    def resolve_roi(self, vol: MaterialVolume) -> tuple[int, int, int]:
        return self.roi if self.roi is not None else screw_midpoint_roi(vol)


def fisher_kernel(views, roi, grid: FrequencyGrid,
                  vol_shape: tuple[int, int, int]) -> np.ndarray:
    """Patch restriction of At D A applied to a unit impulse at ``roi``.

    ``views`` is a list of (ProjectionMatrix, weights) pairs where the
    weights are the expected detector counts of the clean simulation.
    Only pixels whose rays cross the roi voxel can contribute, so each
    view touches a small detector footprint.
    """
    views = list(views)
    if not views:
        raise ValueError("fisher_kernel needs at least one view")
    n = grid.n
    h = grid.voxel_size
    vol_shape = tuple(int(d) for d in vol_shape)
    lo_idx = np.asarray(roi, dtype=int) - n // 2
    if np.any(lo_idx < 0) or np.any(lo_idx + n > np.asarray(vol_shape)):
        raise ValueError("roi patch extends outside the volume")

    vol_origin = volume_origin(vol_shape, h)
    roi_lo = vol_origin + np.asarray(roi, dtype=np.float64) * h
    roi_hi = roi_lo + h
    patch_origin = vol_origin + lo_idx * h

    q = np.zeros((n, n, n))
    corners = np.array(
        [[roi_lo[0] + dx * h, roi_lo[1] + dy * h, roi_lo[2] + dz * h]
         for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
    )
    for matrix, weights in views:
        weights = np.asarray(weights, dtype=np.float64)
        rows, cols = weights.shape
        uv = matrix.project(corners)
        u0 = max(int(np.floor(uv[:, 0].min())) - 1, 0)
        u1 = min(int(np.ceil(uv[:, 0].max())) + 1, cols - 1)
        v0 = max(int(np.floor(uv[:, 1].min())) - 1, 0)
        v1 = min(int(np.ceil(uv[:, 1].max())) + 1, rows - 1)
        if u1 < u0 or v1 < v0:
            continue
        us, vs = np.meshgrid(np.arange(u0, u1 + 1, dtype=np.float64),
                             np.arange(v0, v1 + 1, dtype=np.float64))
        pix = np.stack([us.ravel(), vs.ravel()], axis=1)
        dirs = matrix.ray_directions(pix)
        src = matrix.source_position()
        chords = np.zeros(len(pix))
        _ray.box_chords(src, dirs, roi_lo, roi_hi, chords)
        w = weights[pix[:, 1].astype(int), pix[:, 0].astype(int)]
        y = chords * w
        hit = y != 0.0
        if not np.any(hit):
            continue
        _ray.backproject_values(y[hit], patch_origin, h,
                                src, np.ascontiguousarray(dirs[hit]), q)
    return q


def penalty_response(grid: FrequencyGrid) -> np.ndarray:
    """Frequency response of the second-difference quadratic penalty."""
    f = grid.freqs
    r1 = 4.0 * np.sin(np.pi * f * grid.voxel_size) ** 2
    return (r1[:, None, None] + r1[None, :, None] + r1[None, None, :])


def local_mtf_nps(q: np.ndarray, beta: float, grid: FrequencyGrid,
                  roi_voxel=(0, 0, 0)) -> LocalResponse:
    """MTF(f) = Q/(Q + beta*R), NPS(f) = Q/(Q + beta*R)^2, with 0/0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if beta == 0 and not np.any(q):
        raise ValueError("all-zero kernel with beta=0: response undefined")
    big_q = np.abs(np.fft.fftn(q))
    denom = big_q + beta * penalty_response(grid)
    with np.errstate(invalid="ignore", divide="ignore"):
        mtf = np.where(denom > 0, big_q / denom, 0.0)
        nps = np.where(denom > 0, big_q / denom**2, 0.0)
    return LocalResponse(mtf=mtf, nps=nps, roi_voxel=tuple(roi_voxel))


def detectability_index(resp: LocalResponse, task: TaskFunction,
                        grid: FrequencyGrid) -> float:
    """Discretized non-prewhitening detectability index.

    d^2 = [sum MTF^2 W^2]^2 / [sum NPS MTF^2 W^2], plain sums over the
    uniform frequency grid (constant cell volumes cancel), with the f=0
    NPS term excluded; returns 0 when the denominator vanishes.
    """
    w = task.values_on(grid)
    if np.any(resp.mtf < 0) or np.any(resp.nps < 0) or np.any(w < 0):
        raise ValueError("MTF, NPS, and task values must be nonnegative")
    mw2 = resp.mtf**2 * w**2
    numerator = float(np.sum(mw2)) ** 2
    den_terms = resp.nps * mw2
    den = float(np.sum(den_terms)) - float(den_terms[0, 0, 0])
    if den <= 0:
        return 0.0
    return numerator / den


def _d2_for_weights(vol_shape, voxel_size, matrices_weights, roi,
                    config: DetectabilityConfig) -> float:
    grid = FrequencyGrid(config.patch_n, voxel_size)
    q = fisher_kernel(matrices_weights, roi, grid, vol_shape)
    resp = local_mtf_nps(q, config.beta, grid, roi_voxel=roi)
    return detectability_index(resp, config.task, grid)


def view_detectability(vol: MaterialVolume, angles: ViewAngles,
                       config: DetectabilityConfig | None = None,
                       counts: np.ndarray | None = None) -> float:
    """Single-view detectability at a pose.

    ``counts`` may pass in the precomputed clean expected counts of that
    view to avoid re-simulation (used by map/dataset generation).
    """
    config = config or DetectabilityConfig()
    roi = config.resolve_roi(vol)
    matrix = pose_to_matrix(angles, config.geom)
    if counts is None:
        counts = polychromatic_project(vol, matrix, config.geom,
                                       config.spectrum, config.table)
    return _d2_for_weights(vol.shape, vol.voxel_size, [(matrix, counts)],
                           roi, config)


def cumulative_detectability(vol: MaterialVolume, poses,
                             config: DetectabilityConfig | None = None) -> float:
    """Detectability with the kernel accumulated over a pose sequence.

    Analysis helper; training labels use the per-view index.
    """
    config = config or DetectabilityConfig()
    roi = config.resolve_roi(vol)
    pairs = []
    for pose in poses:
        matrix = pose_to_matrix(pose, config.geom)
        counts = polychromatic_project(vol, matrix, config.geom,
                                       config.spectrum, config.table)
        pairs.append((matrix, counts))
    return _d2_for_weights(vol.shape, vol.voxel_size, pairs, roi, config)


def default_grids(phi_step: float = 5.0, theta_step: float = 5.0):
    """The sampling grid: phi in [0, 360) and theta in [45, 135]."""
    phi = np.arange(0.0, 360.0, phi_step)
    theta = np.arange(45.0, 135.0 + 1e-9, theta_step)
    return phi, theta


def detectability_map(vol: MaterialVolume, phi_grid, theta_grid,
                      config: DetectabilityConfig | None = None) -> np.ndarray:
    """Detectability at every (phi, theta) grid node, shape (n_phi, n_theta)."""
    config = config or DetectabilityConfig()
    phi_grid = np.asarray(phi_grid, dtype=np.float64)
    theta_grid = np.asarray(theta_grid, dtype=np.float64)
    out = np.zeros((len(phi_grid), len(theta_grid)))
    for i, phi in enumerate(phi_grid):
        for j, theta in enumerate(theta_grid):
            out[i, j] = view_detectability(vol, ViewAngles(phi, theta), config)
    return out
