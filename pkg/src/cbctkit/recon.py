"""Iterative least-squares cone-beam reconstruction (CGLS).

Plain CGLS on the normal equations of the matched projector pair, zero
initialization, iteration count as the implicit regularizer. Masked
detector pixels are excluded from the data term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .geometry import DetectorGeometry
from .phantom import MaterialVolume
from .projector import (
    DEFAULT_ATTENUATION,
    AttenuationTable,
    ProjectionImage,
    REFERENCE_ENERGY_KEV,
    attenuation_volume,
    backproject,
    forward_project,
    mono_view,
)


@dataclass
class ReconConfig:
    iterations: int = 50
    mask_radius: float | None = 50.0
    vol_shape: tuple[int, int, int] = (96, 96, 96)
    voxel_size: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iteration count must be at least 1")


@dataclass
class ReconVolume:
    values: np.ndarray
    voxel_size: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("reconstruction contains non-finite values")


def cgls_core(apply_a, apply_at, data, x_shape, iterations: int):
    """CGLS on an abstract operator pair; returns (x, residual norms).

    ``apply_a`` maps a volume-shaped array to data space, ``apply_at`` is
    its adjoint. The residual norm ||Ax - b|| is recorded after every
    iteration and must be non-increasing (a growing residual indicates a
    mismatched adjoint pair and aborts).
    """
    x = np.zeros(x_shape)
    r = data.copy()
    p = apply_at(r)
    gamma = float(np.sum(p * p))
    residuals = [float(np.linalg.norm(r))]
    for it in range(iterations):
        if gamma == 0.0:
            residuals.append(residuals[-1])
            continue
        q = apply_a(p)
        qq = float(np.sum(q * q))
        if qq == 0.0:
            break
        alpha = gamma / qq
        x = x + alpha * p
        r = r - alpha * q
        res = float(np.linalg.norm(r))
        if res > residuals[-1] * (1.0 + 1e-6):
            raise NumericalError(
                f"CGLS residual increased at iteration {it + 1} "
                f"({residuals[-1]:.6e} -> {res:.6e}); adjoint mismatch?"
            )
        residuals.append(res)
        s = apply_at(r)
        gamma_new = float(np.sum(s * s))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, residuals


def cgls(projections: list[ProjectionImage], masks=None,
         cfg: ReconConfig | None = None,
         geom: DetectorGeometry | None = None) -> tuple[ReconVolume, list[float]]:
    """Reconstruct a volume from projections with known matrices.

    ``masks`` is an optional list of boolean detector arrays; False
    pixels are excluded from the data term entirely.
    """
    cfg = cfg or ReconConfig()
    if not projections:
        raise ValueError("no projections given")
    geom = geom or DetectorGeometry(rows=projections[0].pixels.shape[0],
                                    cols=projections[0].pixels.shape[1])
    data = np.stack([p.pixels for p in projections])
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite projection data")
    if masks is not None:
        mask = np.stack([np.asarray(m, dtype=bool) for m in masks])
        if mask.shape != data.shape:
            raise ValueError("mask stack does not match projection stack")
        data = np.where(mask, data, 0.0)
    else:
        mask = None
    matrices = [p.matrix for p in projections]

    def apply_a(x):
        out = np.stack([
            forward_project(x, m, geom, cfg.voxel_size) for m in matrices
        ])
        if mask is not None:
            out = np.where(mask, out, 0.0)
        return out

    def apply_at(y):
        out = np.zeros(cfg.vol_shape)
        for i, m in enumerate(matrices):
            img = y[i]
            if mask is not None:
                img = np.where(mask[i], img, 0.0)
            out += backproject(img, m, geom, cfg.vol_shape, cfg.voxel_size)
        return out

    x, residuals = cgls_core(apply_a, apply_at, data, cfg.vol_shape,
                             cfg.iterations)
    vol = ReconVolume(x, cfg.voxel_size,
                      provenance={"iterations": cfg.iterations,
                                  "views": len(projections)})
    return vol, residuals


def circle_masks(projections: list[ProjectionImage], geom: DetectorGeometry,
                 radius: float) -> list[np.ndarray]:
    from .projector import sphere_mask

    return [sphere_mask(p.matrix, geom, radius) for p in projections]


def ground_truth_recon(vol: MaterialVolume, poses, cfg: ReconConfig | None = None,
                       geom: DetectorGeometry | None = None,
                       table: AttenuationTable = DEFAULT_ATTENUATION,
                       energy_kev: float = REFERENCE_ENERGY_KEV
                       ) -> tuple[ReconVolume, list[float]]:
    """Reference reconstruction from mono-energetic noise-free projections."""
    geom = geom or DetectorGeometry()
    cfg = cfg or ReconConfig(vol_shape=vol.shape, voxel_size=vol.voxel_size)
    projections = [mono_view(vol, pose, geom, table, energy_kev) for pose in poses]
    masks = None
    if cfg.mask_radius is not None:
        masks = circle_masks(projections, geom, cfg.mask_radius)
    recon, residuals = cgls(projections, masks, cfg, geom)
    recon.provenance["reference_energy_kev"] = energy_kev
    return recon, residuals


def reference_attenuation(vol: MaterialVolume,
                          table: AttenuationTable = DEFAULT_ATTENUATION,
                          energy_kev: float = REFERENCE_ENERGY_KEV) -> np.ndarray:
    """Ground-truth attenuation volume (1/mm) the recon should recover."""
    return attenuation_volume(vol, table, energy_kev)
