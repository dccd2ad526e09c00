"""Polychromatic cone-beam projection simulation.

Provides the matched forward/backprojector pair (exact intersection
lengths, exact adjoint) plus the physics layer on top: spectra,
material attenuation, Poisson noise, and log normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _ray
from .errors import NumericalError
from .geometry import DetectorGeometry, ProjectionMatrix, ViewAngles, pose_to_matrix
from .phantom import DENSITY, Material, MaterialVolume, volume_origin

# Reference energy for mono-energetic line integrals and ground truth.
REFERENCE_ENERGY_KEV = 70.0

# Photon-starvation guard: zero-count pixels are clamped to this many
# counts before the log transform.
STARVATION_CLAMP_COUNTS = 0.25


@dataclass(frozen=True)
class Spectrum:
    """Discrete x-ray spectrum: fluence per energy bin at the detector.

    The total fluence equals the named photons-per-pixel noise level.
    """

    energies: np.ndarray
    fluences: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        f = np.asarray(self.fluences, dtype=np.float64)
        if e.ndim != 1 or e.shape != f.shape:
            raise ValueError("energies and fluences must be matching 1-d arrays")
        if np.any(e <= 0) or np.any(np.diff(e) <= 0):
            raise ValueError("energies must be positive and strictly increasing")
        if np.any(f < 0) or f.sum() <= 0:
            raise ValueError("fluences must be nonnegative with positive total")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "fluences", f)

    @property
    def total_fluence(self) -> float:
        return float(self.fluences.sum())


def default_spectrum(total_fluence: float = 1e5) -> Spectrum:
    """Built-in 5-bin 40-110 keV spectrum scaled to a total fluence."""
    energies = np.array([40.0, 57.5, 75.0, 92.5, 110.0])
    weights = np.array([0.16, 0.25, 0.26, 0.20, 0.13])
    return Spectrum(energies, weights * float(total_fluence))


@dataclass(frozen=True)
class AttenuationTable:
    """Mass attenuation coefficients (cm^2/g) per material and energy."""

    energies: np.ndarray
    coefficients: dict

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        coeffs = {
            Material(m): np.asarray(v, dtype=np.float64)
            for m, v in self.coefficients.items()
        }
        for m, v in coeffs.items():
            if v.shape != e.shape:
                raise ValueError(f"coefficient row for {m.name} has wrong length")
            if np.any(v <= 0):
                raise ValueError(f"coefficients for {m.name} must be positive")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "coefficients", coeffs)

    def mass_attenuation(self, material: Material, energy_kev) -> np.ndarray:
        """Log-log interpolated mass attenuation at the given energies."""
        if material not in self.coefficients:
            raise KeyError(f"no attenuation data for material {material!r}")
        energy = np.asarray(energy_kev, dtype=np.float64)
        if np.any(energy < self.energies[0]) or np.any(energy > self.energies[-1]):
            raise ValueError(
                f"energy outside covered range "
                f"[{self.energies[0]}, {self.energies[-1]}] keV"
            )
        interp = np.interp(
            np.log(energy), np.log(self.energies), np.log(self.coefficients[material])
        )
        return np.exp(interp)


# Plausible tabulated mass attenuation values; bone and titanium decrease
# strictly with energy over 30-120 keV, which drives beam hardening.
DEFAULT_ATTENUATION = AttenuationTable(
    energies=np.array([30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0]),
    coefficients={
        Material.AIR: [0.3538, 0.2485, 0.2080, 0.1875, 0.1744, 0.1662,
                       0.1599, 0.1541, 0.1496, 0.1458],
        Material.SOFT_TISSUE: [0.3962, 0.2688, 0.2262, 0.2048, 0.1920, 0.1823,
                               0.1747, 0.1693, 0.1644, 0.1605],
        Material.WOOD: [0.3321, 0.2415, 0.2108, 0.1937, 0.1827, 0.1742,
                        0.1675, 0.1624, 0.1580, 0.1542],
        Material.BONE: [1.3310, 0.6655, 0.4242, 0.3148, 0.2608, 0.2229,
                        0.2031, 0.1855, 0.1749, 0.1665],
        Material.TITANIUM: [2.2140, 1.2130, 0.7661, 0.5398, 0.4170, 0.3312,
                            0.2791, 0.2421, 0.2251, 0.2110],
    },
)


@dataclass
class ProjectionImage:
    """Log-normalized projection with its pose and acquisition metadata.

    ``fluence_level`` is the photons-per-pixel level, or None for a
    noiseless simulation; ``clean`` marks images without noise injection.
    """

    pixels: np.ndarray
    pose: ViewAngles
    matrix: ProjectionMatrix
    fluence_level: float | None = None
    clean: bool = True

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if not np.all(np.isfinite(self.pixels)) or np.any(self.pixels < 0):
            raise ValueError("projection pixels must be finite and nonnegative")


def pixel_ray_directions(matrix: ProjectionMatrix, rows: int, cols: int) -> np.ndarray:
    """Per-pixel world ray directions, pixel index p = row * cols + col."""
    us, vs = np.meshgrid(np.arange(cols, dtype=np.float64),
                         np.arange(rows, dtype=np.float64))
    pix = np.stack([us.ravel(), vs.ravel()], axis=1)
    return matrix.ray_directions(pix)


def forward_project(values: np.ndarray, matrix: ProjectionMatrix,
                    geom: DetectorGeometry, voxel_size: float) -> np.ndarray:
    """Line integrals (value * mm) of an arbitrary voxel field.

    This is the linear operator behind both the detectability kernels and
    CGLS; ``backproject`` is its exact adjoint.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    origin = volume_origin(values.shape, voxel_size)
    src = matrix.source_position()
    dirs = pixel_ray_directions(matrix, geom.rows, geom.cols)
    out = np.zeros(geom.rows * geom.cols)
    _ray.forward_values(values, origin, voxel_size, src, dirs, out)
    return out.reshape(geom.rows, geom.cols)


def backproject(image: np.ndarray, matrix: ProjectionMatrix, geom: DetectorGeometry,
                vol_dims: tuple[int, int, int], voxel_size: float) -> np.ndarray:
    """Exact adjoint of forward_project (same intersection weights)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (geom.rows, geom.cols):
        raise ValueError(
            f"image shape {image.shape} does not match detector "
            f"({geom.rows}, {geom.cols})"
        )
    origin = volume_origin(vol_dims, voxel_size)
    src = matrix.source_position()
    dirs = pixel_ray_directions(matrix, geom.rows, geom.cols)
    out = np.zeros(vol_dims)
    _ray.backproject_values(image.ravel(), origin, voxel_size, src, dirs, out)
    return out


def material_pathlengths(vol: MaterialVolume, matrix: ProjectionMatrix,
                         geom: DetectorGeometry) -> np.ndarray:
    """Density-weighted path per material, shape (n_materials, rows, cols).

    Units are mm * g/cm^3; multiply by 0.1 for areal density in g/cm^2.
    """
    origin = vol.origin
    src = matrix.source_position()
    dirs = pixel_ray_directions(matrix, geom.rows, geom.cols)
    out = np.zeros((len(Material), geom.rows * geom.cols))
    _ray.forward_materials(vol.labels, vol.densities, origin, vol.voxel_size,
                           src, dirs, out)
    return out.reshape(len(Material), geom.rows, geom.cols)


def line_integrals(vol: MaterialVolume, matrix: ProjectionMatrix,
                   geom: DetectorGeometry, material_filter: Material | None = None,
                   table: AttenuationTable = DEFAULT_ATTENUATION,
                   energy_kev: float = REFERENCE_ENERGY_KEV) -> np.ndarray:
    """Radiological path integral (dimensionless) at the reference energy.

    Integrates density times reference mass attenuation along each
    source-to-pixel ray; with ``material_filter`` only voxels of that
    material contribute.
    """
    paths = material_pathlengths(vol, matrix, geom)
    out = np.zeros((geom.rows, geom.cols))
    materials = [material_filter] if material_filter is not None else list(Material)
    for m in materials:
        mu = float(table.mass_attenuation(m, energy_kev))
        # mm * g/cm^3 * cm^2/g = mm/cm -> x0.1 dimensionless
        out += 0.1 * mu * paths[int(m)]
    return out


def attenuation_volume(vol: MaterialVolume,
                       table: AttenuationTable = DEFAULT_ATTENUATION,
                       energy_kev: float = REFERENCE_ENERGY_KEV) -> np.ndarray:
    """Per-voxel linear attenuation (1/mm) at the given energy."""
    mu = np.array([
        float(table.mass_attenuation(m, energy_kev)) for m in Material
    ])
    return 0.1 * vol.densities * mu[vol.labels]


def polychromatic_project(vol: MaterialVolume, matrix: ProjectionMatrix,
                          geom: DetectorGeometry, spectrum: Spectrum,
                          table: AttenuationTable = DEFAULT_ATTENUATION) -> np.ndarray:
    """Expected detector counts (photons/pixel) with beam hardening.

    Per pixel: sum over bins of fluence_b * exp(-sum_m mu(m, E_b) *
    areal_density_m).
    """
    present = {Material(int(l)) for l in np.unique(vol.labels)}
    for m in present:
        if m not in table.coefficients:
            raise KeyError(f"attenuation table lacks material {m.name}")
    paths = 0.1 * material_pathlengths(vol, matrix, geom)  # g/cm^2
    counts = np.zeros((geom.rows, geom.cols))
    for energy, fluence in zip(spectrum.energies, spectrum.fluences):
        optical = np.zeros_like(counts)
        for m in Material:
            mu = float(table.mass_attenuation(m, energy))
            optical += mu * paths[int(m)]
        counts += fluence * np.exp(-optical)
    return counts


def inject_noise(counts: np.ndarray, seed: int) -> np.ndarray:
    """Seed-deterministic Poisson noise with photon-starvation clamp.

    Uses a counter-based generator so results do not depend on the
    evaluation schedule; zero-count pixels are clamped to
    STARVATION_CLAMP_COUNTS.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("expected counts must be nonnegative")
    rng = np.random.Generator(np.random.Philox(seed))
    noisy = rng.poisson(counts).astype(np.float64)
    noisy[noisy == 0.0] = STARVATION_CLAMP_COUNTS
    return noisy


def log_normalize(counts: np.ndarray, spectrum: Spectrum) -> np.ndarray:
    """-ln(counts / total fluence), with negatives from noise clipped to 0."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("counts must be positive (apply the starvation clamp first)")
    p = -np.log(counts / spectrum.total_fluence)
    return np.maximum(p, 0.0)


def sphere_mask(matrix: ProjectionMatrix, geom: DetectorGeometry,
                radius: float = 50.0) -> np.ndarray:
    """True where the pixel's ray intersects the centered sphere."""
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    src = matrix.source_position()
    dirs = pixel_ray_directions(matrix, geom.rows, geom.cols)
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    closest = src[None, :] - (unit @ src)[:, None] * unit
    dist = np.linalg.norm(closest, axis=1)
    return (dist <= radius).reshape(geom.rows, geom.cols)


def simulate_view(vol: MaterialVolume, angles: ViewAngles, geom: DetectorGeometry,
                  spectrum: Spectrum, table: AttenuationTable = DEFAULT_ATTENUATION,
                  noise_seed: int | None = None) -> ProjectionImage:
    """Simulate one log-normalized projection at a pose.

    ``noise_seed`` None gives the clean image; otherwise Poisson noise is
    injected with that seed.
    """
    matrix = pose_to_matrix(angles, geom)
    counts = polychromatic_project(vol, matrix, geom, spectrum, table)
    clean = noise_seed is None
    if not clean:
        counts = inject_noise(counts, noise_seed)
    else:
        counts = np.maximum(counts, STARVATION_CLAMP_COUNTS)
    pixels = log_normalize(counts, spectrum)
    if not np.all(np.isfinite(pixels)):
        raise NumericalError("non-finite projection pixels")
    return ProjectionImage(
        pixels, angles, matrix,
        fluence_level=None if clean else spectrum.total_fluence,
        clean=clean,
    )


def mono_view(vol: MaterialVolume, angles: ViewAngles, geom: DetectorGeometry,
              table: AttenuationTable = DEFAULT_ATTENUATION,
              energy_kev: float = REFERENCE_ENERGY_KEV) -> ProjectionImage:
    """Noise-free mono-energetic projection (no physics-based artifacts)."""
    matrix = pose_to_matrix(angles, geom)
    pixels = line_integrals(vol, matrix, geom, table=table, energy_kev=energy_kev)
    return ProjectionImage(pixels, angles, matrix, fluence_level=None, clean=True)
