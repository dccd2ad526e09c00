import numpy as np
import pytest

from cbctkit.geometry import DetectorGeometry
from cbctkit.phantom import (
    DENSITY,
    Material,
    MaterialVolume,
    PhantomParams,
    ScrewSpec,
    build_phantom,
)


@pytest.fixture(scope="session")
def fixed_phantom():
    """Default phantom geometry with jitter disabled (seed-independent layout)."""
    params = PhantomParams(jitter_translation=0.0, jitter_tilt=0.0)
    return build_phantom(params, seed=1)


@pytest.fixture(scope="session")
def desk_phantom():
    """Jittered desk-scale phantom."""
    return build_phantom(PhantomParams(), seed=1)


@pytest.fixture(scope="session")
def desk_geom():
    return DetectorGeometry()


def tiny_phantom_params(dims=(48, 48, 48), voxel=1.5):
    """Small, fast phantom with proportionally shrunken objects."""
    screw = ScrewSpec(length=16.0, shaft_radius=2.0, thread_depth=0.6,
                      thread_pitch=3.2)
    return PhantomParams(
        dims=dims,
        voxel_size=voxel,
        block_extent=(44.0, 20.0, 30.0),
        bone_radius=6.0,
        bone_length=30.0,
        cylinder_radius=6.0,
        cylinder_length=30.0,
        cylinder_offsets=((11.0, -14.0), (-11.0, 14.0)),
        screw=screw,
        screw_azimuth=15.0,
        screw_standoff=11.0,
        screw_impact=1.4,
        jitter_translation=4.0,
        jitter_tilt=8.0,
    )


def uniform_volume(shape, material, density, voxel=1.0):
    labels = np.full(shape, material, dtype=np.uint8)
    densities = np.full(shape, density, dtype=np.float64)
    return MaterialVolume(labels, densities, voxel)


def air_volume(shape, voxel=1.0):
    """Zero-density background for exact analytic projector tests."""
    return uniform_volume(shape, Material.AIR, 0.0, voxel)


def nominal_volume(shape, material, voxel=1.0):
    return uniform_volume(shape, material, DENSITY[material], voxel)
