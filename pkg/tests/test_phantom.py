import numpy as np
import pytest

from cbctkit.phantom import (
    Material,
    MaterialVolume,
    PhantomParams,
    ScrewSpec,
    build_phantom,
    insert_screw,
    screw_midpoint_roi,
)

from conftest import air_volume


class TestScrewSpec:
    def test_axis_must_be_unit(self):
        with pytest.raises(ValueError):
            ScrewSpec(axis=np.array([1.0, 1.0, 0.0]))

    def test_thread_depth_bounded(self):
        with pytest.raises(ValueError):
            ScrewSpec(shaft_radius=2.0, thread_depth=2.0)

    def test_radius_profile_bounds(self):
        s = ScrewSpec(shaft_radius=2.5, thread_depth=0.8, thread_pitch=3.2)
        t = np.linspace(0, s.length, 1000)
        r = s.radius_at(t)
        assert r.max() <= 2.5 + 1e-12
        assert r.min() >= 2.5 - 0.8 - 1e-12


class TestBuildPhantom:
    def test_deterministic(self):
        params = PhantomParams()
        a = build_phantom(params, seed=42)
        b = build_phantom(params, seed=42)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.densities, b.densities)

    def test_zero_jitter_deterministic_across_seeds(self):
        params = PhantomParams(jitter_translation=0.0, jitter_tilt=0.0)
        a = build_phantom(params, seed=1)
        b = build_phantom(params, seed=2)
        assert np.array_equal(a.labels, b.labels)

    def test_five_labels_present(self):
        vol = build_phantom(PhantomParams(), seed=3)
        assert set(np.unique(vol.labels)) == {0, 1, 2, 3, 4}

    def test_titanium_mass_stable_under_jitter(self):
        counts = [
            int((build_phantom(PhantomParams(), seed=s).labels
                 == Material.TITANIUM).sum())
            for s in range(10)
        ]
        spread = (max(counts) - min(counts)) / np.mean(counts)
        assert spread < 0.02

    def test_screws_recorded_and_separated(self):
        vol = build_phantom(PhantomParams(), seed=5)
        assert len(vol.screws) == 2
        c0, c1 = (s.center for s in vol.screws)
        assert np.linalg.norm(c0 - c1) >= 2 * vol.screws[0].shaft_radius

    def test_midpoint_roi_near_axis(self):
        vol = build_phantom(PhantomParams(), seed=8)
        roi = screw_midpoint_roi(vol)
        centers = vol.voxel_centers_world()
        assert abs(centers[0][roi[0]]) <= 1.0
        assert abs(centers[1][roi[1]]) <= 1.0

    def test_overlapping_screws_rejected(self):
        # Zero standoff aims both screw segments through the target from
        # opposite sides; with no jitter every draw collides.
        params = PhantomParams(screw_standoff=0.0, screw_impact=0.0,
                               jitter_translation=0.0, jitter_tilt=0.0)
        with pytest.raises(ValueError, match="overlap"):
            build_phantom(params, seed=1)


class TestInsertScrew:
    def test_titanium_volume_matches_analytic(self):
        vol = air_volume((64, 64, 64), voxel=1.0)
        screw = ScrewSpec(length=32.0, shaft_radius=4.0, thread_depth=1.0,
                          thread_pitch=3.2,
                          tip_position=np.array([-16.0, 0.0, 0.0]))
        out = insert_screw(vol, screw)
        voxels = int((out.labels == Material.TITANIUM).sum())
        expected = screw.analytic_volume() / vol.voxel_size**3
        assert abs(voxels - expected) / expected < 0.05

    def test_zero_thread_depth_is_discrete_cylinder(self):
        vol = air_volume((48, 48, 48), voxel=1.0)
        screw = ScrewSpec(length=24.0, shaft_radius=4.0, thread_depth=0.0,
                          thread_pitch=2.0,
                          tip_position=np.array([-12.0, 0.0, 0.0]))
        out = insert_screw(vol, screw)
        mask = out.labels == Material.TITANIUM
        # Interior slices perpendicular to the axis carry identical disks.
        counts = mask.sum(axis=(1, 2))
        interior = counts[(counts > 0)][2:-2]
        assert len(set(interior.tolist())) == 1

    def test_thread_periodicity(self):
        vol = air_volume((48, 48, 48), voxel=1.0)
        pitch = 4.0
        screw = ScrewSpec(length=24.0, shaft_radius=5.0, thread_depth=1.6,
                          thread_pitch=pitch,
                          tip_position=np.array([0.0, 0.0, -12.0]),
                          axis=np.array([0.0, 0.0, 1.0]))
        out = insert_screw(vol, screw)
        counts = (out.labels == Material.TITANIUM).sum(axis=(0, 1)).astype(float)
        inside = counts > 0
        profile = counts[inside] - counts[inside].mean()
        lag = int(pitch / vol.voxel_size)
        # Autocorrelation at one pitch beats the in-between lags.
        def autocorr(p, k):
            return float(np.dot(p[:-k], p[k:]) / np.dot(p, p))
        assert autocorr(profile, lag) > autocorr(profile, lag // 2)
        assert autocorr(profile, lag) > 0.3

    def test_idempotent(self):
        vol = air_volume((48, 48, 48), voxel=1.0)
        screw = ScrewSpec(length=20.0, shaft_radius=3.0, thread_depth=0.9,
                          thread_pitch=3.0,
                          tip_position=np.array([-10.0, 0.0, 0.0]))
        once = insert_screw(vol, screw)
        twice = insert_screw(once, screw)
        assert np.array_equal(once.labels, twice.labels)
        assert np.array_equal(once.densities, twice.densities)

    def test_out_of_bounds_rejected(self):
        vol = air_volume((32, 32, 32), voxel=1.0)
        screw = ScrewSpec(length=40.0, shaft_radius=3.0, thread_depth=0.5,
                          thread_pitch=2.0,
                          tip_position=np.array([0.0, 0.0, 0.0]))
        with pytest.raises(ValueError, match="protrudes"):
            insert_screw(vol, screw)


class TestMaterialVolume:
    def test_rejects_mismatched_grids(self):
        with pytest.raises(ValueError):
            MaterialVolume(np.zeros((8, 8, 8), dtype=np.uint8),
                           np.zeros((8, 8, 9)), 1.0)

    def test_rejects_tiny_volumes(self):
        with pytest.raises(ValueError):
            MaterialVolume(np.zeros((4, 8, 8), dtype=np.uint8),
                           np.zeros((4, 8, 8)), 1.0)

    def test_origin_voxel_center_on_origin(self):
        vol = air_volume((48, 48, 48), voxel=1.0)
        centers = vol.voxel_centers_world()
        # One voxel center per axis lies exactly on the world origin.
        for ax in range(3):
            assert np.min(np.abs(centers[ax])) == pytest.approx(0.0, abs=1e-12)

    def test_nearest_voxel_roundtrip(self):
        vol = air_volume((48, 48, 48), voxel=1.0)
        centers = vol.voxel_centers_world()
        idx = vol.nearest_voxel([centers[0][10], centers[1][20], centers[2][30]])
        assert idx == (10, 20, 30)
