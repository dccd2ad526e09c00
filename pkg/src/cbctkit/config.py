"""Flat key=value experiment configuration.

Every tunable of every pipeline stage lives in one flat namespace with
explicit defaults; unknown keys are rejected and all seeds are explicit
so a config file pins an experiment completely.
"""

from __future__ import annotations

import hashlib

from .detectability import DetectabilityConfig, TaskFunction
from .errors import ConfigError
from .geometry import DetectorGeometry
from .phantom import PhantomParams, ScrewSpec
from .planner import PlannerConfig
from .projector import Spectrum, default_spectrum
from .recon import ReconConfig
from .regressor import TrainConfig


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "seed": (int, 1234),
    "out": (str, "out"),
    "jobs": (int, 1),

    "phantom.nx": (int, 96),
    "phantom.ny": (int, 96),
    "phantom.nz": (int, 96),
    "phantom.voxel_mm": (float, 1.0),
    "phantom.seed": (int, 1),
    "phantom.jitter_translation_mm": (float, 10.0),
    "phantom.jitter_tilt_deg": (float, 10.0),
    "screw.length_mm": (float, 32.0),
    "screw.shaft_radius_mm": (float, 3.0),
    "screw.thread_pitch_mm": (float, 3.2),
    "screw.thread_depth_mm": (float, 0.8),

    "geometry.rows": (int, 72),
    "geometry.cols": (int, 96),
    "geometry.pixel_mm": (float, 2.0),
    "geometry.sid_mm": (float, 600.0),
    "geometry.sdd_mm": (float, 1000.0),

    "spectrum.builtin": (str, "default5"),
    "noise.photons": (float, 1e5),
    "noise.seed": (int, 7),

    "map.phi_step_deg": (float, 5.0),
    "map.theta_step_deg": (float, 5.0),
    "detect.patch_n": (int, 16),
    "detect.beta": (float, 0.01),
    "detect.task_center_cpmm": (float, 0.3125),
    "detect.task_bandwidth_cpmm": (float, 0.2),
    "detect.rows": (int, 144),
    "detect.cols": (int, 192),
    "detect.pixel_mm": (float, 1.0),

    "planner.delta_phi_deg": (float, 5.0),
    "planner.lambda": (float, 0.6),
    "planner.theta_limit_deg": (float, 45.0),
    "planner.arc_deg": (float, 200.0),
    "planner.start_phi_deg": (float, 0.0),
    "planner.start_theta_deg": (float, 90.0),
    "planner.predictor": (str, "oracle"),
    "planner.model": (str, ""),

    "recon.iterations": (int, 50),
    "recon.mask_radius_mm": (float, 50.0),

    "dataset.sims": (int, 4),
    "dataset.test_sims": (int, 1),
    "dataset.fluence": (float, 1e5),
    "dataset.seed": (int, 11),

    "train.learning_rate": (float, 1e-3),
    "train.momentum": (float, 0.9),
    "train.batch_size": (int, 16),
    "train.epochs": (int, 20),
    "train.seed": (int, 5),
    "train.augment": (_bool, False),

    "metrics.profile_half_mm": (float, 10.0),
    "metrics.profile_spacing_mm": (float, 0.25),

    "experiment.noise_levels": (str, "0,4e5,1e5,5e4"),
}


class Config:
    """Validated flat configuration with attribute-free dict access."""

    def __init__(self, values: dict | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cast, _ = SCHEMA[key]
        try:
            self._values[key] = cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})")

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def values(self) -> dict:
        return dict(self._values)

    def to_text(self) -> str:
        lines = [f"{k}={self._values[k]}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def parse_config_file(path: str) -> Config:
    cfg = Config()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in text.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}")
    return cfg


def apply_overrides(cfg: Config, overrides) -> Config:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg.set(key, value)
    return cfg


# ---------------------------------------------------------------------------
# builders for the domain objects


def phantom_params(cfg: Config) -> PhantomParams:
    screw = ScrewSpec(
        length=cfg["screw.length_mm"],
        shaft_radius=cfg["screw.shaft_radius_mm"],
        thread_pitch=cfg["screw.thread_pitch_mm"],
        thread_depth=cfg["screw.thread_depth_mm"],
    )
    return PhantomParams(
        dims=(cfg["phantom.nx"], cfg["phantom.ny"], cfg["phantom.nz"]),
        voxel_size=cfg["phantom.voxel_mm"],
        screw=screw,
        jitter_translation=cfg["phantom.jitter_translation_mm"],
        jitter_tilt=cfg["phantom.jitter_tilt_deg"],
    )


def detector(cfg: Config) -> DetectorGeometry:
    return DetectorGeometry(
        rows=cfg["geometry.rows"],
        cols=cfg["geometry.cols"],
        pixel_pitch=cfg["geometry.pixel_mm"],
        source_isocenter_distance=cfg["geometry.sid_mm"],
        source_detector_distance=cfg["geometry.sdd_mm"],
    )


def spectrum(cfg: Config, photons: float | None = None) -> Spectrum:
    name = cfg["spectrum.builtin"]
    if name != "default5":
        raise ConfigError(f"unknown builtin spectrum {name!r}")
    level = cfg["noise.photons"] if photons is None else photons
    if level <= 0:
        level = 1e5  # noiseless simulations still need a fluence scale
    return default_spectrum(level)


def detect_config(cfg: Config, photons: float | None = None
                  ) -> DetectabilityConfig:
    fine = DetectorGeometry(
        rows=cfg["detect.rows"],
        cols=cfg["detect.cols"],
        pixel_pitch=cfg["detect.pixel_mm"],
        source_isocenter_distance=cfg["geometry.sid_mm"],
        source_detector_distance=cfg["geometry.sdd_mm"],
    )
    return DetectabilityConfig(
        patch_n=cfg["detect.patch_n"],
        beta=cfg["detect.beta"],
        task=TaskFunction(cfg["detect.task_center_cpmm"],
                          cfg["detect.task_bandwidth_cpmm"]),
        spectrum=spectrum(cfg, photons),
        geom=fine,
    )


def planner_config(cfg: Config) -> PlannerConfig:
    return PlannerConfig(
        delta_phi=cfg["planner.delta_phi_deg"],
        lam=cfg["planner.lambda"],
        theta_limit=cfg["planner.theta_limit_deg"],
        arc=cfg["planner.arc_deg"],
    )


def recon_config(cfg: Config) -> ReconConfig:
    radius = cfg["recon.mask_radius_mm"]
    return ReconConfig(
        iterations=cfg["recon.iterations"],
        mask_radius=radius if radius > 0 else None,
        vol_shape=(cfg["phantom.nx"], cfg["phantom.ny"], cfg["phantom.nz"]),
        voxel_size=cfg["phantom.voxel_mm"],
    )


def train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["train.learning_rate"],
        momentum=cfg["train.momentum"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        seed=cfg["train.seed"],
        augment=cfg["train.augment"],
    )


def noise_levels(cfg: Config) -> list[float]:
    out = []
    for part in cfg["experiment.noise_levels"].split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(float(part))
        except ValueError:
            raise ConfigError(f"bad noise level {part!r}")
    if not out:
        raise ConfigError("experiment.noise_levels is empty")
    return out
