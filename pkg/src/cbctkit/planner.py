"""Online trajectory adjustment.

Each step scores 11 candidate out-of-plane offsets for the next in-plane
position, min-max normalizes the scores, adds a cosine smoothness bonus
for the previous motion direction, and picks the argmax among candidates
that respect the slope and clamp limits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detectability import DetectabilityConfig, view_detectability
from .geometry import (
    THETA_MAX,
    THETA_MIN,
    DetectorGeometry,
    ViewAngles,
    angular_distance,
)
from .phantom import MaterialVolume
from .projector import (
    DEFAULT_ATTENUATION,
    AttenuationTable,
    ProjectionImage,
    Spectrum,
    default_spectrum,
    simulate_view,
)
from .regressor import CANDIDATE_OFFSETS, RegressorModel, forward, normalize_input


@dataclass
class PlannerConfig:
    delta_phi: float = 5.0
    lam: float = 0.6
    theta_limit: float = 45.0
    arc: float = 200.0
    candidate_offsets: tuple = CANDIDATE_OFFSETS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        steps = self.arc / self.delta_phi
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("arc must be an integer multiple of delta_phi")

    @property
    def n_views(self) -> int:
        return int(round(self.arc / self.delta_phi))


@dataclass
class Trajectory:
    """Planned view sequence with per-step predictor scores.

    ``all_scores[t]`` holds the 11 raw candidate scores predicted from
    view t and ``chosen_scores[t]`` the raw score of the candidate taken;
    the final view makes no further prediction, so both lists are one
    shorter than ``poses``.
    """

    poses: list
    chosen_scores: list = field(default_factory=list)
    all_scores: list = field(default_factory=list)

    @property
    def start(self) -> ViewAngles:
        return self.poses[0]

    def __len__(self) -> int:
        return len(self.poses)

    def angles_array(self) -> np.ndarray:
        return np.array([[p.phi, p.theta] for p in self.poses])

    def thetas(self) -> np.ndarray:
        return np.array([p.theta for p in self.poses])


class OracleDetectability:
    """Scores candidates with the true detectability of the known phantom."""

    needs_image = False

    def __init__(self, vol: MaterialVolume, config: DetectabilityConfig | None = None,
                 offsets=CANDIDATE_OFFSETS, delta_phi: float = 5.0):
        self.vol = vol
        self.config = config or DetectabilityConfig()
        self.offsets = offsets
        self.delta_phi = delta_phi
        self._cache = {}

    def _d2(self, phi: float, theta: float) -> float:
        key = (round(phi % 360.0, 6), round(theta, 6))
        if key not in self._cache:
            self._cache[key] = view_detectability(
                self.vol, ViewAngles(phi, theta), self.config)
        return self._cache[key]

    def score(self, image, pose: ViewAngles):
        scores = np.zeros(len(self.offsets))
        valid = np.zeros(len(self.offsets), dtype=bool)
        for i, off in enumerate(self.offsets):
            theta = pose.theta + off
            if THETA_MIN <= theta <= THETA_MAX:
                scores[i] = self._d2(pose.phi + self.delta_phi, theta)
                valid[i] = True
        if not np.all(np.isfinite(scores)):
            raise ValueError("oracle produced non-finite scores")
        return scores, valid


class LearnedRegressor:
    """Scores candidates with the trained convolutional surrogate."""

    needs_image = True

    def __init__(self, model: RegressorModel, offsets=CANDIDATE_OFFSETS):
        self.model = model
        self.offsets = offsets

    def score(self, image: ProjectionImage, pose: ViewAngles):
        scores = forward(self.model, normalize_input(image.pixels))
        if not np.all(np.isfinite(scores)):
            raise ValueError("regressor produced non-finite scores")
        valid = np.array([
            THETA_MIN <= pose.theta + off <= THETA_MAX for off in self.offsets
        ])
        return scores, valid


@dataclass
class SimulationContext:
    """Provides the projection image at a pose during planning.

    Noise is keyed by (seed, pose) only, so identical poses receive
    identical noise regardless of when a trajectory visits them.
    """

    vol: MaterialVolume
    geom: DetectorGeometry = field(default_factory=DetectorGeometry)
    spectrum: Spectrum = field(default_factory=default_spectrum)
    table: AttenuationTable = DEFAULT_ATTENUATION
    noise_seed: int | None = None

    def view(self, pose: ViewAngles) -> ProjectionImage:
        seed = None
        if self.noise_seed is not None:
            ss = np.random.SeedSequence(
                [self.noise_seed,
                 int(round((pose.phi % 360.0) * 1000)),
                 int(round(pose.theta * 1000))])
            seed = int(ss.generate_state(1)[0])
        return simulate_view(self.vol, pose, self.geom, self.spectrum,
                             self.table, noise_seed=seed)


def normalize_scores(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Min-max normalization over the valid candidates (all zero if flat)."""
    out = np.zeros_like(scores, dtype=np.float64)
    vals = scores[valid]
    if vals.size == 0:
        return out
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        out[valid] = (scores[valid] - lo) / (hi - lo)
    return out


@dataclass(frozen=True)
class StepResult:
    pose: ViewAngles
    index: int


def step(pose: ViewAngles, prev_direction, scores, cfg: PlannerConfig,
         valid=None, theta_bounds=None) -> StepResult:
    """One smoothness-regularized planning step.

    ``scores`` are the 11 candidate values already normalized to [0, 1];
    the chosen offset maximizes lambda * cos(angle to previous step) +
    score over candidates inside the global range, ``theta_bounds``, and
    the validity mask. Ties break toward the smallest |offset|, then the
    negative one.
    """
    offsets = np.asarray(cfg.candidate_offsets, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != offsets.shape:
        raise ValueError("scores must match the candidate offsets")
    if valid is None:
        valid = np.ones(len(offsets), dtype=bool)
    u = np.asarray(prev_direction, dtype=np.float64)
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ValueError("previous direction must be nonzero")
    u = u / norm

    lo = max(THETA_MIN, theta_bounds[0]) if theta_bounds else THETA_MIN
    hi = min(THETA_MAX, theta_bounds[1]) if theta_bounds else THETA_MAX

    best_idx = -1
    best_util = -np.inf
    best_key = None
    for i, off in enumerate(offsets):
        theta = pose.theta + off
        if not valid[i] or theta < lo - 1e-9 or theta > hi + 1e-9:
            continue
        v = np.array([cfg.delta_phi, off])
        v = v / np.linalg.norm(v)
        util = cfg.lam * float(u @ v) + scores[i]
        key = (abs(off), off)
        if util > best_util or (util == best_util and key < best_key):
            best_idx, best_util, best_key = i, util, key
    if best_idx < 0:
        raise ValueError("no feasible candidate offset")
    return StepResult(
        ViewAngles(pose.phi + cfg.delta_phi, pose.theta + offsets[best_idx]),
        best_idx,
    )


def plan(predictor, sim: SimulationContext | None, start: ViewAngles,
         cfg: PlannerConfig | None = None) -> Trajectory:
    """Sweep the arc, steering theta by the predictor at every step."""
    cfg = cfg or PlannerConfig()
    if predictor.needs_image and sim is None:
        raise ValueError("this predictor needs simulated projections")
    bounds = (start.theta - cfg.theta_limit, start.theta + cfg.theta_limit)
    poses = [start]
    chosen, all_scores = [], []
    prev = (cfg.delta_phi, 0.0)
    pose = start
    for _ in range(cfg.n_views - 1):
        image = sim.view(pose) if predictor.needs_image else None
        raw, valid = predictor.score(image, pose)
        norm_scores = normalize_scores(raw, valid)
        result = step(pose, prev, norm_scores, cfg, valid=valid,
                      theta_bounds=bounds)
        all_scores.append(np.asarray(raw, dtype=np.float64))
        chosen.append(float(raw[result.index]))
        prev = (cfg.delta_phi, result.pose.theta - pose.theta)
        pose = result.pose
        poses.append(pose)
    return Trajectory(poses, chosen, all_scores)


def circular_trajectory(start: ViewAngles, cfg: PlannerConfig | None = None
                        ) -> Trajectory:
    """Constant-theta baseline sweep of the same arc."""
    cfg = cfg or PlannerConfig()
    poses = [ViewAngles(start.phi + t * cfg.delta_phi, start.theta)
             for t in range(cfg.n_views)]
    return Trajectory(poses)


def retrospective_plan(predictor, pool, start: ViewAngles,
                       cfg: PlannerConfig | None = None) -> Trajectory:
    """Plan over a fixed pool of pre-acquired views.

    Each predicted target pose snaps to the nearest remaining sampled
    view (Euclidean in (phi, theta) degrees), which is then removed from
    the pool and used as the next input.
    """
    cfg = cfg or PlannerConfig()
    remaining = list(pool)
    if not remaining:
        raise ValueError("empty view pool")

    def pop_nearest(phi, theta):
        if not remaining:
            raise ValueError("view pool exhausted before the arc was swept")
        dists = [
            ((p.phi - phi) ** 2 + (p.theta - theta) ** 2, i)
            for i, (p, _) in enumerate(remaining)
        ]
        _, idx = min(dists)
        return remaining.pop(idx)

    pose, image = pop_nearest(start.phi, start.theta)
    bounds = (pose.theta - cfg.theta_limit, pose.theta + cfg.theta_limit)
    poses = [pose]
    chosen, all_scores = [], []
    prev = (cfg.delta_phi, 0.0)
    for _ in range(cfg.n_views - 1):
        raw, valid = predictor.score(image, pose)
        norm_scores = normalize_scores(raw, valid)
        result = step(pose, prev, norm_scores, cfg, valid=valid,
                      theta_bounds=bounds)
        all_scores.append(np.asarray(raw, dtype=np.float64))
        chosen.append(float(raw[result.index]))
        target = result.pose
        next_pose, image = pop_nearest(target.phi, target.theta)
        prev = (cfg.delta_phi, result.pose.theta - pose.theta)
        pose = next_pose
        poses.append(pose)
    return Trajectory(poses, chosen, all_scores)


def interpolate_map(map_values: np.ndarray, phi_grid, theta_grid,
                    phi: float, theta: float) -> float:
    """Bilinear interpolation on a detectability map, wrapping phi."""
    phi_grid = np.asarray(phi_grid, dtype=np.float64)
    theta_grid = np.asarray(theta_grid, dtype=np.float64)
    n_phi = len(phi_grid)
    phi_step = phi_grid[1] - phi_grid[0] if n_phi > 1 else 1.0
    x = ((phi - phi_grid[0]) % 360.0) / phi_step
    i0 = int(np.floor(x)) % n_phi
    i1 = (i0 + 1) % n_phi
    fx = x - np.floor(x)
    t = np.clip(theta, theta_grid[0], theta_grid[-1])
    theta_step = theta_grid[1] - theta_grid[0] if len(theta_grid) > 1 else 1.0
    y = (t - theta_grid[0]) / theta_step
    j0 = int(np.clip(np.floor(y), 0, len(theta_grid) - 2))
    j1 = j0 + 1
    fy = y - j0
    return float(
        map_values[i0, j0] * (1 - fx) * (1 - fy)
        + map_values[i1, j0] * fx * (1 - fy)
        + map_values[i0, j1] * (1 - fx) * fy
        + map_values[i1, j1] * fx * fy
    )


def compare(a: Trajectory, b: Trajectory, map_values: np.ndarray,
            phi_grid, theta_grid) -> dict:
    """Angular distance plus relative detectability difference (b = reference)."""
    mean_ang, std_ang = angular_distance(a.angles_array(), b.angles_array())
    rel = []
    for pa, pb in zip(a.poses, b.poses):
        da = interpolate_map(map_values, phi_grid, theta_grid, pa.phi, pa.theta)
        db = interpolate_map(map_values, phi_grid, theta_grid, pb.phi, pb.theta)
        if db == 0:
            raise ValueError("reference detectability is zero on the map")
        rel.append(abs(da - db) / db)
    return {
        "mean_angular_deg": mean_ang,
        "std_angular_deg": std_ang,
        "mean_relative_d2": float(np.mean(rel)),
    }
