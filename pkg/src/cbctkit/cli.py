"""Command-line interface.

Commands: phantom, simulate, map, dataset, train, plan, recon, eval,
experiment. Every command is a pure function of its config and input
files; all randomness is seeded from the config, so reruns reproduce
outputs bit for bit. Exit codes: 0 success, 2 config error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from . import formats
from .detectability import default_grids, detectability_map
from .errors import ConfigError, FileFormatError, NumericalError
from .geometry import ViewAngles, angular_distance
from .metrics import (
    screw_fwhm,
    screw_thread_patch,
    screws_slice_index,
    ssim,
    thread_peak,
)
from .phantom import MaterialVolume, build_phantom
from .planner import (
    LearnedRegressor,
    OracleDetectability,
    SimulationContext,
    Trajectory,
    circular_trajectory,
    plan,
)
from .projector import ProjectionImage
from .recon import ReconVolume, cgls, circle_masks, ground_truth_recon
from .regressor import (
    DEFAULT_ARCH,
    DatasetGenConfig,
    build_model,
    generate_dataset,
    read_manifest,
    train,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbctkit",
        description="Task-aware CBCT trajectory simulation and evaluation.")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, help="parallel experiment cells")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="override a config key")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", help="build the phantom volume")

    p = sub.add_parser("simulate", help="simulate projections along a trajectory")
    p.add_argument("--phantom", help="phantom file stem (default OUT/phantom)")
    p.add_argument("--trajectory", help="trajectory CSV (default: circular)")

    sub.add_parser("map", help="compute the detectability map")

    sub.add_parser("dataset", help="generate the training dataset")

    p = sub.add_parser("train", help="train the view-quality regressor")
    p.add_argument("--manifest", help="dataset manifest path")

    p = sub.add_parser("plan", help="plan a task-aware trajectory")
    p.add_argument("--phantom", help="phantom file stem (default OUT/phantom)")
    p.add_argument("--predictor", choices=["oracle", "learned"],
                   help="override planner.predictor")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="override planner.lambda")

    p = sub.add_parser("recon", help="CGLS reconstruction from projections")
    p.add_argument("--projections", help="projection stem (default OUT/projections)")

    p = sub.add_parser("eval", help="metrics of a reconstruction vs ground truth")
    p.add_argument("--recon", required=True, help="reconstruction VOL1 file")
    p.add_argument("--reference", required=True, help="ground-truth VOL1 file")
    p.add_argument("--screws", help="screw placement file (default OUT/phantom_screws.txt)")
    p.add_argument("--label", default="recon", help="row label for the report")

    p = sub.add_parser("experiment", help="run a full protocol matrix")
    p.add_argument("--preset", choices=["table", "noise"], default="table")
    return parser


def load_config(args) -> cfgmod.Config:
    cfg = cfgmod.parse_config_file(args.config) if args.config else cfgmod.Config()
    cfgmod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", args.out)
    if args.jobs is not None:
        cfg.set("jobs", args.jobs)
    return cfg


def _seeds(cfg) -> dict:
    return {"master": cfg["seed"], "phantom": cfg["phantom.seed"],
            "noise": cfg["noise.seed"], "dataset": cfg["dataset.seed"],
            "train": cfg["train.seed"]}


def _prov(cfg, command, *paths):
    for path in paths:
        formats.write_provenance(path, command, cfg.sha256(), _seeds(cfg))


def _phantom_stem(cfg, args) -> str:
    stem = getattr(args, "phantom", None)
    return stem or os.path.join(cfg["out"], "phantom")


def _load_phantom(stem: str) -> MaterialVolume:
    densities, voxel = formats.read_volume(stem + ".vol")
    labels, _ = formats.read_labels(stem + ".lbl")
    screws = tuple(formats.read_screws(stem + "_screws.txt"))
    return MaterialVolume(labels, densities, voxel, screws=screws)


def _write_phantom(cfg, vol: MaterialVolume, stem: str, command: str):
    formats.write_volume(stem + ".vol", vol.densities, vol.voxel_size)
    formats.write_labels(stem + ".lbl", vol.labels, vol.voxel_size)
    formats.write_screws(stem + "_screws.txt", vol.screws)
    _prov(cfg, command, stem + ".vol", stem + ".lbl", stem + "_screws.txt")


def cmd_phantom(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    vol = build_phantom(cfgmod.phantom_params(cfg), cfg["phantom.seed"])
    _write_phantom(cfg, vol, _phantom_stem(cfg, args), "phantom")


def _simulate_stack(cfg, vol, poses, photons):
    geom = cfgmod.detector(cfg)
    sim = SimulationContext(
        vol, geom, cfgmod.spectrum(cfg, photons),
        noise_seed=cfg["noise.seed"] if photons > 0 else None)
    images = [sim.view(pose) for pose in poses]
    return images, geom


def _write_stack(cfg, images, geom, stem, command):
    pixels = np.stack([img.pixels for img in images])
    formats.write_projections(stem + ".prj", pixels, geom.pixel_pitch)
    formats.write_geometry(stem + ".geom", [img.matrix for img in images],
                           [img.pose for img in images])
    _prov(cfg, command, stem + ".prj", stem + ".geom")


def _trajectory_poses(cfg, args):
    path = getattr(args, "trajectory", None)
    if path:
        poses, _ = formats.read_trajectory_csv(path)
        return poses
    pcfg = cfgmod.planner_config(cfg)
    start = ViewAngles(cfg["planner.start_phi_deg"], cfg["planner.start_theta_deg"])
    return circular_trajectory(start, pcfg).poses


def cmd_simulate(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    vol = _load_phantom(_phantom_stem(cfg, args))
    poses = _trajectory_poses(cfg, args)
    images, geom = _simulate_stack(cfg, vol, poses, cfg["noise.photons"])
    _write_stack(cfg, images, geom, os.path.join(cfg["out"], "projections"),
                 "simulate")


def cmd_map(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    vol = _load_phantom(_phantom_stem(cfg, args))
    phi_grid, theta_grid = default_grids(cfg["map.phi_step_deg"],
                                         cfg["map.theta_step_deg"])
    values = detectability_map(vol, phi_grid, theta_grid,
                               cfgmod.detect_config(cfg))
    map_path = os.path.join(cfg["out"], "map.csv")
    formats.write_map_csv(map_path, phi_grid, theta_grid, values)
    formats.write_pgm(os.path.join(cfg["out"], "map.pgm"), values.T)
    _prov(cfg, "map", map_path, os.path.join(cfg["out"], "map.pgm"))


def cmd_dataset(cfg, args) -> None:
    gen = DatasetGenConfig(
        out_dir=os.path.join(cfg["out"], "dataset"),
        phantom=cfgmod.phantom_params(cfg),
        geom=cfgmod.detector(cfg),
        detect=cfgmod.detect_config(cfg, cfg["dataset.fluence"]),
        fluence=cfg["dataset.fluence"],
        phi_step=cfg["map.phi_step_deg"],
        theta_step=cfg["map.theta_step_deg"],
        test_sims=cfg["dataset.test_sims"],
    )
    manifest = generate_dataset(cfg["dataset.sims"], cfg["dataset.seed"], gen)
    _prov(cfg, "dataset", os.path.join(gen.out_dir, "manifest.txt"))
    print(f"dataset: {len(manifest.sims)} simulations in {gen.out_dir}")


def cmd_train(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    manifest_path = args.manifest or os.path.join(cfg["out"], "dataset",
                                                  "manifest.txt")
    manifest = read_manifest(manifest_path)
    geom = cfgmod.detector(cfg)
    model = build_model(DEFAULT_ARCH, (geom.rows, geom.cols),
                        seed=cfg["train.seed"])
    model, curve = train(model, manifest, cfgmod.train_config(cfg))
    model_path = os.path.join(cfg["out"], "model.mdl")
    formats.write_model(model_path, model)
    loss_path = os.path.join(cfg["out"], "loss.csv")
    with open(loss_path, "w") as fh:
        fh.write("epoch,mse\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v!r}\n")
    _prov(cfg, "train", model_path, loss_path)
    print(f"train: final epoch MSE {curve[-1]:.3e}")


def _predictor(cfg, vol):
    kind = cfg["planner.predictor"]
    if kind == "oracle":
        return OracleDetectability(vol, cfgmod.detect_config(cfg),
                                   delta_phi=cfg["planner.delta_phi_deg"])
    if kind == "learned":
        model_path = cfg["planner.model"] or os.path.join(cfg["out"], "model.mdl")
        return LearnedRegressor(formats.read_model(model_path))
    raise ConfigError(f"unknown predictor {kind!r}")


def _plan_trajectory(cfg, vol, photons) -> Trajectory:
    predictor = _predictor(cfg, vol)
    sim = SimulationContext(
        vol, cfgmod.detector(cfg), cfgmod.spectrum(cfg, photons),
        noise_seed=cfg["noise.seed"] if photons > 0 else None)
    start = ViewAngles(cfg["planner.start_phi_deg"], cfg["planner.start_theta_deg"])
    return plan(predictor, sim, start, cfgmod.planner_config(cfg))


def _write_trajectory(cfg, traj, stem, command):
    formats.write_trajectory_csv(stem + ".csv", traj)
    formats.write_scores_csv(stem + "_scores.csv", traj.all_scores)
    _prov(cfg, command, stem + ".csv", stem + "_scores.csv")


def cmd_plan(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    if getattr(args, "predictor", None):
        cfg.set("planner.predictor", args.predictor)
    if getattr(args, "lam", None) is not None:
        cfg.set("planner.lambda", args.lam)
    vol = _load_phantom(_phantom_stem(cfg, args))
    traj = _plan_trajectory(cfg, vol, cfg["noise.photons"])
    _write_trajectory(cfg, traj, os.path.join(cfg["out"], "trajectory"), "plan")


def _load_stack(cfg, stem):
    pixels, _ = formats.read_projections(stem + ".prj")
    matrices, poses = formats.read_geometry(stem + ".geom")
    if len(matrices) != len(pixels):
        raise FileFormatError(f"{stem}: projection/geometry count mismatch")
    return [
        ProjectionImage(np.maximum(img, 0.0), pose, matrix, clean=True)
        for img, matrix, pose in zip(pixels, matrices, poses)
    ]


def _reconstruct(cfg, projections, geom):
    rcfg = cfgmod.recon_config(cfg)
    masks = None
    if rcfg.mask_radius is not None:
        masks = circle_masks(projections, geom, rcfg.mask_radius)
    return cgls(projections, masks, rcfg, geom)


def cmd_recon(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    stem = args.projections or os.path.join(cfg["out"], "projections")
    projections = _load_stack(cfg, stem)
    recon, residuals = _reconstruct(cfg, projections, cfgmod.detector(cfg))
    recon_path = os.path.join(cfg["out"], "recon.vol")
    formats.write_volume(recon_path, recon.values, recon.voxel_size)
    res_path = os.path.join(cfg["out"], "residuals.csv")
    formats.write_residuals_csv(res_path, residuals)
    _prov(cfg, "recon", recon_path, res_path)


def _evaluate(cfg, recon: ReconVolume, reference: ReconVolume, screws):
    half = cfg["metrics.profile_half_mm"]
    spacing = cfg["metrics.profile_spacing_mm"]
    fwhm_val = float(np.mean([
        screw_fwhm(recon, s, half_length=half, spacing=spacing) for s in screws
    ]))
    thread_val = float(np.mean([
        thread_peak(recon, screw_thread_patch(s, recon.values.shape,
                                              recon.voxel_size),
                    s.thread_pitch)
        for s in screws
    ]))
    k = screws_slice_index(recon.values.shape, recon.voxel_size, screws)
    ssim_val = ssim(recon.values[:, :, k], reference.values[:, :, k])
    return fwhm_val, thread_val, ssim_val


def cmd_eval(cfg, args) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    values, voxel = formats.read_volume(args.recon)
    recon = ReconVolume(values, voxel)
    ref_values, ref_voxel = formats.read_volume(args.reference)
    reference = ReconVolume(ref_values, ref_voxel)
    screws_path = args.screws or os.path.join(cfg["out"], "phantom_screws.txt")
    screws = formats.read_screws(screws_path)
    row = (args.label, *_evaluate(cfg, recon, reference, screws))
    path = os.path.join(cfg["out"], "metrics.csv")
    formats.write_metrics_csv(path, [row])
    _prov(cfg, "eval", path)
    print(f"eval: fwhm={row[1]:.3f} mm thread={row[2]:.4f} ssim={row[3]:.4f}")


# ---------------------------------------------------------------------------
# experiment orchestration


def _level_label(photons: float) -> str:
    return "none" if photons <= 0 else f"{photons:g}".replace("+", "")


def _slice_pgm(cfg, recon: ReconVolume, screws, path: str):
    k = screws_slice_index(recon.values.shape, recon.voxel_size, screws)
    formats.write_pgm(path, recon.values[:, :, k].T)


def _run_cell(cfg, vol, gt, kind: str, photons: float):
    """One protocol cell: trajectory -> projections -> recon -> metrics."""
    label = f"{kind}_{_level_label(photons)}"
    cell_dir = os.path.join(cfg["out"], label)
    os.makedirs(cell_dir, exist_ok=True)
    start = ViewAngles(cfg["planner.start_phi_deg"], cfg["planner.start_theta_deg"])
    if kind == "circular":
        traj = circular_trajectory(start, cfgmod.planner_config(cfg))
    else:
        traj = _plan_trajectory(cfg, vol, photons)
    _write_trajectory(cfg, traj, os.path.join(cell_dir, "trajectory"),
                      "experiment")
    images, geom = _simulate_stack(cfg, vol, traj.poses, photons)
    _write_stack(cfg, images, geom, os.path.join(cell_dir, "projections"),
                 "experiment")
    recon, residuals = _reconstruct(cfg, images, geom)
    formats.write_volume(os.path.join(cell_dir, "recon.vol"), recon.values,
                         recon.voxel_size)
    formats.write_residuals_csv(os.path.join(cell_dir, "residuals.csv"),
                                residuals)
    _slice_pgm(cfg, recon, vol.screws, os.path.join(cell_dir, "slice.pgm"))
    _prov(cfg, "experiment", os.path.join(cell_dir, "recon.vol"),
          os.path.join(cell_dir, "residuals.csv"),
          os.path.join(cell_dir, "slice.pgm"))
    return (label, *_evaluate(cfg, recon, gt, vol.screws))


def _cell_worker(payload):
    cfg_values, kind, photons, out = payload
    cfg = cfgmod.Config(cfg_values)
    cfg.set("out", out)
    vol = _load_phantom(os.path.join(out, "phantom"))
    gt_values, gt_voxel = formats.read_volume(os.path.join(out, "gt", "recon.vol"))
    return _run_cell(cfg, vol, ReconVolume(gt_values, gt_voxel), kind, photons)


def _experiment_table(cfg) -> None:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    vol = build_phantom(cfgmod.phantom_params(cfg), cfg["phantom.seed"])
    _write_phantom(cfg, vol, os.path.join(out, "phantom"), "experiment")

    geom = cfgmod.detector(cfg)
    start = ViewAngles(cfg["planner.start_phi_deg"], cfg["planner.start_theta_deg"])
    circ = circular_trajectory(start, cfgmod.planner_config(cfg))
    gt_dir = os.path.join(out, "gt")
    os.makedirs(gt_dir, exist_ok=True)
    gt, residuals = ground_truth_recon(vol, circ.poses,
                                       cfgmod.recon_config(cfg), geom)
    formats.write_volume(os.path.join(gt_dir, "recon.vol"), gt.values,
                         gt.voxel_size)
    formats.write_residuals_csv(os.path.join(gt_dir, "residuals.csv"), residuals)
    _slice_pgm(cfg, gt, vol.screws, os.path.join(gt_dir, "slice.pgm"))
    _prov(cfg, "experiment", os.path.join(gt_dir, "recon.vol"),
          os.path.join(gt_dir, "residuals.csv"), os.path.join(gt_dir, "slice.pgm"))
    # Metrics are computed from the files just written so results do not
    # depend on float32 storage happening before or after evaluation.
    gt_loaded = ReconVolume(*formats.read_volume(os.path.join(gt_dir, "recon.vol")))

    levels = cfgmod.noise_levels(cfg)
    cells = [(kind, lv) for kind in ("circular", "task") for lv in levels]
    rows = [("ground_truth", *_evaluate(cfg, gt_loaded, gt_loaded, vol.screws))]
    # Cells always read the phantom and ground truth back from disk so the
    # results are identical whether they run inline or in worker processes.
    payloads = [(cfg.values(), kind, lv, out) for kind, lv in cells]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            rows.extend(pool.map(_cell_worker, payloads))
    else:
        rows.extend(_cell_worker(p) for p in payloads)
    path = os.path.join(out, "metrics.csv")
    formats.write_metrics_csv(path, rows)
    _prov(cfg, "experiment", path)
    for row in rows:
        print(f"{row[0]}: fwhm={row[1]:.3f} thread={row[2]:.4f} ssim={row[3]:.4f}")


def _experiment_noise(cfg) -> None:
    """Noise-robustness preset: angular mismatch of plans vs the noiseless plan."""
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    vol = build_phantom(cfgmod.phantom_params(cfg), cfg["phantom.seed"])
    _write_phantom(cfg, vol, os.path.join(out, "phantom"), "experiment")
    reference = _plan_trajectory(cfg, vol, 0.0)
    _write_trajectory(cfg, reference, os.path.join(out, "plan_noiseless"),
                      "experiment")
    path = os.path.join(out, "noise_robustness.csv")
    with open(path, "w") as fh:
        fh.write("photons,mean_angular_mismatch_deg,std_angular_mismatch_deg\n")
        for photons in cfgmod.noise_levels(cfg):
            if photons <= 0:
                continue
            traj = _plan_trajectory(cfg, vol, photons)
            _write_trajectory(
                cfg, traj,
                os.path.join(out, f"plan_{_level_label(photons)}"), "experiment")
            mean, std = angular_distance(traj.angles_array(),
                                         reference.angles_array())
            fh.write(f"{photons:g},{mean!r},{std!r}\n")
            print(f"noise {photons:g}: mismatch {mean:.3f} +- {std:.3f} deg")
    _prov(cfg, "experiment", path)


def cmd_experiment(cfg, args) -> None:
    if args.preset == "noise":
        _experiment_noise(cfg)
    else:
        _experiment_table(cfg)


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "map": cmd_map,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "plan": cmd_plan,
    "recon": cmd_recon,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
        return 0
    except ConfigError as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error:numerical: {exc}", file=sys.stderr)
        return 3
    except (FileFormatError, OSError) as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
