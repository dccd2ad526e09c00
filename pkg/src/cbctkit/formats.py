"""Plain-text and raw-float file formats.

Every format is a one-line ASCII header followed by raw little-endian
values, or a plain CSV; nothing here needs the toolkit to be inspected.

* VOL1: ``VOL1 nx ny nz voxel_mm`` + nx*ny*nz float32 densities, x fastest.
* LBL1: ``LBL1 nx ny nz voxel_mm`` + one uint8 label per voxel, same order.
* PRJ1: ``PRJ1 n rows cols pixel_mm`` + n*rows*cols float32, row-major
  per image. Companion geometry file: one line per projection holding the
  12 row-major projection-matrix entries followed by ``phi theta``.
* MDL1: ASCII layer list + float32 weight tensors in declaration order.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .errors import FileFormatError
from .geometry import ProjectionMatrix, ViewAngles


def _fmt(x: float) -> str:
    """Shortest decimal that round-trips a float64."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# volumes


def write_volume(path: str, densities: np.ndarray, voxel_size: float) -> None:
    densities = np.asarray(densities)
    nx, ny, nz = densities.shape
    with open(path, "wb") as fh:
        fh.write(f"VOL1 {nx} {ny} {nz} {_fmt(voxel_size)}\n".encode())
        fh.write(densities.astype("<f4").ravel(order="F").tobytes())


def read_volume(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 5 or header[0] != "VOL1":
            raise FileFormatError(f"{path}: not a VOL1 file")
        nx, ny, nz = (int(v) for v in header[1:4])
        voxel = float(header[4])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != nx * ny * nz:
        raise FileFormatError(f"{path}: expected {nx * ny * nz} voxels, "
                              f"got {data.size}")
    return data.reshape((nx, ny, nz), order="F").astype(np.float64), voxel


def write_labels(path: str, labels: np.ndarray, voxel_size: float) -> None:
    labels = np.asarray(labels)
    nx, ny, nz = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"LBL1 {nx} {ny} {nz} {_fmt(voxel_size)}\n".encode())
        fh.write(labels.astype(np.uint8).ravel(order="F").tobytes())


def read_labels(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 5 or header[0] != "LBL1":
            raise FileFormatError(f"{path}: not a LBL1 file")
        nx, ny, nz = (int(v) for v in header[1:4])
        voxel = float(header[4])
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != nx * ny * nz:
        raise FileFormatError(f"{path}: expected {nx * ny * nz} voxels, "
                              f"got {data.size}")
    return data.reshape((nx, ny, nz), order="F").copy(), voxel


# ---------------------------------------------------------------------------
# projection stacks


def write_projections(path: str, images: np.ndarray, pixel_size: float) -> None:
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError("projection stack must be (n, rows, cols)")
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(f"PRJ1 {n} {rows} {cols} {_fmt(pixel_size)}\n".encode())
        fh.write(images.astype("<f4").tobytes())


def read_projections(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 5 or header[0] != "PRJ1":
            raise FileFormatError(f"{path}: not a PRJ1 file")
        n, rows, cols = (int(v) for v in header[1:4])
        pixel = float(header[4])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * rows * cols:
        raise FileFormatError(f"{path}: truncated projection stack")
    return data.reshape(n, rows, cols).astype(np.float64), pixel


def write_geometry(path: str, matrices, poses) -> None:
    """One line per projection: 12 matrix entries then phi theta."""
    with open(path, "w") as fh:
        for matrix, pose in zip(matrices, poses, strict=True):
            entries = " ".join(_fmt(v) for v in matrix.entries.ravel())
            fh.write(f"{entries} {_fmt(pose.phi)} {_fmt(pose.theta)}\n")


def read_geometry(path: str) -> tuple[list[ProjectionMatrix], list[ViewAngles]]:
    matrices, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 14:
                raise FileFormatError(
                    f"{path}:{lineno}: expected 14 values, got {len(parts)}")
            vals = [float(v) for v in parts]
            matrices.append(ProjectionMatrix(np.array(vals[:12]).reshape(3, 4)))
            poses.append(ViewAngles(vals[12], vals[13]))
    return matrices, poses


# ---------------------------------------------------------------------------
# CSV tables


def write_map_csv(path: str, phi_grid, theta_grid, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("phi,theta,d2\n")
        for i, phi in enumerate(phi_grid):
            for j, theta in enumerate(theta_grid):
                fh.write(f"{_fmt(phi)},{_fmt(theta)},{_fmt(values[i, j])}\n")


def read_map_csv(path: str):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 3:
        raise FileFormatError(f"{path}: expected phi,theta,d2 rows")
    phi = np.unique(rows[:, 0])
    theta = np.unique(rows[:, 1])
    values = np.full((len(phi), len(theta)), np.nan)
    pi = {v: i for i, v in enumerate(phi)}
    ti = {v: i for i, v in enumerate(theta)}
    for p, t, d in rows:
        values[pi[p], ti[t]] = d
    if np.any(np.isnan(values)):
        raise FileFormatError(f"{path}: detectability map is not a full grid")
    return phi, theta, values


def write_trajectory_csv(path: str, trajectory) -> None:
    with open(path, "w") as fh:
        fh.write("t,phi_deg,theta_deg,chosen_score\n")
        for t, pose in enumerate(trajectory.poses):
            score = trajectory.chosen_scores[t] if t < len(
                trajectory.chosen_scores) else float("nan")
            fh.write(f"{t},{_fmt(pose.phi)},{_fmt(pose.theta)},{_fmt(score)}\n")


def read_trajectory_csv(path: str):
    """Returns (poses, chosen_scores) from a trajectory CSV."""
    poses, scores = [], []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("t,phi_deg,theta_deg"):
            raise FileFormatError(f"{path}: not a trajectory CSV")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) < 3:
                continue
            poses.append(ViewAngles(float(parts[1]), float(parts[2])))
            scores.append(float(parts[3]) if len(parts) > 3 else float("nan"))
    return poses, scores


def write_scores_csv(path: str, all_scores) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(f"score_{i}" for i in range(11)) + "\n")
        for row in all_scores:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_residuals_csv(path: str, residuals) -> None:
    with open(path, "w") as fh:
        fh.write("iter,residual\n")
        for i, r in enumerate(residuals):
            fh.write(f"{i},{_fmt(r)}\n")


def write_metrics_csv(path: str, rows) -> None:
    """rows: iterable of (trajectory_id, fwhm_mm, thread_peak, ssim)."""
    with open(path, "w") as fh:
        fh.write("trajectory_id,fwhm_mm,thread_peak,ssim\n")
        for name, f, tp, s in rows:
            fh.write(f"{name},{_fmt(f)},{_fmt(tp)},{_fmt(s)}\n")


# ---------------------------------------------------------------------------
# images


def write_pgm(path: str, image: np.ndarray) -> None:
    """8-bit P5 grayscale, min-max normalized."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip((image - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5 {image.shape[1]} {image.shape[0]} 255\n".encode())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# models


def write_model(path: str, model) -> None:
    with open(path, "wb") as fh:
        rows, cols = model.input_dims
        fh.write(f"MDL1 {rows} {cols} {len(model.arch)}\n".encode())
        for spec in model.arch:
            fh.write((" ".join(str(v) for v in spec) + "\n").encode())
        fh.write(b"END\n")
        for name in model.param_order():
            fh.write(model.params[name].astype("<f4").tobytes())


def read_model(path: str):
    from .regressor import RegressorModel, build_model

    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 4 or header[0] != "MDL1":
            raise FileFormatError(f"{path}: not a MDL1 file")
        rows, cols, n_layers = (int(v) for v in header[1:4])
        arch = []
        for _ in range(n_layers):
            parts = fh.readline().decode().split()
            arch.append(tuple(
                int(p) if p.lstrip("-").isdigit() else p for p in parts))
        end = fh.readline().decode().strip()
        if end != "END":
            raise FileFormatError(f"{path}: missing END marker")
        blob = fh.read()
    model = build_model(arch, (rows, cols), seed=0)
    offset = 0
    for name in model.param_order():
        size = model.params[name].size
        chunk = np.frombuffer(blob, dtype="<f4", count=size,
                              offset=offset * 4)
        if chunk.size != size:
            raise FileFormatError(f"{path}: truncated weight data")
        model.params[name] = chunk.astype(np.float64).reshape(
            model.params[name].shape)
        offset += size
    if offset * 4 != len(blob):
        raise FileFormatError(f"{path}: trailing weight data")
    return model


# ---------------------------------------------------------------------------
# screw placements


def write_screws(path: str, screws) -> None:
    records = {"n_screws": len(screws)}
    for i, s in enumerate(screws):
        records[f"screw{i}.tip"] = " ".join(_fmt(v) for v in s.tip_position)
        records[f"screw{i}.axis"] = " ".join(_fmt(v) for v in s.axis)
        records[f"screw{i}.length"] = _fmt(s.length)
        records[f"screw{i}.shaft_radius"] = _fmt(s.shaft_radius)
        records[f"screw{i}.thread_pitch"] = _fmt(s.thread_pitch)
        records[f"screw{i}.thread_depth"] = _fmt(s.thread_depth)
    write_records(path, records)


def read_screws(path: str):
    from .phantom import ScrewSpec

    records = read_records(path)
    screws = []
    for i in range(int(records["n_screws"])):
        tip = [float(v) for v in records[f"screw{i}.tip"].split()]
        axis = np.array([float(v) for v in records[f"screw{i}.axis"].split()])
        axis = axis / np.linalg.norm(axis)
        screws.append(ScrewSpec(
            length=float(records[f"screw{i}.length"]),
            shaft_radius=float(records[f"screw{i}.shaft_radius"]),
            thread_pitch=float(records[f"screw{i}.thread_pitch"]),
            thread_depth=float(records[f"screw{i}.thread_depth"]),
            tip_position=np.array(tip),
            axis=axis,
        ))
    return screws


# ---------------------------------------------------------------------------
# key=value records and provenance


def write_records(path: str, records: dict) -> None:
    with open(path, "w") as fh:
        for key, value in records.items():
            fh.write(f"{key}={value}\n")


def read_records(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FileFormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_provenance(path: str, command: str, config_hash: str,
                     seeds: dict) -> None:
    """Sidecar record for an output file (no wall-clock entropy)."""
    records = {"file": os.path.basename(path), "command": command,
               "config_sha256": config_hash}
    records.update({f"seed.{k}": v for k, v in sorted(seeds.items())})
    write_records(path + ".prov", records)
