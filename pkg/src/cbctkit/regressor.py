"""Small convolutional network regressing next-view detectability.

One downsampled noisy projection goes in; 11 scores come out, one per
candidate out-of-plane offset {-25..+25} degrees at the next in-plane
step. Everything (forward, backprop, SGD with momentum) is plain numpy
so fixed-seed runs are reproducible bit for bit in sequential mode.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import rotate as ndrotate

from . import formats
from .detectability import DetectabilityConfig, default_grids, view_detectability
from .errors import NumericalError
from .geometry import DetectorGeometry, ViewAngles, pose_to_matrix
from .phantom import PhantomParams, build_phantom
from .projector import (
    default_spectrum,
    inject_noise,
    log_normalize,
    polychromatic_project,
)

# Candidate out-of-plane offsets predicted per image, in degrees.
CANDIDATE_OFFSETS = tuple(float(v) for v in np.arange(-25.0, 26.0, 5.0))
N_OUTPUTS = len(CANDIDATE_OFFSETS)  # 11

DEFAULT_ARCH = (
    ("conv", 8), ("batchnorm",), ("relu",), ("maxpool", 2),
    ("conv", 16), ("batchnorm",), ("relu",), ("maxpool", 2),
    ("conv", 32), ("batchnorm",), ("relu",), ("maxpool", 2),
    ("conv", 32), ("batchnorm",), ("relu",), ("maxpool", 2),
    ("flatten",), ("dense", 64), ("relu",), ("dense", N_OUTPUTS),
)

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# layers


class _Conv:
    """3x3 stride-1 same-padding convolution."""

    def __init__(self, key, in_ch, out_ch):
        self.key = key
        self.in_ch, self.out_ch = in_ch, out_ch

    def init_params(self, rng):
        fan_in = self.in_ch * 9
        return {
            f"{self.key}.weight": rng.normal(
                0.0, np.sqrt(2.0 / fan_in), (self.out_ch, self.in_ch, 3, 3)),
            f"{self.key}.bias": np.zeros(self.out_ch),
        }

    def trainable(self):
        return [f"{self.key}.weight", f"{self.key}.bias"]

    def forward(self, x, params, train, update):
        w = params[f"{self.key}.weight"]
        b = params[f"{self.key}.bias"]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.moveaxis(y, 3, 1) + b[None, :, None, None], win

    def backward(self, grad_y, cache, params, grads):
        w = params[f"{self.key}.weight"]
        win = cache
        grads[f"{self.key}.bias"] = grad_y.sum(axis=(0, 2, 3))
        grads[f"{self.key}.weight"] = np.tensordot(
            grad_y, win, axes=([0, 2, 3], [0, 2, 3]))
        gyp = np.pad(grad_y, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gwin = sliding_window_view(gyp, (3, 3), axis=(2, 3))
        wr = w[:, :, ::-1, ::-1]
        grad_x = np.tensordot(gwin, wr, axes=([1, 4, 5], [0, 2, 3]))
        return np.ascontiguousarray(np.moveaxis(grad_x, 3, 1))


class _BatchNorm:
    def __init__(self, key, ch):
        self.key = key
        self.ch = ch

    def init_params(self, rng):
        return {
            f"{self.key}.gamma": np.ones(self.ch),
            f"{self.key}.beta": np.zeros(self.ch),
            f"{self.key}.running_mean": np.zeros(self.ch),
            f"{self.key}.running_var": np.ones(self.ch),
        }

    def trainable(self):
        return [f"{self.key}.gamma", f"{self.key}.beta"]

    def forward(self, x, params, train, update):
        gamma = params[f"{self.key}.gamma"][None, :, None, None]
        beta = params[f"{self.key}.beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update:
                params[f"{self.key}.running_mean"] = (
                    (1 - _BN_MOMENTUM) * params[f"{self.key}.running_mean"]
                    + _BN_MOMENTUM * mean)
                params[f"{self.key}.running_var"] = (
                    (1 - _BN_MOMENTUM) * params[f"{self.key}.running_var"]
                    + _BN_MOMENTUM * var)
        else:
            mean = params[f"{self.key}.running_mean"]
            var = params[f"{self.key}.running_var"]
        inv_std = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * xhat + beta, (xhat, inv_std, train)

    def backward(self, grad_y, cache, params, grads):
        xhat, inv_std, train = cache
        gamma = params[f"{self.key}.gamma"]
        grads[f"{self.key}.gamma"] = (grad_y * xhat).sum(axis=(0, 2, 3))
        grads[f"{self.key}.beta"] = grad_y.sum(axis=(0, 2, 3))
        gx_hat = grad_y * gamma[None, :, None, None]
        if not train:
            return gx_hat * inv_std[None, :, None, None]
        m = grad_y.shape[0] * grad_y.shape[2] * grad_y.shape[3]
        sum_g = gx_hat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (gx_hat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (
            m * gx_hat - sum_g - xhat * sum_gx)


class _ReLU:
    def __init__(self, key):
        self.key = key

    def init_params(self, rng):
        return {}

    def trainable(self):
        return []

    def forward(self, x, params, train, update):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad_y, cache, params, grads):
        return grad_y * cache


class _Tanh:
    def __init__(self, key):
        self.key = key

    def init_params(self, rng):
        return {}

    def trainable(self):
        return []

    def forward(self, x, params, train, update):
        y = np.tanh(x)
        return y, y

    def backward(self, grad_y, cache, params, grads):
        return grad_y * (1.0 - cache * cache)


class _Pool:
    def __init__(self, key, kind, size=2):
        if size != 2:
            raise ValueError("only 2x pooling is supported")
        self.key = key
        self.kind = kind

    def init_params(self, rng):
        return {}

    def trainable(self):
        return []

    def forward(self, x, params, train, update):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xc = x[:, :, : h2 * 2, : w2 * 2]
        windows = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, h2, w2, 4)
        if self.kind == "avg":
            return windows.mean(axis=-1), (x.shape, None)
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, grad_y, cache, params, grads):
        shape, idx = cache
        n, c, h, w = shape
        h2, w2 = h // 2, w // 2
        buf = np.zeros((n, c, h2, w2, 4))
        if self.kind == "avg":
            buf[:] = (grad_y / 4.0)[..., None]
        else:
            np.put_along_axis(buf, idx[..., None], grad_y[..., None], axis=-1)
        buf = buf.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        grad_x = np.zeros(shape)
        grad_x[:, :, : h2 * 2, : w2 * 2] = buf.reshape(n, c, h2 * 2, w2 * 2)
        return grad_x


class _Flatten:
    def __init__(self, key):
        self.key = key

    def init_params(self, rng):
        return {}

    def trainable(self):
        return []

    def forward(self, x, params, train, update):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_y, cache, params, grads):
        return grad_y.reshape(cache)


class _Dense:
    def __init__(self, key, in_features, out_features):
        self.key = key
        self.i, self.o = in_features, out_features

    def init_params(self, rng):
        return {
            f"{self.key}.weight": rng.normal(
                0.0, np.sqrt(2.0 / self.i), (self.i, self.o)),
            f"{self.key}.bias": np.zeros(self.o),
        }

    def trainable(self):
        return [f"{self.key}.weight", f"{self.key}.bias"]

    def forward(self, x, params, train, update):
        w = params[f"{self.key}.weight"]
        b = params[f"{self.key}.bias"]
        return x @ w + b, x

    def backward(self, grad_y, cache, params, grads):
        w = params[f"{self.key}.weight"]
        grads[f"{self.key}.weight"] = cache.T @ grad_y
        grads[f"{self.key}.bias"] = grad_y.sum(axis=0)
        return grad_y @ w.T


# ---------------------------------------------------------------------------
# model


@dataclass
class RegressorModel:
    arch: tuple
    input_dims: tuple[int, int]
    layers: list
    params: dict

    def param_order(self):
        order = []
        for layer in self.layers:
            for key in sorted(k for k in self.params if
                              k.startswith(layer.key + ".")):
                order.append(key)
        return order

    def trainable_keys(self):
        keys = []
        for layer in self.layers:
            keys.extend(layer.trainable())
        return keys

    def n_params(self) -> int:
        return int(sum(self.params[k].size for k in self.param_order()))


def build_model(arch=DEFAULT_ARCH, input_dims=(72, 96),
                seed: int = 0) -> RegressorModel:
    """Instantiate layers and seeded initial weights for an architecture."""
    rng = np.random.default_rng(seed)
    layers = []
    params = {}
    shape = (1, input_dims[0], input_dims[1])  # (C, H, W)
    flat = None
    for i, spec in enumerate(arch):
        kind = spec[0]
        key = f"L{i}"
        if kind == "conv":
            layer = _Conv(key, shape[0], int(spec[1]))
            shape = (int(spec[1]), shape[1], shape[2])
        elif kind == "batchnorm":
            layer = _BatchNorm(key, shape[0])
        elif kind == "relu":
            layer = _ReLU(key)
        elif kind == "tanh":
            layer = _Tanh(key)
        elif kind in ("maxpool", "avgpool"):
            layer = _Pool(key, kind[:3], int(spec[1]))
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            layer = _Flatten(key)
            flat = shape[0] * shape[1] * shape[2]
        elif kind == "dense":
            if flat is None:
                raise ValueError("dense layer requires a preceding flatten")
            layer = _Dense(key, flat, int(spec[1]))
            flat = int(spec[1])
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        params.update(layer.init_params(rng))
        layers.append(layer)
    if flat != N_OUTPUTS:
        raise ValueError(f"architecture must end in {N_OUTPUTS} outputs, "
                         f"got {flat}")
    for v in params.values():
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite initial weights")
    return RegressorModel(tuple(tuple(s) for s in arch), tuple(input_dims),
                          layers, params)


def _forward_batch(model, x, train: bool, update: bool):
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x, model.params, train, update)
        caches.append(cache)
    return x, caches


def _backward_batch(model, grad_y, caches):
    grads = {}
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        grad_y = layer.backward(grad_y, cache, model.params, grads)
    return grads


def forward(model: RegressorModel, image: np.ndarray) -> np.ndarray:
    """Deterministic inference on one image; batch norm uses running stats."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.input_dims:
        raise ValueError(
            f"input shape {image.shape} does not match model {model.input_dims}")
    out, _ = _forward_batch(model, image[None, None], train=False, update=False)
    return out[0]


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean squared error over unmasked targets and its gradient."""
    m = np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count == 0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - target) * m
    loss = float(np.sum(diff * diff) / count)
    return loss, 2.0 * diff / count


def normalize_input(image: np.ndarray) -> np.ndarray:
    """Per-image zero-mean unit-variance normalization."""
    image = np.asarray(image, dtype=np.float64)
    std = float(image.std())
    return (image - image.mean()) / max(std, 1e-12)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad optimizer hyperparameters")


def _augment_batch(x, rng):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        angle = rng.uniform(-10.0, 10.0)
        out[i, 0] = ndrotate(x[i, 0], angle, reshape=False, order=1,
                             mode="constant", cval=0.0)
    return out


def train(model: RegressorModel, data, hyper: TrainConfig | None = None):
    """SGD with momentum on the masked MSE; returns the per-epoch loss curve.

    ``data`` is (inputs, targets, masks) with inputs shaped (n, rows,
    cols), or a DatasetManifest whose train split is loaded.
    """
    hyper = hyper or TrainConfig()
    if isinstance(data, DatasetManifest):
        inputs, targets, masks, _ = load_samples(data, split="train")
    else:
        inputs, targets, masks = data
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3:
        inputs = inputs[:, None]
    targets = np.asarray(targets, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty training set")

    rng = np.random.default_rng(hyper.seed)
    velocity = {k: np.zeros_like(model.params[k]) for k in model.trainable_keys()}
    curve = []
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, hyper.batch_size):
            sel = perm[start:start + hyper.batch_size]
            xb = inputs[sel]
            if hyper.augment:
                xb = _augment_batch(xb, rng)
            pred, caches = _forward_batch(model, xb, train=True, update=True)
            loss, grad = masked_mse(pred, targets[sel], masks[sel])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"training diverged at epoch {epoch + 1} (loss={loss})")
            losses.append(loss)
            grads = _backward_batch(model, grad, caches)
            for key in velocity:
                velocity[key] = (hyper.momentum * velocity[key]
                                 - hyper.learning_rate * grads[key])
                model.params[key] = model.params[key] + velocity[key]
        curve.append(float(np.mean(losses)))
    return model, curve


def gradient_check(model: RegressorModel, sample, n_checks: int = 120,
                   step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error of backprop against central finite differences."""
    if model.n_params() > 10_000:
        raise ValueError("gradient check is for models with <= 1e4 parameters")
    image, target, mask = sample
    x = np.asarray(image, dtype=np.float64)[None, None]

    def loss_only():
        pred, _ = _forward_batch(model, x, train=True, update=False)
        return masked_mse(pred, target[None], mask[None])[0]

    pred, caches = _forward_batch(model, x, train=True, update=False)
    _, grad = masked_mse(pred, target[None], mask[None])
    grads = _backward_batch(model, grad, caches)

    keys = model.trainable_keys()
    sizes = [model.params[k].size for k in keys]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(n_checks, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in sorted(int(c) for c in chosen):
        ki = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[ki]
        idx = np.unravel_index(flat - offsets[ki], model.params[key].shape)
        orig = model.params[key][idx]
        model.params[key][idx] = orig + step
        hi = loss_only()
        model.params[key][idx] = orig - step
        lo = loss_only()
        model.params[key][idx] = orig
        numeric = (hi - lo) / (2.0 * step)
        analytic = grads[key][idx]
        denom = max(abs(numeric), abs(analytic))
        if denom > 1e-12:
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class TrainingSample:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    pose: ViewAngles
    sim_id: int


@dataclass
class SimRecord:
    sim_id: int
    phantom_seed: int
    fluence: float
    images: str
    geometry: str
    map: str
    split: str


@dataclass
class DatasetManifest:
    base_dir: str
    seed: int
    phi_step: float
    theta_step: float
    sims: list

    def records(self, split=None):
        return [s for s in self.sims if split is None or s.split == split]


@dataclass
class DatasetGenConfig:
    out_dir: str
    phantom: PhantomParams = field(default_factory=PhantomParams)
    geom: DetectorGeometry = field(default_factory=DetectorGeometry)
    detect: DetectabilityConfig = field(default_factory=DetectabilityConfig)
    fluence: float = 1e5
    phi_step: float = 5.0
    theta_step: float = 5.0
    test_sims: int = 1


def _sim_seed(seed: int, sim: int, purpose: int, extra: int = 0) -> int:
    ss = np.random.SeedSequence([seed, sim, purpose, extra])
    return int(ss.generate_state(1)[0])


def generate_dataset(n_sims: int, seed: int,
                     config: DatasetGenConfig) -> DatasetManifest:
    """Simulate phantoms on the view grid and write dataset files.

    Per simulation and grid node, the clean projection feeds the ground
    truth detectability label and a noisy projection becomes the network
    input; regeneration with the same seed reproduces every file.
    """
    if n_sims < 1:
        raise ValueError("need at least one simulation")
    os.makedirs(config.out_dir, exist_ok=True)
    phi_grid, theta_grid = default_grids(config.phi_step, config.theta_step)
    spectrum = default_spectrum(config.fluence)
    detect = replace(config.detect, spectrum=spectrum)
    sims = []
    for sim in range(n_sims):
        phantom_seed = _sim_seed(seed, sim, 0)
        vol = build_phantom(config.phantom, phantom_seed)
        images = np.zeros((len(phi_grid) * len(theta_grid),
                           config.geom.rows, config.geom.cols), dtype=np.float64)
        d2 = np.zeros((len(phi_grid), len(theta_grid)))
        matrices, poses = [], []
        node = 0
        for i, phi in enumerate(phi_grid):
            for j, theta in enumerate(theta_grid):
                pose = ViewAngles(float(phi), float(theta))
                fine_counts = polychromatic_project(
                    vol, pose_to_matrix(pose, detect.geom), detect.geom,
                    spectrum, detect.table)
                d2[i, j] = view_detectability(vol, pose, detect,
                                              counts=fine_counts)
                matrix = pose_to_matrix(pose, config.geom)
                counts = polychromatic_project(vol, matrix, config.geom,
                                               spectrum, detect.table)
                noisy = inject_noise(counts, _sim_seed(seed, sim, 1, node))
                images[node] = log_normalize(noisy, spectrum)
                matrices.append(matrix)
                poses.append(pose)
                node += 1
        stem = f"sim{sim:03d}"
        rec = SimRecord(
            sim_id=sim,
            phantom_seed=phantom_seed,
            fluence=config.fluence,
            images=f"{stem}_noisy.prj",
            geometry=f"{stem}_noisy.geom",
            map=f"{stem}_map.csv",
            split="test" if sim >= n_sims - config.test_sims else "train",
        )
        formats.write_projections(os.path.join(config.out_dir, rec.images),
                                  images, config.geom.pixel_pitch)
        formats.write_geometry(os.path.join(config.out_dir, rec.geometry),
                               matrices, poses)
        formats.write_map_csv(os.path.join(config.out_dir, rec.map),
                              phi_grid, theta_grid, d2)
        sims.append(rec)
    manifest = DatasetManifest(config.out_dir, seed, config.phi_step,
                               config.theta_step, sims)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    records = {
        "version": 1,
        "seed": manifest.seed,
        "phi_step": manifest.phi_step,
        "theta_step": manifest.theta_step,
        "n_sims": len(manifest.sims),
    }
    for rec in manifest.sims:
        prefix = f"sim{rec.sim_id}"
        records[f"{prefix}.phantom_seed"] = rec.phantom_seed
        records[f"{prefix}.fluence"] = rec.fluence
        records[f"{prefix}.images"] = rec.images
        records[f"{prefix}.geometry"] = rec.geometry
        records[f"{prefix}.map"] = rec.map
        records[f"{prefix}.split"] = rec.split
    formats.write_records(os.path.join(manifest.base_dir, "manifest.txt"),
                          records)


def read_manifest(path: str) -> DatasetManifest:
    records = formats.read_records(path)
    base = os.path.dirname(os.path.abspath(path))
    n = int(records["n_sims"])
    sims = []
    for i in range(n):
        prefix = f"sim{i}"
        sims.append(SimRecord(
            sim_id=i,
            phantom_seed=int(records[f"{prefix}.phantom_seed"]),
            fluence=float(records[f"{prefix}.fluence"]),
            images=records[f"{prefix}.images"],
            geometry=records[f"{prefix}.geometry"],
            map=records[f"{prefix}.map"],
            split=records[f"{prefix}.split"],
        ))
    splits = {s.split for s in sims}
    if not splits <= {"train", "test"}:
        raise ValueError(f"unknown split names: {splits}")
    return DatasetManifest(base, int(records["seed"]),
                           float(records["phi_step"]),
                           float(records["theta_step"]), sims)


def assemble_targets(map_values: np.ndarray, phi_grid, theta_grid,
                     phi_step: float):
    """Per-node 11-target vectors from a detectability map.

    Targets are min-max normalized over the simulation; offsets falling
    outside the theta grid are masked invalid.
    """
    lo, hi = float(map_values.min()), float(map_values.max())
    span = hi - lo if hi > lo else 1.0
    norm = (map_values - lo) / span
    n_phi, n_theta = norm.shape
    theta_step = float(theta_grid[1] - theta_grid[0]) if n_theta > 1 else 5.0
    targets = np.zeros((n_phi * n_theta, N_OUTPUTS))
    masks = np.zeros((n_phi * n_theta, N_OUTPUTS), dtype=bool)
    node = 0
    for i in range(n_phi):
        i_next = (i + 1) % n_phi
        for j in range(n_theta):
            for k, off in enumerate(CANDIDATE_OFFSETS):
                j_off = j + int(round(off / theta_step))
                if 0 <= j_off < n_theta:
                    targets[node, k] = norm[i_next, j_off]
                    masks[node, k] = True
            node += 1
    return targets, masks


def load_samples(manifest: DatasetManifest, split: str | None = None):
    """Load (inputs, targets, masks, poses) for a manifest split."""
    inputs, targets, masks, poses = [], [], [], []
    for rec in manifest.records(split):
        images, _ = formats.read_projections(
            os.path.join(manifest.base_dir, rec.images))
        _, image_poses = formats.read_geometry(
            os.path.join(manifest.base_dir, rec.geometry))
        phi_grid, theta_grid, d2 = formats.read_map_csv(
            os.path.join(manifest.base_dir, rec.map))
        t, m = assemble_targets(d2, phi_grid, theta_grid, manifest.phi_step)
        if len(images) != t.shape[0]:
            raise ValueError(f"sim {rec.sim_id}: image count does not match grid")
        inputs.append(np.stack([normalize_input(img) for img in images]))
        targets.append(t)
        masks.append(m)
        poses.extend(image_poses)
    return (np.concatenate(inputs), np.concatenate(targets),
            np.concatenate(masks), poses)
