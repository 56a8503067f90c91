"""Toy-scale training: objective, optimizer, schedule, augmentation, data.

The loop is deliberately small: sample square patches, augment with a
dihedral-group element, simulate measurements with the sensing operator,
unfold, take an RMSE step.  Everything is driven by one seeded generator
so a run is reproducible end to end.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, backward, ops
from .cassi import (HsiCube, Mask, SensingOperator, add_shot_noise,
                    forward_phi, shift_cube, unshift_cube, adjoint_phi)
from .denoiser import HstConfig, padded_shape
from .metrics import psnr, ssim
from .unfolding import Model, UnfoldConfig, build_model

__all__ = [
    "TrainError", "TrainConfig", "AdamState", "rmse_loss", "adam_step",
    "cosine_lr", "dihedral_apply", "dihedral_inverse", "augment",
    "synth_dataset", "adjoint_baseline", "train",
]


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``patch_size`` must be a multiple of 4*window so the denoiser's
    window grid tiles the unshifted axis without padding.  ``precision``
    is "double" (default) or "single"; single stores the weights in
    float32, intermediate arithmetic may still widen.
    """
    lr: float = 4e-4
    epochs: int = 30
    batch_size: int = 2
    patch_size: int = 48
    seed: int = 0
    shift_step: int = 2
    stages: int = 2
    channels: int = 8
    window: int = 4
    precision: str = "double"

    def __post_init__(self):
        for field in ("lr", "epochs", "batch_size", "patch_size",
                      "shift_step", "stages", "channels", "window"):
            v = getattr(self, field)
            if not v > 0:
                raise TrainError(f"{field} must be positive, got {v!r}")
        if self.precision not in ("double", "single"):
            raise TrainError(
                f"precision must be 'double' or 'single', "
                f"got {self.precision!r}")
        block = 4 * self.window
        if self.patch_size % block:
            raise TrainError(
                f"patch_size {self.patch_size} must be a multiple of "
                f"4*window = {block}")


# ---------------------------------------------------------------- loss

def _as_graph_tensor(x):
    from .autodiff import DiffTensor
    if isinstance(x, DiffTensor):
        return x
    return ops.constant(getattr(x, "data", x))


def rmse_loss(pred, truth):
    """sqrt(mean((pred - truth)^2)) as a differentiable scalar tensor."""
    p = _as_graph_tensor(pred)
    t = _as_graph_tensor(truth)
    if p.shape != t.shape:
        raise TrainError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = ops.sub(p, t)
    mse = ops.scale(ops.sum_all(ops.mul(d, d)), 1.0 / p.size)
    return ops.sqrt(mse)


# ------------------------------------------------------------ optimizer

class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, store: ParamStore):
        self.m = {n: np.zeros_like(store[n].values) for n in store.names()}
        self.v = {n: np.zeros_like(store[n].values) for n in store.names()}
        self.t = 0


def adam_step(store: ParamStore, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    if not lr > 0:
        raise TrainError(f"learning rate must be positive, got {lr!r}")
    names = store.names()
    staged = {}
    for name in names:
        if name not in grads:
            raise TrainError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != store[name].shape:
            raise TrainError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {store[name].shape}")
        staged[name] = g
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in names:
        g = staged[name]
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        store.overwrite(name, store[name].values - update)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_min at step total."""
    if total <= 0:
        raise TrainError(f"total steps must be positive, got {total}")
    if not 0 <= step <= total:
        raise TrainError(f"step {step} outside [0, {total}]")
    frac = 0.5 * (1.0 + math.cos(math.pi * step / total))
    return float(lr_min + (lr_max - lr_min) * frac)


# ----------------------------------------------------------- augmentation

def dihedral_apply(arr: np.ndarray, k: int) -> np.ndarray:
    """Apply element k of the 8-element dihedral group to axes (0, 1).

    k % 4 counts quarter-turns; k >= 4 adds a horizontal flip after the
    rotation.  Quarter-turns on non-square planes are rejected because
    they would change the shape.
    """
    arr = np.asarray(arr)
    if arr.ndim < 2:
        raise TrainError(f"need at least 2 spatial axes, got rank {arr.ndim}")
    if not 0 <= k < 8:
        raise TrainError(f"group element index {k} outside [0, 8)")
    r = k % 4
    if r in (1, 3) and arr.shape[0] != arr.shape[1]:
        raise TrainError(
            f"rotation selected for non-square plane {arr.shape[:2]}")
    out = np.rot90(arr, r, axes=(0, 1))
    if k >= 4:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def dihedral_inverse(k: int) -> int:
    if not 0 <= k < 8:
        raise TrainError(f"group element index {k} outside [0, 8)")
    return (4 - k) % 4 if k < 4 else k  # reflections are involutions


def augment(cube, seed) -> HsiCube:
    """Random flip/rotation, the same group element for every band."""
    data = getattr(cube, "data", cube)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    k = int(rng.integers(8))
    return HsiCube(dihedral_apply(np.asarray(data), k))


# ---------------------------------------------------------- synthetic data

def synth_dataset(n_scenes: int, height: int, width: int, bands: int,
                  seed: int = 0) -> list[HsiCube]:
    """Smooth random scenes in [0, 1].

    Each scene is a sum of Gaussian spatial bumps, every bump carrying its
    own broad Gaussian spectrum.  Spectra vary on a scale of one band
    extent or more, so neighboring bands correlate more strongly than
    neighboring pixels.
    """
    for name, v in (("n_scenes", n_scenes), ("height", height),
                    ("width", width), ("bands", bands)):
        if not v > 0:
            raise TrainError(f"{name} must be positive, got {v!r}")
    rng = np.random.default_rng(seed)
    hh = np.arange(height, dtype=np.float64)[:, None]
    ww = np.arange(width, dtype=np.float64)[None, :]
    lam = np.arange(bands, dtype=np.float64)
    extent = float(min(height, width))
    scenes = []
    for _ in range(n_scenes):
        acc = np.zeros((height, width, bands))
        for _ in range(int(rng.integers(4, 9))):
            ch = rng.uniform(0, height - 1)
            cw = rng.uniform(0, width - 1)
            ss = rng.uniform(extent / 12.0, extent / 6.0)
            cl = rng.uniform(0, bands - 1)
            sl = rng.uniform(bands, 2.0 * bands)
            amp = rng.uniform(0.3, 1.0)
            spatial = np.exp(-((hh - ch) ** 2 + (ww - cw) ** 2)
                             / (2.0 * ss * ss))
            spectrum = np.exp(-(lam - cl) ** 2 / (2.0 * sl * sl))
            acc += amp * spatial[:, :, None] * spectrum[None, None, :]
        acc -= acc.min()
        top = acc.max()
        if top > 0:
            acc /= top
        scenes.append(HsiCube(acc))
    return scenes


# ------------------------------------------------------------- baseline

def adjoint_baseline(y: np.ndarray, op: SensingOperator) -> HsiCube:
    """Mask-weighted back-projection of a measurement, re-ranged per band.

    The raw transpose applied to y carries the mask's intensity pattern,
    so each band is affinely rescaled to [0, 1] to make it a fair
    reference reconstruction.
    """
    cube = unshift_cube(adjoint_phi(op, np.asarray(y, dtype=np.float64)),
                        op.shift_step, op.width)
    out = np.empty_like(cube)
    for b in range(cube.shape[2]):
        band = cube[:, :, b]
        lo, hi = float(band.min()), float(band.max())
        out[:, :, b] = (band - lo) / (hi - lo) if hi > lo else 0.0
    return HsiCube(out)


# ---------------------------------------------------------------- loop

def _center_crop(data: np.ndarray, size: int) -> np.ndarray:
    h, w = data.shape[:2]
    oy = (h - size) // 2
    ox = (w - size) // 2
    return data[oy:oy + size, ox:ox + size, :]


def _cast_store(store: ParamStore, dtype) -> None:
    for name in store.names():
        store[name].values = store[name].values.astype(dtype)


def train(cfg: TrainConfig, scenes, val_scenes=None, *, mask=None,
          noise_bits=None, checkpoint_path=None, log_path=None,
          share_denoiser: bool = False):
    """Train an unfolding model on a list of spectral cubes.

    Returns (model, history) where history holds one record per epoch,
    including an epoch-0 entry evaluated before any update.  The same
    records are appended to ``log_path`` as JSON lines when given, and
    the model is checkpointed to ``checkpoint_path`` after every epoch.
    """
    if not scenes:
        raise TrainError("need at least one training scene")
    bands = scenes[0].bands
    for c in scenes:
        if c.bands != bands:
            raise TrainError("training scenes must share a band count")
        if c.height < cfg.patch_size or c.width < cfg.patch_size:
            raise TrainError(
                f"scene {c.data.shape} smaller than patch "
                f"{cfg.patch_size}")
    rng = np.random.default_rng(cfg.seed)
    if mask is None:
        mask = rng.uniform(0.0, 1.0, (cfg.patch_size, cfg.patch_size))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (cfg.patch_size, cfg.patch_size):
        raise TrainError(
            f"mask shape {mask.shape} must equal patch "
            f"({cfg.patch_size}, {cfg.patch_size})")
    op = SensingOperator(Mask(mask), bands, cfg.shift_step)
    ph, pw = padded_shape(cfg.patch_size, op.shifted_width, cfg.window)
    if pw - op.shifted_width > op.shifted_width - 1:
        raise TrainError(
            f"shifted width {op.shifted_width} too small to pad to {pw}")
    model = build_model(
        op, UnfoldConfig(stages=cfg.stages,
                         share_denoiser_weights=share_denoiser),
        HstConfig(channels=cfg.channels, window=cfg.window), seed=cfg.seed)
    if cfg.precision == "single":
        _cast_store(model.weights, np.float32)
    state = AdamState(model.weights)
    steps_per_epoch = max(1, math.ceil(len(scenes) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    def _eval_loss() -> float:
        vals = []
        for cube in scenes:
            truth = _center_crop(cube.data, cfg.patch_size)
            y = forward_phi(op, shift_cube(HsiCube(truth), cfg.shift_step))
            collect = {}
            model.reconstruct(y, op, collect)
            vals.append(float(rmse_loss(collect["tensor"], truth).values))
        return float(np.mean(vals))

    def _validate():
        if not val_scenes:
            return None, None
        ps, ss = [], []
        for cube in val_scenes:
            truth = _center_crop(cube.data, cfg.patch_size)
            y = forward_phi(op, shift_cube(HsiCube(truth), cfg.shift_step))
            recon = model.reconstruct(y, op)
            ps.append(psnr(recon.data, truth))
            ss.append(ssim(recon.data, truth))
        return float(np.mean(ps)), float(np.mean(ss))

    def _record(rec):
        history.append(rec)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if checkpoint_path:
            model.save(checkpoint_path)

    if log_path:
        open(log_path, "w").close()
    history = []
    t0 = time.perf_counter()
    try:
        vp, vs = _validate()
        loss0 = _eval_loss()
    except FloatingPointError as exc:
        raise TrainError(
            f"non-finite values during initial evaluation: {exc}") from exc
    _record({"epoch": 0, "loss": loss0,
             "lr": cosine_lr(0, total_steps, cfg.lr, 0.0),
             "val_psnr": vp, "val_ssim": vs,
             "seconds": time.perf_counter() - t0})

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        tick = time.perf_counter()
        order = rng.permutation(len(scenes))
        losses = []
        lr_now = cfg.lr
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            gsum = {n: np.zeros_like(state.m[n])
                    for n in model.weights.names()}
            for idx in chunk:
                data = scenes[int(idx)].data
                oy = int(rng.integers(data.shape[0] - cfg.patch_size + 1))
                ox = int(rng.integers(data.shape[1] - cfg.patch_size + 1))
                patch = data[oy:oy + cfg.patch_size,
                             ox:ox + cfg.patch_size, :]
                truth = dihedral_apply(patch, int(rng.integers(8)))
                y = forward_phi(op, shift_cube(HsiCube(truth),
                                               cfg.shift_step))
                if noise_bits is not None:
                    y = add_shot_noise(y, noise_bits,
                                       int(rng.integers(2 ** 31)))
                try:
                    with Tape() as tape:
                        collect = {}
                        model.reconstruct(y, op, collect)
                        loss_t = rmse_loss(collect["tensor"], truth)
                    loss_v = float(loss_t.values)
                    if not np.isfinite(loss_v):
                        raise FloatingPointError(
                            f"loss value {loss_v!r}")
                    grads = backward(tape, loss_t, params=model.weights)
                except FloatingPointError as exc:
                    raise TrainError(
                        f"non-finite loss at epoch {epoch}, step {step} "
                        f"(lr {lr_now:.3e}): {exc}; aborting") from exc
                losses.append(loss_v)
                for n, g in grads.items():
                    gsum[n] += g
            lr_now = cosine_lr(step, total_steps, cfg.lr, 0.0)
            adam_step(model.weights,
                      {n: g / len(chunk) for n, g in gsum.items()},
                      state, lr_now)
            step += 1
        try:
            vp, vs = _validate()
        except FloatingPointError as exc:
            raise TrainError(
                f"non-finite values validating after epoch {epoch}: "
                f"{exc}") from exc
        _record({"epoch": epoch, "loss": float(np.mean(losses)),
                 "lr": lr_now, "val_psnr": vp, "val_ssim": vs,
                 "seconds": time.perf_counter() - tick})
    return model, history
