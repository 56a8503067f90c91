"""Unrolled reconstruction with an exact data-fidelity step.

The measurement model y = Phi x has diagonal Phi Phi^T (see cassi.py), so
the quadratic data subproblem

    argmin_x  ||y - Phi x||^2 + alpha ||x - z||^2

has a closed form that never materializes a matrix:

    x = z + Phi^T( (y - Phi z) / (alpha + psi) )        (fast path)

``closed_form_oracle`` solves the same subproblem by a dense
(Phi^T Phi + alpha I) solve on the explicit matrix; the two must agree to
tight tolerance on any instance small enough to check, which is the core
correctness argument for the fast path.

A small network maps (y, mask stack) to per-stage positive scalars:
alpha_k weights the projection, beta_k is handed to the denoiser as a
noise-level hint.  ``run_unfolding`` alternates projection and denoiser
for K stages.  All graph paths go through the autodiff ops so the whole
reconstruction is trainable end to end, including through alpha and beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor, ParamStore, ops
from .cassi import (CassiError, HsiCube, SensingOperator, adjoint_phi,
                    build_explicit_phi, forward_phi)

__all__ = [
    "Model", "StageParams", "UnfoldConfig", "UnfoldError", "build_model",
    "closed_form_oracle", "estimate_params", "estimator_graph", "init_z0",
    "linear_projection", "projection_step", "run_unfolding", "unshift_graph",
]

ESTIMATOR_WIDTH = 64

# softplus(x) = 1 at this x; final-layer biases start here so every
# alpha_k, beta_k begins near 1 before training moves them.
_SOFTPLUS_INV_ONE = float(np.log(np.e - 1.0))


class UnfoldError(ValueError):
    """Inconsistent shapes, stage counts, or non-positive penalties."""


@dataclass
class StageParams:
    """Per-stage scalars: alpha weights the projection, beta the prior."""
    alpha: list[float]
    beta: list[float]

    def __post_init__(self):
        if len(self.alpha) != len(self.beta):
            raise UnfoldError(
                f"alpha/beta length mismatch: {len(self.alpha)} vs "
                f"{len(self.beta)}")
        for name, vals in (("alpha", self.alpha), ("beta", self.beta)):
            for k, v in enumerate(vals):
                if not (np.isfinite(v) and v > 0):
                    raise UnfoldError(
                        f"{name}[{k}] = {v!r} must be finite and > 0")


@dataclass
class UnfoldConfig:
    stages: int = 3
    share_denoiser_weights: bool = False

    def __post_init__(self):
        if self.stages < 1:
            raise UnfoldError(f"stage count must be >= 1, got {self.stages}")


# ---------------------------------------------------------------- helpers

def _glorot(rng, shape, fan_in, fan_out):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def _as_const(arr) -> DiffTensor:
    return DiffTensor(np.asarray(arr, dtype=np.float64))


def _scalar_plane(t: DiffTensor, h: int, w: int) -> DiffTensor:
    return ops.broadcast_to(ops.reshape(t, (1, 1)), (h, w))


# ----------------------------------------------------------- estimator

def init_estimator_weights(store: ParamStore, bands: int, stages: int,
                           rng) -> None:
    cin = bands + 1
    wd = ESTIMATOR_WIDTH
    store.create("est/conv1_w", _glorot(rng, (1, 1, cin, wd), cin, wd))
    store.create("est/conv1_b", np.zeros(wd))
    store.create("est/conv2_w",
                 _glorot(rng, (3, 3, wd, wd), 9 * wd, 9 * wd))
    store.create("est/conv2_b", np.zeros(wd))
    store.create("est/fc1_w", _glorot(rng, (wd, wd), wd, wd))
    store.create("est/fc1_b", np.zeros(wd))
    store.create("est/fc2_w", _glorot(rng, (wd, wd), wd, wd))
    store.create("est/fc2_b", np.zeros(wd))
    store.create("est/fc3_w", _glorot(rng, (wd, 2 * stages), wd, 2 * stages))
    store.create("est/fc3_b", np.full(2 * stages, _SOFTPLUS_INV_ONE))


def init_z0_weights(store: ParamStore, bands: int, rng) -> None:
    # bias-free by construction: a zero measurement and zero mask must
    # produce a zero starting cube
    cin = 2 * bands
    store.create("init/conv_w", _glorot(rng, (1, 1, cin, bands), cin, bands))


def _check_measurement(y: np.ndarray, phi_rep: np.ndarray):
    if y.ndim != 2:
        raise UnfoldError(f"measurement must be rank 2, got {y.shape}")
    if phi_rep.ndim != 3 or phi_rep.shape[:2] != y.shape:
        raise UnfoldError(
            f"mask stack {phi_rep.shape} inconsistent with measurement "
            f"{y.shape}")


def estimator_graph(y: np.ndarray, phi_rep: np.ndarray, weights: ParamStore,
                    stages: int):
    """Differentiable path from (y, mask stack) to per-stage scalars.

    Returns (alpha, beta): two lists of ``stages`` scalar-shaped tensors.
    """
    y = np.asarray(y, dtype=np.float64)
    phi_rep = np.asarray(phi_rep, dtype=np.float64)
    _check_measurement(y, phi_rep)
    out_dim = weights["est/fc3_w"].shape[1]
    if out_dim != 2 * stages:
        raise UnfoldError(
            f"estimator head emits {out_dim} values, need 2*{stages}")
    peak = float(np.abs(y).max())
    y_norm = y / peak if peak > 0 else y
    h, w = y.shape
    x = ops.concat([_as_const(y_norm[:, :, None]), _as_const(phi_rep)],
                   axis=2)
    x = ops.gelu(ops.conv2d(x, weights["est/conv1_w"],
                            weights["est/conv1_b"]))
    x = ops.gelu(ops.conv2d(x, weights["est/conv2_w"],
                            weights["est/conv2_b"], stride=2, pad=1))
    v = ops.global_avg_pool(x)
    v = ops.gelu(ops.dense(v, weights["est/fc1_w"], weights["est/fc1_b"]))
    v = ops.gelu(ops.dense(v, weights["est/fc2_w"], weights["est/fc2_b"]))
    raw = ops.dense(v, weights["est/fc3_w"], weights["est/fc3_b"])
    pos = ops.softplus(raw)
    pieces = ops.split(pos, [1] * (2 * stages), axis=0)
    return pieces[:stages], pieces[stages:]


def estimate_params(y, phi_rep, weights: ParamStore,
                    stages: int) -> StageParams:
    """Plain-number view of the estimator output."""
    alpha_t, beta_t = estimator_graph(y, phi_rep, weights, stages)
    return StageParams(alpha=[float(t.values[0]) for t in alpha_t],
                       beta=[float(t.values[0]) for t in beta_t])


def init_z0(y: np.ndarray, phi_rep: np.ndarray,
            weights: ParamStore) -> DiffTensor:
    """Starting cube: pointwise mix of the replicated measurement and
    the mask stack."""
    y = np.asarray(y, dtype=np.float64)
    phi_rep = np.asarray(phi_rep, dtype=np.float64)
    _check_measurement(y, phi_rep)
    h, w, bands = phi_rep.shape
    y_rep = ops.broadcast_to(ops.reshape(_as_const(y), (h, w, 1)),
                             (h, w, bands))
    x = ops.concat([y_rep, _as_const(phi_rep)], axis=2)
    return ops.conv2d(x, weights["init/conv_w"])


# ---------------------------------------------------------- projection

def linear_projection(y: np.ndarray, z: np.ndarray, alpha: float,
                      op: SensingOperator, *,
                      residual_sign: float = 1.0) -> np.ndarray:
    """x = z + Phi^T((y - Phi z) / (alpha + psi)), all elementwise."""
    if not (np.isfinite(alpha) and alpha > 0):
        raise UnfoldError(f"alpha must be finite and > 0, got {alpha!r}")
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    r = residual_sign * (y - forward_phi(op, z))
    return z + adjoint_phi(op, r / (alpha + op.psi))


def projection_step(y_const: DiffTensor, z: DiffTensor, alpha: DiffTensor,
                    op: SensingOperator, *,
                    residual_sign: float = 1.0) -> DiffTensor:
    """Graph twin of linear_projection; gradients flow to z and alpha."""
    h, w, bands = op.height, op.shifted_width, op.bands
    masks = _as_const(op.shifted_masks)
    phi_z = ops.sum_axis(ops.mul(masks, z), 2)
    r = ops.sub(y_const, phi_z)
    if residual_sign != 1.0:
        r = ops.scale(r, residual_sign)
    denom = ops.add(_scalar_plane(alpha, h, w), _as_const(op.psi))
    q = ops.divide(r, denom)
    spread = ops.broadcast_to(ops.reshape(q, (h, w, 1)), (h, w, bands))
    return ops.add(z, ops.mul(masks, spread))


def closed_form_oracle(y: np.ndarray, z: np.ndarray, mu: float,
                       op: SensingOperator) -> np.ndarray:
    """Dense solve of (Phi^T Phi + mu I) x = Phi^T y + mu z.

    Verification-only: materializes the explicit matrix, so it obeys the
    same size cap as build_explicit_phi.
    """
    if not (np.isfinite(mu) and mu > 0):
        raise UnfoldError(f"mu must be finite and > 0, got {mu!r}")
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    phi = build_explicit_phi(op).toarray()
    n = phi.shape[1]
    lhs = phi.T @ phi + mu * np.eye(n)
    rhs = phi.T @ y.reshape(-1) + mu * z.reshape(-1)
    try:
        x = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise UnfoldError(
            f"internal error: singular system despite mu={mu} > 0") from exc
    return x.reshape(op.height, op.shifted_width, op.bands)


# ------------------------------------------------------------ unfolding

def unshift_graph(t: DiffTensor, d: int, width: int,
                  bands: int) -> DiffTensor:
    """Crop each band back to the unshifted support, differentiably."""
    if d == 0:
        return t
    h, ws = t.shape[0], t.shape[1]
    out_bands = []
    for lam, piece in enumerate(ops.split(t, [1] * bands, axis=2)):
        left = d * lam
        right = ws - left - width
        sizes = []
        if left:
            sizes.append(left)
        take = len(sizes)
        sizes.append(width)
        if right:
            sizes.append(right)
        out_bands.append(ops.split(piece, sizes, axis=1)[take])
    return ops.concat(out_bands, axis=2)


def run_unfolding(y: np.ndarray, op: SensingOperator, weights: ParamStore,
                  cfg: UnfoldConfig, denoiser, collect: dict | None = None,
                  *, residual_sign: float = 1.0) -> HsiCube:
    """K alternations of exact projection and learned denoiser.

    ``denoiser(x, beta, k) -> tensor`` maps a shifted-cube tensor and a
    scalar tensor to a denoised shifted-cube tensor; stage index k picks
    per-stage weights.  ``collect``, if given, receives the estimated
    scalars and the final pre-crop tensor (useful under an active Tape).
    """
    y = np.asarray(y, dtype=np.float64)
    want = (op.height, op.shifted_width)
    if y.shape != want:
        raise UnfoldError(f"measurement shape {y.shape}, expected {want}")
    alpha_t, beta_t = estimator_graph(y, op.shifted_masks, weights,
                                      cfg.stages)
    y_const = _as_const(y)
    z = init_z0(y, op.shifted_masks, weights)
    for k in range(cfg.stages):
        x = projection_step(y_const, z, alpha_t[k], op,
                            residual_sign=residual_sign)
        z = denoiser(x, beta_t[k], k)
    cube_t = unshift_graph(z, op.shift_step, op.width, op.bands)
    if collect is not None:
        collect["alpha"] = [float(t.values[0]) for t in alpha_t]
        collect["beta"] = [float(t.values[0]) for t in beta_t]
        collect["tensor"] = cube_t
    return HsiCube(np.clip(cube_t.values, 0.0, None))


# ---------------------------------------------------------------- model

@dataclass
class Model:
    """Weights plus every config needed to run them."""
    weights: ParamStore
    unfold: UnfoldConfig
    hst: "HstConfig"
    bands: int
    shift_step: int
    base_shape: tuple[int, int]  # (H, shifted W) the attention tables fit

    def stage_prefix(self, k: int) -> str:
        return "shared" if self.unfold.share_denoiser_weights else f"stage{k}"

    def denoiser_fn(self):
        from .denoiser import hst_denoise
        def _run(x, beta, k):
            return hst_denoise(x, beta, self.weights, self.hst,
                               prefix=self.stage_prefix(k))
        return _run

    def reconstruct(self, y, op: SensingOperator,
                    collect: dict | None = None, *,
                    residual_sign: float = 1.0) -> HsiCube:
        if (op.height, op.shifted_width) != self.base_shape:
            raise UnfoldError(
                f"operator plane {(op.height, op.shifted_width)} does not "
                f"match the size this model was built for {self.base_shape}")
        if op.bands != self.bands or op.shift_step != self.shift_step:
            raise UnfoldError(
                f"operator bands/shift ({op.bands}, {op.shift_step}) do not "
                f"match model ({self.bands}, {self.shift_step})")
        return run_unfolding(y, op, self.weights, self.unfold,
                             self.denoiser_fn(), collect,
                             residual_sign=residual_sign)

    def meta(self) -> dict:
        return {
            "format_version": 1,
            "stages": self.unfold.stages,
            "share_denoiser_weights": self.unfold.share_denoiser_weights,
            "channels": self.hst.channels,
            "window": self.hst.window,
            "level_widths": [self.hst.channels * m
                             for m in self.hst.multipliers],
            "level_heads": list(self.hst.heads),
            "bands": self.bands,
            "shift_step": self.shift_step,
            "base_height": self.base_shape[0],
            "base_shifted_width": self.base_shape[1],
        }

    def save(self, path: str) -> None:
        from .autodiff import save_params, write_sidecar
        save_params(self.weights, path)
        write_sidecar(path, self.meta())

    @classmethod
    def load(cls, path: str) -> "Model":
        from .autodiff import load_params, read_sidecar
        from .denoiser import HstConfig
        meta = read_sidecar(path)
        version = meta.get("format_version")
        if version != 1:
            raise UnfoldError(f"unsupported checkpoint format {version!r}")
        unfold = UnfoldConfig(
            stages=int(meta["stages"]),
            share_denoiser_weights=bool(meta["share_denoiser_weights"]))
        channels = int(meta["channels"])
        hst = HstConfig(channels=channels,
                        window=int(meta["window"]),
                        heads=tuple(int(h) for h in meta["level_heads"]),
                        multipliers=tuple(int(w) // channels
                                          for w in meta["level_widths"]))
        model = build_model_shell(
            bands=int(meta["bands"]), shift_step=int(meta["shift_step"]),
            height=int(meta["base_height"]),
            shifted_width=int(meta["base_shifted_width"]),
            unfold=unfold, hst=hst, seed=0)
        load_params(path, model.weights)
        return model


def build_model_shell(bands: int, shift_step: int, height: int,
                      shifted_width: int, unfold: UnfoldConfig,
                      hst: "HstConfig", seed: int) -> Model:
    """Allocate and initialize every weight tensor for the given geometry."""
    from .denoiser import init_hst_weights, padded_shape
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_estimator_weights(store, bands, unfold.stages, rng)
    init_z0_weights(store, bands, rng)
    base = padded_shape(height, shifted_width, hst.window)
    prefixes = (["shared"] if unfold.share_denoiser_weights
                else [f"stage{k}" for k in range(unfold.stages)])
    for prefix in prefixes:
        init_hst_weights(store, bands, base, hst, rng, prefix=prefix)
    return Model(weights=store, unfold=unfold, hst=hst, bands=bands,
                 shift_step=shift_step,
                 base_shape=(height, shifted_width))


def build_model(op: SensingOperator, unfold: UnfoldConfig, hst: "HstConfig",
                seed: int = 0) -> Model:
    return build_model_shell(op.bands, op.shift_step, op.height,
                             op.shifted_width, unfold, hst, seed)
