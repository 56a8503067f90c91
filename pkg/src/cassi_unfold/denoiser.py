"""Half-shuffle attention denoiser: a three-level U-shaped prior network.

Core idea: after projecting tokens to Q/K/V, the channels are split in
half.  The local half attends inside non-overlapping M x M windows.  The
non-local half swaps the (window, token-in-window) axes first, so each
attention group holds one token per window and attention reaches across
the whole map.  Both halves carry learned position tables and are merged
back by per-head output projections that are summed.

The denoiser consumes a noise-level scalar: the scalar is stretched to a
constant plane, concatenated to the input cube, and everything passes
through conv -> [attention block + downsample] x2 -> attention block ->
[upsample + skip fuse + attention block] x2 -> conv, with the final conv
producing a residual added to the input.  The output conv starts at zero,
so an untrained denoiser is exactly the identity.

Attention tables for the cross-window branch are sized by the padded
token grid, which ties a weight set to one spatial size; the checkpoint
sidecar records that size and mismatches are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import DiffTensor, ParamStore, ops

__all__ = [
    "DenoiserError", "HstConfig", "attention_branch", "half_split",
    "hs_msa", "hsab_forward", "hst_denoise", "init_hst_weights",
    "padded_shape", "qkv_project", "reflect_pad", "shuffle_transpose",
    "unshuffle_transpose", "window_partition", "window_reverse",
]

LEVELS = 3


class DenoiserError(ValueError):
    """Bad channel/window geometry or a size the weights were not built for."""


@dataclass
class HstConfig:
    channels: int = 28          # width of the first level
    window: int = 8             # M, side of a local attention window
    heads: tuple = (1, 2, 4)    # per level; keeps head dim constant
    multipliers: tuple = (1, 2, 4)

    def __post_init__(self):
        if len(self.heads) != LEVELS or len(self.multipliers) != LEVELS:
            raise DenoiserError(
                f"need {LEVELS} head counts and multipliers, got "
                f"{self.heads}, {self.multipliers}")
        if self.window < 1:
            raise DenoiserError(f"window must be >= 1, got {self.window}")
        for lvl in range(LEVELS):
            c = self.channels * self.multipliers[lvl]
            h = self.heads[lvl]
            if c % 2:
                raise DenoiserError(
                    f"level {lvl} width {c} must be even for the half split")
            if (c // 2) % h:
                raise DenoiserError(
                    f"level {lvl}: half width {c // 2} not divisible by "
                    f"{h} heads")

    def width(self, level: int) -> int:
        return self.channels * self.multipliers[level]

    def head_dim(self, level: int) -> int:
        return self.width(level) // 2 // self.heads[level]


def padded_shape(h: int, w: int, window: int) -> tuple[int, int]:
    """Smallest (H, W) >= input that two halvings keep window-divisible."""
    unit = 4 * window
    return (-(-h // unit) * unit, -(-w // unit) * unit)


# ------------------------------------------------------------- padding

def _reflect_matrix(n: int, pad: int) -> np.ndarray:
    # selection matrix S so that S @ x appends rows n-2, n-3, ... (mirror
    # without repeating the edge), keeping padding differentiable
    if pad >= n:
        raise DenoiserError(
            f"cannot reflect-pad {pad} rows onto an axis of size {n}")
    sel = np.zeros((n + pad, n))
    sel[:n] = np.eye(n)
    for i in range(pad):
        sel[n + i, n - 2 - i] = 1.0
    return sel


def reflect_pad(t: DiffTensor, pad_h: int, pad_w: int) -> DiffTensor:
    """Mirror-extend the bottom/right of an (H, W, C) map."""
    h, w, c = t.shape
    if pad_h:
        rows = ops.tensor(_reflect_matrix(h, pad_h))
        t = ops.reshape(ops.matmul(rows, ops.reshape(t, (h, w * c))),
                        (h + pad_h, w, c))
        h += pad_h
    if pad_w:
        cols = ops.tensor(_reflect_matrix(w, pad_w))
        t = ops.permute(t, (1, 0, 2))
        t = ops.reshape(ops.matmul(cols, ops.reshape(t, (w, h * c))),
                        (w + pad_w, h, c))
        t = ops.permute(t, (1, 0, 2))
    return t


def crop_to(t: DiffTensor, h: int, w: int) -> DiffTensor:
    th, tw = t.shape[0], t.shape[1]
    if th != h:
        t = ops.split(t, [h, th - h], axis=0)[0]
    if tw != w:
        t = ops.split(t, [w, tw - w], axis=1)[0]
    return t


# ----------------------------------------------------- token regrouping

def window_partition(t: DiffTensor, window: int) -> DiffTensor:
    """(H, W, C) -> (windows, window*window, C), row-major both levels."""
    h, w, c = t.shape
    if h % window or w % window:
        raise DenoiserError(
            f"spatial dims {(h, w)} not divisible by window {window}")
    gh, gw = h // window, w // window
    t = ops.reshape(t, (gh, window, gw, window, c))
    t = ops.permute(t, (0, 2, 1, 3, 4))
    return ops.reshape(t, (gh * gw, window * window, c))


def window_reverse(t: DiffTensor, window: int, h: int, w: int) -> DiffTensor:
    """Inverse of window_partition back to (H, W, C)."""
    gh, gw = h // window, w // window
    c = t.shape[2]
    t = ops.reshape(t, (gh, gw, window, window, c))
    t = ops.permute(t, (0, 2, 1, 3, 4))
    return ops.reshape(t, (h, w, c))


def shuffle_transpose(t: DiffTensor) -> DiffTensor:
    """(windows, tokens, C) -> (tokens, windows, C): attention groups now
    hold one token from every window."""
    return ops.permute(t, (1, 0, 2))


def unshuffle_transpose(t: DiffTensor) -> DiffTensor:
    return ops.permute(t, (1, 0, 2))


def half_split(t: DiffTensor):
    """First half of the channels attends locally, second half globally."""
    c = t.shape[-1]
    if c % 2:
        raise DenoiserError(f"channel count {c} must be even to halve")
    return tuple(ops.split(t, [c // 2, c // 2], axis=t.values.ndim - 1))


# ------------------------------------------------------------ attention

def qkv_project(x: DiffTensor, wq: DiffTensor, wk: DiffTensor,
                wv: DiffTensor):
    """Bias-free per-token projections of an (H, W, C) map."""
    h, w, c = x.shape
    for name, mat in (("wq", wq), ("wk", wk), ("wv", wv)):
        if mat.shape != (c, c):
            raise DenoiserError(
                f"{name} shape {mat.shape} does not match {c} channels")
    tok = ops.reshape(x, (h * w, c))
    out = tuple(ops.reshape(ops.matmul(tok, m), (h, w, c))
                for m in (wq, wk, wv))
    return out


def attention_branch(q: DiffTensor, k: DiffTensor, v: DiffTensor,
                     table: DiffTensor) -> DiffTensor:
    """softmax(Q K^T / sqrt(d) + table) V over (groups, L, d) stacks."""
    g, L, d = q.shape
    if k.shape != (g, L, d) or v.shape != (g, L, d):
        raise DenoiserError(
            f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if table.shape != (L, L):
        raise DenoiserError(
            f"position table {table.shape} does not fit length {L}")
    scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 2, 1))),
                       1.0 / np.sqrt(d))
    biased = ops.add(scores, ops.broadcast_to(
        ops.reshape(table, (1, L, L)), (g, L, L)))
    return ops.matmul(ops.softmax(biased, axis=-1), v)


def _heads(t: DiffTensor, n: int):
    d = t.shape[-1] // n
    return ops.split(t, [d] * n, axis=t.values.ndim - 1)


def _table(stack: DiffTensor, i: int, n: int) -> DiffTensor:
    L = stack.shape[1]
    return ops.reshape(ops.split(stack, [1] * n, axis=0)[i], (L, L))


def _proj(stack: DiffTensor, i: int, n: int) -> DiffTensor:
    _, d, c = stack.shape
    return ops.reshape(ops.split(stack, [1] * n, axis=0)[i], (d, c))


def hs_msa(x: DiffTensor, w: Mapping[str, DiffTensor], window: int,
           heads: int) -> DiffTensor:
    """Split-channel attention: windowed half plus cross-window half.

    ``w`` maps: wq, wk, wv (C x C); p_local (heads, M^2, M^2);
    p_nonlocal (heads, G, G) for G = H*W/M^2; w_local, w_nonlocal
    (heads, d, C).  Output matches the input map shape.
    """
    h, wd, c = x.shape
    q, k, v = qkv_project(x, w["wq"], w["wk"], w["wv"])
    (q_l, q_nl), (k_l, k_nl), (v_l, v_nl) = (half_split(q), half_split(k),
                                             half_split(v))
    n_tok = h * wd

    def windowed(t):
        return window_partition(t, window)

    got = w["p_nonlocal"].shape[1]
    want = n_tok // (window * window)
    if got != want:
        raise DenoiserError(
            f"cross-window table built for {got} windows, input has {want}; "
            f"these weights are bound to a different spatial size")

    acc = None
    # local half: attention inside each window
    for qs, ks, vs, i in zip(_heads(windowed(q_l), heads),
                             _heads(windowed(k_l), heads),
                             _heads(windowed(v_l), heads), range(heads)):
        a = attention_branch(qs, ks, vs, _table(w["p_local"], i, heads))
        a = window_reverse(a, window, h, wd)
        out = ops.matmul(ops.reshape(a, (n_tok, a.shape[-1])),
                         _proj(w["w_local"], i, heads))
        acc = out if acc is None else ops.add(acc, out)
    # non-local half: same machinery on the shuffled axes
    for qs, ks, vs, i in zip(_heads(shuffle_transpose(windowed(q_nl)), heads),
                             _heads(shuffle_transpose(windowed(k_nl)), heads),
                             _heads(shuffle_transpose(windowed(v_nl)), heads),
                             range(heads)):
        a = attention_branch(qs, ks, vs, _table(w["p_nonlocal"], i, heads))
        a = window_reverse(unshuffle_transpose(a), window, h, wd)
        out = ops.matmul(ops.reshape(a, (n_tok, a.shape[-1])),
                         _proj(w["w_nonlocal"], i, heads))
        acc = ops.add(acc, out)
    return ops.reshape(acc, (h, wd, c))


def hsab_forward(x: DiffTensor, w: Mapping[str, DiffTensor], window: int,
                 heads: int) -> DiffTensor:
    """Pre-norm attention block: x + MSA(LN(x)), then + FFN(LN(.))."""
    t = ops.layer_norm(x, w["ln1_g"], w["ln1_b"])
    x = ops.add(x, hs_msa(t, w, window, heads))
    t = ops.layer_norm(x, w["ln2_g"], w["ln2_b"])
    t = ops.conv2d(t, w["ffn_w1"], w["ffn_b1"])
    t = ops.conv2d(ops.gelu(t), w["ffn_w2"], w["ffn_b2"])
    return ops.add(x, t)


# ------------------------------------------------------------- weights

def _glorot(rng, shape, fan_in, fan_out):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def _init_hsab(store: ParamStore, base: str, c: int, n_heads: int,
               window: int, grid: int, head_dim: int, rng) -> None:
    store.create(f"{base}/ln1/g", np.ones(c))
    store.create(f"{base}/ln1/b", np.zeros(c))
    for nm in ("wq", "wk", "wv"):
        store.create(f"{base}/msa/{nm}", _glorot(rng, (c, c), c, c))
    m2 = window * window
    store.create(f"{base}/msa/p_local",
                 0.02 * rng.normal(size=(n_heads, m2, m2)))
    store.create(f"{base}/msa/p_nonlocal",
                 0.02 * rng.normal(size=(n_heads, grid, grid)))
    store.create(f"{base}/msa/w_local",
                 _glorot(rng, (n_heads, head_dim, c), head_dim, c))
    store.create(f"{base}/msa/w_nonlocal",
                 _glorot(rng, (n_heads, head_dim, c), head_dim, c))
    store.create(f"{base}/ln2/g", np.ones(c))
    store.create(f"{base}/ln2/b", np.zeros(c))
    store.create(f"{base}/ffn/w1", _glorot(rng, (1, 1, c, 4 * c), c, 4 * c))
    store.create(f"{base}/ffn/b1", np.zeros(4 * c))
    store.create(f"{base}/ffn/w2", _glorot(rng, (1, 1, 4 * c, c), 4 * c, c))
    store.create(f"{base}/ffn/b2", np.zeros(c))


def init_hst_weights(store: ParamStore, bands: int,
                     base_shape: tuple[int, int], cfg: HstConfig, rng,
                     prefix: str = "stage0") -> None:
    """Allocate one denoiser's weights under ``prefix``.

    ``base_shape`` is the padded spatial size the cross-window tables are
    sized for.  The output conv starts all-zero (identity denoiser).
    """
    h0, w0 = base_shape
    if h0 % (4 * cfg.window) or w0 % (4 * cfg.window):
        raise DenoiserError(
            f"base shape {base_shape} not a multiple of 4*window")
    cin = bands + 1
    c = cfg.channels
    store.create(f"{prefix}/in_conv/w",
                 _glorot(rng, (3, 3, cin, c), 9 * cin, 9 * c))
    store.create(f"{prefix}/in_conv/b", np.zeros(c))
    m2 = cfg.window * cfg.window
    blocks = [("level0/enc", 0), ("level1/enc", 1), ("level2/mid", 2),
              ("level1/dec", 1), ("level0/dec", 0)]
    for name, lvl in blocks:
        cl = cfg.width(lvl)
        grid = (h0 >> lvl) * (w0 >> lvl) // m2
        _init_hsab(store, f"{prefix}/{name}", cl, cfg.heads[lvl],
                   cfg.window, grid, cfg.head_dim(lvl), rng)
    for lvl in (0, 1):
        cl = cfg.width(lvl)
        store.create(f"{prefix}/level{lvl}/down/w",
                     _glorot(rng, (4, 4, cl, 2 * cl), 16 * cl, 32 * cl))
        store.create(f"{prefix}/level{lvl}/down/b", np.zeros(2 * cl))
        store.create(f"{prefix}/level{lvl}/up/w",
                     _glorot(rng, (2, 2, cl, 2 * cl), 8 * cl, 4 * cl))
        store.create(f"{prefix}/level{lvl}/up/b", np.zeros(cl))
        store.create(f"{prefix}/level{lvl}/fuse/w",
                     _glorot(rng, (1, 1, 2 * cl, cl), 2 * cl, cl))
        store.create(f"{prefix}/level{lvl}/fuse/b", np.zeros(cl))
    store.create(f"{prefix}/out_conv/w", np.zeros((3, 3, c, bands)))
    store.create(f"{prefix}/out_conv/b", np.zeros(bands))


def _hsab_w(weights: Mapping[str, DiffTensor], base: str) -> dict:
    return {
        "ln1_g": weights[f"{base}/ln1/g"], "ln1_b": weights[f"{base}/ln1/b"],
        "wq": weights[f"{base}/msa/wq"], "wk": weights[f"{base}/msa/wk"],
        "wv": weights[f"{base}/msa/wv"],
        "p_local": weights[f"{base}/msa/p_local"],
        "p_nonlocal": weights[f"{base}/msa/p_nonlocal"],
        "w_local": weights[f"{base}/msa/w_local"],
        "w_nonlocal": weights[f"{base}/msa/w_nonlocal"],
        "ln2_g": weights[f"{base}/ln2/g"], "ln2_b": weights[f"{base}/ln2/b"],
        "ffn_w1": weights[f"{base}/ffn/w1"],
        "ffn_b1": weights[f"{base}/ffn/b1"],
        "ffn_w2": weights[f"{base}/ffn/w2"],
        "ffn_b2": weights[f"{base}/ffn/b2"],
    }


# -------------------------------------------------------------- network

def hst_denoise(x, beta, weights: Mapping[str, DiffTensor], cfg: HstConfig,
                prefix: str = "stage0") -> DiffTensor:
    """Denoise a shifted cube given a positive noise-level scalar.

    ``x`` is an (H, W, bands) tensor or array; ``beta`` a scalar tensor or
    float.  Gradients flow into both and into every weight used.
    """
    if not isinstance(x, DiffTensor):
        x = DiffTensor(np.asarray(x, dtype=np.float64))
    if not isinstance(beta, DiffTensor):
        beta = DiffTensor(np.array([float(beta)]))
    if beta.values.size != 1:
        raise DenoiserError(f"beta must be a scalar, got shape {beta.shape}")
    if not float(beta.values.reshape(())) > 0:
        raise DenoiserError(
            f"beta must be > 0, got {float(beta.values.reshape(()))}")
    h, wdt, bands = x.shape
    want_cin = weights[f"{prefix}/in_conv/w"].shape[2]
    if bands + 1 != want_cin:
        raise DenoiserError(
            f"input has {bands} bands, weights expect {want_cin - 1}")

    h0, w0 = padded_shape(h, wdt, cfg.window)
    xp = reflect_pad(x, h0 - h, w0 - wdt)
    plane = ops.broadcast_to(ops.reshape(beta, (1, 1, 1)), (h0, w0, 1))
    t = ops.concat([xp, plane], axis=2)
    t = ops.conv2d(t, weights[f"{prefix}/in_conv/w"],
                   weights[f"{prefix}/in_conv/b"], pad=1)

    skips = []
    for lvl in (0, 1):
        t = hsab_forward(t, _hsab_w(weights, f"{prefix}/level{lvl}/enc"),
                         cfg.window, cfg.heads[lvl])
        skips.append(t)
        t = ops.conv2d(t, weights[f"{prefix}/level{lvl}/down/w"],
                       weights[f"{prefix}/level{lvl}/down/b"],
                       stride=2, pad=1)
    t = hsab_forward(t, _hsab_w(weights, f"{prefix}/level2/mid"),
                     cfg.window, cfg.heads[2])
    for lvl in (1, 0):
        t = ops.conv2d_transpose(t, weights[f"{prefix}/level{lvl}/up/w"],
                                 weights[f"{prefix}/level{lvl}/up/b"],
                                 stride=2)
        t = ops.concat([t, skips[lvl]], axis=2)
        t = ops.conv2d(t, weights[f"{prefix}/level{lvl}/fuse/w"],
                       weights[f"{prefix}/level{lvl}/fuse/b"])
        t = hsab_forward(t, _hsab_w(weights, f"{prefix}/level{lvl}/dec"),
                         cfg.window, cfg.heads[lvl])
    r = ops.conv2d(t, weights[f"{prefix}/out_conv/w"],
                   weights[f"{prefix}/out_conv/b"], pad=1)
    return ops.add(x, crop_to(r, h, wdt))
