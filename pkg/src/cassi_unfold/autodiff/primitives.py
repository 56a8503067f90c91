"""The closed catalog of differentiable primitives.

Each primitive is a pure function with an explicit vector-Jacobian
product.  Forward returns ``(out_values, ctx)`` where ``ctx`` is whatever
the backward rule needs; ``vjp(ctx, g)`` returns one gradient array per
input (``None`` for inputs that never need gradients, e.g. attribute-like
inputs).

Conventions:
  * feature maps are channel-last, ``(H, W, C)``;
  * convolution kernels are ``(kh, kw, C_in, C_out)``; transposed kernels
    are ``(kh, kw, C_out, C_in)`` so the pair are exact adjoints;
  * no implicit broadcasting: binary ops demand equal shapes, any
    stretching is spelled out with the ``broadcast`` primitive.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special

from .tensor import (DiffTensor, ShapeMismatchError, UnknownPrimitiveError,
                     active_tape)

__all__ = ["CATALOG", "apply_primitive", "primitive_kinds"]


class _Prim:
    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name: str, forward: Callable, vjp: Callable):
        self.name = name
        self.forward = forward
        self.vjp = vjp


CATALOG: dict[str, _Prim] = {}


def _register(name: str):
    def deco(cls):
        CATALOG[name] = _Prim(name, cls.forward, cls.vjp)
        return cls
    return deco


def primitive_kinds() -> list[str]:
    """Sorted names of every primitive in the catalog."""
    return sorted(CATALOG)


def _fail(prim: str, msg: str):
    raise ShapeMismatchError(f"{prim}: {msg}")


def _want(prim: str, cond: bool, msg: str):
    if not cond:
        _fail(prim, msg)


# --------------------------------------------------------------------------
# elementwise and scalar ops
# --------------------------------------------------------------------------

@_register("add")
class _Add:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _want("add", a.shape == b.shape,
              f"operand shapes differ: {a.shape} vs {b.shape}")
        return a + b, None

    @staticmethod
    def vjp(ctx, g):
        return g, g


@_register("multiply")
class _Multiply:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _want("multiply", a.shape == b.shape,
              f"operand shapes differ: {a.shape} vs {b.shape}")
        return a * b, (a, b)

    @staticmethod
    def vjp(ctx, g):
        a, b = ctx
        return g * b, g * a


@_register("scalar-scale")
class _ScalarScale:
    @staticmethod
    def forward(vals, attrs):
        (a,) = vals
        c = float(attrs["factor"])
        return a * c, c

    @staticmethod
    def vjp(ctx, g):
        return (g * ctx,)


@_register("divide")
class _Divide:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _want("divide", a.shape == b.shape,
              f"operand shapes differ: {a.shape} vs {b.shape}")
        out = a / b
        return out, (a, b)

    @staticmethod
    def vjp(ctx, g):
        a, b = ctx
        return g / b, -g * a / (b * b)


@_register("gelu")
class _Gelu:
    # Exact Gaussian-CDF form, not the tanh approximation.
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        return x * cdf, (x, cdf)

    @staticmethod
    def vjp(ctx, g):
        x, cdf = ctx
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)


@_register("softplus")
class _Softplus:
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        # log(1 + e^x) without overflow for large |x|
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return out, x

    @staticmethod
    def vjp(ctx, g):
        x = ctx
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * sig,)


@_register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        if np.any(x < 0):
            _fail("sqrt", "negative input values")
        out = np.sqrt(x)
        return out, out

    @staticmethod
    def vjp(ctx, g):
        # d sqrt is unbounded at 0; callers keep arguments positive.
        return (g / (2.0 * ctx),)


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        ax = int(attrs["axis"])
        _want("softmax", -x.ndim <= ax < x.ndim,
              f"axis {ax} out of range for rank {x.ndim}")
        shifted = x - x.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=ax, keepdims=True)
        return out, (out, ax)

    @staticmethod
    def vjp(ctx, g):
        y, ax = ctx
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@_register("matmul")
class _Matmul:
    # Batched: leading dims of both operands must match exactly.
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _want("matmul", a.ndim >= 2 and b.ndim >= 2,
              f"operands must be at least rank 2, got {a.shape} @ {b.shape}")
        _want("matmul", a.shape[:-2] == b.shape[:-2],
              f"leading dims differ: {a.shape} @ {b.shape}")
        _want("matmul", a.shape[-1] == b.shape[-2],
              f"inner dims differ: {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    @staticmethod
    def vjp(ctx, g):
        a, b = ctx
        return g @ _swap_last(b), _swap_last(a) @ g


@_register("fully-connected")
class _FullyConnected:
    # x (n,) @ w (n, m) + optional bias (m,)
    @staticmethod
    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        b = vals[2] if len(vals) == 3 else None
        _want("fully-connected", x.ndim == 1 and w.ndim == 2,
              f"expected vector and matrix, got {x.shape}, {w.shape}")
        _want("fully-connected", x.shape[0] == w.shape[0],
              f"input width {x.shape[0]} != weight rows {w.shape[0]}")
        out = x @ w
        if b is not None:
            _want("fully-connected", b.shape == (w.shape[1],),
                  f"bias shape {b.shape} != ({w.shape[1]},)")
            out = out + b
        return out, (x, w, b is not None)

    @staticmethod
    def vjp(ctx, g):
        x, w, has_bias = ctx
        gx = w @ g
        gw = np.outer(x, g)
        if has_bias:
            return gx, gw, g
        return gx, gw


# --------------------------------------------------------------------------
# convolutions (im2col / col2im)
# --------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    H, W, C = x.shape
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    Ho = _conv_out_size(H, kh, stride, pad)
    Wo = _conv_out_size(W, kw, stride, pad)
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (Ho, Wo, kh, kw, C), (s0 * stride, s1 * stride, s0, s1, s2),
        writeable=False)
    return view.reshape(Ho * Wo, kh * kw * C), Ho, Wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int,
            stride: int, pad: int) -> np.ndarray:
    H, W, C = x_shape
    Ho = _conv_out_size(H, kh, stride, pad)
    Wo = _conv_out_size(W, kw, stride, pad)
    out = np.zeros((H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    cols = cols.reshape(Ho, Wo, kh, kw, C)
    for i in range(kh):
        for j in range(kw):
            out[i:i + Ho * stride:stride, j:j + Wo * stride:stride] += \
                cols[:, :, i, j, :]
    if pad:
        out = out[pad:pad + H, pad:pad + W]
    return out


@_register("conv2d")
class _Conv2d:
    @staticmethod
    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        b = vals[2] if len(vals) == 3 else None
        stride = int(attrs.get("stride", 1))
        pad = int(attrs.get("pad", 0))
        _want("conv2d", x.ndim == 3 and w.ndim == 4,
              f"expected (H,W,C) map and (kh,kw,Cin,Cout) kernel, "
              f"got {x.shape}, {w.shape}")
        kh, kw, cin, cout = w.shape
        _want("conv2d", x.shape[2] == cin,
              f"input channels {x.shape[2]} != kernel C_in {cin}")
        _want("conv2d", x.shape[0] + 2 * pad >= kh and
              x.shape[1] + 2 * pad >= kw,
              f"kernel {kh}x{kw} larger than padded input "
              f"{x.shape[0] + 2 * pad}x{x.shape[1] + 2 * pad}")
        cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
        wmat = w.reshape(kh * kw * cin, cout)
        out = cols @ wmat
        if b is not None:
            _want("conv2d", b.shape == (cout,),
                  f"bias shape {b.shape} != ({cout},)")
            out = out + b
        ctx = (cols, wmat, x.shape, w.shape, stride, pad, b is not None)
        return out.reshape(Ho, Wo, cout), ctx

    @staticmethod
    def vjp(ctx, g):
        cols, wmat, x_shape, w_shape, stride, pad, has_bias = ctx
        kh, kw, cin, cout = w_shape
        gm = g.reshape(-1, cout)
        gw = (cols.T @ gm).reshape(w_shape)
        gx = _col2im(gm @ wmat.T, x_shape, kh, kw, stride, pad)
        if has_bias:
            return gx, gw, gm.sum(axis=0)
        return gx, gw


@_register("transposed-conv2d")
class _TransposedConv2d:
    # Exact adjoint of conv2d in the spatial map: kernel (kh,kw,Cout,Cin),
    # output spatial size (n-1)*stride - 2*pad + k.
    @staticmethod
    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        b = vals[2] if len(vals) == 3 else None
        stride = int(attrs.get("stride", 1))
        pad = int(attrs.get("pad", 0))
        _want("transposed-conv2d", x.ndim == 3 and w.ndim == 4,
              f"expected (H,W,C) map and (kh,kw,Cout,Cin) kernel, "
              f"got {x.shape}, {w.shape}")
        kh, kw, cout, cin = w.shape
        _want("transposed-conv2d", x.shape[2] == cin,
              f"input channels {x.shape[2]} != kernel C_in {cin}")
        H, W, _ = x.shape
        Ho = (H - 1) * stride - 2 * pad + kh
        Wo = (W - 1) * stride - 2 * pad + kw
        _want("transposed-conv2d", Ho > 0 and Wo > 0,
              f"output size {Ho}x{Wo} not positive")
        # x plays the role the output gradient plays in conv2d backward
        wmat = w.reshape(kh * kw * cout, cin)
        cols = x.reshape(H * W, cin) @ wmat.T
        out = _col2im(cols, (Ho, Wo, cout), kh, kw, stride, pad)
        if b is not None:
            _want("transposed-conv2d", b.shape == (cout,),
                  f"bias shape {b.shape} != ({cout},)")
            out = out + b
        ctx = (x, wmat, (Ho, Wo, cout), w.shape, stride, pad, b is not None)
        return out, ctx

    @staticmethod
    def vjp(ctx, g):
        x, wmat, out_shape, w_shape, stride, pad, has_bias = ctx
        kh, kw, cout, cin = w_shape
        gcols, _, _ = _im2col(g, kh, kw, stride, pad)
        gx = (gcols @ wmat.reshape(kh * kw * cout, cin)).reshape(x.shape)
        gw = (gcols.T @ x.reshape(-1, cin)).reshape(w_shape)
        if has_bias:
            return gx, gw, g.sum(axis=(0, 1))
        return gx, gw


# --------------------------------------------------------------------------
# normalization and pooling
# --------------------------------------------------------------------------

@_register("layer-norm")
class _LayerNorm:
    # Per-token normalization over the trailing channel axis.
    @staticmethod
    def forward(vals, attrs):
        x, gamma, beta = vals
        eps = float(attrs.get("eps", 1e-6))
        C = x.shape[-1]
        _want("layer-norm", gamma.shape == (C,) and beta.shape == (C,),
              f"scale/bias shapes {gamma.shape}/{beta.shape} != ({C},)")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return gamma * xhat + beta, (xhat, inv, gamma)

    @staticmethod
    def vjp(ctx, g):
        xhat, inv, gamma = ctx
        gg = g * gamma
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


@_register("global-average-pool")
class _GlobalAvgPool:
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        _want("global-average-pool", x.ndim == 3,
              f"expected (H,W,C), got {x.shape}")
        return x.mean(axis=(0, 1)), x.shape

    @staticmethod
    def vjp(ctx, g):
        H, W, C = ctx
        return (np.broadcast_to(g / (H * W), (H, W, C)).copy(),)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        shape = tuple(int(s) for s in attrs["shape"])
        _want("reshape", int(np.prod(shape, dtype=np.int64)) == x.size,
              f"cannot reshape {x.shape} (size {x.size}) to {shape}")
        return x.reshape(shape), x.shape

    @staticmethod
    def vjp(ctx, g):
        return (g.reshape(ctx),)


@_register("axis-permute")
class _AxisPermute:
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        perm = tuple(int(p) for p in attrs["perm"])
        _want("axis-permute", sorted(perm) == list(range(x.ndim)),
              f"perm {perm} is not a permutation of rank {x.ndim}")
        return np.ascontiguousarray(np.transpose(x, perm)), perm

    @staticmethod
    def vjp(ctx, g):
        inv = np.argsort(ctx)
        return (np.ascontiguousarray(np.transpose(g, inv)),)


@_register("concat")
class _Concat:
    @staticmethod
    def forward(vals, attrs):
        ax = int(attrs["axis"])
        first = vals[0]
        for v in vals[1:]:
            ok = (v.ndim == first.ndim and
                  v.shape[:ax] == first.shape[:ax] and
                  v.shape[ax + 1:] == first.shape[ax + 1:])
            _want("concat", ok,
                  f"shape {v.shape} incompatible with {first.shape} "
                  f"along axis {ax}")
        sizes = [v.shape[ax] for v in vals]
        return np.concatenate(vals, axis=ax), (ax, sizes)

    @staticmethod
    def vjp(ctx, g):
        ax, sizes = ctx
        splits = np.cumsum(sizes[:-1])
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=ax))


@_register("split")
class _Split:
    # One call extracts one part; ops.split loops over part indices.
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        ax = int(attrs["axis"])
        sizes = [int(s) for s in attrs["sizes"]]
        idx = int(attrs["index"])
        _want("split", sum(sizes) == x.shape[ax],
              f"sizes {sizes} do not sum to dim {x.shape[ax]} on axis {ax}")
        _want("split", 0 <= idx < len(sizes),
              f"part index {idx} out of range for {len(sizes)} parts")
        start = sum(sizes[:idx])
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + sizes[idx])
        out = np.ascontiguousarray(x[tuple(sl)])
        return out, (x.shape, ax, start, sizes[idx])

    @staticmethod
    def vjp(ctx, g):
        shape, ax, start, length = ctx
        gx = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = slice(start, start + length)
        gx[tuple(sl)] = g
        return (gx,)


@_register("broadcast")
class _Broadcast:
    # Explicit stretch to a target shape (numpy broadcast rules); the only
    # broadcasting in the catalog besides scalar-scale.
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        shape = tuple(int(s) for s in attrs["shape"])
        try:
            out = np.broadcast_to(x, shape)
        except ValueError:
            _fail("broadcast", f"cannot broadcast {x.shape} to {shape}")
        return np.ascontiguousarray(out), (x.shape, shape)

    @staticmethod
    def vjp(ctx, g):
        in_shape, out_shape = ctx
        pad = len(out_shape) - len(in_shape)
        padded = (1,) * pad + tuple(in_shape)
        axes = tuple(i for i, (a, b) in enumerate(zip(padded, out_shape))
                     if a == 1 and b != 1)
        gx = g.sum(axis=axes) if axes else g
        return (gx.reshape(in_shape),)


@_register("sum")
class _Sum:
    # axis None reduces to a scalar; axis k removes that one axis.
    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        ax = attrs.get("axis") if attrs else None
        if ax is None:
            return np.asarray(x.sum()), (x.shape, None)
        ax = int(ax)
        _want("sum", -x.ndim <= ax < x.ndim,
              f"axis {ax} out of range for rank {x.ndim}")
        return x.sum(axis=ax), (x.shape, ax % x.ndim)

    @staticmethod
    def vjp(ctx, g):
        shape, ax = ctx
        if ax is None:
            return (np.full(shape, float(g), dtype=g.dtype),)
        return (np.ascontiguousarray(
            np.broadcast_to(np.expand_dims(g, ax), shape)),)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def apply_primitive(kind: str, inputs: Sequence[DiffTensor],
                    attrs: dict | None = None) -> DiffTensor:
    """Run one catalog primitive, recording a tape entry when needed.

    A tape entry is recorded iff some input requires grad and a Tape is
    active on this thread; otherwise this is plain (checked) numpy.
    """
    prim = CATALOG.get(kind)
    if prim is None:
        raise UnknownPrimitiveError(
            f"unknown primitive {kind!r}; catalog: {primitive_kinds()}")
    vals = [t.values for t in inputs]
    out_vals, ctx = prim.forward(vals, attrs or {})
    if not np.all(np.isfinite(out_vals)):
        raise FloatingPointError(
            f"primitive {kind!r} produced non-finite values")
    rg = any(t.requires_grad for t in inputs)
    out = DiffTensor(out_vals, requires_grad=rg)
    if rg:
        tape = active_tape()
        if tape is not None:
            tape.record(kind, inputs, out, ctx, prim.vjp)
    return out
