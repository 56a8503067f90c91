"""Functional wrappers over the primitive catalog.

Thin by design: each helper builds the attribute dict and calls
``apply_primitive``.  Model code imports these instead of touching the
catalog directly.
"""

from __future__ import annotations

import numpy as np

from .primitives import apply_primitive
from .tensor import DiffTensor

__all__ = [
    "add", "broadcast_to", "concat", "conv2d", "conv2d_transpose",
    "constant", "dense", "divide", "gelu", "global_avg_pool", "layer_norm",
    "matmul", "mul", "parameter", "permute", "reshape", "scale", "softmax",
    "softplus", "split", "sqrt", "sub", "sum_all", "sum_axis", "tensor",
]


def tensor(values, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(values, requires_grad=requires_grad)


def constant(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=False)


def parameter(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=True)


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("add", [a, scale(b, -1.0)])


def mul(a, b):
    return apply_primitive("multiply", [a, b])


def scale(a, factor: float):
    return apply_primitive("scalar-scale", [a], {"factor": float(factor)})


def divide(a, b):
    return apply_primitive("divide", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def dense(x, w, b=None):
    ins = [x, w] if b is None else [x, w, b]
    return apply_primitive("fully-connected", ins)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    ins = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv2d", ins, {"stride": stride, "pad": pad})


def conv2d_transpose(x, w, b=None, stride: int = 1, pad: int = 0):
    ins = [x, w] if b is None else [x, w, b]
    return apply_primitive("transposed-conv2d", ins,
                           {"stride": stride, "pad": pad})


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    return apply_primitive("layer-norm", [x, gamma, beta], {"eps": eps})


def softmax(x, axis: int = -1):
    return apply_primitive("softmax", [x], {"axis": axis})


def gelu(x):
    return apply_primitive("gelu", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def sqrt(x):
    return apply_primitive("sqrt", [x])


def global_avg_pool(x):
    return apply_primitive("global-average-pool", [x])


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def permute(x, perm):
    return apply_primitive("axis-permute", [x], {"perm": tuple(perm)})


def concat(parts, axis: int):
    return apply_primitive("concat", list(parts), {"axis": axis})


def split(x, sizes, axis: int):
    """Cut ``x`` along ``axis`` into ``len(sizes)`` tensors."""
    sizes = [int(s) for s in sizes]
    return [apply_primitive("split", [x],
                            {"axis": axis, "sizes": sizes, "index": i})
            for i in range(len(sizes))]


def broadcast_to(x, shape):
    return apply_primitive("broadcast", [x], {"shape": tuple(shape)})


def sum_all(x):
    return apply_primitive("sum", [x], {"axis": None})


def sum_axis(x, axis: int):
    return apply_primitive("sum", [x], {"axis": axis})
