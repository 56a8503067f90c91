"""Dense tensors plus a per-forward-pass reverse-mode tape.

The graph is recorded eagerly: applying a primitive while a ``Tape`` is
active appends one entry per call, in execution order, which is already a
valid topological order.  ``backward`` replays the entries once, in
reverse, accumulating vector-Jacobian products.  Tapes are rebuilt on
every forward pass; nothing persists between passes except the parameter
tensors themselves.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "DiffTensor",
    "ShapeMismatchError",
    "Tape",
    "UnknownPrimitiveError",
    "active_tape",
    "backward",
]


class AutodiffError(Exception):
    """Base class for tape / primitive failures."""


class ShapeMismatchError(AutodiffError, ValueError):
    """Input shapes violate a primitive's shape rule."""


class UnknownPrimitiveError(AutodiffError, KeyError):
    """Requested primitive kind is not in the catalog."""


# One tape stack per thread: a tape is confined to the logical thread that
# opened it, concurrent reconstructions each get their own stack.
_tls = threading.local()


def _stack() -> list:
    st = getattr(_tls, "tapes", None)
    if st is None:
        st = _tls.tapes = []
    return st


def active_tape() -> "Tape | None":
    """The innermost open Tape on this thread, or None."""
    st = _stack()
    return st[-1] if st else None


class DiffTensor:
    """A dense real array participating (optionally) in a tape.

    values       -- numpy array, float32 or float64
    requires_grad -- whether gradients should flow to this tensor
    node_id      -- opaque handle on the tape that recorded it (None if
                    the tensor has not been touched by a recorded op)
    """

    __slots__ = ("values", "requires_grad", "node_id", "tape")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return (f"DiffTensor(shape={self.shape}, dtype={self.values.dtype}, "
                f"requires_grad={self.requires_grad})")

    # Light sugar used by the model code; every path still goes through
    # apply_primitive so the tape sees one entry per arithmetic op.
    def __add__(self, other):
        from .primitives import apply_primitive
        return apply_primitive("add", [self, _coerce(other, self)])

    def __sub__(self, other):
        from .primitives import apply_primitive
        neg = apply_primitive("scalar-scale", [_coerce(other, self)],
                              {"factor": -1.0})
        return apply_primitive("add", [self, neg])

    def __mul__(self, other):
        from .primitives import apply_primitive
        if isinstance(other, (int, float)):
            return apply_primitive("scalar-scale", [self],
                                   {"factor": float(other)})
        return apply_primitive("multiply", [self, _coerce(other, self)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from .primitives import apply_primitive
        return apply_primitive("scalar-scale", [self], {"factor": -1.0})


def _coerce(x, like: DiffTensor) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=like.values.dtype))


class _Entry:
    __slots__ = ("kind", "input_ids", "output_id", "ctx", "vjp", "needs")

    def __init__(self, kind, input_ids, output_id, ctx, vjp, needs):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.ctx = ctx
        self.vjp = vjp
        self.needs = needs


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def _bind(self, t: DiffTensor) -> int:
        # A tensor created on an earlier tape re-enters this one as a leaf.
        if t.tape is not self or t.node_id is None:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, kind: str, inputs: Sequence[DiffTensor],
               output: DiffTensor, ctx, vjp: Callable) -> None:
        input_ids = tuple(self._bind(t) for t in inputs)
        output.tape = self
        output.node_id = self._next_id
        self._next_id += 1
        needs = tuple(t.requires_grad for t in inputs)
        self.entries.append(
            _Entry(kind, input_ids, output.node_id, ctx, vjp, needs))


def backward(tape: Tape, loss: DiffTensor, params=None,
             wrt: Iterable[DiffTensor] | None = None):
    """Reverse sweep from a scalar loss recorded on ``tape``.

    Returns, depending on what the caller asks for:
      * ``params`` (a ParamStore): dict name -> gradient array, with zero
        arrays for parameters the loss does not depend on;
      * ``wrt`` (a sequence of tensors): list of gradient arrays aligned
        with it (zeros for disconnected tensors);
      * neither: dict node_id -> gradient for every grad-requiring leaf
        reached by the sweep.
    """
    if loss.values.size != 1:
        raise AutodiffError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None or not tape.entries:
        raise AutodiffError("loss is detached: no tape entries lead to it")

    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.values)}

    for e in reversed(tape.entries):
        g = grads.pop(e.output_id, None)
        if g is None:
            continue  # this entry does not influence the loss
        gins = e.vjp(e.ctx, g)
        for nid, need, gin in zip(e.input_ids, e.needs, gins):
            if not need or gin is None:
                continue
            acc = grads.get(nid)
            grads[nid] = gin if acc is None else acc + gin

    if wrt is not None:
        out = []
        for t in wrt:
            g = grads.get(t.node_id) if t.tape is tape else None
            out.append(np.zeros_like(t.values) if g is None else g)
        return out
    if params is not None:
        out = {}
        for name, t in params.items():
            g = grads.get(t.node_id) if t.tape is tape else None
            out[name] = np.zeros_like(t.values) if g is None else g
        return out
    return grads
