"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor, Tape, backward

__all__ = ["grad_check"]


def grad_check(fn: Callable[..., DiffTensor],
               inputs: Sequence[np.ndarray],
               step: float = 1e-5) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps DiffTensors to one scalar DiffTensor.  Every input is
    treated as differentiable.  Returns the worst relative error

        |analytic - numeric| / max(1, |analytic|, |numeric|)

    over all inputs and all coordinates.  Inputs are evaluated in float64.
    """
    tensors = [DiffTensor(np.asarray(x, dtype=np.float64),
                          requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*tensors)
    analytic = backward(tape, out, wrt=tensors)

    worst = 0.0
    for t, g in zip(tensors, analytic):
        base = t.values
        flat = base.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            fp = fn(*tensors).item()
            flat[i] = keep - step
            fm = fn(*tensors).item()
            flat[i] = keep
            num = (fp - fm) / (2.0 * step)
            ana = float(gflat[i])
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if rel > worst:
                worst = rel
    return worst
