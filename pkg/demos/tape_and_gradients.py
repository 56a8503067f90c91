"""Tour of the gradient tape: record, differentiate, cross-check.

The package trains its networks with a small reverse-mode engine built
around a fixed catalog of array primitives.  This script records a toy
computation, walks the tape backward, and confirms the analytic
gradients against central finite differences.
"""

import numpy as np

from cassi_unfold.autodiff import Tape, backward, grad_check, ops

############################ record and replay #############################

rng = np.random.default_rng(0)
x = ops.tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = ops.tensor(rng.normal(size=(4, 2)), requires_grad=True)

with Tape() as tape:
    h = ops.gelu(ops.matmul(x, w))
    loss = ops.sum_all(ops.mul(h, h))

print("loss:", float(loss.values))

grad_x, grad_w = backward(tape, loss, wrt=[x, w])
print("gradient wrt x has shape", grad_x.shape)
print("gradient wrt w:")
print(grad_w)

########################## check against differences ########################

# grad_check rebuilds the computation from plain arrays, nudges every
# coordinate by +/- 1e-5, and reports the worst relative disagreement
# between the tape's gradients and the difference quotients.


def f(a, b):
    return ops.sum_all(ops.mul(ops.gelu(ops.matmul(a, b)),
                               ops.gelu(ops.matmul(a, b))))


worst = grad_check(f, [x.values, w.values])
print("worst relative error vs finite differences:", worst)

# A composite closer to what the denoiser does: normalize, attend, pool.
def g(tokens, table, gamma, beta):
    scores = ops.softmax(ops.add(ops.matmul(tokens,
                                            ops.permute(tokens, (1, 0))),
                                 table))
    mixed = ops.matmul(scores, tokens)
    return ops.sum_all(ops.mul(ops.layer_norm(mixed, gamma, beta),
                               ops.layer_norm(mixed, gamma, beta)))


tokens = rng.normal(size=(5, 3))
table = rng.normal(size=(5, 5))
print("attention-style composite, worst relative error:",
      grad_check(g, [tokens, table, np.ones(3), np.zeros(3)]))

########################### the finite-value guard ##########################

# Every primitive checks its own output.  Arithmetic that produces inf
# or nan stops immediately and names the operation, instead of letting
# the garbage propagate into the weights.
big = ops.tensor(np.array([1e308, 1e308]))
with np.errstate(over="ignore"):  # numpy would warn; the tape raises
    try:
        ops.add(big, big)
    except FloatingPointError as exc:
        print("caught:", exc)
