"""Walk through the dispersed-mask measurement model on tiny arrays.

Everything here is small enough to check by hand: a one-row scene with
two pixels and two bands, then a randomized instance to show the two
structural facts the solver leans on (the row Gram matrix is diagonal,
and the fast projection matches a dense linear solve).
"""

import numpy as np

from cassi_unfold.cassi import (HsiCube, Mask, SensingOperator,
                                build_explicit_phi, forward_phi,
                                adjoint_phi, shift_cube)
from cassi_unfold.unfolding import closed_form_oracle, linear_projection

########################### a hand-checkable scene ###########################

# One row, two pixels, two bands.  Pixel 0 carries band values (2, 6),
# pixel 1 carries (4, 8).  The mask attenuates pixel 1 by half.
cube = HsiCube(np.array([[[2.0, 6.0], [4.0, 8.0]]]))
mask = Mask(np.array([[1.0, 0.5]]))
op = SensingOperator(mask, bands=2, shift_step=1)

print("scene, band 0:", cube.data[:, :, 0].ravel())
print("scene, band 1:", cube.data[:, :, 1].ravel())
print("mask:         ", mask.data.ravel())

# Each band slides one pixel further than the last before everything is
# summed into a single plane.  With two bands and step 1 the detector
# row grows from 2 to 3 pixels.
shifted = shift_cube(cube, 1)
y = forward_phi(op, shifted)
print("measurement:  ", y.ravel())
# Column 0 sees only band 0 of pixel 0 (masked value 2).  Column 1 sees
# band 0 of pixel 1 (4 * 0.5 = 2) plus band 1 of pixel 0 (6), so 8.
# Column 2 sees only band 1 of pixel 1 (8 * 0.5 = 4).

# The per-column sum of squared mask weights is the whole story of
# Phi Phi^T.  Here that is [1, 1.25, 0.25].
print("psi:          ", op.psi.ravel())

# The adjoint smears the measurement back through the same mask weights.
print("adjoint, band 0:", adjoint_phi(op, y)[:, :, 0].ravel())
print("adjoint, band 1:", adjoint_phi(op, y)[:, :, 1].ravel())

####################### the structure, on a random case ######################

rng = np.random.default_rng(7)
op2 = SensingOperator(Mask(rng.uniform(0, 1, (5, 6))), bands=3, shift_step=2)

phi = build_explicit_phi(op2).toarray()
gram = phi @ phi.T
off_diagonal = gram - np.diag(np.diag(gram))
print()
print("random instance: phi is", phi.shape)
print("largest off-diagonal entry of phi phi^T:", np.abs(off_diagonal).max())
print("diagonal equals psi:",
      np.allclose(np.diag(gram), op2.psi.ravel(), atol=0.0))

# Because the Gram matrix is diagonal, the data-consistency update
# x = z + phi^T((y - phi z) / (alpha + psi)) costs one forward and one
# adjoint pass.  Compare it against the dense regularized solve it is
# algebraically equal to.
y2 = rng.uniform(0, 1, (op2.height, op2.shifted_width))
z2 = rng.normal(size=(op2.height, op2.shifted_width, op2.bands))
alpha = 0.37

fast = linear_projection(y2, z2, alpha, op2)
dense = closed_form_oracle(y2, z2, alpha, op2)
print("fast projection vs dense solve, max abs gap:",
      np.abs(fast - dense).max())
