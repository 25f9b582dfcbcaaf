"""
Transition matrices on a toy example
====================================

How a clean class distribution turns into a noisy one, and what the
class-level Gaussian prior adds on top of the per-point matrices.
"""

import numpy as np

from geot import apply_transition, estimate_idtm, fuse, gaussian_prior
from geot.transition import init_transition

np.set_printoptions(precision=3, suppress=True)

# %%
# Five classes; class 0 is gum, 1..4 are teeth in arch order.  A point the
# network believes is tooth 2 with 80% confidence:
C = 5
p = np.array([[0.02, 0.08, 0.80, 0.08, 0.02]])

# %%
# The instance-dependent matrix comes from one affine layer and a row
# softmax.  A zero layer gives uniform rows, so every p maps to the same
# uniform noisy distribution; a diagonal bias keeps most mass in place.
for diag in (0.0, 4.0):
    params = init_transition(C, diag_bias=diag)
    T_I = estimate_idtm(p, params, trainable=False).data
    print(f"diag logit {diag}: noisy distribution", apply_transition(p[0], T_I[0]))

# %%
# The class prior places a Gaussian of width sigma_m on the class axis,
# centred on class m.  Narrow widths stay near the identity, wide ones
# spread mass to neighbouring teeth.
coords = np.arange(C, dtype=float)
for sigma in (0.3, 1.0, 5.0):
    T_C = gaussian_prior(coords, np.full(C, sigma)).data
    print(f"sigma={sigma}: row for tooth 2 ->", T_C[2])

# %%
# Fusion mixes the two; lambda = 0.9 lets the prior dominate.
T_I = estimate_idtm(p, init_transition(C, diag_bias=4.0), trainable=False).data
T_C = gaussian_prior(coords, np.ones(C)).data
for lam in (0.0, 0.5, 0.9):
    T_F = fuse(T_I, T_C, lam)
    print(f"lambda={lam}: fused row 2 ->", T_F[0, 2], " noisy p ->", apply_transition(p[0], T_F[0]))
