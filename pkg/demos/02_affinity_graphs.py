"""
Pseudo-label affinity graphs
============================

Builds the same-label and cross-label k-NN graphs on a synthetic arch and
shows what minimising the graph loss does to the transition matrices.
"""

import numpy as np

from geot import diffcore as dc
from geot.cloudgen import ArchSpec, generate_arch
from geot.plgr import build_graphs, plgr_loss

cloud = generate_arch(ArchSpec(n_classes=5, n_points=64, seed=2))

# %%
# Pretend the pseudo-labels are the ground truth with a few flips.
rng = np.random.default_rng(0)
pseudo = cloud.labels.copy()
flip = rng.choice(len(pseudo), 6, replace=False)
pseudo[flip] = rng.integers(0, 5, len(flip))

intrinsic, extrinsic = build_graphs(cloud, pseudo, k1=6, k2=6, sigma=1.0)
print(f"{len(intrinsic)} intrinsic edges, {len(extrinsic)} extrinsic edges")
print("mean weight: intrinsic %.3f, extrinsic %.3f"
      % (intrinsic.weight.mean(), extrinsic.weight.mean()))

# %%
# Random row-stochastic matrices, one per point, then projected gradient
# steps on the graph loss.  Same-label neighbours are pulled together (M_I
# falls) and cross-label neighbours pushed apart (M_E rises).
N, C = cloud.n_points, 5
params = dc.ParamStore()
params.add("T", rng.dirichlet(np.ones(C), size=(N, C)))

for step in range(101):
    params.zero_grad()
    loss = dc.forward_backward(lambda p: plgr_loss(intrinsic, extrinsic, p.tensor("T"))[2], params)
    if step % 25 == 0:
        M_I, M_E, _ = plgr_loss(intrinsic, extrinsic, params.value("T").reshape(N, C, C))
        print(f"step {step:3d}  L_m {loss:9.3f}  M_I {M_I.item():8.3f}  M_E {M_E.item():8.3f}")
    # the store keeps flat buffers; reshape views to work row by row
    T = params.value("T").reshape(N, C, C)
    T -= 0.05 * params.grad("T").reshape(N, C, C)
    np.maximum(T, 0.0, out=T)
    T /= T.sum(-1, keepdims=True)
