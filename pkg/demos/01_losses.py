"""
Contrastive losses on hand-built vectors
========================================

A tour of the loss functions on batches small enough to check by eye.
"""

import math

import numpy as np

from dualcl import objectives as obj

# Three examples, two classes. Features z_i and label-aware rows theta*_i
# are unit vectors in the plane.
y = [0, 0, 1]
Z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
T = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
rel = obj.build_relations(y)

# Example 2 has no same-class partner, so it is skipped as an anchor.
print("positives:", [rel.P(i) for i in range(3)])

lz = obj.loss_z(Z, T, rel, tau=1.0)
lt = obj.loss_theta(Z, T, rel, tau=1.0)
print("L_z     ", lz.value, "per anchor", lz.per_anchor, "skipped", lz.skipped)
print("L_theta ", lt.value)
print("closed form", (math.log(2) + math.log(1 + math.e)) / 2)

# The dual loss is just the sum.
print("L_dual  ", obj.loss_dual(Z, T, rel, tau=1.0).value)

# %%
# A lower temperature sharpens the softmax and punishes misaligned
# positives much harder.
for tau in (1.0, 0.5, 0.1):
    print(f"tau={tau:<4} L_dual={obj.loss_dual(Z, T, rel, tau).value:.4f}")

# %%
# The per-example classifier: theta_i stacks one row per class and the
# logits are plain dot products with z_i (no temperature).
theta = np.stack([T, T[:, ::-1]], axis=1)  # B x K x d
print("logits\n", obj.class_logits(Z, theta).data)
print("predictions", obj.predict(Z, theta))
ce = obj.loss_ce_modified(Z, theta, y)
dual = obj.loss_dual(Z, T, rel, 0.1)
print("overall at lambda=0.1:", obj.loss_overall(ce, dual, 0.1).value)
