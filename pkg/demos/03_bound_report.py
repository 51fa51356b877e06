"""
Checking the mutual-information bound
=====================================

The diagnostic builds a joint distribution from phi, computes its exact
mutual information, and compares it with log N - epsilon * L_dual.
"""

import numpy as np

from dualcl.analysis import check_mi_bound, exact_mi

# Perfectly correlated two-point joint: MI = log 2.
print(exact_mi(np.diag([0.5, 0.5])), np.log(2))

# Two identical same-class examples. The dual loss is zero, so the right
# hand side is log 2, but the constructed joint is uniform and carries no
# information. The inequality fails here, and the report says so.
v = np.array([[1.0, 0.0], [1.0, 0.0]])
print("\n".join(check_mi_bound(v, v, [0, 0]).lines()))

# %%
# One-hot class vectors for four examples.
y = [0, 0, 1, 1]
oh = np.eye(2)[y]
rep = check_mi_bound(oh, oh, y)
print("\n".join(rep.lines()))
print("joint\n", rep.joint.round(4))

# %%
# Random unit vectors: MI stays far below the right hand side here.
rng = np.random.default_rng(0)
for trial in range(5):
    Z = rng.normal(size=(8, 4))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    rep = check_mi_bound(Z, Z, rng.integers(0, 2, size=8))
    print(f"trial {trial}: mi={rep.mi:.4f} rhs={rep.rhs:.4f} holds={rep.holds}")
