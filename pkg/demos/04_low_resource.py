"""
Few examples per class
======================

Train every objective on five examples per class over several seeds and
compare mean test accuracy. This takes a few minutes on one core.
With this few examples the ordering between objectives is noisy and can
flip with a different corpus seed.
"""

from dualcl.text import make_synthetic
from dualcl.trainer import TrainConfig, low_resource_sweep

pool = make_synthetic(1000, 2, seed=1)
test_set = make_synthetic(500, 2, seed=2, split="test")

config = TrainConfig.from_profile("desk", epochs=60)
rows = low_resource_sweep(
    config, pool, test_set, n_list=[5], seed_list=range(10),
    modes=("CE", "DUALCL_NO_DUAL", "DUALCL"), batch_size=4,
)
for r in rows:
    print(f"{r.mode:<15} n={r.n}  mean {r.mean_acc:.3f}  std {r.std_acc:.3f}  over {r.runs} runs")
