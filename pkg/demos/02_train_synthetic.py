"""
Training on the keyword corpus
==============================

Build a two-class synthetic corpus, train the tiny encoder with the dual
objective, then look at what the model predicts.
"""

from dualcl.text import make_synthetic
from dualcl.trainer import TrainConfig, evaluate, train

# Each sentence mixes filler words with one or two class keywords.
train_set = make_synthetic(500, 2, seed=1)
test_set = make_synthetic(100, 2, seed=2, split="test")
print(train_set.examples[0])
print("class counts", train_set.class_counts())

# The desk profile uses learning rates that suit a from-scratch encoder.
config = TrainConfig.from_profile("desk", mode="DUALCL", epochs=10, d=32, n_layers=1)
result = train(
    config, train_set, test_set,
    on_epoch=lambda r: print(f"epoch {r.epoch}  overall {r.overall:.3f}  test acc {r.test_acc:.3f}"),
)

# %%
# Evaluation always feeds labels in their canonical order.
ev = evaluate(result.model, test_set)
print("accuracy", ev.accuracy, "per class", ev.per_class)

# %%
# Same config, other objectives. CE trains a global linear head instead of
# reading the classifier off the label tokens.
for mode in ("CE", "CE_SCL", "DUALCL_NO_DUAL"):
    res = train(TrainConfig.from_profile("desk", mode=mode, epochs=10, d=32, n_layers=1), train_set, test_set)
    print(f"{mode:<15} test acc {res.history[-1].test_acc:.3f}")
