"""
Projecting representations and scoring tokens
=============================================

Train briefly, then write a 2-D scatter of features (circles) and
classifiers (triangles), plus per-token closeness to [CLS].
"""

from pathlib import Path

import numpy as np

from dualcl.analysis import attention_scores, emit_svg_scatter, project_2d, write_representation_csv
from dualcl.encoder import encode_tokens, extract_representations
from dualcl.text import make_synthetic, tokenize
from dualcl.trainer import TrainConfig, train

out = Path("demo_out")
out.mkdir(exist_ok=True)

train_set = make_synthetic(500, 2, seed=1)
test_set = make_synthetic(30, 2, seed=2, split="test")
model = train(TrainConfig.from_profile("desk", epochs=10, d=32, n_layers=1), train_set).model

batch = model.batch(test_set.examples)
H = encode_tokens(model.params, batch, model.encoder_config)
reps = extract_representations(H, batch)

# Features and the matching classifier rows go through one projection.
points = np.vstack([reps.Z.data, reps.theta_star.data])
labels = list(batch.labels) * 2
kinds = ["feature"] * len(batch) + ["classifier"] * len(batch)
coords = project_2d(points)
write_representation_csv(coords, labels, kinds, out / "repr.csv")
emit_svg_scatter(coords, labels, kinds, out / "repr.svg")
print("wrote", out / "repr.svg")

# %%
# Token closeness for the first test sentence, scaled so the closest
# token scores 1 and the farthest 0.
ex = test_set.examples[0]
seq = batch.sentence_spans[0]
positions = list(range(*seq))
amap = attention_scores(H.data[0], H.data[0, 0], positions, tokenize(ex.text)[: len(positions)])
for tok, s in zip(amap.tokens, amap.scores):
    print(f"{tok:>10} {'#' * int(20 * s)}")
