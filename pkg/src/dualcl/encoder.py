"""Tiny post-LN transformer encoder and dual-representation extraction."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import Batch

CHECKPOINT_MAGIC = "DUALCL1"


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1

    def validate(self) -> "EncoderConfig":
        for name in ("vocab_size", "d", "n_layers", "n_heads", "ffn_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise EncoderError(f"{name} must be positive")
        if self.d % self.n_heads:
            raise EncoderError("heads must divide width")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise EncoderError("dropout_rate must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# Key projections carry no bias: a bias on keys shifts every score of a query
# by the same amount and cancels in the softmax.
_LAYER_PARAMS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                 "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    d, f = config.d, config.ffn_dim
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    per_layer = {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1_g": (d,), "ln1_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }
    for layer in range(config.n_layers):
        for name in _LAYER_PARAMS:
            shapes[f"layer{layer}.{name}"] = per_layer[name]
    return shapes


def init_params(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Normal(0, 0.02^2) weights and embeddings, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


class _Dropout:
    """Draws independent masks from a per-forward seed sequence."""

    def __init__(self, rate: float, seed, active: bool):
        self.rate = rate
        self.active = active and rate > 0
        self._seq = np.random.SeedSequence(seed) if self.active else None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.active:
            return x
        child = self._seq.spawn(1)[0]
        return ad.mul_elem(x, ad.dropout_mask(x.shape, self.rate, child))


def encode_tokens(
    params: Mapping[str, Tensor | np.ndarray],
    batch: Batch,
    config: EncoderConfig,
    train_mode: bool = False,
    dropout_seed=None,
) -> Tensor:
    """Per-token features ``H`` of shape B x T x d."""
    p = {k: v if isinstance(v, Tensor) else ad.as_tensor(v) for k, v in params.items()}
    ids = np.asarray(batch.ids)
    b, t = ids.shape
    if t > config.max_len:
        raise EncoderError(f"sequence length {t} exceeds max_len {config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise EncoderError("token id out of range")
    if train_mode and config.dropout_rate > 0 and dropout_seed is None:
        raise EncoderError("train_mode with dropout needs a dropout_seed")
    drop = _Dropout(config.dropout_rate, dropout_seed, train_mode)
    d, heads = config.d, config.n_heads
    dh = d // heads

    x = ad.add(ad.gather_rows(p["tok_emb"], ids), ad.gather_rows(p["pos_emb"], np.arange(t)))
    x = drop(x)
    keep = np.repeat(np.asarray(batch.mask, dtype=bool), heads, axis=0)[:, None, :]

    for layer in range(config.n_layers):
        w = lambda name: p[f"layer{layer}.{name}"]  # noqa: E731
        q = ad.split_heads(ad.add(ad.matmul(x, w("wq")), w("bq")), heads)
        k = ad.split_heads(ad.matmul(x, w("wk")), heads)
        v = ad.split_heads(ad.add(ad.matmul(x, w("wv")), w("bv")), heads)
        scores = ad.scalar_mul(ad.matmul(q, ad.transpose_last(k)), 1.0 / np.sqrt(dh))
        attn = drop(ad.softmax_rows(ad.apply_mask(scores, keep)))
        ctx = ad.merge_heads(ad.matmul(attn, v), heads)
        out = drop(ad.add(ad.matmul(ctx, w("wo")), w("bo")))
        x = ad.layer_norm_rows(ad.add(x, out), w("ln1_g"), w("ln1_b"))
        hidden = ad.relu(ad.add(ad.matmul(x, w("w1")), w("b1")))
        ff = drop(ad.add(ad.matmul(hidden, w("w2")), w("b2")))
        x = ad.layer_norm_rows(ad.add(x, ff), w("ln2_g"), w("ln2_b"))
    return x


def attention_weights(params, batch: Batch, config: EncoderConfig, layer: int = -1) -> np.ndarray:
    """Eval-mode attention probabilities of one layer, shape B x heads x T x T."""
    p = {k: v.data if isinstance(v, Tensor) else np.asarray(v) for k, v in params.items()}
    layer = layer % config.n_layers
    sub = EncoderConfig(**{**config.to_dict(), "n_layers": layer})
    x = encode_tokens(p, batch, sub).data if layer else (
        p["tok_emb"][batch.ids] + p["pos_emb"][: batch.seq_len]
    )
    heads, dh = config.n_heads, config.d // config.n_heads
    b, t, _ = x.shape
    q = (x @ p[f"layer{layer}.wq"] + p[f"layer{layer}.bq"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    k = (x @ p[f"layer{layer}.wk"]).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores = scores + np.where(np.asarray(batch.mask, bool)[:, None, None, :], 0.0, ad.MASK_VALUE)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Representations:
    """``Z`` (B x d) and ``theta`` (B x K x d), all rows unit-norm.

    ``theta[i, k]`` is the label-aware representation of class ``k`` for
    example ``i`` regardless of where the label sat in the sequence.
    """

    Z: Tensor
    theta: Tensor
    labels: np.ndarray

    @property
    def theta_star(self) -> Tensor:
        """Rows theta[i, y_i], shape B x d."""
        b, k, d = self.theta.shape
        flat = ad.reshape(self.theta, (b * k, d))
        return ad.gather_rows(flat, np.arange(b) * k + self.labels)


def pooling_matrix(batch: Batch) -> np.ndarray:
    """B x K x T weights averaging each class's label-token positions."""
    if batch.mode != "dualcl" or not all(batch.position_maps):
        raise EncoderError("representation extraction needs a dualcl-mode batch")
    b, t, k = len(batch), batch.seq_len, batch.num_labels
    pool = np.zeros((b, k, t))
    for i, pmap in enumerate(batch.position_maps):
        for c in range(k):
            pos = pmap[c]
            pool[i, c, pos] = 1.0 / len(pos)
    return pool


def extract_representations(H: Tensor, batch: Batch) -> Representations:
    """Z from [CLS] (position 0); theta by mean-pooling each class's label tokens."""
    pool = pooling_matrix(batch)
    b, t, d = H.shape
    flat = ad.reshape(H, (b * t, d))
    Z = ad.l2norm_rows(ad.gather_rows(flat, np.arange(b) * t))
    theta = ad.l2norm_rows(ad.matmul(ad.as_tensor(pool), H))
    return Representations(Z, theta, np.asarray(batch.labels, dtype=np.int64))


def cls_features(H: Tensor) -> Tensor:
    b, t, d = H.shape
    return ad.l2norm_rows(ad.gather_rows(ad.reshape(H, (b * t, d)), np.arange(b) * t))


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Magic line, ``name dims...`` header lines, blank line, float64 LE payload."""
    header = [CHECKPOINT_MAGIC]
    payload = []
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise EncoderError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        header.append(" ".join([name, *map(str, arr.shape)]))
        payload.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode("ascii"))
        for chunk in payload:
            fh.write(chunk)


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    if not sep:
        raise EncoderError(f"{path}: missing header terminator")
    lines = head.decode("ascii").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise EncoderError(f"{path}: bad magic line {lines[0]!r}")
    out, offset = {}, 0
    for line in lines[1:]:
        name, *dims = line.split(" ")
        shape = tuple(int(x) for x in dims)
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if offset + nbytes > len(body):
            raise EncoderError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise EncoderError(f"{path}: {len(body) - offset} trailing bytes")
    return out
