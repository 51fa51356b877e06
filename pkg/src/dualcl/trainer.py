"""Training loop, AdamW, learning-rate schedule, evaluation and sweeps."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .encoder import (
    EncoderConfig,
    cls_features,
    encode_tokens,
    extract_representations,
    init_params,
    load_tensors,
    save_tensors,
)
from .text import (
    Batch,
    Dataset,
    LabelSet,
    RawExample,
    Vocabulary,
    build_augmented_sequence,
    build_vocab,
    collate_batch,
    subsample_per_class,
)

MODES = ("CE", "CE_CL", "CE_SCL", "DUALCL", "DUALCL_NO_DUAL")
DUAL_MODES = ("DUALCL", "DUALCL_NO_DUAL")

PROFILES = {
    "paper": dict(lr_start=2e-5, lr_end=1e-5, epochs=30, batch_size=64, weight_decay=0.01, dropout_rate=0.1),
    "desk": dict(lr_start=3e-4, lr_end=3e-5, epochs=10, batch_size=16, weight_decay=0.01, dropout_rate=0.1),
}

HISTORY_FIELDS = ("epoch", "lr", "ce", "dual", "overall", "train_acc", "test_acc")
SWEEP_FIELDS = ("mode", "n", "mean_acc", "std_acc", "runs")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "DUALCL"
    lam: float = 0.1
    tau: float = 0.1
    epochs: int = 10
    batch_size: int = 16
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    weight_decay: float = 0.01
    dropout_rate: float = 0.1
    seed: int = 0
    profile: str = "desk"
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 64
    clip_norm: float = 1.0
    min_freq: int = 1

    @classmethod
    def from_profile(cls, profile: str = "desk", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise TrainError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(profile=profile, **{**PROFILES[profile], **overrides}).validate()

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise TrainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise TrainError("lambda must be non-negative")
        if self.tau <= 0:
            raise TrainError("tau must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be at least 1")
        if not self.lr_start >= self.lr_end > 0:
            raise TrainError("need lr_start >= lr_end > 0")
        if self.profile not in PROFILES:
            raise TrainError(f"unknown profile {self.profile!r}")
        return self

    @property
    def sequence_mode(self) -> str:
        return "dualcl" if self.mode in DUAL_MODES else "baseline"

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, d=self.d, n_layers=self.n_layers, n_heads=self.n_heads,
            ffn_dim=self.ffn_dim, max_len=self.max_len, dropout_rate=self.dropout_rate,
        ).validate()

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update, in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    if lr <= 0:
        raise TrainError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params or params[name].shape != np.shape(g):
            raise TrainError(f"gradient for {name!r} does not match any parameter shape")
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p
        p -= lr * update
    return params, state


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Linear decay: ``lr_start`` at step 0, ``lr_end`` at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    return lr_start + (lr_end - lr_start) * (step / total_steps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: TrainConfig
    vocab: Vocabulary
    labels: LabelSet
    params: dict[str, np.ndarray]

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.config.encoder_config(len(self.vocab))

    def batch(self, examples: Sequence[RawExample], orders=None) -> Batch:
        mode = self.config.sequence_mode
        seqs = [
            build_augmented_sequence(
                self.vocab, ex, self.labels, None if orders is None else orders[i], mode, self.config.max_len
            )
            for i, ex in enumerate(examples)
        ]
        return collate_batch(seqs, [ex.label_id for ex in examples])


def new_model(config: TrainConfig, vocab: Vocabulary, labels: LabelSet) -> Model:
    enc = config.encoder_config(len(vocab))
    params = init_params(enc, config.seed)
    if config.sequence_mode == "baseline":
        rng = np.random.default_rng([config.seed, 1])
        params["head.weight"] = rng.normal(0.0, 0.02, size=(config.d, len(labels)))
    return Model(config, vocab, labels, params)


@dataclass
class StepOutput:
    loss: obj.LossValue
    ce: float
    dual: float
    predictions: np.ndarray


def forward_objective(model: Model, leaves: dict, batch: Batch, train_mode: bool, dropout_seed=None) -> StepOutput:
    """Mode-specific training objective for one batch."""
    cfg = model.config
    enc = model.encoder_config
    y = np.asarray(batch.labels)

    if cfg.mode in DUAL_MODES:
        H = encode_tokens(leaves, batch, enc, train_mode, dropout_seed)
        reps = extract_representations(H, batch)
        ce = obj.loss_ce_modified(reps.Z, reps.theta, y)
        dual = obj.loss_dual(reps.Z, reps.theta_star, obj.build_relations(y), cfg.tau)
        lam = cfg.lam if cfg.mode == "DUALCL" else 0.0
        loss = obj.loss_overall(ce, dual, lam) if cfg.mode == "DUALCL" else ce
        preds = obj.predict(reps.Z, reps.theta)
        return StepOutput(loss, ce.value, dual.value, preds)

    head = leaves["head.weight"]
    if cfg.mode == "CE_CL":
        doubled = collate_batch_doubled(batch)
        H = encode_tokens(leaves, doubled, enc, train_mode, dropout_seed)
        Z2 = cls_features(H)
        b = len(batch)
        Z = ad.gather_rows(Z2, np.arange(b))
        ce = obj.cross_entropy(ad.matmul(Z, head), y)
        contrast = obj.loss_self(Z2, obj.halves_pairing(2 * b), cfg.tau)
        # both views of example i are anchors; report their mean per example
        contrast.per_anchor = contrast.per_anchor.reshape(2, b).mean(axis=0)
    else:
        H = encode_tokens(leaves, batch, enc, train_mode, dropout_seed)
        Z = cls_features(H)
        ce = obj.cross_entropy(ad.matmul(Z, head), y)
        contrast = obj.loss_sup(Z, obj.build_relations(y), cfg.tau) if cfg.mode == "CE_SCL" else None
    preds = np.argmax(Z.data @ head.data, axis=1)
    if contrast is None:
        return StepOutput(ce, ce.value, 0.0, preds)
    return StepOutput(obj.loss_overall(ce, contrast, cfg.lam), ce.value, contrast.value, preds)


def collate_batch_doubled(batch: Batch) -> Batch:
    """The batch stacked on top of itself (rows i and i + B are the same example)."""
    return Batch(
        np.concatenate([batch.ids, batch.ids]),
        np.concatenate([batch.mask, batch.mask]),
        np.concatenate([batch.labels, batch.labels]),
        list(batch.position_maps) * 2,
        batch.mode,
        batch.num_labels,
        list(batch.sentence_spans) * 2,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    dual: float
    overall: float
    train_acc: float
    test_acc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    steps: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def as_array(self) -> np.ndarray:
        return np.array([[getattr(r, f) for f in HISTORY_FIELDS] for r in self.records], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:]])


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    optimizer: OptimizerState


def _check_splits(train_set: Dataset, test_set: Dataset | None) -> None:
    if len(train_set) == 0:
        raise TrainError("training set is empty")
    if test_set is not None:
        if len(test_set) == 0:
            raise TrainError("test set is empty")
        if test_set.labels.names != train_set.labels.names:
            raise TrainError("train and test label spaces differ")


def train(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset | None = None,
    vocab: Vocabulary | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train an encoder under ``config.mode``; deterministic given ``config.seed``."""
    config.validate()
    _check_splits(train_set, test_set)
    vocab = vocab or build_vocab(train_set, min_freq=config.min_freq)
    model = new_model(config, vocab, train_set.labels)
    state = OptimizerState.zeros_like(model.params)
    rng = np.random.default_rng([config.seed, 2])
    n = len(train_set)
    k = len(train_set.labels)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * steps_per_epoch
    history = TrainHistory()
    dual_mode = config.mode in DUAL_MODES

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        correct = 0
        lr = config.lr_start
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            examples = [train_set.examples[i] for i in idx]
            label_orders = [rng.permutation(k) for _ in idx] if dual_mode else None
            batch = model.batch(examples, label_orders)
            step = history.steps
            with ad.Tape():
                leaves = {name: ad.as_tensor(p, requires_grad=True) for name, p in model.params.items()}
                out = forward_objective(model, leaves, batch, True, [config.seed, 3, step])
            gmap = ad.backward(out.loss.total)
            grads = {name: gmap[t] for name, t in leaves.items()}
            clip_by_global_norm(grads, config.clip_norm)
            lr = lr_at(step, max(total - 1, 0), config.lr_start, config.lr_end)
            adamw_step(model.params, grads, state, lr, config.weight_decay)
            for name, p in model.params.items():
                if not np.all(np.isfinite(p)):
                    raise TrainError(f"non-finite parameter {name!r} after step {step}")
            history.steps += 1
            sums += len(idx) * np.array([out.ce, out.dual, out.loss.value])
            correct += int((out.predictions == batch.labels).sum())
        test_acc = evaluate(model, test_set).accuracy if test_set is not None else float("nan")
        ce, dual, overall = sums / n
        rec = EpochRecord(epoch + 1, float(lr), float(ce), float(dual), float(overall), correct / n, float(test_acc))
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, history, state)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    predictions: np.ndarray
    logits: np.ndarray


def model_logits(model: Model, examples: Sequence[RawExample], batch_size: int = 256) -> np.ndarray:
    """Eval-mode class logits with the canonical label order."""
    out = []
    enc = model.encoder_config
    for start in range(0, len(examples), batch_size):
        batch = model.batch(examples[start:start + batch_size])
        H = encode_tokens(model.params, batch, enc, train_mode=False)
        if model.config.mode in DUAL_MODES:
            reps = extract_representations(H, batch)
            out.append(obj.class_logits(reps.Z, reps.theta).data)
        else:
            out.append(cls_features(H).data @ model.params["head.weight"])
    return np.concatenate(out) if out else np.zeros((0, len(model.labels)))


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    if dataset.labels.names != model.labels.names:
        raise TrainError("dataset labels do not match the model's labels")
    if model.config.sequence_mode == "baseline" and "head.weight" not in model.params:
        raise TrainError(f"mode {model.config.mode} needs a linear head in the parameters")
    logits = model_logits(model, dataset.examples, batch_size)
    preds = np.argmax(logits, axis=1)
    return accuracy_report(preds, dataset.label_ids, len(model.labels), logits)


def accuracy_report(preds, labels, k: int, logits=None) -> EvalResult:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    hit = preds == labels
    per_class = np.array([hit[labels == c].mean() if np.any(labels == c) else np.nan for c in range(k)])
    acc = float(hit.mean()) if hit.size else float("nan")
    return EvalResult(acc, per_class, preds, logits)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, optimizer: OptimizerState | None = None) -> list[Path]:
    """Write the tensor file plus a ``.json`` sidecar (config, labels, vocabulary)."""
    path = Path(path)
    tensors = {name: p for name, p in model.params.items() if not name.startswith("head.")}
    tensors.update({name: p for name, p in model.params.items() if name.startswith("head.")})
    if optimizer is not None:
        tensors["opt.t"] = np.array([float(optimizer.t)])
        for name in model.params:
            tensors[f"opt.m.{name}"] = optimizer.m[name]
            tensors[f"opt.v.{name}"] = optimizer.v[name]
    save_tensors(path, tensors)
    meta = {"config": model.config.to_dict(), "labels": model.labels.names, "vocab": model.vocab.itos}
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return [path, sidecar]


def load_checkpoint(path) -> tuple[Model, OptimizerState | None]:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if not sidecar.exists():
        raise FileNotFoundError(f"checkpoint metadata not found: {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    config = TrainConfig(**meta["config"]).validate()
    tensors = load_tensors(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model = Model(config, Vocabulary(meta["vocab"]), LabelSet(meta["labels"]), params)
    opt = None
    if "opt.t" in tensors:
        opt = OptimizerState(
            {k: tensors[f"opt.m.{k}"] for k in params},
            {k: tensors[f"opt.v.{k}"] for k in params},
            int(tensors["opt.t"][0]),
        )
    return model, opt


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    mode: str
    n: int
    mean_acc: float
    std_acc: float
    runs: int
    accuracies: list[float] = field(default_factory=list, repr=False)


def _sweep_run(args) -> tuple[str, int, int, float]:
    config, pool, test_set, n, seed = args
    subset = subsample_per_class(pool, n, seed) if n else pool
    result = train(config, subset, None)
    return config.mode, n, seed, evaluate(result.model, test_set).accuracy


def _summarize(results: Iterable[tuple[str, int, int, float]], keys) -> list[SweepRow]:
    grouped: dict[tuple[str, int], list[tuple[int, float]]] = {key: [] for key in keys}
    for mode, n, seed, acc in results:
        grouped[(mode, n)].append((seed, acc))
    rows = []
    for (mode, n), runs in grouped.items():
        accs = [a for _, a in sorted(runs)]
        rows.append(SweepRow(mode, n, float(np.mean(accs)), float(np.std(accs)), len(accs), accs))
    return rows


def low_resource_sweep(
    config: TrainConfig,
    dataset: Dataset,
    test_set: Dataset,
    n_list: Sequence[int],
    seed_list: Sequence[int],
    modes: Sequence[str] = ("CE", "DUALCL"),
    batch_size: int = 4,
    workers: int = 1,
) -> list[SweepRow]:
    """Train/evaluate every (mode, n, seed) on ``n`` examples per class.

    Returns one row per (mode, n) with the mean and population standard
    deviation of test accuracy across seeds.
    """
    smallest = int(dataset.class_counts().min())
    if max(n_list) > smallest:
        raise TrainError(f"n={max(n_list)} exceeds the smallest class size {smallest}")
    _check_splits(dataset, test_set)
    jobs = [
        (replace(config, mode=mode, seed=seed, batch_size=batch_size).validate(), dataset, test_set, n, seed)
        for mode in modes for n in n_list for seed in seed_list
    ]
    keys = [(mode, n) for mode in modes for n in n_list]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_run, jobs))
    else:
        results = [_sweep_run(job) for job in jobs]
    return _summarize(results, keys)


def lambda_grid_sweep(
    config: TrainConfig,
    dataset: Dataset,
    test_set: Dataset,
    grid: Sequence[float] = (0.01, 0.05, 0.1),
    seed_list: Sequence[int] = (0,),
    n: int = 0,
) -> list[SweepRow]:
    """DUALCL accuracy per lambda; ``n=0`` uses the whole training set."""
    rows = []
    for lam in grid:
        cfg = replace(config, mode="DUALCL", lam=float(lam)).validate()
        results = [_sweep_run((replace(cfg, seed=s), dataset, test_set, n, s)) for s in seed_list]
        (row,) = _summarize(results, [("DUALCL", n)])
        row.mode = f"DUALCL@lambda={lam:g}"
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r.mode, r.n, repr(r.mean_acc), repr(r.std_acc), r.runs])


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
