"""Command-line entry point: ``dualcl <command> [flags]``.

Commands: train, eval, sweep, export-repr, attention, check-bound, synth.
Settings resolve as flags > ``--config`` file > defaults. Config files hold
``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analysis
from .encoder import cls_features, encode_tokens, extract_representations
from .text import (
    DataError,
    RawExample,
    build_augmented_sequence,
    collate_batch,
    default_label_names,
    load_tsv,
    make_synthetic,
    tokenize,
    write_tsv,
)
from .trainer import (
    DUAL_MODES,
    MODES,
    PROFILES,
    TrainConfig,
    evaluate,
    lambda_grid_sweep,
    load_checkpoint,
    low_resource_sweep,
    save_checkpoint,
    train,
    write_sweep_csv,
)

COMMANDS = ("train", "eval", "sweep", "export-repr", "attention", "check-bound", "synth")


class UsageError(Exception):
    pass


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _names(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _mode(s: str) -> str:
    m = s.strip().upper().replace("-", "_").replace("+", "_")
    if m not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}")
    return m


def _profile(s: str) -> str:
    if s not in PROFILES:
        raise ValueError(f"profile must be one of {', '.join(PROFILES)}")
    return s


def _modes(s: str) -> list[str]:
    return [_mode(x) for x in s.split(",") if x.strip()]


# key -> (parser, default); None default means "unset"
KEYS: dict[str, tuple[Callable[[str], object], object]] = {
    "out": (str, None),
    "seed": (int, 0),
    "mode": (_mode, "DUALCL"),
    "lambda": (float, 0.1),
    "tau": (float, 0.1),
    "profile": (_profile, "desk"),
    "epochs": (int, None),
    "batch_size": (int, None),
    "train": (str, None),
    "test": (str, None),
    "labels": (_names, None),
    "checkpoint": (str, None),
    "n_list": (_ints, [5, 10, 20]),
    "seeds": (_ints, list(range(10))),
    "modes": (_modes, ["CE", "DUALCL_NO_DUAL", "DUALCL"]),
    "lambda_grid": (_floats, None),
    "sweep_epochs": (int, 60),
    "sweep_batch_size": (int, 4),
    "workers": (int, 1),
    "n_per_class": (int, 1000),
    "test_per_class": (int, 500),
    "classes": (int, 2),
    "text": (str, None),
    "limit": (int, 64),
}


@dataclass
class RunConfig:
    command: str
    settings: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.settings[key]

    def train_config(self) -> TrainConfig:
        s = self.settings
        over = {"mode": s["mode"], "lam": s["lambda"], "tau": s["tau"], "seed": s["seed"]}
        if s["epochs"] is not None:
            over["epochs"] = s["epochs"]
        if s["batch_size"] is not None:
            over["batch_size"] = s["batch_size"]
        return TrainConfig.from_profile(s["profile"], **over)

    @property
    def out_dir(self) -> Path:
        return Path(self.settings["out"])


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into raw strings; unknown keys are rejected."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise UsageError(f"unknown key {key}")
        raw[key] = value
    return raw


def _convert(key: str, value: str):
    try:
        return KEYS[key][0](value)
    except ValueError as exc:
        raise UsageError(f"cannot parse {key} = {value!r}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualcl", description="Dual contrastive learning for text classification.")
    p.add_argument("command", help=", ".join(COMMANDS))
    S = argparse.SUPPRESS
    p.add_argument("--config", default=None, help="key = value settings file")
    for key in KEYS:
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, default=S, metavar=key.upper())
    return p


def parse_config(args: Sequence[str], config_text_path=None) -> RunConfig:
    """Resolve command-line flags, optional config file and defaults."""
    args = list(args)
    if not args:
        raise UsageError("no command given")
    parser = build_parser()
    try:
        ns = parser.parse_args(args)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise UsageError("invalid arguments") from exc
    if ns.command not in COMMANDS:
        raise UsageError(f"unknown command {ns.command!r}; expected one of {', '.join(COMMANDS)}")
    flags = {k: v for k, v in vars(ns).items() if k in KEYS}
    cfg_path = ns.config or config_text_path
    from_file = read_config_file(cfg_path) if cfg_path else {}
    if "lambda" in flags and "lambda_grid" in flags:
        raise UsageError("--lambda and --lambda-grid conflict")

    settings = {}
    for key, (_, default) in KEYS.items():
        if key in flags:
            settings[key] = _convert(key, flags[key])
        elif key in from_file:
            settings[key] = _convert(key, from_file[key])
        else:
            settings[key] = list(default) if isinstance(default, list) else default
    if settings["out"] is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        settings["out"] = str(Path("runs") / f"{stamp}-seed{settings['seed']}")
    run = RunConfig(ns.command, settings)
    try:
        run.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return run


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _require(run: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if run[k] is None]
    if missing:
        raise UsageError(f"{run.command} needs --{' --'.join(m.replace('_', '-') for m in missing)}")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def _emit(paths) -> None:
    for p in paths:
        print(p)


def _labels(run: RunConfig, fallback=None) -> list[str]:
    if run["labels"]:
        return run["labels"]
    if fallback is not None:
        return fallback
    raise UsageError(f"{run.command} needs --labels")


def cmd_train(run: RunConfig) -> None:
    _require(run, "train")
    labels = _labels(run)
    train_set = load_tsv(_require_file(run["train"]), labels)
    test_set = load_tsv(_require_file(run["test"]), labels, "test") if run["test"] else None
    result = train(run.train_config(), train_set, test_set)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    written = save_checkpoint(out / "model.ckpt", result.model, result.optimizer)
    result.history.to_csv(out / "history.csv")
    _emit([*written, out / "history.csv"])


def _load_model(run: RunConfig):
    _require(run, "checkpoint")
    return load_checkpoint(_require_file(run["checkpoint"]))[0]


def cmd_eval(run: RunConfig) -> None:
    model = _load_model(run)
    _require(run, "test")
    data = load_tsv(_require_file(run["test"]), _labels(run, model.labels.names), "test")
    res = evaluate(model, data)
    print(f"accuracy: {res.accuracy:.6f}")
    for name, acc in zip(model.labels.names, res.per_class):
        print(f"accuracy[{name}]: {acc:.6f}")


def cmd_sweep(run: RunConfig) -> None:
    _require(run, "train", "test")
    labels = _labels(run)
    pool = load_tsv(_require_file(run["train"]), labels)
    test_set = load_tsv(_require_file(run["test"]), labels, "test")
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(run.train_config(), epochs=run["epochs"] or run["sweep_epochs"])
    if run["lambda_grid"]:
        rows = lambda_grid_sweep(cfg, pool, test_set, run["lambda_grid"], run["seeds"])
        path = out / "lambda_sweep.csv"
    else:
        rows = low_resource_sweep(
            cfg, pool, test_set, run["n_list"], run["seeds"], run["modes"],
            batch_size=run["batch_size"] or run["sweep_batch_size"], workers=run["workers"],
        )
        path = out / "sweep.csv"
    write_sweep_csv(rows, path)
    _emit([path])


def _test_examples(run: RunConfig, model):
    if run["text"]:
        return [RawExample(t, 0) for t in run["text"].split("|") if t.strip()]
    _require(run, "test")
    data = load_tsv(_require_file(run["test"]), _labels(run, model.labels.names), "test")
    return data.examples[: run["limit"]] if run["limit"] > 0 else data.examples


def _features(model, examples):
    batch = model.batch(examples)
    H = encode_tokens(model.params, batch, model.encoder_config, train_mode=False)
    return batch, H


def cmd_export_repr(run: RunConfig) -> None:
    model = _load_model(run)
    examples = _test_examples(run, model)
    batch, H = _features(model, examples)
    y = batch.labels
    if model.config.mode in DUAL_MODES:
        reps = extract_representations(H, batch)
        feats, cls_pts = reps.Z.data, reps.theta_star.data
        cls_labels = y
    else:
        feats = cls_features(H).data
        W = model.params["head.weight"].T
        cls_pts = W / np.linalg.norm(W, axis=1, keepdims=True)
        cls_labels = np.arange(len(model.labels))
    pts = np.vstack([feats, cls_pts])
    ids = list(y) + list(cls_labels)
    kinds = ["feature"] * len(feats) + ["classifier"] * len(cls_pts)
    coords = analysis.project_2d(pts)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_representation_csv(coords, ids, kinds, out / "representations.csv")
    analysis.emit_svg_scatter(coords, ids, kinds, out / "representations.svg")
    _emit([out / "representations.csv", out / "representations.svg"])


def cmd_attention(run: RunConfig) -> None:
    model = _load_model(run)
    examples = _test_examples(run, model)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, ex in enumerate(examples):
        seq = build_augmented_sequence(
            model.vocab, ex, model.labels, None, model.config.sequence_mode, model.config.max_len
        )
        batch = collate_batch([seq], [ex.label_id])
        H = encode_tokens(model.params, batch, model.encoder_config).data[0]
        toks = tokenize(ex.text)[: seq.sentence_length]
        amap = analysis.attention_scores(H, H[0], seq.sentence_positions, toks)
        path = out / f"attention_{i:03d}.csv"
        amap.to_csv(path)
        written.append(path)
    _emit(written)


def cmd_check_bound(run: RunConfig) -> None:
    model = _load_model(run)
    if model.config.mode not in DUAL_MODES:
        raise UsageError("check-bound needs a DUALCL or DUALCL_NO_DUAL checkpoint")
    examples = _test_examples(run, model)
    batch, H = _features(model, examples)
    reps = extract_representations(H, batch)
    report = analysis.check_mi_bound(reps.Z, reps.theta_star, batch.labels)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "bound.txt")
    _emit([out / "bound.txt"])


def cmd_synth(run: RunConfig) -> None:
    k = run["classes"]
    names = run["labels"] or default_label_names(k)
    seed = run["seed"]
    train_set = make_synthetic(run["n_per_class"], k, seed=2 * seed + 1, label_names=names)
    test_set = make_synthetic(run["test_per_class"], k, seed=2 * seed + 2, label_names=names, split="test")
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(train_set, out / "train.tsv")
    write_tsv(test_set, out / "test.tsv")
    (out / "labels.txt").write_text(",".join(names) + "\n", encoding="utf-8")
    _emit([out / "train.tsv", out / "test.tsv", out / "labels.txt"])


DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-repr": cmd_export_repr,
    "attention": cmd_attention,
    "check-bound": cmd_check_bound,
    "synth": cmd_synth,
}


def dispatch(run: RunConfig) -> int:
    try:
        DISPATCH[run.command](run)
    except UsageError as exc:
        print(f"dualcl: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, DataError) as exc:
        print(f"dualcl: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        run = parse_config(argv)
    except UsageError as exc:
        print(f"dualcl: usage error: {exc}", file=sys.stderr)
        return 2
    return dispatch(run)


if __name__ == "__main__":
    sys.exit(main())
