"""Datasets, vocabulary, tokenization and label-aware sequence construction.

A label-aware sequence for a sentence ``s`` and label permutation ``order``::

    [CLS] label(order[0]) ... label(order[K-1]) [SEP] s_1 ... s_L [SEP]

``position_map[k]`` always refers to class id ``k``, wherever its tokens
landed in the sequence.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

MODES = ("dualcl", "baseline")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RawExample:
    text: str
    label_id: int


@dataclass
class LabelSet:
    names: list[str]
    token_ids: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.names) < 2:
            raise DataError("need at least 2 labels")
        if len(set(self.names)) != len(self.names):
            raise DataError("label names must be distinct")
        for name in self.names:
            if not tokenize(name):
                raise DataError(f"label {name!r} has no tokens")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown label name {name!r}") from None


@dataclass
class Dataset:
    examples: list[RawExample]
    labels: LabelSet
    split: str = "train"

    def __post_init__(self):
        k = len(self.labels)
        for ex in self.examples:
            if not 0 <= ex.label_id < k:
                raise DataError(f"label id {ex.label_id} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def label_ids(self) -> np.ndarray:
        return np.array([ex.label_id for ex in self.examples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.label_ids, minlength=len(self.labels))


class Vocabulary:
    """Token <-> id map with reserved ids, then label tokens, then corpus words."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def label_token_ids(self, labels: LabelSet) -> list[list[int]]:
        return [[self.stoi[t] for t in tokenize(name)] for name in labels.names]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n"))


def load_tsv(path, label_names: Sequence[str], split: str = "train") -> Dataset:
    """Read ``label<TAB>text`` lines; labels are mapped by name in ``label_names`` order."""
    labels = LabelSet(list(label_names))
    raw = Path(path).read_bytes()
    try:
        content = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from None
    examples = []
    for lineno, line in enumerate(content.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{lineno}: missing tab separator")
        name, text = line.split("\t", 1)
        if not text.strip():
            raise DataError(f"{path}:{lineno}: empty text field")
        try:
            label_id = labels.index(name.strip())
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        examples.append(RawExample(text, label_id))
    return Dataset(examples, labels, split)


def write_tsv(dataset: Dataset, path) -> None:
    lines = [f"{dataset.labels.names[ex.label_id]}\t{ex.text}" for ex in dataset.examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def build_vocab(dataset: Dataset, min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Reserved ids, label tokens in label order, then corpus tokens by frequency.

    Frequency ties are broken lexicographically. Corpus tokens below
    ``min_freq`` are left out and therefore encode as [UNK].
    """
    if len(dataset) == 0:
        raise DataError("cannot build a vocabulary from an empty dataset")
    tokens = list(RESERVED)
    for name in dataset.labels.names:
        for tok in tokenize(name):
            if tok not in tokens:
                tokens.append(tok)
    if max_size is not None and max_size < len(tokens):
        raise DataError(f"max_size {max_size} cannot hold {len(tokens)} reserved and label tokens")
    counts = Counter(tok for ex in dataset.examples for tok in tokenize(ex.text))
    taken = set(tokens)
    ranked = sorted(
        ((tok, c) for tok, c in counts.items() if c >= min_freq and tok not in taken),
        key=lambda tc: (-tc[1], tc[0]),
    )
    for tok, _ in ranked:
        if max_size is not None and len(tokens) >= max_size:
            break
        tokens.append(tok)
    return Vocabulary(tokens)


def encode_text(vocab: Vocabulary, text: str) -> list[int]:
    toks = tokenize(text)
    if not toks:
        raise DataError(f"text {text!r} is empty after normalization")
    return [vocab.id(t) for t in toks]


@dataclass
class AugmentedSequence:
    token_ids: list[int]
    position_map: dict[int, list[int]]
    sentence_length: int
    num_labels: int
    mode: str
    sentence_start: int

    @property
    def sentence_positions(self) -> list[int]:
        return list(range(self.sentence_start, self.sentence_start + self.sentence_length))


def build_augmented_sequence(
    vocab: Vocabulary,
    example: RawExample | str,
    labels: LabelSet,
    label_order: Sequence[int] | None = None,
    mode: str = "dualcl",
    max_len: int = 64,
) -> AugmentedSequence:
    """Build the token sequence fed to the encoder.

    In ``dualcl`` mode every label's tokens are listed (in ``label_order``)
    between [CLS] and the first [SEP]; only sentence tokens are truncated.
    ``baseline`` mode omits the label block.
    """
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}, got {mode!r}")
    text = example.text if isinstance(example, RawExample) else example
    sentence = encode_text(vocab, text)
    k = len(labels)

    if mode == "baseline":
        room = max_len - 2
        if room < 1:
            raise DataError(f"max_len {max_len} too small for [CLS] + 1 token + [SEP]")
        sentence = sentence[:room]
        ids = [CLS_ID] + sentence + [SEP_ID]
        return AugmentedSequence(ids, {}, len(sentence), k, mode, 1)

    order = list(range(k)) if label_order is None else [int(c) for c in label_order]
    if sorted(order) != list(range(k)):
        raise DataError(f"label_order {order} is not a permutation of 0..{k - 1}")
    label_tokens = vocab.label_token_ids(labels)
    block_len = sum(len(t) for t in label_tokens)
    room = max_len - block_len - 3
    if room < 1:
        raise DataError(
            f"max_len {max_len} too small for [CLS] + {block_len} label tokens + [SEP] + 1 token + [SEP]"
        )
    ids = [CLS_ID]
    position_map: dict[int, list[int]] = {}
    for cls_id in order:
        toks = label_tokens[cls_id]
        position_map[cls_id] = list(range(len(ids), len(ids) + len(toks)))
        ids.extend(toks)
    ids.append(SEP_ID)
    start = len(ids)
    sentence = sentence[:room]
    ids.extend(sentence)
    ids.append(SEP_ID)
    position_map = {c: position_map[c] for c in range(k)}
    return AugmentedSequence(ids, position_map, len(sentence), k, mode, start)


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    position_maps: list[dict[int, list[int]]]
    mode: str
    num_labels: int
    sentence_spans: list[tuple[int, int]]

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    def unpad(self) -> list[list[int]]:
        return [row[m.astype(bool)].tolist() for row, m in zip(self.ids, self.mask)]


def collate_batch(sequences: Sequence[AugmentedSequence], labels: Iterable[int]) -> Batch:
    """Right-pad with [PAD] to the longest sequence in the batch."""
    sequences = list(sequences)
    labels = np.asarray(list(labels), dtype=np.int64)
    if not sequences:
        raise DataError("cannot collate an empty batch")
    if len(labels) != len(sequences):
        raise DataError("labels and sequences differ in length")
    modes = {s.mode for s in sequences}
    if len(modes) > 1:
        raise DataError(f"mixed modes in one batch: {sorted(modes)}")
    ks = {s.num_labels for s in sequences}
    if len(ks) > 1:
        raise DataError("sequences disagree on the number of labels")
    t = max(len(s.token_ids) for s in sequences)
    ids = np.full((len(sequences), t), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), t), dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s.token_ids)] = s.token_ids
        mask[i, : len(s.token_ids)] = 1
    return Batch(
        ids,
        mask,
        labels,
        [s.position_map for s in sequences],
        sequences[0].mode,
        sequences[0].num_labels,
        [(s.sentence_start, s.sentence_start + s.sentence_length) for s in sequences],
    )


def subsample_per_class(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Exactly ``n`` examples per class, chosen uniformly without replacement."""
    y = dataset.label_ids
    rng = np.random.default_rng(seed)
    chosen = []
    for k, name in enumerate(dataset.labels.names):
        members = np.flatnonzero(y == k)
        if len(members) < n:
            raise DataError(f"class {name!r} has {len(members)} examples, fewer than {n}")
        chosen.append(rng.choice(members, size=n, replace=False))
    keep = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=int)
    return Dataset([dataset.examples[i] for i in keep], dataset.labels, dataset.split)


def default_label_names(k: int) -> list[str]:
    return ["positive", "negative"] if k == 2 else [f"class{c}" for c in range(k)]


def synthetic_keywords(k_classes: int, keyword_count: int) -> list[list[str]]:
    return [[f"key{c}x{j}" for j in range(keyword_count)] for c in range(k_classes)]


def make_synthetic(
    n_per_class: int,
    k_classes: int = 2,
    filler_vocab_size: int = 200,
    keyword_count: int = 4,
    length_range: tuple[int, int] = (6, 14),
    seed: int = 0,
    label_names: Sequence[str] | None = None,
    split: str = "train",
) -> Dataset:
    """Keyword-driven toy corpus.

    Each class owns ``keyword_count`` exclusive keywords; every text mixes 1-2
    of its class's keywords into filler words drawn from a shared pool.
    Keyword and filler spellings depend only on the counts, so corpora
    generated with different seeds share a vocabulary.
    """
    lo, hi = length_range
    if min(n_per_class, k_classes, filler_vocab_size, keyword_count, lo) <= 0 or hi < lo:
        raise DataError("make_synthetic needs positive counts and a valid length range")
    names = list(label_names) if label_names is not None else default_label_names(k_classes)
    if len(names) != k_classes:
        raise DataError("label_names must have k_classes entries")
    keywords = synthetic_keywords(k_classes, keyword_count)
    fillers = [f"w{i}" for i in range(filler_vocab_size)]
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n_per_class * k_classes):
        c = i % k_classes
        length = int(rng.integers(lo, hi + 1))
        n_kw = min(length, int(rng.integers(1, 3)))
        words = [fillers[j] for j in rng.integers(0, filler_vocab_size, size=length - n_kw)]
        for kw in rng.choice(keyword_count, size=n_kw, replace=True):
            words.insert(int(rng.integers(0, len(words) + 1)), keywords[c][kw])
        examples.append(RawExample(" ".join(words), c))
    order = rng.permutation(len(examples))
    return Dataset([examples[i] for i in order], LabelSet(names), split)
