"""Corpus ingestion, character tokenization, vocabulary, fixed-length encoding,
stratified splits, batching, and word2vec-style text embedding files."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Example:
    text: str
    label: int


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocab must start with the reserved tokens " + " ".join(RESERVED))
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise DataError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)


def tokenize(text: str) -> list[str]:
    return [CLS] + [ch for ch in text if not ch.isspace()] + [SEP]


def build_vocab(examples: Sequence[Example], min_freq: int = 1) -> Vocab:
    """Characters with count >= min_freq, by frequency desc then first occurrence."""
    if not examples:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    for ex in examples:
        for tok in tokenize(ex.text)[1:-1]:
            counts[tok] += 1
            first.setdefault(tok, len(first))
    kept = [t for t in counts if counts[t] >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], first[t]))
    return Vocab(list(RESERVED) + kept)


def encode(text: str, vocab: Vocab, text_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and 0/1 mask, both of length ``text_size``.

    Over-long texts keep their head; the last kept slot is forced to [SEP].
    """
    if text_size < 3:
        raise ValueError(f"text_size must be >= 3, got {text_size}")
    ids = [vocab.id(t) for t in tokenize(text)]
    if len(ids) > text_size:
        ids = ids[:text_size]
        ids[-1] = SEP_ID
    row = np.full(text_size, PAD_ID, dtype=np.int64)
    row[: len(ids)] = ids
    return row, row != PAD_ID


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    return "".join(vocab.itos[i] for i in ids if i >= len(RESERVED))


def load_tsv(path: str | Path, labels: Sequence[str] | None = None) -> tuple[list[Example], list[str]]:
    """Read ``text<TAB>label`` lines.

    Label names map to ids in order of first appearance. When ``labels`` is
    given it is used as the fixed inventory and unknown names are an error.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    fixed = labels is not None
    inventory: list[str] = list(labels) if fixed else []
    index = {name: i for i, name in enumerate(inventory)}
    examples = []
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        try:
            text_line = line.decode("utf-8").rstrip("\r")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid UTF-8 ({exc.reason})") from exc
        if not text_line.strip():
            continue
        if "\t" not in text_line:
            raise DataError(f"{path}:{lineno}: expected 'text<TAB>label', found no tab")
        text, name = text_line.rsplit("\t", 1)
        name = name.strip()
        if not text.strip():
            raise DataError(f"{path}:{lineno}: empty text field")
        if not name:
            raise DataError(f"{path}:{lineno}: empty label field")
        if name not in index:
            if fixed:
                raise DataError(f"{path}:{lineno}: unknown label {name!r}")
            index[name] = len(inventory)
            inventory.append(name)
        examples.append(Example(text, index[name]))
    return examples, inventory


def split(
    examples: Sequence[Example],
    ratios: Sequence[float] = (18, 1, 1),
    seed: int = 0,
    num_classes: int | None = None,
) -> tuple[list[Example], list[Example], list[Example]]:
    """Stratified, seeded train/val/test split."""
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    by_class: dict[int, list[Example]] = {}
    for ex in examples:
        by_class.setdefault(ex.label, []).append(ex)
    k = num_classes if num_classes is not None else (max(by_class) + 1 if by_class else 0)
    if k == 0:
        raise DataError("cannot split an empty dataset")
    missing = [c for c in range(k) if c not in by_class]
    if missing:
        raise DataError(f"classes without examples: {missing}")
    total = float(sum(ratios))
    minimum = total / min(r for r in ratios if r > 0)
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for c in range(k):
        items = by_class[c]
        if len(items) < minimum:
            logger.warning("class %d has only %d examples; split is proportional", c, len(items))
        order = rng.permutation(len(items))
        n = len(items)
        n_train = int(round(n * ratios[0] / total))
        n_val = min(int(round(n * ratios[1] / total)), n - n_train)
        bounds = (0, n_train, n_train + n_val, n)
        for j in range(3):
            parts[j].extend(items[i] for i in order[bounds[j] : bounds[j + 1]])
    return tuple(
        [part[i] for i in rng.permutation(len(part))] for part in parts
    )  # type: ignore[return-value]


@dataclass
class Dataset:
    """Encoded examples: ids and mask are ``(N, text_size)``."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.ids[index], self.mask[index], self.labels[index])


Batch = Dataset


def encode_dataset(examples: Sequence[Example], vocab: Vocab, text_size: int) -> Dataset:
    n = len(examples)
    ids = np.zeros((n, text_size), dtype=np.int64)
    mask = np.zeros((n, text_size), dtype=bool)
    for i, ex in enumerate(examples):
        ids[i], mask[i] = encode(ex.text, vocab, text_size)
    return Dataset(ids, mask, np.array([ex.label for ex in examples], dtype=np.int64))


def batch_iter(
    data: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0
) -> Iterator[Batch]:
    """Yield consecutive batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield data.subset(order[start : start + batch_size])


# ---------------------------------------------------------------- embedding files


@dataclass
class EmbeddingFile:
    count: int
    dim: int
    vectors: dict[str, np.ndarray]


def parse_embedding_header(line: str) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 2:
        raise DataError(f"embedding header must be 'count dim', got {line.strip()!r}")
    try:
        count, dim = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise DataError(f"embedding header must be two integers, got {line.strip()!r}") from exc
    if count < 0 or dim < 1:
        raise DataError(f"embedding header out of range: {count} {dim}")
    return count, dim


def read_embedding_file(path: str | Path, wanted: set[str] | None = None) -> EmbeddingFile:
    """Parse a text embedding file; only rows in ``wanted`` are kept (all if None)."""
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc.strerror or exc}") from exc
    vectors: dict[str, np.ndarray] = {}
    with fh:
        count, dim = parse_embedding_header(fh.readline())
        rows = 0
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            rows += 1
            if len(parts) != dim + 1:
                raise DataError(
                    f"{path}:{lineno}: expected a token and {dim} numbers, got {len(parts) - 1} numbers"
                )
            if rows > count:
                raise DataError(f"{path}:{lineno}: more rows than the declared {count}")
            token = parts[0]
            if wanted is None or token in wanted:
                try:
                    vectors[token] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: non-numeric vector entry") from exc
    if rows < count:
        logger.warning("%s declares %d rows but holds %d", path, count, rows)
    return EmbeddingFile(count, dim, vectors)


def load_pretrained_embeddings(
    path: str | Path, vocab: Vocab, rng: np.random.Generator | None = None, std: float = 0.02
) -> tuple[np.ndarray, float]:
    """Embedding matrix for ``vocab`` plus the fraction of non-reserved tokens
    found in the file. Uncovered and reserved rows are drawn from N(0, std)."""
    rng = rng or np.random.default_rng(0)
    wanted = set(vocab.itos[len(RESERVED) :])
    emb = read_embedding_file(path, wanted)
    matrix = rng.normal(0.0, std, size=(len(vocab), emb.dim))
    hits = 0
    for i, tok in enumerate(vocab.itos):
        if i >= len(RESERVED) and tok in emb.vectors:
            matrix[i] = emb.vectors[tok]
            hits += 1
    coverage = hits / len(wanted) if wanted else 0.0
    return matrix, coverage
