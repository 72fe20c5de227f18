"""Vocabulary construction, sentence codes and the word-embedding table.

A sentence code stores, for each of ``L`` positions, the index of the word at
that position or :data:`PAD`. It is the sparse form of the ``L x d`` one-hot
matrix the text network consumes: a PAD position is an all-zero row.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autograd import Parameter
from .errors import DataError, FormatError, ParameterError, ParseError

PAD = -1
DEFAULT_MAX_LEN = 32

_STRIP = string.punctuation


def tokenize(sentence: str) -> list[str]:
    """Lowercase, split on whitespace and strip punctuation from token ends."""
    tokens = (tok.strip(_STRIP) for tok in sentence.lower().split())
    return [tok for tok in tokens if tok]


class Vocabulary:
    """Bijection between words and indices ``0..d-1``, plus an optional embedding table."""

    def __init__(self, words: Sequence[str], embedding: Optional[np.ndarray] = None):
        self.words = list(words)
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise DataError("vocabulary words must be unique")
        if embedding is not None:
            embedding = np.asarray(embedding)
            if embedding.ndim != 2 or embedding.shape[0] != len(self.words):
                raise FormatError(
                    f"embedding table has {embedding.shape[0] if embedding.ndim else 0} rows, vocabulary has {len(self.words)}"
                )
        self.embedding = embedding

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary) or self.words != other.words:
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return np.array_equal(self.embedding, other.embedding)

    def index(self, word: str) -> int:
        return self._index[word]

    def lookup(self, tokens: Iterable[str]) -> list[int]:
        """Indices of the in-vocabulary tokens; others are dropped."""
        return [self._index[t] for t in tokens if t in self._index]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, w in enumerate(self.words):
                fh.write(f"{w}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries: dict[int, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ParseError(path, lineno, f"expected 'word<TAB>index', got {line!r}")
                entries[int(parts[1])] = parts[0]
        if sorted(entries) != list(range(len(entries))):
            raise FormatError(f"{path}: indices are not a contiguous range from 0")
        return cls([entries[i] for i in range(len(entries))])


def build_vocabulary(
    corpus: Iterable[str], allowlist: Optional[Iterable[str]] = None, min_count: int = 1
) -> Vocabulary:
    """Assign indices to words by first occurrence.

    Words outside ``allowlist`` (when given) and words seen fewer than
    ``min_count`` times are dropped.
    """
    allowed = None if allowlist is None else set(allowlist)
    counts: Counter = Counter()
    order: list[str] = []
    n_sentences = 0
    for sentence in corpus:
        n_sentences += 1
        for tok in tokenize(sentence):
            if allowed is not None and tok not in allowed:
                continue
            if tok not in counts:
                order.append(tok)
            counts[tok] += 1
    if n_sentences == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    words = [w for w in order if counts[w] >= min_count]
    if not words:
        raise DataError("no corpus word survived the vocabulary filters")
    return Vocabulary(words)


@dataclass(frozen=True)
class TextCode:
    """Fixed-length sentence code: ``indices`` has length ``L``; ``n`` words are non-PAD."""

    indices: np.ndarray
    n: int

    @property
    def max_len(self) -> int:
        return len(self.indices)

    @property
    def offset(self) -> int:
        return int(np.flatnonzero(self.indices != PAD)[0])

    def one_hot(self, vocab_size: int) -> np.ndarray:
        """Dense ``L x d`` matrix; PAD rows are all zero."""
        dense = np.zeros((len(self.indices), vocab_size))
        rows = np.flatnonzero(self.indices != PAD)
        dense[rows, self.indices[rows]] = 1.0
        return dense


def place(word_indices: Sequence[int], max_len: int, offset: int = 0) -> TextCode:
    n = len(word_indices)
    if n > max_len:
        raise DataError(f"{n} words do not fit in length {max_len}")
    if not 0 <= offset <= max_len - n:
        raise DataError(f"offset {offset} outside [0, {max_len - n}]")
    indices = np.full(max_len, PAD, dtype=np.int64)
    indices[offset : offset + n] = word_indices
    return TextCode(indices, n)


def encode_sentence(
    sentence: str,
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
    mode: str = "left",
    rng: Optional[np.random.Generator] = None,
    offset: Optional[int] = None,
) -> TextCode:
    """Convert a sentence into a :class:`TextCode`.

    Out-of-vocabulary words are dropped and words past ``max_len`` are clipped.
    ``mode="left"`` places the words at the start; ``mode="shift"`` places them
    at an offset drawn uniformly from ``[0, max_len - n]`` (or the explicit
    ``offset``).
    """
    word_indices = vocab.lookup(tokenize(sentence))
    if not word_indices:
        raise DataError(f"sentence has no in-vocabulary word: {sentence!r}")
    word_indices = word_indices[:max_len]
    if mode == "left":
        return place(word_indices, max_len, 0)
    if mode != "shift":
        raise ParameterError(f"unknown alignment mode {mode!r}")
    if offset is None:
        if rng is None:
            raise ParameterError("shift mode needs a generator or an explicit offset")
        offset = int(rng.integers(0, max_len - len(word_indices) + 1))
    return place(word_indices, max_len, offset)


def decode(code: TextCode, vocab: Vocabulary) -> list[str]:
    return [vocab.words[i] for i in code.indices if i != PAD]


def init_word_embedding(
    vocab: Vocabulary,
    dim: Optional[int] = None,
    source: str = "random",
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
) -> Parameter:
    """Build the ``d x E`` lookup kernel of the text network's first layer.

    ``source="table"`` copies ``vocab.embedding`` row by row; ``"random"``
    draws Glorot-uniform values from ``rng``.
    """
    d = len(vocab)
    if source == "table":
        if vocab.embedding is None:
            raise FormatError("vocabulary carries no embedding table")
        table = np.asarray(vocab.embedding)
        if table.shape[0] != d:
            raise FormatError(f"embedding table has {table.shape[0]} rows, vocabulary has {d}")
        if dim is not None and table.shape[1] != dim:
            raise FormatError(f"embedding table width {table.shape[1]} != requested {dim}")
        return Parameter(table.astype(dtype, copy=True), name="word_embedding")
    if source != "random":
        raise ParameterError(f"unknown embedding source {source!r}")
    if dim is None or rng is None:
        raise ParameterError("random embedding init needs dim and rng")
    return Parameter(glorot_uniform(rng, d, dim, dtype), name="word_embedding")


def glorot_uniform(rng: np.random.Generator, d: int, dim: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (d + dim))
    return rng.uniform(-limit, limit, size=(d, dim)).astype(dtype)


def save_embedding_table(table: np.ndarray, path) -> None:
    table = np.asarray(table)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{table.shape[0]} {table.shape[1]}\n")
        for row in table:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_embedding_table(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 2 or not all(h.isdigit() for h in header):
        raise ParseError(path, 1, f"expected 'd E' header, got {lines[0]!r}")
    d, e = int(header[0]), int(header[1])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != d:
        raise FormatError(f"{path}: header declares {d} rows, found {len(rows)}")
    table = np.empty((d, e))
    for i, ln in enumerate(rows):
        try:
            values = [float(v) for v in ln.split()]
        except ValueError as exc:
            raise ParseError(path, i + 2, str(exc)) from None
        if len(values) != e:
            raise ParseError(path, i + 2, f"expected {e} values, got {len(values)}")
        table[i] = values
    return table
