"""Dataset loading, embedding tables, and batch assembly.

Datasets are line-delimited JSON: one object per line with a ``word``,
a ``definition`` (string or pre-tokenized list), and a word vector
given directly (``word_vector``), as per-occurrence subword vectors to
sum (``context_subword_vectors``), or resolved from a separate
embedding table.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary

__all__ = [
    "DictEntry",
    "DataFileError",
    "MissingWordError",
    "EmbeddingTable",
    "Batch",
    "aggregate_subword_vectors",
    "load_dataset",
    "make_batches",
]

log = logging.getLogger(__name__)


class DataFileError(ValueError):
    """A dataset or embedding file is malformed; carries file position."""

    def __init__(self, path, line_no: int | None, msg: str):
        self.path = str(path)
        self.line_no = line_no
        where = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"{where}: {msg}")


class MissingWordError(KeyError):
    """Lookup of a word absent from an embedding table."""

    def __init__(self, word: str):
        self.word = word
        super().__init__(word)

    def __str__(self) -> str:
        return f"word not in embedding table: {self.word!r}"


@dataclass
class DictEntry:
    """One headword/definition pair with its target embedding."""

    word: str
    definition: list[str]
    word_vector: np.ndarray
    context_subword_vectors: list[np.ndarray] | None = None

    def definition_text(self) -> str:
        return " ".join(self.definition)


def aggregate_subword_vectors(vectors: list[np.ndarray]) -> np.ndarray:
    """Combine per-subword vectors into one word vector by summation."""
    if not vectors:
        raise ValueError("cannot aggregate an empty subword vector list")
    out = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    for v in vectors:
        a = np.asarray(v, dtype=np.float64)
        if a.shape != out.shape:
            raise ValueError(f"subword vector shapes disagree: {a.shape} vs {out.shape}")
        out += a
    return out


class EmbeddingTable:
    """Word to vector map backed by a dense matrix.

    The text format is one header line ``count dim`` followed by one line
    per word: the word then ``dim`` float fields, space separated.
    """

    def __init__(self, words: list[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(words):
            raise ValueError(f"matrix shape {matrix.shape} does not match {len(words)} words")
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in embedding table")
        self.words = list(words)
        self.matrix = matrix
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def get(self, word: str) -> np.ndarray:
        i = self.index.get(word)
        if i is None:
            raise MissingWordError(word)
        return self.matrix[i]

    @classmethod
    def from_entries(cls, entries: list[DictEntry]) -> "EmbeddingTable":
        """Candidate table from a dataset, first occurrence of each word."""
        words, rows, seen = [], [], set()
        for e in entries:
            if e.word in seen:
                continue
            seen.add(e.word)
            words.append(e.word)
            rows.append(e.word_vector)
        return cls(words, np.stack(rows))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{len(self.words)} {self.dim}\n")
            for w, row in zip(self.words, self.matrix):
                f.write(w + " " + " ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        words: list[str] = []
        rows: list[np.ndarray] = []
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2:
                raise DataFileError(path, 1, "expected 'count dim' header")
            try:
                count, dim = int(header[0]), int(header[1])
            except ValueError:
                raise DataFileError(path, 1, f"bad header fields: {header}") from None
            for line_no, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                fields = line.rstrip("\n").split(" ")
                if len(fields) != dim + 1:
                    raise DataFileError(
                        path, line_no, f"expected word + {dim} floats, got {len(fields)} fields"
                    )
                words.append(fields[0])
                try:
                    rows.append(np.array([float(x) for x in fields[1:]], dtype=np.float64))
                except ValueError:
                    raise DataFileError(path, line_no, "non-numeric vector field") from None
        if len(words) != count:
            raise DataFileError(path, None, f"header promised {count} rows, found {len(words)}")
        return cls(words, np.stack(rows) if rows else np.zeros((0, dim)))


def _parse_definition(raw, path, line_no) -> list[str]:
    if isinstance(raw, str):
        toks = raw.split()
    elif isinstance(raw, list) and all(isinstance(t, str) for t in raw):
        toks = list(raw)
    else:
        raise DataFileError(path, line_no, "definition must be a string or list of strings")
    if not toks:
        raise DataFileError(path, line_no, "empty definition")
    return toks


def load_dataset(
    path,
    expected_dim: int | None = None,
    embeddings: EmbeddingTable | None = None,
) -> list[DictEntry]:
    """Read a line-delimited JSON dataset.

    Word vectors resolve in order: an explicit ``word_vector`` field, the
    sum of ``context_subword_vectors``, then a lookup in ``embeddings``.
    With a table present, words it cannot resolve are dropped and the
    total count logged; with no table, an unresolvable record is an error.
    """
    entries: list[DictEntry] = []
    dim = expected_dim
    dropped = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFileError(path, line_no, f"invalid JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise DataFileError(path, line_no, "expected a JSON object")
            word = obj.get("word")
            if not isinstance(word, str) or not word:
                raise DataFileError(path, line_no, "missing or empty 'word'")
            definition = _parse_definition(obj.get("definition"), path, line_no)

            subword = None
            if obj.get("context_subword_vectors") is not None:
                raw = obj["context_subword_vectors"]
                if not isinstance(raw, list) or not raw:
                    raise DataFileError(path, line_no, "context_subword_vectors must be a non-empty list")
                subword = [np.asarray(v, dtype=np.float64) for v in raw]

            if obj.get("word_vector") is not None:
                vec = np.asarray(obj["word_vector"], dtype=np.float64)
            elif subword is not None:
                try:
                    vec = aggregate_subword_vectors(subword)
                except ValueError as e:
                    raise DataFileError(path, line_no, str(e)) from None
            elif embeddings is not None:
                if word not in embeddings:
                    dropped += 1
                    continue
                vec = embeddings.get(word)
            else:
                raise DataFileError(
                    path, line_no, f"no vector for {word!r} and no embedding table given"
                )
            if vec.ndim != 1:
                raise DataFileError(path, line_no, f"word vector must be rank 1, got shape {vec.shape}")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DataFileError(
                    path, line_no, f"vector dim {vec.shape[0]} differs from expected {dim}"
                )
            entries.append(DictEntry(word, definition, vec, subword))
    if dropped:
        log.warning("dropped %d records with words missing from the embedding table", dropped)
    if not entries:
        raise DataFileError(path, None, "dataset contains no usable records")
    return entries


@dataclass
class Batch:
    """Collated entries: stacked word vectors plus framed, padded token ids."""

    entries: list[DictEntry]
    word_vectors: Tensor
    def_ids: np.ndarray
    pad_mask: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def def_prefix(self) -> np.ndarray:
        """Decoder input ids: everything but the last column."""
        return self.def_ids[:, :-1]

    @property
    def def_gold(self) -> np.ndarray:
        """Decoder target ids: everything but the first column."""
        return self.def_ids[:, 1:]

    def entry_ids(self, i: int) -> list[int]:
        """Framed ids of entry ``i`` without padding."""
        return list(self.def_ids[i, : self.lengths[i]])


def _collate(entries: list[DictEntry], vocab: Vocabulary) -> Batch:
    framed = [[BOS_ID] + vocab.encode(e.definition) + [EOS_ID] for e in entries]
    width = max(len(ids) for ids in framed)
    def_ids = np.full((len(entries), width), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(entries), dtype=np.int64)
    for i, ids in enumerate(framed):
        def_ids[i, : len(ids)] = ids
        lengths[i] = len(ids)
    pad_mask = def_ids != PAD_ID
    vecs = Tensor(np.stack([e.word_vector for e in entries]))
    return Batch(entries, vecs, def_ids, pad_mask, lengths)


def make_batches(
    entries: list[DictEntry],
    vocab: Vocabulary,
    batch_size: int,
    shuffle_seed=None,
) -> list[Batch]:
    """Split entries into padded batches.

    ``shuffle_seed`` of None keeps dataset order; any other value seeds a
    private generator so the same seed always yields the same order. The
    final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(entries))
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        order = rng.permutation(len(entries))
    out = []
    for lo in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[lo : lo + batch_size]]
        out.append(_collate(chunk, vocab))
    return out
