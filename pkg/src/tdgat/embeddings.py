"""GloVe-format word vectors and per-node input features."""

from __future__ import annotations

import gzip
import hashlib
import io
import logging
import os
from typing import Optional

import numpy as np

from .depgraph import DepGraph

logger = logging.getLogger(__name__)

OOV_SCALE = 0.05


class EmbeddingError(ValueError):
    pass


class EmbeddingTable:
    """Immutable word -> vector map.

    Unknown words get a pseudo-random vector drawn uniformly from
    [-0.05, 0.05], seeded by the word and ``oov_seed``; ``oov="zero"``
    returns zeros instead.
    """

    def __init__(self, vectors: dict, dim: int, oov_seed: int = 0, oov: str = "hashed"):
        if dim <= 0:
            raise EmbeddingError("dim must be positive")
        if oov not in ("hashed", "zero"):
            raise EmbeddingError(f"unknown OOV policy {oov!r}")
        self.dim = dim
        self.oov_seed = oov_seed
        self.oov = oov
        self._vectors = {}
        for word, vec in vectors.items():
            arr = np.array(vec, dtype=np.float64)
            if arr.shape != (dim,):
                raise EmbeddingError(f"vector for {word!r} has shape {arr.shape}, expected ({dim},)")
            arr.setflags(write=False)
            self._vectors[word] = arr
        self.duplicates = 0

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, word):
        return word in self._vectors

    def words(self):
        return list(self._vectors)

    def lookup(self, word: str) -> np.ndarray:
        vec = self._vectors.get(word)
        if vec is not None:
            return vec
        if self.oov == "zero":
            return np.zeros(self.dim)
        digest = hashlib.blake2b(
            word.encode("utf-8"), digest_size=8, key=str(self.oov_seed).encode("ascii")
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.uniform(-OOV_SCALE, OOV_SCALE, self.dim)


def lookup(table: EmbeddingTable, word: str) -> np.ndarray:
    return table.lookup(word)


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            magic = fh.read(2)
        if magic == b"\x1f\x8b":
            return gzip.open(source, "rt", encoding="utf-8"), True
        return open(source, "r", encoding="utf-8"), True
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary stream
    buffered = source if hasattr(source, "peek") else io.BufferedReader(source)
    if buffered.peek(2)[:2] == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.GzipFile(fileobj=buffered), encoding="utf-8"), False
    return io.TextIOWrapper(buffered, encoding="utf-8"), False


def load_glove(source, expected_dim: Optional[int] = None, oov_seed: int = 0, oov: str = "hashed") -> EmbeddingTable:
    """Load "word v1 ... vd" lines from a path or stream (gzip detected by magic bytes).

    With ``expected_dim`` set, words containing spaces are tolerated: the
    last ``expected_dim`` fields are the vector. Duplicate words keep the
    first occurrence.
    """
    fh, owned = _open_text(source)
    vectors = {}
    dim = expected_dim
    duplicates = 0
    try:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\r\n").rstrip(" ").split(" ")
            if not parts or parts == [""]:
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim <= 0:
                    raise EmbeddingError(f"line {lineno}: no vector components")
            if len(parts) - 1 > dim and expected_dim is not None:
                word = " ".join(parts[: len(parts) - dim])
                comps = parts[len(parts) - dim:]
            else:
                word, comps = parts[0], parts[1:]
            if len(comps) != dim:
                raise EmbeddingError(
                    f"line {lineno}: word {word!r} has {len(comps)} components, expected {dim}"
                )
            if word in vectors:
                duplicates += 1
                continue
            try:
                vectors[word] = np.array(comps, dtype=np.float64)
            except ValueError:
                raise EmbeddingError(f"line {lineno}: non-numeric component for word {word!r}") from None
    finally:
        if owned:
            fh.close()
    if not vectors:
        raise EmbeddingError("empty embedding file")
    if duplicates:
        logger.warning("%d duplicate words ignored (first occurrence kept)", duplicates)
    table = EmbeddingTable(vectors, dim, oov_seed=oov_seed, oov=oov)
    table.duplicates = duplicates
    return table


def save_glove(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word in table.words():
            fh.write(word + " " + " ".join(repr(float(x)) for x in table.lookup(word)) + "\n")


def node_features(graph: DepGraph, table: EmbeddingTable) -> np.ndarray:
    """Feature matrix [N x d]; the meta-node row is the mean over its words."""
    X = np.empty((graph.node_count, table.dim))
    for i, words in enumerate(graph.node_words):
        if len(words) == 1:
            X[i] = table.lookup(words[0])
        else:
            X[i] = np.mean([table.lookup(w) for w in words], axis=0)
    return X
