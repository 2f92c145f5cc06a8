"""Corpora of (graph, target, polarity) examples, dev splits and synthetic fixtures."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .depgraph import POLARITIES, DepGraph, ParsedSentence, build_graph, load_jsonl
from .embeddings import EmbeddingTable, node_features

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Example:
    sentence: ParsedSentence
    graph: DepGraph
    label: int  # index into POLARITIES
    split: str = "train"

    @property
    def polarity(self) -> str:
        return POLARITIES[self.label]

    def features(self, table: EmbeddingTable) -> np.ndarray:
        return node_features(self.graph, table)


@dataclass
class Corpus:
    examples: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def split(self, tag: str) -> "Corpus":
        return Corpus([e for e in self.examples if e.split == tag], f"{self.name}/{tag}")

    def retag(self, tag: str) -> "Corpus":
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return Corpus([replace(e, split=tag) for e in self.examples], self.name)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.intp)

    def __add__(self, other: "Corpus") -> "Corpus":
        return Corpus(self.examples + other.examples, self.name or other.name)


def example_from_sentence(sentence: ParsedSentence, split: str = "train") -> Example:
    if sentence.polarity is None:
        raise ValueError("sentence has no polarity label")
    return Example(sentence, build_graph(sentence), POLARITIES.index(sentence.polarity), split)


def corpus_from_sentences(sentences: Iterable[ParsedSentence], split: str = "train", name: str = "") -> Corpus:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return Corpus([example_from_sentence(s, split) for s in sentences], name)


def load_corpus(path, split: str = "train", name: Optional[str] = None) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        sentences = load_jsonl(fh)
    return corpus_from_sentences(sentences, split, name if name is not None else str(path))


def read_split_sidecar(path) -> list:
    """Dev-split sidecar: one 0-based example index per line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer index: {line!r}") from None
    return out


def split_dev(corpus: Corpus, n: int = 500, seed: int = 0, indices: Optional[Sequence[int]] = None):
    """Move ``n`` examples into a dev split.

    With ``indices`` (e.g. a published split) those examples are used
    instead of a seeded uniform sample.
    """
    size = len(corpus)
    if indices is not None:
        chosen = sorted(set(int(i) for i in indices))
        if len(chosen) != len(indices):
            raise ValueError("duplicate indices in dev split")
        if chosen and (chosen[0] < 0 or chosen[-1] >= size):
            raise ValueError("dev split index out of range")
        if len(chosen) >= size:
            raise ValueError("dev split would leave no training examples")
    else:
        if size <= n:
            raise ValueError(f"corpus of {size} examples is too small for a dev split of {n}")
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(size, size=n, replace=False).tolist())
    dev_set = set(chosen)
    train = [replace(e, split="train") for i, e in enumerate(corpus.examples) if i not in dev_set]
    dev = [replace(corpus.examples[i], split="dev") for i in chosen]
    return Corpus(train, corpus.name), Corpus(dev, corpus.name)


def dataset_stats(corpus: Corpus) -> dict:
    """Counts per split and polarity: {split: {polarity: count}}."""
    stats = {s: {p: 0 for p in POLARITIES} for s in SPLITS}
    for e in corpus.examples:
        stats[e.split][POLARITIES[e.label]] += 1
    return stats


def format_stats(stats: dict, name: str = "") -> str:
    prefix = f"{name}-" if name else ""
    header = f"{'Dataset':<20}" + "".join(f"{p.capitalize():>10}" for p in POLARITIES) + f"{'Total':>10}"
    lines = [header, "-" * len(header)]
    for split in SPLITS:
        row = stats[split]
        lines.append(f"{prefix + split.capitalize():<20}" + "".join(f"{row[p]:>10}" for p in POLARITIES)
                     + f"{sum(row.values()):>10}")
    return "\n".join(lines)


# -- synthetic corpus ---------------------------------------------------------

SENTIMENT_WORDS = {
    0: ("great", "excellent", "superb"),
    1: ("average", "okay", "ordinary"),
    2: ("awful", "terrible", "poor"),
}
ASPECT_WORDS = ("battery", "screen", "keyboard", "service", "food", "price", "staff", "menu")
FILLER_WORDS = ("the", "was", "is", "really", "quite", "and", "very", "also", "it", "this")


def synth_vocab() -> list:
    words = [w for group in SENTIMENT_WORDS.values() for w in group]
    return words + list(ASPECT_WORDS) + list(FILLER_WORDS)


def synth_sentence(rng: np.random.Generator, label: int) -> ParsedSentence:
    """A random tree with the aspect as root and one sentiment word 1 or 2 hops away.

    Node 0 is the aspect. The sentiment word either hangs off the aspect
    directly or off a filler word that does. Remaining filler words attach
    to random earlier non-sentiment nodes. Token order is then shuffled so
    position carries no signal.
    """
    distance = int(rng.integers(1, 3))
    tokens = [str(rng.choice(ASPECT_WORDS))]
    heads = [-1]
    anchor = 0
    if distance == 2:
        tokens.append(str(rng.choice(FILLER_WORDS)))
        heads.append(0)
        anchor = 1
    tokens.append(str(rng.choice(SENTIMENT_WORDS[label])))
    heads.append(anchor)
    sentiment_node = len(tokens) - 1
    for _ in range(int(rng.integers(1, 4))):
        candidates = [i for i in range(len(tokens)) if i != sentiment_node]
        tokens.append(str(rng.choice(FILLER_WORDS)))
        heads.append(int(rng.choice(candidates)))
    order = rng.permutation(len(tokens))  # order[new] = old
    position = np.empty_like(order)
    position[order] = np.arange(len(tokens))
    new_tokens = [tokens[old] for old in order]
    new_heads = [-1 if heads[old] == -1 else int(position[heads[old]]) for old in order]
    start = int(position[0])
    return ParsedSentence(new_tokens, new_heads, (start, start + 1), POLARITIES[label]).validate()


def synth_corpus(size: int, vocab: Optional[Sequence[str]] = None, seed: int = 0, split: str = "train") -> Corpus:
    """Class-balanced corpus whose labels follow from graph structure and words alone.

    ``vocab`` is accepted for interface symmetry; the generator draws from
    :func:`synth_vocab` and rejects any other vocabulary.
    """
    if size < 3:
        raise ValueError("synthetic corpus needs at least 3 examples")
    if vocab is not None and set(vocab) != set(synth_vocab()):
        raise ValueError("custom vocabularies are not supported by the generator")
    rng = np.random.default_rng(seed)
    labels = [i % 3 for i in range(size)]
    rng.shuffle(labels)
    sentences = [synth_sentence(rng, int(y)) for y in labels]
    return corpus_from_sentences(sentences, split, name=f"synth-{size}-{seed}")


def synth_embeddings(dim: int, seed: int = 0, words: Optional[Sequence[str]] = None) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    words = list(words) if words is not None else synth_vocab()
    return EmbeddingTable({w: rng.normal(0.0, 1.0, dim) for w in words}, dim, oov_seed=seed)


def bfs_distances(graph: DepGraph, source: int) -> dict:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        i = queue.popleft()
        for j in graph.adjacency[i]:
            if j not in dist:
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist
