"""Dependency graphs over parsed sentences, with the aspect span collapsed into one node."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Optional, TextIO, Union

logger = logging.getLogger(__name__)

POLARITIES = ("positive", "neutral", "negative")


class SentenceError(ValueError):
    """A parsed sentence violates one of its structural invariants."""


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ParsedSentence:
    tokens: tuple
    heads: tuple
    aspect_span: Optional[tuple] = None
    polarity: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.aspect_span is not None:
            object.__setattr__(self, "aspect_span", tuple(int(i) for i in self.aspect_span))

    def validate(self) -> "ParsedSentence":
        n = len(self.tokens)
        if n == 0:
            raise SentenceError("empty sentence")
        if len(self.heads) != n:
            raise SentenceError(f"heads has length {len(self.heads)}, tokens has {n}")
        roots = [i for i, h in enumerate(self.heads) if h == -1]
        if len(roots) != 1:
            raise SentenceError(f"expected exactly one root, found {len(roots)}")
        for i, h in enumerate(self.heads):
            if h == -1:
                continue
            if h == i:
                raise SentenceError(f"self-head at token {i}")
            if not 0 <= h < n:
                raise SentenceError(f"head {h} of token {i} out of range")
        if self.aspect_span is not None:
            if len(self.aspect_span) != 2:
                raise SentenceError("aspect_span must be [start, end)")
            start, end = self.aspect_span
            if not 0 <= start < end <= n:
                raise SentenceError(f"span out of range: [{start}, {end}) for {n} tokens")
        if self.polarity is not None and self.polarity not in POLARITIES:
            raise SentenceError(f"unknown polarity {self.polarity!r}")
        return self

    @property
    def root(self) -> int:
        return self.heads.index(-1)


@dataclass(frozen=True)
class DepGraph:
    node_count: int
    adjacency: tuple  # tuple of sorted neighbor tuples, no self entries
    target_node: int
    node_words: tuple  # tuple of word tuples; the meta-node carries several

    def edges(self) -> list:
        return [(i, j) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j]

    def is_connected(self) -> bool:
        return len(_reachable(self.adjacency, 0)) == self.node_count


def _reachable(adjacency, start) -> set:
    seen = {start}
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in adjacency[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return seen


def _freeze(adj_sets) -> tuple:
    return tuple(tuple(sorted(s)) for s in adj_sets)


def _split_fields(line: str) -> list:
    return line.rstrip("\r\n").split("\t")


def parse_conllu(text: str) -> list:
    """Read CoNLL-U text, keeping only FORM and HEAD.

    Heads come back 0-based with -1 for the root. Multi-word token ranges
    ("3-4") and empty nodes ("3.1") are skipped. Aspect span and polarity
    are left unset.
    """
    sentences = []
    forms, heads, head_lines = [], [], []

    def flush():
        if not forms:
            return
        n = len(forms)
        for h, lineno in zip(heads, head_lines):
            if h < -1 or h >= n:
                raise ParseError(f"HEAD {h + 1} out of range for {n}-token sentence", lineno)
        sentence = ParsedSentence(tuple(forms), tuple(heads))
        try:
            sentence.validate()
        except SentenceError as exc:
            raise ParseError(str(exc), head_lines[0]) from None
        sentences.append(sentence)
        forms.clear()
        heads.clear()
        head_lines.clear()

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = _split_fields(line)
        if len(cols) != 10:
            raise ParseError(f"expected 10 tab-separated columns, got {len(cols)}", lineno)
        token_id = cols[0]
        if "-" in token_id or "." in token_id:
            continue
        try:
            idx = int(token_id)
            head = int(cols[6])
        except ValueError:
            raise ParseError(f"non-integer ID or HEAD: {token_id!r}, {cols[6]!r}", lineno) from None
        if idx != len(forms) + 1:
            raise ParseError(f"token ID {idx} out of sequence", lineno)
        forms.append(cols[1])
        heads.append(head - 1)
        head_lines.append(lineno)
    flush()
    return sentences


_JSONL_KEYS = ("tokens", "heads", "aspect_span", "polarity")


def sentence_from_record(record: dict) -> ParsedSentence:
    if not isinstance(record, dict):
        raise SentenceError("record is not a JSON object")
    for key in _JSONL_KEYS:
        if key not in record:
            raise SentenceError(f"missing key {key!r}")
    sentence = ParsedSentence(
        tokens=record["tokens"],
        heads=record["heads"],
        aspect_span=record["aspect_span"],
        polarity=record["polarity"],
    )
    return sentence.validate()


def sentence_to_record(sentence: ParsedSentence) -> dict:
    return {
        "tokens": list(sentence.tokens),
        "heads": list(sentence.heads),
        "aspect_span": list(sentence.aspect_span) if sentence.aspect_span else None,
        "polarity": sentence.polarity,
    }


def load_jsonl(stream: Union[TextIO, Iterable[str]]) -> list:
    """Load canonical JSONL records, one aspect per line. Blank lines are ignored."""
    out = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            out.append(sentence_from_record(record))
        except (json.JSONDecodeError, SentenceError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def dump_jsonl(sentences: Iterable[ParsedSentence], stream: TextIO) -> None:
    for s in sentences:
        stream.write(json.dumps(sentence_to_record(s)) + "\n")


def with_aspect(sentence: ParsedSentence, span, polarity=None) -> ParsedSentence:
    """Attach an aspect span (and optionally a label) to a sentence read from CoNLL-U."""
    return replace(sentence, aspect_span=tuple(span), polarity=polarity).validate()


def raw_adjacency(heads) -> list:
    adj = [set() for _ in heads]
    for i, h in enumerate(heads):
        if h >= 0:
            adj[i].add(h)
            adj[h].add(i)
    return adj


def collapse_target(adjacency, words, span) -> DepGraph:
    """Merge the nodes in ``span`` into a single node placed at ``span[0]``.

    ``adjacency`` is a list of neighbor collections over the uncollapsed
    tokens and ``words`` their surface forms.
    """
    start, end = span
    n = len(adjacency)
    if not 0 <= start < end <= n:
        raise SentenceError(f"span out of range: [{start}, {end}) for {n} nodes")
    width = end - start

    def remap(i):
        if i < start:
            return i
        if i < end:
            return start
        return i - width + 1

    new_n = n - width + 1
    new_adj = [set() for _ in range(new_n)]
    for i, nbrs in enumerate(adjacency):
        a = remap(i)
        for j in nbrs:
            b = remap(j)
            if a != b:
                new_adj[a].add(b)
                new_adj[b].add(a)

    node_words = []
    for i in range(new_n):
        if i == start:
            node_words.append(tuple(words[start:end]))
        else:
            old = i if i < start else i + width - 1
            node_words.append((words[old],))
    return DepGraph(new_n, _freeze(new_adj), start, tuple(node_words))


def build_graph(sentence: ParsedSentence) -> DepGraph:
    sentence.validate()
    if sentence.aspect_span is None:
        raise SentenceError("aspect_span is required to build a graph")
    adj = raw_adjacency(sentence.heads)
    reached = _reachable(adj, sentence.root)
    if len(reached) != len(sentence.tokens):
        logger.warning(
            "dependency structure is not a tree: %d of %d tokens reachable from root (%r)",
            len(reached), len(sentence.tokens), " ".join(sentence.tokens),
        )
    return collapse_target(adj, sentence.tokens, sentence.aspect_span)


def neighborhood(graph: DepGraph, i: int, self_loop: bool = True) -> list:
    if not 0 <= i < graph.node_count:
        raise IndexError(f"node {i} out of range for graph with {graph.node_count} nodes")
    nbrs = set(graph.adjacency[i])
    if self_loop:
        nbrs.add(i)
    return sorted(nbrs)


def relabel(graph: DepGraph, perm) -> DepGraph:
    """Return the graph with node ``i`` moved to position ``perm[i]``."""
    n = graph.node_count
    perm = list(perm)
    if sorted(perm) != list(range(n)):
        raise ValueError("perm is not a permutation of the node indices")
    adj = [set() for _ in range(n)]
    words = [None] * n
    for i, nbrs in enumerate(graph.adjacency):
        adj[perm[i]] = {perm[j] for j in nbrs}
        words[perm[i]] = graph.node_words[i]
    return DepGraph(n, _freeze(adj), perm[graph.target_node], tuple(words))


def graph_from_edges(n: int, edges, target: int = 0, words=None) -> DepGraph:
    """Convenience constructor for hand-built graphs."""
    adj = [set() for _ in range(n)]
    for i, j in edges:
        if i == j:
            continue
        adj[i].add(j)
        adj[j].add(i)
    if words is None:
        words = [(f"w{i}",) for i in range(n)]
    if not 0 <= target < n:
        raise IndexError("target out of range")
    return DepGraph(n, _freeze(adj), target, tuple(tuple(w) for w in words))


def random_tree(n: int, rng, target: Optional[int] = None) -> DepGraph:
    """Uniformly attach each node to an earlier one; the target defaults to a random node."""
    edges = [(i, int(rng.integers(0, i))) for i in range(1, n)]
    t = int(rng.integers(0, n)) if target is None else target
    return graph_from_edges(n, edges, target=t)


__all__ = [
    "POLARITIES", "ParseError", "SentenceError", "ParsedSentence", "DepGraph",
    "parse_conllu", "random_tree", "load_jsonl", "dump_jsonl", "sentence_from_record", "sentence_to_record",
    "with_aspect", "raw_adjacency", "collapse_target", "build_graph", "neighborhood",
    "relabel", "graph_from_edges",
]
