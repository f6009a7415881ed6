"""Knowledge graph storage, metapath random walks, and node embeddings.

The triple file format is UTF-8 text, one record per line:

    @type <TAB> entity <TAB> {category|context}
    head  <TAB> relation <TAB> tail

Walks follow a cyclic metapath of entity types over the undirected typed
graph; embeddings come from skip-gram with negative sampling over walk
windows, with the negative distribution proportional to walk-corpus
unigram frequency raised to 0.75.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ValueRangeError
from .optim import load_arrays, save_arrays

ENTITY_TYPES = ("category", "context")


@dataclass
class KnowledgeGraph:
    entities: dict = field(default_factory=dict)   # name -> type
    triples: list = field(default_factory=list)    # (head, relation, tail)
    _seen: set = field(default_factory=set)
    _adjacency: dict = field(default_factory=dict)  # name -> list of (neighbor, relation)

    def add_entity(self, name: str, entity_type: str):
        if entity_type not in ENTITY_TYPES:
            raise DataError(f"unknown entity type {entity_type!r} for {name!r}")
        if name in self.entities and self.entities[name] != entity_type:
            raise DataError(
                f"entity {name!r} redeclared as {entity_type!r}, was {self.entities[name]!r}")
        self.entities.setdefault(name, entity_type)
        self._adjacency.setdefault(name, [])

    def add_triple(self, head: str, relation: str, tail: str):
        for name in (head, tail):
            if name not in self.entities:
                raise DataError(f"triple references undeclared entity {name!r}")
        key = (head, relation, tail)
        if key in self._seen:
            return
        self._seen.add(key)
        self.triples.append(key)
        self._adjacency[head].append((tail, relation))
        self._adjacency[tail].append((head, relation))

    def neighbors(self, name: str, entity_type: str | None = None,
                  relation: str | None = None) -> list[str]:
        out = []
        for other, rel in self._adjacency.get(name, []):
            if relation is not None and rel != relation:
                continue
            if entity_type is not None and self.entities[other] != entity_type:
                continue
            out.append(other)
        return sorted(set(out))

    def of_type(self, entity_type: str) -> list[str]:
        return sorted(n for n, t in self.entities.items() if t == entity_type)

    @property
    def size(self) -> tuple[int, int]:
        return len(self.entities), len(self.triples)


def load_triples(path) -> KnowledgeGraph:
    kg = KnowledgeGraph()
    pending: list[tuple[int, str, str, str]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            a, b, c = parts
            try:
                if a == "@type":
                    kg.add_entity(b, c)
                else:
                    pending.append((lineno, a, b, c))
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    for lineno, h, r, t in pending:
        try:
            kg.add_triple(h, r, t)
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
    return kg


def save_triples(kg: KnowledgeGraph, path):
    with open(path, "w", encoding="utf-8") as f:
        for name in sorted(kg.entities):
            f.write(f"@type\t{name}\t{kg.entities[name]}\n")
        for h, r, t in kg.triples:
            f.write(f"{h}\t{r}\t{t}\n")


# ---------------------------------------------------------------------------
# metapath walks
# ---------------------------------------------------------------------------

def metapath_walks(kg: KnowledgeGraph, metapath, walk_length: int,
                   walks_per_node: int, seed: int) -> list[list[str]]:
    """Random walks constrained to the cyclic metapath type sequence.

    Each step moves uniformly to a neighbor whose type matches the next
    metapath position; walks truncate early when no valid neighbor exists.
    """
    metapath = list(metapath)
    if len(metapath) < 2 or metapath[0] != metapath[-1]:
        raise ValueRangeError(
            f"metapath must be cyclic (start type == end type), got {metapath}")
    for t in metapath:
        if t not in ENTITY_TYPES:
            raise ValueRangeError(f"unknown entity type {t!r} in metapath")
    period = metapath[:-1]
    starts = kg.of_type(metapath[0])
    rng = np.random.default_rng(seed)
    walks = []
    for _ in range(walks_per_node):
        for start in starts:
            walk = [start]
            while len(walk) < walk_length:
                want = period[len(walk) % len(period)]
                options = kg.neighbors(walk[-1], entity_type=want)
                if not options:
                    break
                walk.append(options[rng.integers(len(options))])
            walks.append(walk)
    return walks


# ---------------------------------------------------------------------------
# skip-gram embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    vectors: dict  # entity -> np.ndarray of dimension d

    def __post_init__(self):
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueRangeError(f"embedding dimensions differ: {dims}")

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.vectors

    def save(self, path):
        save_arrays(path, {k: v for k, v in sorted(self.vectors.items())})

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls({k: v for k, v in load_arrays(path).items()})


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -35.0, 35.0)))


def train_embeddings(walks, d: int = 32, window: int = 3,
                     negative_samples: int = 5, epochs: int = 50,
                     lr: float = 0.05, seed: int = 0) -> EmbeddingTable:
    """Skip-gram with negative sampling over walk windows."""
    if d < 1:
        raise ValueRangeError(f"embedding dimension must be >= 1, got {d}")
    walks = [w for w in walks if w]
    if not walks:
        raise ValueRangeError("cannot train embeddings on an empty walk corpus")

    vocab = sorted({node for walk in walks for node in walk})
    index = {name: i for i, name in enumerate(vocab)}
    counts = np.zeros(len(vocab))
    for walk in walks:
        for node in walk:
            counts[index[node]] += 1
    neg_probs = counts ** 0.75
    neg_probs /= neg_probs.sum()

    rng = np.random.default_rng(seed)
    vin = rng.uniform(-0.5 / d, 0.5 / d, size=(len(vocab), d))
    vout = rng.uniform(-0.5 / d, 0.5 / d, size=(len(vocab), d))

    for _ in range(epochs):
        for walk in walks:
            ids = [index[n] for n in walk]
            for pos, center in enumerate(ids):
                lo = max(0, pos - window)
                hi = min(len(ids), pos + window + 1)
                for ctx_pos in range(lo, hi):
                    if ctx_pos == pos:
                        continue
                    ctx = ids[ctx_pos]
                    negs = rng.choice(len(vocab), size=negative_samples, p=neg_probs)
                    targets = np.concatenate([[ctx], negs])
                    labels = np.zeros(len(targets))
                    labels[0] = 1.0
                    vecs = vout[targets]                    # (1+neg, d)
                    scores = _sigmoid(vecs @ vin[center])
                    err = (labels - scores)                 # (1+neg,)
                    grad_center = err @ vecs
                    vout[targets] += lr * err[:, None] * vin[center]
                    vin[center] += lr * grad_center
    return EmbeddingTable({name: vin[index[name]].copy() for name in vocab})


def cosine_similarity(u, v) -> float:
    """(u . v) / (|u| |v|); rejects zero vectors."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueRangeError("cosine similarity undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))
