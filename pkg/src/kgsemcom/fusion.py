"""Weighted fusion graph and relational graph attention refinement.

The graph has two node categories (detection proposals and knowledge-graph
category nodes) joined by three typed edge sets:

  PP  proposal-proposal, weight = cosine similarity of pooled features
  PK  proposal-category, each proposal linked to its top-m categories by
      initial confidence, weight = that confidence
  KK  category-category, weight = cosine similarity of the KG embeddings

Edge weights enter attention as additive log-biases: PK uses log(max(w,0))
so a zero-weight edge contributes nothing, PP/KK use log((1+w)/2) which is
monotone on [-1, 1]. A three-layer attention network with per-edge-type
transforms aggregates messages; the final classifier concatenates the
enhanced feature with the untouched pooled feature, so the original
information is preserved structurally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError, ValueRangeError
from .kg import EmbeddingTable, cosine_similarity
from .layers import Linear, fully_connected, softmax
from .optim import ParameterStore
from .tensor import Tensor, concat

EDGE_TYPES = ("pp", "pk", "kk")
WEIGHT_FLOOR = 1e-12
ATTENTION_SLOPE = 0.2


@dataclass
class Proposal:
    """A detection proposal: box, pooled feature, initial confidences."""

    box: np.ndarray                 # (x1, y1, x2, y2)
    feature: np.ndarray             # pooled vector, dimension D_p
    confidences: np.ndarray         # softmax over categories + background

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueRangeError(f"degenerate proposal box {self.box}")
        if np.any(self.confidences < 0) or abs(self.confidences.sum() - 1.0) > 1e-6:
            raise ValueRangeError("proposal confidences must be a simplex vector")


@dataclass
class WeightedGraph:
    """Fusion graph over proposal nodes and KG category nodes.

    Node order is proposals first, then categories (by category index).
    ``prop_features`` keeps the original pooled features unmodified; edge
    lists hold (i, j, weight) with i < j (undirected per type).
    """

    prop_features: Tensor           # (N_p, D_p), original pooled features
    kg_features: np.ndarray         # (N_k, d) embedding vectors
    categories: list                # category names, node N_p + idx
    edges: dict                     # type -> list of (i, j, weight)

    @property
    def n_proposals(self) -> int:
        return self.prop_features.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.n_proposals + len(self.categories)

    def describe(self) -> str:
        """Plain-text dump for inspection."""
        lines = [f"nodes: {self.n_proposals} proposals + {len(self.categories)} categories"]
        for name in self.categories:
            lines.append(f"  kg-node {name}")
        for etype in EDGE_TYPES:
            for i, j, w in self.edges[etype]:
                lines.append(f"  {etype} {i} -- {j}  w={w:.6f}")
        return "\n".join(lines)


def build_weighted_graph(proposals: list[Proposal], kg_embeddings: EmbeddingTable,
                         top_m: int = 3, full_pk: bool = False,
                         kk_adjacency=None, categories=None) -> WeightedGraph:
    """Construct the two-node-category, three-edge-type weighted graph.

    ``categories`` fixes the category node list (defaults to the embedding
    table's keys); ``kk_adjacency`` optionally restricts KK edges to the
    given set of category-name pairs instead of connecting all pairs.
    """
    if not proposals:
        raise ValueRangeError("need at least one proposal to build the graph")
    categories = sorted(kg_embeddings.vectors) if categories is None else list(categories)
    missing = [c for c in categories if c not in kg_embeddings]
    if missing:
        raise ValueRangeError(
            f"categories missing an embedding: {', '.join(missing)}")
    n_cat = len(categories)
    n_conf = proposals[0].confidences.size
    if n_conf not in (n_cat, n_cat + 1):
        raise ShapeMismatchError(
            f"proposal confidence length {n_conf} does not cover "
            f"{n_cat} categories (+ optional background)")

    n_p = len(proposals)
    feats = np.stack([p.feature for p in proposals])
    edges = {t: [] for t in EDGE_TYPES}

    for i in range(n_p):
        for j in range(i + 1, n_p):
            edges["pp"].append((i, j, cosine_similarity(feats[i], feats[j])))

    m = n_cat if full_pk else min(top_m, n_cat)
    for i, prop in enumerate(proposals):
        cat_conf = prop.confidences[:n_cat]  # background (last slot) carries no KG node
        order = np.argsort(-cat_conf, kind="stable")[:m]
        for ci in order:
            edges["pk"].append((i, n_p + int(ci), float(cat_conf[ci])))

    kg_vecs = np.stack([np.asarray(kg_embeddings[c], dtype=np.float64)
                        for c in categories])
    allowed = None
    if kk_adjacency is not None:
        allowed = {frozenset(pair) for pair in kk_adjacency}
    for a in range(n_cat):
        for b in range(a + 1, n_cat):
            if allowed is not None and frozenset((categories[a], categories[b])) not in allowed:
                continue
            edges["kk"].append((n_p + a, n_p + b,
                                cosine_similarity(kg_vecs[a], kg_vecs[b])))

    return WeightedGraph(prop_features=Tensor(feats) if not isinstance(feats, Tensor) else feats,
                         kg_features=kg_vecs, categories=categories, edges=edges)


# ---------------------------------------------------------------------------
# R-GAT parameters and forward pass
# ---------------------------------------------------------------------------

class RGATParams:
    """Three layers of per-edge-type transforms plus self-loop terms.

    Also owns the linear projection that maps pooled proposal features to
    the shared node dimension d.
    """

    N_LAYERS = 3

    def __init__(self, store: ParameterStore, feature_dim: int, d: int = 32,
                 slope: float = 0.01, rng=None, prefix: str = "rgat"):
        rng = rng or np.random.default_rng(0)
        self.d = d
        self.feature_dim = feature_dim
        self.slope = slope
        self.proj = Linear(store, f"{prefix}.proj", feature_dim, d, rng=rng)
        self.layers = []
        for l in range(self.N_LAYERS):
            layer = {"self": Linear(store, f"{prefix}.l{l}.self", d, d, bias=False, rng=rng)}
            for etype in EDGE_TYPES:
                layer[etype] = Linear(store, f"{prefix}.l{l}.{etype}", d, d,
                                      bias=False, rng=rng)
                layer[f"a_{etype}"] = store.add(
                    f"{prefix}.l{l}.{etype}.attn",
                    rng.uniform(-0.3, 0.3, size=2 * d))
            self.layers.append(layer)


def _log_bias(etype: str, w: float) -> float:
    if etype == "pk":
        return float(np.log(max(w, 0.0) + WEIGHT_FLOOR))
    return float(np.log((1.0 + max(-1.0, min(1.0, w))) / 2.0 + WEIGHT_FLOOR))


def _dense_graph_matrices(graph: WeightedGraph):
    """Per edge type: symmetric neighbor mask and log-bias matrix."""
    n = graph.n_nodes
    masks, biases = {}, {}
    for etype in EDGE_TYPES:
        mask = np.zeros((n, n))
        bias = np.zeros((n, n))
        for i, j, w in graph.edges[etype]:
            b = _log_bias(etype, w)
            mask[i, j] = mask[j, i] = 1.0
            bias[i, j] = bias[j, i] = b
        masks[etype] = mask
        biases[etype] = bias
    return masks, biases


def rgat_forward(graph: WeightedGraph, params: RGATParams) -> Tensor:
    """Aggregate messages per edge type with attention; returns (N, d).

    Per layer and edge type r, the attention logit over neighbor j of node
    i is leaky_relu(a_r . [W_r h_i || W_r h_j]) plus the edge's log-bias;
    coefficients are normalized over each node's type-r neighborhood. The
    three typed messages plus a self-loop transform are summed; layers 1-2
    apply a leaky rectifier, the final layer is linear.
    """
    h_prop = params.proj(graph.prop_features)
    if len(graph.categories):
        h = concat([h_prop, Tensor(graph.kg_features)], axis=0)
    else:
        h = h_prop
    masks, biases = _dense_graph_matrices(graph)

    for l, layer in enumerate(params.layers):
        out = layer["self"](h)
        for etype in EDGE_TYPES:
            mask = masks[etype]
            if not mask.any():
                continue
            hr = layer[etype](h)                              # (N, d)
            a = layer[f"a_{etype}"]
            s_src = hr @ a[:params.d].reshape(params.d, 1)    # (N, 1)
            s_dst = hr @ a[params.d:].reshape(params.d, 1)
            logits = (s_src + s_dst.transpose()).leaky_relu(ATTENTION_SLOPE)
            logits = logits + Tensor(biases[etype])
            alpha = _masked_row_softmax(logits, mask)
            out = out + alpha @ hr
        h = out.leaky_relu(params.slope) if l < params.N_LAYERS - 1 else out
    return h


def _masked_row_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over each row's masked entries; empty rows come out all-zero.

    The row max over masked entries is treated as a constant shift (softmax
    is exactly invariant to it); unmasked entries are pushed to -inf before
    the exp so they contribute exact zeros, and empty rows get denominator 1
    so the backward pass stays finite.
    """
    row_max = np.max(np.where(mask > 0, logits.data, -np.inf), axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    neg_inf_off = np.where(mask > 0, 0.0, -np.inf)
    ex = (logits + Tensor(neg_inf_off - row_max)).exp()
    empty = (mask.sum(axis=1, keepdims=True) == 0).astype(np.float64)
    denom = ex.sum(axis=1, keepdims=True) + Tensor(empty)
    return ex / denom


def attention_coefficients(graph: WeightedGraph, params: RGATParams,
                           layer: int, etype: str) -> np.ndarray:
    """Attention matrix of one layer/edge type at the current parameters.

    Runs the same forward recurrence up to ``layer`` and reports alpha for
    inspection and testing.
    """
    h_prop = params.proj(graph.prop_features)
    h = concat([h_prop, Tensor(graph.kg_features)], axis=0) if graph.categories else h_prop
    masks, biases = _dense_graph_matrices(graph)
    for l, lay in enumerate(params.layers):
        if l == layer:
            mask = masks[etype]
            hr = lay[etype](h)
            a = lay[f"a_{etype}"]
            s_src = (hr @ a[:params.d].reshape(params.d, 1)).data
            s_dst = (hr @ a[params.d:].reshape(params.d, 1)).data
            raw = s_src + s_dst.T
            logits = np.where(raw >= 0, raw, ATTENTION_SLOPE * raw) + biases[etype]
            logits = np.where(mask > 0, logits, -np.inf)
            row_max = np.max(logits, axis=1, keepdims=True)
            row_max = np.where(np.isfinite(row_max), row_max, 0.0)
            ex = np.exp(logits - row_max) * mask
            denom = ex.sum(axis=1, keepdims=True)
            return np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)
        out = lay["self"](h)
        for et in EDGE_TYPES:
            mask = masks[et]
            if not mask.any():
                continue
            hr = lay[et](h)
            a = lay[f"a_{et}"]
            s_src = hr @ a[:params.d].reshape(params.d, 1)
            s_dst = hr @ a[params.d:].reshape(params.d, 1)
            logits = (s_src + s_dst.transpose()).leaky_relu(ATTENTION_SLOPE)
            logits = logits + Tensor(biases[et])
            out = out + _masked_row_softmax(logits, mask) @ hr
        h = out.leaky_relu(params.slope) if l < params.N_LAYERS - 1 else out
    raise ValueRangeError(f"layer {layer} out of range")


# ---------------------------------------------------------------------------
# classification heads
# ---------------------------------------------------------------------------

class InitialClassifier:
    """Single dense layer + softmax over categories plus background."""

    def __init__(self, store: ParameterStore, feature_dim: int, n_classes: int,
                 rng=None, prefix: str = "head.initial"):
        self.n_classes = n_classes
        self.fc = Linear(store, prefix, feature_dim, n_classes + 1,
                         rng=rng or np.random.default_rng(0))

    def __call__(self, features: Tensor) -> Tensor:
        return initial_classify(features, self.fc)


def initial_classify(features: Tensor, head: Linear) -> Tensor:
    if features.ndim != 2 or features.shape[1] != head.d_in:
        raise ShapeMismatchError(
            f"classifier head expects (B,{head.d_in}), got {features.shape}")
    return softmax(head(features))


class FinalClassifier:
    """Two shared dense layers + softmax over [enhanced || original]."""

    def __init__(self, store: ParameterStore, d: int, feature_dim: int,
                 n_classes: int, hidden: int = 64, slope: float = 0.01,
                 rng=None, prefix: str = "head.final"):
        rng = rng or np.random.default_rng(0)
        self.slope = slope
        self.fc1 = Linear(store, f"{prefix}.fc1", d + feature_dim, hidden, rng=rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", hidden, n_classes + 1, rng=rng)


def final_classify(enhanced: Tensor, original: Tensor, head: FinalClassifier) -> Tensor:
    """Refined confidences from enhanced node features plus the untouched
    pooled features (original information preserved by concatenation)."""
    if enhanced.shape[0] != original.shape[0]:
        raise ShapeMismatchError(
            f"{enhanced.shape[0]} enhanced features vs {original.shape[0]} proposals")
    joint = concat([enhanced, original], axis=1)
    hidden = head.fc1(joint).leaky_relu(head.slope)
    return softmax(head.fc2(hidden))
