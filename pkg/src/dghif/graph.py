"""Heterogeneous user graph and relational graph convolution.

Users are nodes; directed typed edges come from social interactions. The
convolution applies one transformation per relation plus a self-loop term,
normalizes each relation's aggregated messages by a learnable log-degree
coefficient (or a fixed square-root baseline), and adds a residual to the
previous layer's representation. Edge prediction over sampled node pairs
is the self-supervised pretraining objective for this side.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_RELATIONS = ("follow", "comment", "share_retweet", "mention")

NORM_FLOOR = 1e-3


class HeteroGraph:
    """Typed directed edges over a fixed node set; structure is immutable."""

    def __init__(self, n_nodes: int, relations: tuple[str, ...] = DEFAULT_RELATIONS,
                 edges: dict[str, np.ndarray] | None = None,
                 features: np.ndarray | None = None):
        self.n_nodes = n_nodes
        self.relations = tuple(relations)
        self.edges = {r: np.zeros((0, 2), dtype=np.int64) for r in self.relations}
        if edges:
            for rel, arr in edges.items():
                if rel not in self.edges:
                    raise GraphError(f"unknown relation {rel!r}")
                self.edges[rel] = np.asarray(arr, dtype=np.int64).reshape(-1, 2)
        self.features = features
        self._in_degree: dict[str, np.ndarray] = {}
        self._out_degree: dict[str, np.ndarray] = {}
        self._linked_pairs: np.ndarray | None = None
        self._linked_set: set[tuple[int, int]] | None = None

    def in_degree(self, relation: str) -> np.ndarray:
        if relation not in self._in_degree:
            self._in_degree[relation] = np.bincount(
                self.edges[relation][:, 1], minlength=self.n_nodes)
        return self._in_degree[relation]

    def out_degree(self, relation: str) -> np.ndarray:
        if relation not in self._out_degree:
            self._out_degree[relation] = np.bincount(
                self.edges[relation][:, 0], minlength=self.n_nodes)
        return self._out_degree[relation]

    def total_degree(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for rel in self.relations:
            deg += self.in_degree(rel) + self.out_degree(rel)
        return deg

    def n_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    def linked_pairs(self) -> np.ndarray:
        """Unique undirected node pairs linked by an edge of any relation."""
        if self._linked_pairs is None:
            stacked = [e for e in self.edges.values() if len(e)]
            if not stacked:
                self._linked_pairs = np.zeros((0, 2), dtype=np.int64)
            else:
                allp = np.concatenate(stacked)
                allp = np.stack([allp.min(axis=1), allp.max(axis=1)], axis=1)
                self._linked_pairs = np.unique(allp, axis=0)
        return self._linked_pairs

    def linked_set(self) -> set[tuple[int, int]]:
        if self._linked_set is None:
            self._linked_set = {(int(a), int(b)) for a, b in self.linked_pairs()}
        return self._linked_set

    def has_link(self, i: int, j: int) -> bool:
        a, b = (i, j) if i < j else (j, i)
        return (a, b) in self.linked_set()

    def isolated_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.total_degree() == 0)


def build_graph(interactions, n_nodes: int,
                relations: tuple[str, ...] = DEFAULT_RELATIONS,
                features: np.ndarray | None = None) -> HeteroGraph:
    """Static snapshot from (actor, relation, target) records.

    Self-interactions are dropped with a warning (the self contribution is the
    convolution's explicit self-loop term); duplicate triples collapse to one
    edge. Node ids outside [0, n_nodes) are an error naming the record.
    """
    per_rel: dict[str, list[tuple[int, int]]] = {r: [] for r in relations}
    n_self = 0
    for rec in interactions:
        actor, rel, target = rec
        if rel not in per_rel:
            raise GraphError(f"unknown relation in record {rec!r}")
        actor, target = int(actor), int(target)
        if not (0 <= actor < n_nodes and 0 <= target < n_nodes):
            raise GraphError(f"node id out of range in record {rec!r} "
                             f"(n_nodes={n_nodes})")
        if actor == target:
            n_self += 1
            continue
        per_rel[rel].append((actor, target))
    if n_self:
        logger.warning("build_graph: dropped %d self-interaction(s)", n_self)
    edges = {}
    for rel, pairs in per_rel.items():
        if pairs:
            edges[rel] = np.unique(np.array(pairs, dtype=np.int64), axis=0)
    return HeteroGraph(n_nodes, relations, edges, features)


def read_interactions(path) -> list[tuple[int, str, int]]:
    """One record per line: actor<TAB>relation<TAB>target."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            actor, rel, target = line.split("\t")
            records.append((int(actor), rel, int(target)))
    return records


def write_interactions(path, interactions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for actor, rel, target in interactions:
            fh.write(f"{actor}\t{rel}\t{target}\n")


def degree_histogram_rows(graph: HeteroGraph) -> list[tuple[str, str, int, int]]:
    """(relation, direction, degree, node_count) rows for the stats dump."""
    rows = []
    for rel in graph.relations:
        for direction, deg in (("in", graph.in_degree(rel)),
                               ("out", graph.out_degree(rel))):
            values, counts = np.unique(deg, return_counts=True)
            rows.extend((rel, direction, int(v), int(c))
                        for v, c in zip(values, counts))
    return rows


def adaptive_norm_coeff(eta_r: float, neighbor_count: int) -> float:
    """Learned normalizer eta * ln(neighbors + 1), clamped below at 1e-3."""
    if eta_r <= 0:
        raise GraphError(f"adaptive_norm_coeff: eta must be positive, got {eta_r}")
    return max(eta_r * math.log(neighbor_count + 1), NORM_FLOOR)


def structural_features(graph: HeteroGraph) -> np.ndarray:
    """Per-relation log in/out degrees; the text-free node features."""
    cols = []
    for rel in graph.relations:
        cols.append(np.log1p(graph.in_degree(rel)))
        cols.append(np.log1p(graph.out_degree(rel)))
    return np.stack(cols, axis=1)


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


@dataclass
class RGCNConfig:
    in_dim: int
    layer_dims: tuple[int, ...]
    relations: tuple[str, ...] = DEFAULT_RELATIONS
    activation: str = "tanh"          # "tanh" or "identity"
    norm_mode: str = "adaptive"       # "adaptive" or "fixed_sqrt"
    relation_weights: bool = True     # learnable per-relation propagation weight
    reverse_messages: bool = False    # aggregate over out-neighbors instead
    dropout: float = 0.0


class RGCN:
    """Stack of relational graph convolution layers."""

    def __init__(self, cfg: RGCNConfig, rng: np.random.Generator):
        if cfg.activation not in ("tanh", "identity"):
            raise GraphError(f"unknown activation {cfg.activation!r}")
        if cfg.norm_mode not in ("adaptive", "fixed_sqrt"):
            raise GraphError(f"unknown norm_mode {cfg.norm_mode!r}")
        self.cfg = cfg
        p: dict[str, Tensor] = {}
        d_in = cfg.in_dim
        for l, d_out in enumerate(cfg.layer_dims):
            scale = 1.0 / math.sqrt(d_in)
            for rel in cfg.relations:
                p[f"l{l}.w_{rel}"] = Tensor(rng.normal(0.0, scale, (d_in, d_out)),
                                            requires_grad=True)
            p[f"l{l}.w_self"] = Tensor(rng.normal(0.0, scale, (d_in, d_out)),
                                       requires_grad=True)
            if d_in != d_out:
                p[f"l{l}.w_res"] = Tensor(rng.normal(0.0, scale, (d_in, d_out)),
                                          requires_grad=True)
            d_in = d_out
        self.out_dim = d_in
        for rel in cfg.relations:
            # propagation weight, neutral init; trainable only when enabled
            p[f"omega_{rel}"] = Tensor(1.0, requires_grad=cfg.relation_weights)
            # softplus(raw) ~ Uniform(0,1); raw is the trained quantity
            u = max(float(rng.uniform(0.0, 1.0)), NORM_FLOOR)
            p[f"eta_raw_{rel}"] = Tensor(_softplus_inv(np.asarray(u)),
                                         requires_grad=cfg.norm_mode == "adaptive")
        self.params = p

    def eta(self, relation: str) -> Tensor:
        """Positive normalizer parameter via softplus reparameterization."""
        raw = self.params[f"eta_raw_{relation}"]
        return T.log(T.exp(raw) + 1.0)

    def eta_value(self, relation: str) -> float:
        return float(np.log1p(np.exp(self.params[f"eta_raw_{relation}"].data)))

    def norm_coefficients(self, graph: HeteroGraph, relation: str) -> Tensor:
        """Per-node message normalizer for one relation (shape (N,))."""
        deg = (graph.out_degree(relation) if self.cfg.reverse_messages
               else graph.in_degree(relation)).astype(float)
        if self.cfg.norm_mode == "adaptive":
            log_deg = Tensor(np.log(deg + 1.0))
            return T.clamp_min(self.eta(relation) * log_deg, NORM_FLOOR)
        c = np.sqrt(deg)
        c[deg == 0] = 1.0  # empty neighborhoods contribute zero anyway
        return Tensor(c)

    def layer(self, graph: HeteroGraph, feats: Tensor, l: int,
              train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg, p = self.cfg, self.params
        if feats.shape[-1] != p[f"l{l}.w_self"].shape[0]:
            raise ShapeError(f"rgcn layer {l}: feature dim {feats.shape[-1]} != "
                             f"expected {p[f'l{l}.w_self'].shape[0]}")
        pre = T.matmul(feats, p[f"l{l}.w_self"])
        for rel in cfg.relations:
            edges = graph.edges[rel]
            if len(edges) == 0:
                continue
            src, dst = (edges[:, 1], edges[:, 0]) if cfg.reverse_messages else \
                       (edges[:, 0], edges[:, 1])
            transformed = T.matmul(feats, p[f"l{l}.w_{rel}"])
            agg = T.scatter_rows_add(T.take_rows(transformed, src), dst, graph.n_nodes)
            weight = T.div(p[f"omega_{rel}"], self.norm_coefficients(graph, rel))
            pre = pre + T.scale_rows(agg, weight)
        out = T.tanh(pre) if cfg.activation == "tanh" else pre
        out = T.dropout(out, cfg.dropout, train, rng)
        if f"l{l}.w_res" in p:
            return out + T.matmul(feats, p[f"l{l}.w_res"])
        return out + feats

    def forward(self, graph: HeteroGraph, feats: Tensor,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        for l in range(len(self.cfg.layer_dims)):
            feats = self.layer(graph, feats, l, train, rng)
        return feats


# ---------------------------------------------------------------------------
# edge prediction (graph-side pretraining objective)

def sample_edge_batch(graph: HeteroGraph, n_pairs: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Positive pairs from existing links, negatives uniform at a 1:1 ratio."""
    pairs = graph.linked_pairs()
    if len(pairs) == 0:
        raise GraphError("sample_edge_batch: graph has no edges")
    n_pos = max(n_pairs // 2, 1)
    pos = pairs[rng.integers(0, len(pairs), size=n_pos)]
    linked = graph.linked_set()
    neg = []
    while len(neg) < n_pos:
        i, j = rng.integers(0, graph.n_nodes, size=2)
        if i == j:
            continue
        key = (int(min(i, j)), int(max(i, j)))
        if key not in linked:
            neg.append(key)
    batch = np.concatenate([pos, np.array(neg, dtype=np.int64)])
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_pos)])
    return batch, labels


def edge_prediction_loss(embeddings: Tensor, pairs: np.ndarray,
                         labels: np.ndarray) -> Tensor:
    """BCE of sigmoid(dot(v_i, v_j)) against link-existence labels."""
    vi = T.take_rows(embeddings, pairs[:, 0])
    vj = T.take_rows(embeddings, pairs[:, 1])
    return T.bce_with_logits(T.sum_(vi * vj, axis=1), labels)
