import math

import numpy as np
import pytest

from dghif import graph as G
from dghif import tensor as T
from dghif.errors import GraphError, ShapeError
from dghif.tensor import Tensor

from .oracles import random_small_graph, rgcn_layer_oracle


def softplus_inv(y):
    return math.log(math.expm1(y))


def make_rgcn(in_dim, layer_dims, relations, seed=0, **kw):
    cfg = G.RGCNConfig(in_dim=in_dim, layer_dims=layer_dims,
                       relations=tuple(relations), **kw)
    return G.RGCN(cfg, np.random.default_rng(seed))


def set_eta(net, relation, value):
    net.params[f"eta_raw_{relation}"].data[()] = softplus_inv(value)


# ---------------------------------------------------------------------------
# graph construction

def test_build_graph_dedupes():
    g = G.build_graph([(0, "follow", 1), (0, "follow", 1)], n_nodes=2)
    assert g.edges["follow"].tolist() == [[0, 1]]


def test_build_graph_drops_self_interactions():
    g = G.build_graph([(2, "mention", 2)], n_nodes=3)
    assert g.n_edges() == 0


def test_build_graph_in_neighbor_index():
    g = G.build_graph([(0, "follow", 1), (1, "comment", 2)], n_nodes=3)
    assert g.in_degree("comment").tolist() == [0, 0, 1]
    assert g.in_degree("follow").tolist() == [0, 1, 0]
    assert g.edges["comment"].tolist() == [[1, 2]]


def test_build_graph_id_out_of_range():
    with pytest.raises(GraphError, match="out of range"):
        G.build_graph([(0, "follow", 9)], n_nodes=3)


def test_build_graph_unknown_relation():
    with pytest.raises(GraphError, match="unknown relation"):
        G.build_graph([(0, "blocks", 1)], n_nodes=3)


def test_interactions_tsv_roundtrip(tmp_path):
    recs = [(0, "follow", 1), (2, "mention", 0)]
    path = tmp_path / "interactions.tsv"
    G.write_interactions(path, recs)
    assert G.read_interactions(path) == recs


def test_degree_histogram_rows():
    g = G.build_graph([(0, "follow", 1), (2, "follow", 1)], n_nodes=3)
    rows = G.degree_histogram_rows(g)
    assert ("follow", "in", 2, 1) in rows   # node 1 has in-degree 2
    assert ("follow", "out", 1, 2) in rows  # two nodes with out-degree 1


# ---------------------------------------------------------------------------
# adaptive normalization coefficient

def test_adaptive_norm_coeff_values():
    assert G.adaptive_norm_coeff(1.0, 1) == pytest.approx(math.log(2), abs=1e-9)
    assert G.adaptive_norm_coeff(0.5, 9) == pytest.approx(0.5 * math.log(10), abs=1e-9)
    assert G.adaptive_norm_coeff(1.0, 0) == pytest.approx(1e-3)


def test_adaptive_norm_coeff_rejects_nonpositive_eta():
    with pytest.raises(GraphError):
        G.adaptive_norm_coeff(0.0, 3)


# ---------------------------------------------------------------------------
# convolution layer

def test_layer_isolated_node_self_plus_residual():
    net = make_rgcn(2, (2,), ("follow",), activation="identity")
    net.params["l0.w_self"].data[:] = np.eye(2)
    g = G.HeteroGraph(1, ("follow",))
    v = np.array([[0.3, -0.7]])
    out = net.layer(g, Tensor(v), 0)
    np.testing.assert_allclose(out.data, 2 * v, atol=1e-12)


def test_layer_single_neighbor_hand_example():
    # one neighbor with unit c: out = v_j + v_i + v_i = [1, 4]
    net = make_rgcn(2, (2,), ("follow",), activation="identity")
    net.params["l0.w_self"].data[:] = np.eye(2)
    net.params["l0.w_follow"].data[:] = np.eye(2)
    net.params["omega_follow"].data[()] = 1.0
    set_eta(net, "follow", 1.0 / math.log(2))
    g = G.build_graph([(1, "follow", 0)], n_nodes=2)
    feats = Tensor(np.array([[0.0, 1.0], [1.0, 2.0]]))
    out = net.layer(g, feats, 0)
    np.testing.assert_allclose(out.data[0], [1.0, 4.0], atol=1e-12)


@pytest.mark.parametrize("norm_mode", ["adaptive", "fixed_sqrt"])
def test_layer_matches_triple_loop_oracle(norm_mode):
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(50):
        n, rel_edges = random_small_graph(rng)
        relations = tuple(rel_edges)
        d = int(rng.integers(2, 5))
        net = make_rgcn(d, (d,), relations, seed=int(rng.integers(1 << 30)),
                        norm_mode=norm_mode)
        for rel in relations:
            net.params[f"omega_{rel}"].data[()] = rng.normal()
            set_eta(net, rel, float(rng.uniform(0.1, 2.0)))
        g = G.HeteroGraph(n, relations,
                          {r: np.array(e, dtype=np.int64).reshape(-1, 2)
                           for r, e in rel_edges.items() if e})
        feats = rng.normal(size=(n, d))
        got = net.layer(g, Tensor(feats), 0).data
        want = rgcn_layer_oracle(
            n, rel_edges, feats,
            {r: net.params[f"l0.w_{r}"].data for r in relations},
            net.params["l0.w_self"].data,
            {r: float(net.params[f"omega_{r}"].data) for r in relations},
            {r: net.eta_value(r) for r in relations},
            norm_mode=norm_mode)
        worst = max(worst, np.abs(got - want).max())
    assert worst < 1e-9


def test_layer_dim_change_uses_projection_residual():
    rng = np.random.default_rng(3)
    net = make_rgcn(3, (5,), ("follow",), seed=4)
    g = G.build_graph([(0, "follow", 1)], n_nodes=2)
    feats = rng.normal(size=(2, 3))
    got = net.layer(g, Tensor(feats), 0).data
    want = rgcn_layer_oracle(
        2, {"follow": [(0, 1)]}, feats,
        {"follow": net.params["l0.w_follow"].data},
        net.params["l0.w_self"].data,
        {"follow": float(net.params["omega_follow"].data)},
        {"follow": net.eta_value("follow")},
        w_res=net.params["l0.w_res"].data)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_layer_zero_weights_is_pure_residual():
    net = make_rgcn(3, (3,), ("follow", "comment"), activation="identity")
    net.params["l0.w_self"].data[:] = 0.0
    for rel in ("follow", "comment"):
        net.params[f"omega_{rel}"].data[()] = 0.0
    g = G.build_graph([(0, "follow", 1), (1, "comment", 2)], n_nodes=3)
    feats = np.random.default_rng(0).normal(size=(3, 3))
    out = net.layer(g, Tensor(feats), 0)
    np.testing.assert_allclose(out.data, feats, atol=1e-12)


def test_layer_feature_dim_mismatch():
    net = make_rgcn(3, (3,), ("follow",))
    g = G.HeteroGraph(2, ("follow",))
    with pytest.raises(ShapeError):
        net.layer(g, Tensor(np.zeros((2, 4))), 0)


# ---------------------------------------------------------------------------
# stacked forward

def test_forward_zero_layers_is_identity():
    net = make_rgcn(3, (), ("follow",))
    g = G.HeteroGraph(2, ("follow",))
    feats = Tensor(np.arange(6.0).reshape(2, 3))
    out = net.forward(g, feats)
    np.testing.assert_array_equal(out.data, feats.data)


def test_forward_one_layer_equals_layer():
    net = make_rgcn(3, (3,), ("follow",), seed=8)
    g = G.build_graph([(0, "follow", 1), (1, "follow", 0)], n_nodes=2)
    feats = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    np.testing.assert_array_equal(net.forward(g, feats).data,
                                  net.layer(g, feats, 0).data)


def test_forward_two_layers_matches_sequential_oracle():
    rng = np.random.default_rng(23)
    relations = ("follow", "comment")
    net = make_rgcn(3, (3, 3), relations, seed=9)
    rel_edges = {"follow": [(0, 1), (2, 0)], "comment": [(1, 2)]}
    g = G.HeteroGraph(3, relations,
                      {r: np.array(e, dtype=np.int64) for r, e in rel_edges.items()})
    feats = rng.normal(size=(3, 3))
    got = net.forward(g, Tensor(feats)).data

    state = feats
    for l in range(2):
        state = rgcn_layer_oracle(
            3, rel_edges, state,
            {r: net.params[f"l{l}.w_{r}"].data for r in relations},
            net.params[f"l{l}.w_self"].data,
            {r: float(net.params[f"omega_{r}"].data) for r in relations},
            {r: net.eta_value(r) for r in relations})
    np.testing.assert_allclose(got, state, atol=1e-10)


def test_forward_permutation_equivariant():
    rng = np.random.default_rng(31)
    relations = ("follow", "mention")
    net = make_rgcn(4, (4, 4), relations, seed=12)
    edges = {"follow": np.array([(0, 1), (1, 2), (3, 0)], dtype=np.int64),
             "mention": np.array([(2, 0), (1, 3)], dtype=np.int64)}
    g = G.HeteroGraph(4, relations, edges)
    feats = rng.normal(size=(4, 4))
    base = net.forward(g, Tensor(feats)).data

    perm = np.array([2, 0, 3, 1])  # node i renamed to perm[i]
    perm_edges = {r: np.stack([perm[e[:, 0]], perm[e[:, 1]]], axis=1)
                  for r, e in edges.items()}
    gp = G.HeteroGraph(4, relations, perm_edges)
    pfeats = np.empty_like(feats)
    pfeats[perm] = feats
    permuted = net.forward(gp, Tensor(pfeats)).data
    np.testing.assert_allclose(permuted[perm], base, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients, including through the normalizer into eta

def test_layer_gradients_match_finite_differences(rng):
    relations = ("follow", "comment")
    net = make_rgcn(3, (3,), relations, seed=14)
    g = G.build_graph([(0, "follow", 1), (2, "follow", 1), (1, "comment", 2),
                       (0, "comment", 2), (2, "comment", 0)], n_nodes=3)
    feats = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = rng.normal(size=(3, 3))

    def loss():
        return T.sum_(net.layer(g, feats, 0) * Tensor(w))

    checked = {"feats": feats, "w_follow": net.params["l0.w_follow"],
               "w_self": net.params["l0.w_self"],
               "omega_follow": net.params["omega_follow"],
               "eta_raw_follow": net.params["eta_raw_follow"],
               "eta_raw_comment": net.params["eta_raw_comment"]}
    report = T.grad_check(loss, checked, step=1e-6)
    assert max(report.values()) < 1e-4


def test_eta_stays_positive_for_any_raw_value():
    net = make_rgcn(2, (2,), ("follow",))
    for raw in (-50.0, -3.0, 0.0, 4.0, 80.0):
        net.params["eta_raw_follow"].data[()] = raw
        assert net.eta_value("follow") > 0


# ---------------------------------------------------------------------------
# edge prediction

def test_edge_scores_from_dot_products():
    emb = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    pairs = np.array([[0, 1], [0, 2]])
    vi = emb.data[pairs[:, 0]]
    vj = emb.data[pairs[:, 1]]
    dots = (vi * vj).sum(axis=1)
    scores = 1 / (1 + np.exp(-dots))
    assert scores[0] == pytest.approx(0.7311, abs=1e-4)  # dot = 1
    assert scores[1] == pytest.approx(0.5)               # orthogonal


def test_edge_prediction_loss_limits():
    emb = Tensor(np.array([[30.0, 0.0], [30.0, 0.0], [-30.0, 30.0], [0.0, -30.0]]))
    pairs = np.array([[0, 1], [2, 3]])
    labels = np.array([1.0, 0.0])
    loss = G.edge_prediction_loss(emb, pairs, labels)
    assert loss.item() < 1e-8

    mid = Tensor(np.zeros((2, 2)))
    loss_mid = G.edge_prediction_loss(mid, np.array([[0, 1]]), np.array([1.0]))
    assert loss_mid.item() == pytest.approx(math.log(2), abs=1e-12)


def test_sample_edge_batch_properties(rng):
    g = G.build_graph([(0, "follow", 1), (1, "comment", 2), (3, "mention", 4)],
                      n_nodes=6)
    pairs, labels = G.sample_edge_batch(g, 8, rng)
    assert len(pairs) == len(labels) == 8
    linked = g.linked_set()
    for (i, j), y in zip(pairs, labels):
        key = (min(i, j), max(i, j))
        assert (key in linked) == bool(y)


def test_sample_edge_batch_empty_graph_raises(rng):
    g = G.HeteroGraph(4)
    with pytest.raises(GraphError, match="no edges"):
        G.sample_edge_batch(g, 4, rng)
