import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import two_class_graph
from dpgnn import autodiff as ad
from dpgnn.autodiff import Tensor
from dpgnn.graph_data import GraphDataset, graph_from_edges, make_batch
from dpgnn.model import DpGnnModel, ModelConfig, export_embeddings


def random_graph(rng, n, p=0.25, classes=7, label=0):
    edges = [(v, w) for v in range(n) for w in range(v + 1, n) if rng.random() < p]
    return graph_from_edges(rng.integers(0, classes, n), edges, graph_label=label,
                            num_node_classes=classes)


def one(g, c_g=2):
    return GraphDataset([g], g.num_node_classes, c_g)


NODE_OUTPUTS = ("node_reprs", "node_label_scores", "node_graph_scores", "neighborhood_distribution")
GRAPH_OUTPUTS = ("graph_reprs", "graph_scores", "graph_distribution")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(7, 2, num_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(7, 2, hidden_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(7, 2, first_layer_transform="sum")


@pytest.mark.parametrize("tf", ["identical", "mlp"])
def test_block_widths(tf):
    m = DpGnnModel(ModelConfig(7, 2, hidden_dim=16, num_layers=3, first_layer_transform=tf))
    first_in = 14 if tf == "identical" else 7 + 16
    assert m.combines[0].in_dim == first_in
    assert all(c.in_dim == 32 for c in m.combines[1:])
    assert (m.transforms[0] is None) == (tf == "identical")
    assert [h.out_dim for h in m.heads] == [2, 7, 2, 7, 7]
    assert all(h.in_dim == 16 for h in m.heads)
    for b in m.blocks():
        assert b.w1.shape[1] == 16 and b.gamma.shape == (1, 16)
    assert len(m.named_parameters()) == len(m.parameters())


def test_output_shapes(rng):
    graphs = [random_graph(rng, 5), random_graph(rng, 3, label=1)]
    b = make_batch(GraphDataset(graphs, 7, 2), [0, 1])
    out = DpGnnModel(ModelConfig(7, 2, hidden_dim=32))(b)
    assert out.graph_scores.shape == (2, 2)
    assert out.node_label_scores.shape == (8, 7)
    assert out.node_graph_scores.shape == (8, 2)
    assert out.graph_distribution.shape == (2, 7)
    assert out.neighborhood_distribution.shape == (8, 7)
    assert out.node_reprs.shape == (8, 32) and out.graph_reprs.shape == (2, 32)


def test_feature_width_mismatch(rng):
    b = make_batch(one(random_graph(rng, 4, classes=3)), [0])
    with pytest.raises(ValueError):
        DpGnnModel(ModelConfig(7, 2))(b)


def test_layer_row_mismatch(rng):
    m = DpGnnModel(ModelConfig(7, 2))
    b = make_batch(one(random_graph(rng, 4)), [0])
    with pytest.raises(ValueError):
        m.gnn_layer(Tensor(np.zeros((3, 7))), b, 0, False)


def test_isolated_node_gets_zero_neighbourhood(rng):
    g = graph_from_edges([1, 2, 3], [(0, 1)], num_node_classes=7)
    b = make_batch(one(g), [0])
    m = DpGnnModel(ModelConfig(7, 2))
    h = Tensor(b.features)
    got = m.gnn_layer(h, b, 0, False).data[2]
    ref = m.combines[0](Tensor(np.concatenate([b.features[2:3], np.zeros((1, 7))], axis=1)), False)
    assert np.array_equal(got, ref.data[0])


def test_single_edge_concatenation():
    g = graph_from_edges([0, 1], [(0, 1)], num_node_classes=2)
    b = make_batch(one(g), [0])
    x = Tensor(b.features)
    cat = ad.concat_columns(x, ad.gather_neighbors_sum(x, b))
    assert cat.data[0].tolist() == [1, 0, 0, 1]


def test_layer_zero_sum_is_neighbourhood_distribution(mutag):
    b = make_batch(mutag, range(20))
    agg = ad.gather_neighbors_sum(Tensor(b.features), b).data
    assert np.array_equal(agg, b.neighborhood_distributions)
    f2 = make_batch(one(two_class_graph()), [0])
    assert ad.gather_neighbors_sum(Tensor(f2.features), f2).data[0].tolist() == [1, 2]


def test_neighbourhood_term_matches_dense_oracle(rng):
    g = random_graph(rng, 8, 0.4)
    b = make_batch(one(g), [0])
    m = DpGnnModel(ModelConfig(7, 2, hidden_dim=8, num_layers=2))
    h = m.gnn_layer(Tensor(b.features), b, 0, False)
    t = m.transforms[1](h, False)
    dense = oracles.dense_adjacency(g) @ t.data
    assert np.allclose(ad.gather_neighbors_sum(t, b).data, dense, atol=1e-12)
    expect = m.combines[1](Tensor(np.concatenate([h.data, dense], axis=1)), False).data
    assert np.allclose(m.gnn_layer(h, b, 1, False).data, expect, atol=1e-12)


def test_readout_single_node():
    g = graph_from_edges([4], [], num_node_classes=7)
    b = make_batch(one(g), [0])
    m = DpGnnModel(ModelConfig(7, 2))
    out = m(b)
    assert np.array_equal(out.graph_reprs.data, m.readout_mlp(out.node_reprs, False).data)


def test_duplicate_graph_gives_identical_rows(rng):
    ds = one(random_graph(rng, 9))
    out = DpGnnModel(ModelConfig(7, 2))(make_batch(ds, [0, 0]))
    assert np.array_equal(out.graph_reprs.data[0], out.graph_reprs.data[1])


def test_eval_mode_is_repeatable(mutag):
    m = DpGnnModel(ModelConfig(7, 2), seed=4)
    b = make_batch(mutag, range(10))
    a, c = m(b), m(b)
    for name in NODE_OUTPUTS + GRAPH_OUTPUTS:
        assert np.array_equal(getattr(a, name).data, getattr(c, name).data)


def test_train_mode_updates_running_statistics(mutag):
    m = DpGnnModel(ModelConfig(7, 2), seed=4)
    before = m.readout_mlp.bn.running_mean.copy()
    m(make_batch(mutag, range(10)), training=True)
    assert not np.array_equal(before, m.readout_mlp.bn.running_mean)


def test_seeded_initialisation():
    a, b = DpGnnModel(ModelConfig(7, 2), seed=3), DpGnnModel(ModelConfig(7, 2), seed=3)
    c = DpGnnModel(ModelConfig(7, 2), seed=4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)
    assert all(np.all(p.data == 0) for p in a.parameters() if p.name.endswith("lin1.bias"))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_permutation_invariance_and_equivariance(dtype):
    rng = np.random.default_rng(77)
    for trial in range(25):
        g = random_graph(rng, int(rng.integers(1, 21)))
        perm = rng.permutation(g.node_count)
        m = DpGnnModel(ModelConfig(7, 2), seed=trial, dtype=dtype)
        o = m(make_batch(one(g), [0]))
        op = m(make_batch(one(g.permute(perm)), [0]))
        tol = 1e-10 if dtype == np.float64 else 1e-5
        for name in GRAPH_OUTPUTS:
            assert np.abs(getattr(o, name).data - getattr(op, name).data).max() < tol
        for name in NODE_OUTPUTS:
            assert np.array_equal(getattr(o, name).data, getattr(op, name).data[perm])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.integers(1, 12), min_size=2, max_size=5))
def test_eval_batch_independence(seed, sizes):
    rng = np.random.default_rng(seed)
    ds = GraphDataset([random_graph(rng, n) for n in sizes], 7, 2)
    m = DpGnnModel(ModelConfig(7, 2, hidden_dim=16, num_layers=3), seed=seed % 1000)
    order = list(rng.permutation(len(sizes)))
    joint = m(make_batch(ds, order))
    starts = np.concatenate([[0], np.cumsum([sizes[i] for i in order])])
    for pos, gid in enumerate(order):
        alone = m(make_batch(ds, [gid]))
        for name in GRAPH_OUTPUTS:
            assert np.array_equal(getattr(joint, name).data[pos], getattr(alone, name).data[0])
        for name in NODE_OUTPUTS:
            rows = getattr(joint, name).data[starts[pos]:starts[pos + 1]]
            assert np.array_equal(rows, getattr(alone, name).data)


def wl_pair():
    """Two trees with degree sequence (3,2,2,1,1,1): a pendant on node 2 or node 1 of a path."""
    path = [(0, 1), (1, 2), (2, 3), (3, 4)]
    return (graph_from_edges([0] * 6, path + [(2, 5)], num_node_classes=1),
            graph_from_edges([0] * 6, path + [(1, 5)], num_node_classes=1))


def test_wl_oracle_sanity():
    g1, g2 = wl_pair()
    assert sorted(g1.degrees) == sorted(g2.degrees)
    assert oracles.wl_distinguishes(g1, g2)
    c6 = graph_from_edges([0] * 6, [(i, (i + 1) % 6) for i in range(6)], num_node_classes=1)
    triangles = graph_from_edges([0] * 6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)],
                                 num_node_classes=1)
    assert not oracles.wl_distinguishes(c6, triangles)


def test_distinguishes_wl_separable_pair():
    g1, g2 = wl_pair()
    b = make_batch(GraphDataset([g1, g2], 1, 1), [0, 1])
    hits = 0
    for seed in range(100):
        hg = DpGnnModel(ModelConfig(1, 1), seed=seed)(b).graph_reprs.data
        hits += np.abs(hg[0] - hg[1]).max() > 1e-6
    assert hits >= 99


def test_save_load_round_trip(tmp_path, mutag):
    m = DpGnnModel(ModelConfig(7, 2, hidden_dim=16, num_layers=2), seed=2)
    m(make_batch(mutag, range(32)), training=True)
    m.save(tmp_path / "m.npz", {"note": "x"})
    back, meta = DpGnnModel.load(tmp_path / "m.npz")
    assert meta["note"] == "x"
    b = make_batch(mutag, range(5))
    assert np.array_equal(m(b).graph_scores.data, back(b).graph_scores.data)


def test_load_rejects_mismatched_state(tmp_path):
    m = DpGnnModel(ModelConfig(7, 2, hidden_dim=16))
    arrays = m.state_arrays()
    arrays.pop("readout.lin1.weight")
    with pytest.raises(ad.CheckpointError):
        m.load_state_arrays(arrays)


def test_export_embeddings(tmp_path, mutag):
    m = DpGnnModel(ModelConfig(7, 2, hidden_dim=16), seed=0)
    val = list(range(0, 188, 10))
    n = export_embeddings(m, mutag, tmp_path / "a.csv", validation_ids=val)
    export_embeddings(DpGnnModel(ModelConfig(7, 2, hidden_dim=16), seed=0), mutag,
                      tmp_path / "b.csv", validation_ids=val)
    assert n == 188
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0][:3] == ["graph_id", "label", "role"] and len(rows[0]) == 3 + 16
    assert len(rows) == 189
    assert {r[2] for r in rows[1:]} == {"train", "validation"}
    assert sum(r[2] == "validation" for r in rows[1:]) == len(val)
    emb = np.array([[float(v) for v in r[3:]] for r in rows[1:]])
    assert np.array_equal(emb, m.embed(mutag))


def test_export_row_count_matches_dataset(tmp_path, toy):
    m = DpGnnModel(ModelConfig(toy.num_node_classes, toy.num_graph_classes, hidden_dim=8))
    assert export_embeddings(m, toy, tmp_path / "t.csv") == len(toy)
