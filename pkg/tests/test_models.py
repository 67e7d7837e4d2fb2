"""Graph data model and network architectures against loop oracles."""

import numpy as np
import pytest

from rfm_lab import tensor as T
from rfm_lab.errors import ConfigurationError, DimensionError, StateError
from rfm_lab.graph import (
    Graph, batch_graphs, drop_edges, make_graph, relabel_vertices,
    self_edges_only,
)
from rfm_lab.models import (
    GNBlock, GraphGRU, build_model, build_model_from_config, gn_forward,
    graph_gru_step, make_ablation, model_config, vain_forward,
)
from rfm_lab.params import ParamStore
from rfm_lab.tensor import Tensor

from oracles import gn_forward_loop, gru_reference, vain_weights_loop


def mlp_fn(store, prefix):
    """1-D vector function recomputing an MLP from its stored weights."""
    w0 = store[f"{prefix}.0.w"].values
    b0 = store[f"{prefix}.0.b"].values
    w1 = store[f"{prefix}.1.w"].values
    b1 = store[f"{prefix}.1.b"].values

    def f(*parts):
        x = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
        return np.maximum(x @ w0 + b0, 0.0) @ w1 + b1

    return f


def random_graph(rng, d_v=4, d_e=3, d_u=2, n_v=None, n_e=None):
    n_v = int(rng.integers(2, 7)) if n_v is None else n_v
    n_e = int(rng.integers(1, 12)) if n_e is None else n_e
    return make_graph(
        vertices=rng.normal(size=(n_v, d_v)),
        senders=rng.integers(0, n_v, size=n_e),
        receivers=rng.integers(0, n_v, size=n_e),
        edges=rng.normal(size=(n_e, d_e)),
        globals_=rng.normal(size=d_u),
    )


# ---------------------------------------------------------------------------
# graph data model


def test_make_graph_validates_indices():
    with pytest.raises(DimensionError):
        make_graph(np.ones((2, 3)), senders=[0, 2], receivers=[1, 0])
    with pytest.raises(DimensionError):
        make_graph(np.ones((2, 3)), senders=[0], receivers=[1, 0])


def test_batch_graphs_offsets_indices():
    g1 = make_graph(np.ones((2, 3)), [0], [1])
    g2 = make_graph(np.full((3, 3), 2.0), [2, 0], [1, 1])
    b = batch_graphs([g1, g2])
    assert b.n_graphs == 2
    assert b.n_vertices == 5
    assert b.senders.tolist() == [0, 4, 2]
    assert b.receivers.tolist() == [1, 3, 3]
    assert b.vertex_graph.tolist() == [0, 0, 1, 1, 1]
    assert b.edge_graph.tolist() == [0, 1, 1]


def test_self_edges_only():
    g = make_graph(np.ones((5, 2)), [0, 1, 2], [3, 4, 0])
    s = self_edges_only(g)
    assert s.n_edges == 5
    assert np.array_equal(s.senders, s.receivers)
    assert np.array_equal(s.senders, np.arange(5))


def test_drop_edges():
    g = make_graph(np.ones((3, 2)), [0, 1, 2], [1, 2, 0],
                   edges=np.arange(6.0).reshape(3, 2))
    d = drop_edges(g, [False, True, False])
    assert d.senders.tolist() == [0, 2]
    assert np.array_equal(d.e.values, [[0.0, 1.0], [4.0, 5.0]])


def test_relabel_vertices_roundtrip():
    rng = np.random.default_rng(0)
    g = random_graph(rng, n_v=5, n_e=7)
    perm = rng.permutation(5)
    h = relabel_vertices(g, perm)
    assert np.array_equal(h.v.values[perm], g.v.values)
    assert np.array_equal(h.senders, perm[g.senders])
    inv = np.argsort(perm)
    back = relabel_vertices(h, inv)
    assert np.array_equal(back.v.values, g.v.values)
    assert np.array_equal(back.senders, g.senders)


# ---------------------------------------------------------------------------
# GN block


def test_gn_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    store = ParamStore(seed=0)
    block = GNBlock(store, "b", 3, 4, 2, 5, 6, 7)
    phi_e = mlp_fn(store, "b.phi_e")
    phi_v = mlp_fn(store, "b.phi_v")
    phi_u = mlp_fn(store, "b.phi_u")
    for _ in range(20):
        g = random_graph(rng)
        out = gn_forward(block, g)
        u_o, v_o, e_o = gn_forward_loop(
            g.u.values[0], g.v.values, g.e.values, g.senders, g.receivers,
            phi_e, phi_v, phi_u, d_e_out=5)
        assert np.allclose(out.e.values, e_o, atol=1e-12)
        assert np.allclose(out.v.values, v_o, atol=1e-12)
        assert np.allclose(out.u.values[0], u_o, atol=1e-12)
        assert np.array_equal(out.senders, g.senders)
        assert np.array_equal(out.receivers, g.receivers)


def test_gn_forward_zero_weights_zero_output():
    store = ParamStore(seed=0)
    block = GNBlock(store, "b", 0, 3, 0, 4, 4, 4)
    for name, t in store.items():
        t.values = np.zeros_like(t.values)
    g = make_graph(np.random.default_rng(2).normal(size=(4, 3)),
                   [0, 1], [1, 2])
    out = gn_forward(block, g)
    assert np.all(out.e.values == 0.0)
    assert np.all(out.v.values == 0.0)
    assert np.all(out.u.values == 0.0)


def test_gn_forward_no_incoming_edges_aggregate_zero():
    # 2 vertices, one edge 0 -> 1: vertex 0 must aggregate the zero vector
    store = ParamStore(seed=3)
    block = GNBlock(store, "b", 0, 3, 0, 4, 4, 4)
    rng = np.random.default_rng(3)
    g = make_graph(rng.normal(size=(2, 3)), [0], [1])
    out = gn_forward(block, g)
    phi_v = mlp_fn(store, "b.phi_v")
    phi_e = mlp_fn(store, "b.phi_e")
    want_v0 = phi_v(np.zeros(4), g.v.values[0])
    want_v1 = phi_v(phi_e(g.v.values[1], g.v.values[0]), g.v.values[1])
    assert np.allclose(out.v.values[0], want_v0, atol=1e-12)
    assert np.allclose(out.v.values[1], want_v1, atol=1e-12)


def test_gn_forward_disconnected_graph():
    store = ParamStore(seed=4)
    block = GNBlock(store, "b", 0, 3, 0, 4, 4, 4)
    rng = np.random.default_rng(4)
    g = make_graph(rng.normal(size=(3, 3)), [], [])
    out = gn_forward(block, g)
    phi_v = mlp_fn(store, "b.phi_v")
    for i in range(3):
        assert np.allclose(out.v.values[i], phi_v(np.zeros(4), g.v.values[i]),
                           atol=1e-12)


def test_gn_forward_size_mismatch():
    store = ParamStore(seed=5)
    block = GNBlock(store, "b", 0, 3, 0, 4, 4, 4)
    g = make_graph(np.ones((2, 5)), [0], [1])
    with pytest.raises(DimensionError):
        gn_forward(block, g)


def test_gn_forward_permutation_equivariance_exact():
    rng = np.random.default_rng(6)
    store = ParamStore(seed=6)
    block = GNBlock(store, "b", 3, 4, 2, 5, 6, 7)
    for _ in range(20):
        g = random_graph(rng)
        perm = rng.permutation(g.n_vertices)
        out = gn_forward(block, g)
        out_p = gn_forward(block, relabel_vertices(g, perm))
        assert np.array_equal(out_p.v.values[perm], out.v.values)
        assert np.array_equal(out_p.e.values, out.e.values)
        assert np.array_equal(out_p.u.values, out.u.values)


def test_gn_forward_batch_equals_per_graph():
    rng = np.random.default_rng(7)
    store = ParamStore(seed=7)
    block = GNBlock(store, "b", 3, 4, 2, 5, 6, 7)
    graphs = [random_graph(rng) for _ in range(3)]
    outs = [gn_forward(block, g) for g in graphs]
    bout = gn_forward(block, batch_graphs(graphs))
    v_cat = np.concatenate([o.v.values for o in outs])
    e_cat = np.concatenate([o.e.values for o in outs])
    u_cat = np.concatenate([o.u.values for o in outs])
    assert np.allclose(bout.v.values, v_cat, atol=1e-12)
    assert np.allclose(bout.e.values, e_cat, atol=1e-12)
    assert np.allclose(bout.u.values, u_cat, atol=1e-12)


# ---------------------------------------------------------------------------
# GraphGRU


def test_graph_gru_single_vertex_matches_plain_gru():
    store = ParamStore(seed=8)
    core = GraphGRU(store, "c", 0, 3, 0, hidden=4)
    rng = np.random.default_rng(8)
    g = make_graph(rng.normal(size=(1, 3)), [], [])
    hid = core.init_state(g)
    out, hid2 = graph_gru_step(core, g, hid)
    x_v = np.concatenate([np.zeros(4), g.v.values[0]]).reshape(1, -1)
    cell = core.vertex_cell
    want = gru_reference(x_v, np.zeros((1, 4)), cell.w.values,
                         cell.u_zr.values, cell.u_n.values, cell.b.values)
    assert np.allclose(out.v.values, want, atol=1e-12)
    assert out is hid2  # output graph is the new state graph


def test_graph_gru_connectivity_mismatch_raises():
    store = ParamStore(seed=9)
    core = GraphGRU(store, "c", 0, 3, 0, hidden=4)
    g1 = make_graph(np.ones((3, 3)), [0, 1], [1, 2])
    g2 = make_graph(np.ones((3, 3)), [0, 2], [1, 1])
    with pytest.raises(StateError):
        graph_gru_step(core, g2, core.init_state(g1))


def test_graph_gru_zero_everything_stays_zero():
    store = ParamStore(seed=10)
    core = GraphGRU(store, "c", 0, 2, 0, hidden=3)
    for _, t in store.items():
        t.values = np.zeros_like(t.values)
    g = make_graph(np.zeros((2, 2)), [0], [1])
    out, _ = graph_gru_step(core, g, core.init_state(g))
    assert np.all(out.v.values == 0.0)
    assert np.all(out.e.values == 0.0)


def test_graph_gru_state_carries_information():
    store = ParamStore(seed=11)
    core = GraphGRU(store, "c", 0, 3, 0, hidden=4)
    rng = np.random.default_rng(11)
    g1 = make_graph(rng.normal(size=(2, 3)), [0], [1])
    g2 = g1.with_attrs(u=g1.u, v=Tensor(rng.normal(size=(2, 3))), e=g1.e)
    _, hid = graph_gru_step(core, g1, core.init_state(g1))
    out_a, _ = graph_gru_step(core, g2, hid)
    out_b, _ = graph_gru_step(core, g2, core.init_state(g2))
    assert not np.allclose(out_a.v.values, out_b.v.values)


# ---------------------------------------------------------------------------
# RFM stack


def rfm_config(d_v=4, head=5, **kw):
    cfg = {"d_v_in": d_v, "head_size": head, "enc_size": 8, "gru_hidden": 6,
           "dec_edge_size": 7, "dec_global_size": 5, "mlp_hidden": 16}
    cfg.update(kw)
    return cfg


def episode_graphs(rng, n_steps=4, n_v=5, d_v=4):
    senders = rng.integers(0, n_v, size=8)
    receivers = rng.integers(0, n_v, size=8)
    return [make_graph(rng.normal(size=(n_v, d_v)), senders, receivers)
            for _ in range(n_steps)]


def test_rfm_one_step_equals_manual_composition():
    model = build_model("rfm", rfm_config(), seed=12)
    rng = np.random.default_rng(12)
    graphs = episode_graphs(rng, n_steps=1)
    out = model.unroll(graphs)[0]
    enc = gn_forward(model.encoder, graphs[0])
    core_out, _ = graph_gru_step(model.core, enc, model.core.init_state(enc))
    dec = gn_forward(model.decoder, core_out)
    assert np.array_equal(out.v.values, dec.v.values)
    assert np.array_equal(out.e.values, dec.e.values)


def test_rfm_connectivity_preserved_and_head_size():
    model = build_model("rfm", rfm_config(), seed=13)
    rng = np.random.default_rng(13)
    graphs = episode_graphs(rng)
    outs = model.unroll(graphs)
    assert len(outs) == len(graphs)
    for g, o in zip(graphs, outs):
        assert np.array_equal(o.senders, g.senders)
        assert np.array_equal(o.receivers, g.receivers)
        assert o.v.values.shape == (g.n_vertices, 5)


def test_rfm_zero_weights_uniform_logits():
    model = build_model("rfm", rfm_config(), seed=14)
    for _, t in model.store.items():
        t.values = np.zeros_like(t.values)
    rng = np.random.default_rng(14)
    outs = model.unroll(episode_graphs(rng))
    for o in outs:
        assert np.all(o.v.values == 0.0)  # softmax of zeros is uniform


def test_rfm_permutation_equivariance_exact_through_time():
    model = build_model("rfm", rfm_config(), seed=15)
    rng = np.random.default_rng(15)
    graphs = episode_graphs(rng, n_steps=3)
    perm = rng.permutation(graphs[0].n_vertices)
    outs = model.unroll(graphs)
    outs_p = model.unroll([relabel_vertices(g, perm) for g in graphs])
    for o, op in zip(outs, outs_p):
        assert np.array_equal(op.v.values[perm], o.v.values)
        assert np.array_equal(op.e.values, o.e.values)
        assert np.array_equal(op.u.values, o.u.values)


def test_rfm_is_stateful_across_steps():
    model = build_model("rfm", rfm_config(), seed=16)
    rng = np.random.default_rng(16)
    g1, g2 = episode_graphs(rng, n_steps=2)
    out_seq = model.unroll([g1, g2])[1]
    out_fresh = model.unroll([g2])[0]
    assert not np.allclose(out_seq.v.values, out_fresh.v.values)


# ---------------------------------------------------------------------------
# ablations


def test_feedforward_is_stateless():
    model = build_model("feedforward", rfm_config(), seed=17)
    rng = np.random.default_rng(17)
    g1, g2 = episode_graphs(rng, n_steps=2)
    out_seq = model.unroll([g1, g2])[1]
    out_fresh = model.unroll([g2])[0]
    assert np.array_equal(out_seq.v.values, out_fresh.v.values)


def test_norelation_graph_shape():
    model = build_model("norelation", rfm_config(), seed=18)
    rng = np.random.default_rng(18)
    g = episode_graphs(rng, n_steps=1)[0]
    out = model.unroll([g])[0]
    assert out.n_edges == g.n_vertices
    assert np.array_equal(out.senders, out.receivers)


def test_norelation_isolates_vertices():
    model = build_model("norelation", rfm_config(), seed=19)
    rng = np.random.default_rng(19)
    graphs = episode_graphs(rng, n_steps=3, n_v=5)
    outs = model.unroll(graphs)
    # perturb vertex 3's attributes on every step; vertex 1's outputs
    # must not move
    perturbed = []
    for g in graphs:
        v2 = g.v.values.copy()
        v2[3] += rng.normal(size=v2.shape[1])
        perturbed.append(g.with_attrs(u=g.u, v=Tensor(v2), e=g.e))
    outs_p = model.unroll(perturbed)
    for o, op in zip(outs, outs_p):
        assert np.array_equal(o.v.values[1], op.v.values[1])
        assert not np.array_equal(o.v.values[3], op.v.values[3])


def test_make_ablation_kinds():
    ff = make_ablation("feedforward", rfm_config())
    assert ff.kind == "feedforward"
    nr = make_ablation("no_relation", rfm_config())
    assert nr.kind == "norelation"
    with pytest.raises(ConfigurationError):
        make_ablation("nonsense", rfm_config())


# ---------------------------------------------------------------------------
# VAIN


def test_vain_constant_embedding_gives_unit_weights():
    model = build_model("vain", rfm_config(), seed=20)
    # zero the attention MLP: a(v) constant 0 for every vertex
    for name, t in model.store.items():
        if name.startswith("attn"):
            t.values = np.zeros_like(t.values)
    rng = np.random.default_rng(20)
    g = episode_graphs(rng, n_steps=1)[0]
    out = vain_forward(model, g)
    assert np.allclose(out.e.values, 1.0, atol=1e-15)


def test_vain_identical_vertices_weight_one():
    model = build_model("vain", rfm_config(), seed=21)
    v = np.tile(np.random.default_rng(21).normal(size=(1, 4)), (2, 1))
    g = make_graph(v, [0, 1], [1, 0])
    out = vain_forward(model, g)
    assert np.allclose(out.e.values, 1.0, atol=1e-12)


def test_vain_matches_direct_formula():
    model = build_model("vain", rfm_config(d_v=4, head=3), seed=22)
    rng = np.random.default_rng(22)
    g = random_graph(rng, d_v=4, d_e=0, d_u=0, n_v=3, n_e=5)
    out = vain_forward(model, g)
    store = model.store
    attn = mlp_fn(store, "attn")
    enc = mlp_fn(store, "enc")
    dec = mlp_fn(store, "dec")
    a = np.array([attn(row) for row in g.v.values])
    h = np.array([enc(row) for row in g.v.values])
    w = vain_weights_loop(a, g.senders, g.receivers)
    assert np.allclose(out.e.values.ravel(), w, atol=1e-12)
    for i in range(3):
        s = sum(w[k] for k in range(5) if g.receivers[k] == i)
        want = dec(np.concatenate([h[i], h[i] * s]))
        assert np.allclose(out.v.values[i], want, atol=1e-10)


def test_vain_weights_in_unit_interval():
    model = build_model("vain", rfm_config(), seed=23)
    rng = np.random.default_rng(23)
    for _ in range(5):
        g = random_graph(rng, d_v=4, d_e=0, d_u=0)
        w = vain_forward(model, g).e.values
        assert np.all(w > 0.0) and np.all(w <= 1.0)


# ---------------------------------------------------------------------------
# MLP+LSTM


def test_mlplstm_shapes_and_agent_rows():
    cfg = {"d_v_in": 4, "head_size": 5, "n_vertices": 6, "n_agents": 2}
    model = build_model("mlplstm", cfg, seed=24)
    rng = np.random.default_rng(24)
    graphs = [make_graph(rng.normal(size=(6, 4)), [2, 3], [0, 1])
              for _ in range(3)]
    outs = model.unroll(graphs)
    for o in outs:
        assert o.v.values.shape == (6, 5)
        assert np.all(o.v.values[2:] == 0.0)  # non-agent rows masked
    b = batch_graphs(graphs[:2])
    bout, _ = model.step(b, model.init_state(b))
    assert np.allclose(bout.v.values[:6], outs[0].v.values, atol=1e-12)


def test_mlplstm_requires_vertex_count():
    with pytest.raises(ConfigurationError):
        build_model("mlplstm", {"d_v_in": 4, "head_size": 5})


def test_mlplstm_is_stateful():
    cfg = {"d_v_in": 3, "head_size": 5, "n_vertices": 4, "n_agents": 2}
    model = build_model("mlplstm", cfg, seed=25)
    rng = np.random.default_rng(25)
    graphs = [make_graph(rng.normal(size=(4, 3)), [2], [0]) for _ in range(2)]
    out_seq = model.unroll(graphs)[1]
    out_fresh = model.unroll(graphs[1:])[0]
    assert not np.allclose(out_seq.v.values[:2], out_fresh.v.values[:2])


# ---------------------------------------------------------------------------
# config round-trip


def test_model_config_roundtrip():
    for kind in ("rfm", "vain", "feedforward", "norelation"):
        m1 = build_model(kind, rfm_config(), seed=31)
        m2 = build_model_from_config(model_config(m1))
        assert m2.kind == m1.kind
        assert m1.store.state_hash() == m2.store.state_hash()
    cfg = {"d_v_in": 4, "head_size": 5, "n_vertices": 6, "n_agents": 2}
    m1 = build_model("mlplstm", cfg, seed=32)
    m2 = build_model_from_config(model_config(m1))
    assert m1.store.state_hash() == m2.store.state_hash()


def test_build_model_unknown_kind():
    with pytest.raises(ConfigurationError):
        build_model("transformer", rfm_config())


# ---------------------------------------------------------------------------
# end-to-end gradient check through the full stack


def test_end_to_end_gradient_finite_differences():
    from oracles import finite_difference, max_rel_err

    cfg = rfm_config(d_v=3, head=2)
    cfg.update({"enc_size": 4, "gru_hidden": 3, "dec_edge_size": 3,
                "dec_global_size": 2, "mlp_hidden": 5})
    model = build_model("rfm", cfg, seed=33)
    rng = np.random.default_rng(33)
    senders = np.array([0, 1, 2, 0])
    receivers = np.array([1, 2, 0, 2])
    v_seq = [rng.normal(size=(3, 3)) for _ in range(3)]

    def run(*vs):
        graphs = [make_graph(v, senders, receivers) for v in vs]
        outs = model.unroll(graphs)
        return float(sum((o.v.values ** 2).sum() + (o.e.values ** 2).sum()
                         for o in outs))

    tensors = [Tensor(v, requires_grad=True) for v in v_seq]
    with T.Tape() as tape:
        graphs = [Graph(
            u=Tensor(np.zeros((1, 0))), v=t, e=Tensor(np.zeros((4, 0))),
            senders=senders, receivers=receivers,
            vertex_graph=np.zeros(3, dtype=np.int64),
            edge_graph=np.zeros(4, dtype=np.int64), n_graphs=1,
        ) for t in tensors]
        outs = model.unroll(graphs)
        loss = None
        for o in outs:
            term = T.add(T.reduce_sum(T.mul(o.v, o.v)),
                         T.reduce_sum(T.mul(o.e, o.e)))
            loss = term if loss is None else T.add(loss, term)
    tape.backward(loss)
    numeric = finite_difference(run, [v.copy() for v in v_seq])
    for t, num in zip(tensors, numeric):
        assert max_rel_err(t.grad, num) < 1e-3
