"""Graph-network architectures: GN block, GraphGRU, the relational
forward model, and its baselines.

All models share one calling convention: ``unroll(graphs)`` takes the
per-step input graphs of one episode (or a batch of episodes merged
with ``batch_graphs``) and returns one output graph per step with the
same connectivity. Output vertex attributes hold the prediction heads
(5 action logits or 1 return estimate per vertex; only agent rows are
meaningful), and output edge attributes hold the per-edge message
vectors that the influence analyses consume.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, StateError
from .graph import Graph, batch_graphs, make_graph, self_edges_only
from .nn import GRUCell, LSTMCell, MLP
from .params import ParamStore
from .tensor import Tensor

N_ACTIONS = 5

# fresh prediction heads start near zero so an untrained model scores
# close to the uniform baseline (cross-entropy ln 5 for actions)
HEAD_INIT_SCALE = 0.01


class GNBlock:
    """One graph-network block: three MLPs updating edges, vertices, globals.

    Update order is edges, then vertices, then globals. Aggregations
    are sums: each vertex receives the sum of its incoming updated
    edges; the globals receive the sums of all updated edges and all
    updated vertices.
    """

    def __init__(self, store: ParamStore, name: str, d_e_in: int, d_v_in: int,
                 d_u_in: int, d_e_out: int, d_v_out: int, d_u_out: int,
                 hidden: int = 64, head_scale: float | None = None):
        self.dims_in = (d_e_in, d_v_in, d_u_in)
        self.dims_out = (d_e_out, d_v_out, d_u_out)
        self.phi_e = MLP(store, f"{name}.phi_e", d_e_in + 2 * d_v_in + d_u_in,
                         [hidden], d_e_out)
        self.phi_v = MLP(store, f"{name}.phi_v", d_e_out + d_v_in + d_u_in,
                         [hidden], d_v_out, out_scale=head_scale)
        self.phi_u = MLP(store, f"{name}.phi_u", d_e_out + d_v_out + d_u_in,
                         [hidden], d_u_out)


def _check_sizes(g: Graph, dims, what: str):
    d_e, d_v, d_u = dims
    got = (g.e.values.shape[1], g.v.values.shape[1], g.u.values.shape[1])
    if got != (d_e, d_v, d_u):
        raise DimensionError(
            f"{what} expects attribute sizes (e,v,u)={dims}, graph has {got}"
        )


def gn_forward(block: GNBlock, g: Graph) -> Graph:
    """Apply one GN block; returns a graph with identical connectivity."""
    _check_sizes(g, block.dims_in, "GN block")
    v_r = T.gather_rows(g.v, g.receivers)
    v_s = T.gather_rows(g.v, g.senders)
    u_e = T.gather_rows(g.u, g.edge_graph)
    e2 = block.phi_e(T.concat([g.e, v_r, v_s, u_e], axis=1))
    agg_in = T.segment_sum(e2, g.receivers, g.n_vertices)
    u_v = T.gather_rows(g.u, g.vertex_graph)
    v2 = block.phi_v(T.concat([agg_in, g.v, u_v], axis=1))
    agg_e = T.canonical_segment_sum(e2, g.edge_graph, g.n_graphs)
    agg_v = T.canonical_segment_sum(v2, g.vertex_graph, g.n_graphs)
    u2 = block.phi_u(T.concat([agg_e, agg_v, g.u], axis=1))
    return g.with_attrs(u=u2, v=v2, e=e2)


class GraphGRU:
    """A GN block whose update functions are GRU cells.

    The hidden state is itself a graph with the same connectivity as
    the step input; edge, vertex, and global states are each
    ``hidden``-dimensional. Each step's output graph is the new state
    graph (the same values are handed out and carried forward).
    """

    def __init__(self, store: ParamStore, name: str, d_e_in: int, d_v_in: int,
                 d_u_in: int, hidden: int = 32, global_state: bool = True):
        self.dims_in = (d_e_in, d_v_in, d_u_in)
        self.hidden = hidden
        self.global_state = global_state
        self.edge_cell = GRUCell(store, f"{name}.edge",
                                 d_e_in + 2 * d_v_in + d_u_in, hidden)
        self.vertex_cell = GRUCell(store, f"{name}.vertex",
                                   hidden + d_v_in + d_u_in, hidden)
        if global_state:
            self.global_cell = GRUCell(store, f"{name}.global",
                                       2 * hidden + d_u_in, hidden)

    def init_state(self, g: Graph) -> Graph:
        d = self.hidden
        return g.with_attrs(
            u=Tensor(np.zeros((g.n_graphs, d if self.global_state else 0))),
            v=Tensor(np.zeros((g.n_vertices, d))),
            e=Tensor(np.zeros((g.n_edges, d))),
        )


def graph_gru_step(core: GraphGRU, g_in: Graph, g_hid: Graph):
    """One recurrent step; returns (output graph, next state graph)."""
    _check_sizes(g_in, core.dims_in, "GraphGRU")
    if not g_in.same_connectivity(g_hid):
        raise StateError(
            "hidden state connectivity differs from step input; graphs must "
            "keep per-episode constant connectivity"
        )
    v_r = T.gather_rows(g_in.v, g_in.receivers)
    v_s = T.gather_rows(g_in.v, g_in.senders)
    u_e = T.gather_rows(g_in.u, g_in.edge_graph)
    x_e = T.concat([g_in.e, v_r, v_s, u_e], axis=1)
    e_h = core.edge_cell(x_e, g_hid.e)
    agg_in = T.segment_sum(e_h, g_in.receivers, g_in.n_vertices)
    u_v = T.gather_rows(g_in.u, g_in.vertex_graph)
    x_v = T.concat([agg_in, g_in.v, u_v], axis=1)
    v_h = core.vertex_cell(x_v, g_hid.v)
    if core.global_state:
        agg_e = T.canonical_segment_sum(e_h, g_in.edge_graph, g_in.n_graphs)
        agg_v = T.canonical_segment_sum(v_h, g_in.vertex_graph, g_in.n_graphs)
        x_u = T.concat([agg_e, agg_v, g_in.u], axis=1)
        u_h = core.global_cell(x_u, g_hid.u)
    else:
        u_h = Tensor(np.zeros((g_in.n_graphs, 0)))
    out = g_in.with_attrs(u=u_h, v=v_h, e=e_h)
    return out, out


class RFMModel:
    """GN encoder -> GraphGRU -> GN decoder.

    ``self_loops_only=True`` gives the no-relation ablation: every
    input graph's edge set is replaced by one self-edge per vertex. The
    ablation also sets ``use_globals=False``, removing global features
    from edge and vertex updates, so that no information path of any
    kind crosses vertices.
    """

    kind = "rfm"
    recurrent = True

    def __init__(self, store: ParamStore, config: dict):
        self.store = store
        self.config = dict(config)
        c = self.config
        d_v_in = c["d_v_in"]
        d_e_in = c.get("d_e_in", 0)
        d_u_in = c.get("d_u_in", 0)
        enc = c.get("enc_size", 32)
        hid = c.get("gru_hidden", 32)
        mlp_hidden = c.get("mlp_hidden", 64)
        use_globals = bool(c.get("use_globals", True))
        enc_u = enc if use_globals else 0
        dec_e = c.get("dec_edge_size", 32)
        dec_u = c.get("dec_global_size", 32) if use_globals else 0
        core_u_state = hid if use_globals else 0
        self.head_size = c["head_size"]
        self.self_loops_only = bool(c.get("self_loops_only", False))
        self.encoder = GNBlock(store, "encoder", d_e_in, d_v_in, d_u_in,
                               enc, enc, enc_u, hidden=mlp_hidden)
        self.core = GraphGRU(store, "core", enc, enc, enc_u, hidden=hid,
                             global_state=use_globals)
        self.decoder = GNBlock(store, "decoder", hid, hid, core_u_state,
                               dec_e, self.head_size, dec_u, hidden=mlp_hidden,
                               head_scale=c.get("head_init_scale", HEAD_INIT_SCALE))

    def _transform(self, g: Graph) -> Graph:
        return self_edges_only(g) if self.self_loops_only else g

    def init_state(self, g: Graph) -> Graph:
        return self.core.init_state(self._transform(g))

    def step(self, g: Graph, state: Graph):
        g = self._transform(g)
        enc = gn_forward(self.encoder, g)
        core_out, state2 = graph_gru_step(self.core, enc, state)
        dec = gn_forward(self.decoder, core_out)
        return dec, state2

    def unroll(self, graphs):
        state = self.init_state(graphs[0])
        outs = []
        for g in graphs:
            out, state = self.step(g, state)
            outs.append(out)
        return outs


class FeedforwardModel:
    """Encoder and decoder GN blocks with no recurrent core: each step's
    output depends only on that step's input graph."""

    kind = "feedforward"
    recurrent = False

    def __init__(self, store: ParamStore, config: dict):
        self.store = store
        self.config = dict(config)
        c = self.config
        enc = c.get("enc_size", 32)
        dec_e = c.get("dec_edge_size", 32)
        dec_u = c.get("dec_global_size", 32)
        mlp_hidden = c.get("mlp_hidden", 64)
        self.head_size = c["head_size"]
        self.encoder = GNBlock(store, "encoder", c.get("d_e_in", 0), c["d_v_in"],
                               c.get("d_u_in", 0), enc, enc, enc, hidden=mlp_hidden)
        self.decoder = GNBlock(store, "decoder", enc, enc, enc,
                               dec_e, self.head_size, dec_u, hidden=mlp_hidden,
                               head_scale=c.get("head_init_scale", HEAD_INIT_SCALE))

    def step(self, g: Graph, state=None):
        return gn_forward(self.decoder, gn_forward(self.encoder, g)), None

    def init_state(self, g: Graph):
        return None

    def unroll(self, graphs):
        return [self.step(g)[0] for g in graphs]


class VAINModel:
    """Restricted relational baseline with scalar edge attention.

    Per edge, the interaction reduces to the scalar weight
    exp(-||a(v_r) - a(v_s)||^2); each vertex's encoding is scaled by
    the sum of its incoming weights and decoded together with the
    unscaled encoding. Stateless across steps. Output edge attributes
    are the [n_e, 1] weights.
    """

    kind = "vain"
    recurrent = False

    def __init__(self, store: ParamStore, config: dict):
        self.store = store
        self.config = dict(config)
        c = self.config
        d_v_in = c["d_v_in"]
        attn = c.get("attn_size", 16)
        enc = c.get("enc_size", 32)
        mlp_hidden = c.get("mlp_hidden", 64)
        self.head_size = c["head_size"]
        self.attn = MLP(store, "attn", d_v_in, [mlp_hidden], attn)
        self.enc = MLP(store, "enc", d_v_in, [mlp_hidden], enc)
        self.dec = MLP(store, "dec", 2 * enc, [mlp_hidden], self.head_size,
                       out_scale=c.get("head_init_scale", HEAD_INIT_SCALE))

    def forward(self, g: Graph) -> Graph:
        a = self.attn(g.v)
        h = self.enc(g.v)
        diff = T.sub(T.gather_rows(a, g.receivers), T.gather_rows(a, g.senders))
        sq = T.row_sum(T.mul(diff, diff))
        w = T.exp(T.mul(sq, Tensor(-1.0)))
        incoming = T.segment_sum(w, g.receivers, g.n_vertices)
        scaled = T.mul(h, incoming)
        out_v = self.dec(T.concat([h, scaled], axis=1))
        return g.with_attrs(
            u=Tensor(np.zeros((g.n_graphs, 0))), v=out_v, e=w,
        )

    def step(self, g: Graph, state=None):
        return self.forward(g), None

    def init_state(self, g: Graph):
        return None

    def unroll(self, graphs):
        return [self.forward(g) for g in graphs]


def vain_forward(model: VAINModel, g: Graph) -> Graph:
    return model.forward(g)


class MLPLSTMModel:
    """Non-relational recurrent baseline.

    All vertex attributes are concatenated in the graph's canonical
    vertex order (agents first, then entities) into one flat vector per
    member graph, encoded by an MLP, passed through an LSTM, and
    decoded to one head per agent. Output graphs carry predictions on
    the agent vertex rows and zeros elsewhere.
    """

    kind = "mlplstm"
    recurrent = True

    def __init__(self, store: ParamStore, config: dict):
        self.store = store
        self.config = dict(config)
        c = self.config
        self.d_v_in = c["d_v_in"]
        self.n_vertices = c["n_vertices"]
        self.n_agents = c["n_agents"]
        self.head_size = c["head_size"]
        enc = c.get("enc_size", 64)
        self.lstm_hidden = c.get("lstm_hidden", 32)
        dec_hidden = c.get("dec_hidden", 32)
        flat = self.n_vertices * self.d_v_in
        self.enc = MLP(store, "enc", flat, [enc], enc)
        self.cell = LSTMCell(store, "lstm", enc, self.lstm_hidden)
        self.dec = MLP(store, "dec", self.lstm_hidden, [dec_hidden, dec_hidden],
                       self.n_agents * self.head_size,
                       out_scale=c.get("head_init_scale", HEAD_INIT_SCALE))

    def init_state(self, g: Graph):
        b = g.n_graphs
        return (Tensor(np.zeros((b, self.lstm_hidden))),
                Tensor(np.zeros((b, self.lstm_hidden))))

    def step(self, g: Graph, state):
        if g.n_vertices != g.n_graphs * self.n_vertices:
            raise DimensionError(
                f"expected {self.n_vertices} vertices per graph, got "
                f"{g.n_vertices} over {g.n_graphs} graphs"
            )
        b = g.n_graphs
        flat = T.reshape(g.v, (b, self.n_vertices * self.d_v_in))
        h, c = state
        h2, c2 = self.cell(self.enc(flat), h, c)
        preds = self.dec(h2)  # [b, n_agents * head]
        per_agent = T.reshape(preds, (b * self.n_agents, self.head_size))
        # scatter agent predictions into the full vertex matrix: the
        # canonical order puts agents at the first rows of each graph
        rows = (np.arange(b)[:, None] * self.n_vertices
                + np.arange(self.n_agents)[None, :]).ravel()
        out_v = T.segment_sum(per_agent, rows, g.n_vertices)
        out = g.with_attrs(
            u=Tensor(np.zeros((b, 0))), v=out_v,
            e=Tensor(np.zeros((g.n_edges, 0))),
        )
        return out, (h2, c2)

    def unroll(self, graphs):
        state = self.init_state(graphs[0])
        outs = []
        for g in graphs:
            out, state = self.step(g, state)
            outs.append(out)
        return outs


MODEL_KINDS = ("rfm", "vain", "feedforward", "norelation", "mlplstm")


def make_ablation(kind: str, base_config: dict):
    """Build the feedforward or no-relation ablation of the base model."""
    cfg = dict(base_config)
    seed = cfg.pop("seed", 0)
    store = ParamStore(seed=seed)
    if kind == "feedforward":
        model = FeedforwardModel(store, cfg)
    elif kind == "no_relation" or kind == "norelation":
        cfg["self_loops_only"] = True
        cfg["use_globals"] = False
        model = RFMModel(store, cfg)
        model.kind = "norelation"
    else:
        raise ConfigurationError(f"unknown ablation kind {kind!r}")
    return model


def build_model(kind: str, config: dict, seed: int = 0):
    """Construct any model kind with a fresh seeded parameter store.

    The returned model's ``config`` plus ``kind`` and ``seed`` fully
    describe the architecture; ``model_config()`` round-trips through
    checkpoints via ``build_model_from_config``.
    """
    cfg = dict(config)
    store = ParamStore(seed=seed)
    if kind == "rfm":
        model = RFMModel(store, cfg)
    elif kind == "norelation":
        cfg["self_loops_only"] = True
        cfg["use_globals"] = False
        model = RFMModel(store, cfg)
        model.kind = "norelation"
    elif kind == "feedforward":
        model = FeedforwardModel(store, cfg)
    elif kind == "vain":
        model = VAINModel(store, cfg)
    elif kind == "mlplstm":
        for key in ("n_vertices", "n_agents"):
            if key not in cfg:
                raise ConfigurationError(f"mlplstm requires {key!r} in its config")
        model = MLPLSTMModel(store, cfg)
    else:
        raise ConfigurationError(
            f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}"
        )
    return model


def model_config(model) -> dict:
    doc = dict(model.config)
    doc["kind"] = model.kind
    doc["seed"] = model.store.seed
    return doc


def build_model_from_config(doc: dict):
    cfg = dict(doc)
    kind = cfg.pop("kind")
    seed = cfg.pop("seed", 0)
    if kind == "norelation":
        cfg.pop("self_loops_only", None)
        cfg.pop("use_globals", None)
    return build_model(kind, cfg, seed=seed)


def agent_logit_rows(out: Graph, agent_rows) -> Tensor:
    """Select the agent-vertex rows of an output graph's vertex attrs."""
    return T.gather_rows(out.v, agent_rows)


def single_step_batch(graphs) -> Graph:
    """Merge the same step of many episodes into one graph."""
    return batch_graphs(graphs)
