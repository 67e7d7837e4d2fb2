"""Layer forward values against plain-numpy references, plus gradient flow."""

import numpy as np
import pytest

from rfm_lab import tensor as T
from rfm_lab.errors import ConfigurationError, StateError
from rfm_lab.nn import GRUCell, Linear, LSTMCell, MLP
from rfm_lab.params import ParamStore
from rfm_lab.tensor import Tape, Tensor

from oracles import finite_difference, gru_reference, lstm_reference, max_rel_err


def test_linear_matches_manual():
    store = ParamStore(seed=0)
    lin = Linear(store, "lin", 3, 2)
    x = np.random.default_rng(0).normal(size=(4, 3))
    got = lin(Tensor(x)).values
    want = x @ lin.w.values + lin.b.values
    assert np.array_equal(got, want)


def test_mlp_one_hidden_relu_linear_out():
    store = ParamStore(seed=1)
    mlp = MLP(store, "m", 4, [8], 3)
    x = np.random.default_rng(1).normal(size=(5, 4))
    h = np.maximum(x @ store["m.0.w"].values + store["m.0.b"].values, 0.0)
    want = h @ store["m.1.w"].values + store["m.1.b"].values
    assert np.allclose(mlp(Tensor(x)).values, want, atol=1e-12)


def test_mlp_no_hidden_is_linear():
    store = ParamStore(seed=2)
    mlp = MLP(store, "m", 3, [], 2)
    assert len(mlp.layers) == 1


def test_gru_matches_reference():
    store = ParamStore(seed=3)
    cell = GRUCell(store, "g", 5, 4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5))
    h = rng.normal(size=(6, 4))
    got = cell(Tensor(x), Tensor(h)).values
    want = gru_reference(x, h, cell.w.values, cell.u_zr.values,
                         cell.u_n.values, cell.b.values)
    assert np.allclose(got, want, atol=1e-12)


def test_gru_zero_input_zero_state_stays_zero():
    # zero biases mean z=r=0.5, n=tanh(0)=0, h'=0.5*0+0.5*0=0
    store = ParamStore(seed=4)
    cell = GRUCell(store, "g", 3, 2)
    out = cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
    assert np.allclose(out.values, 0.0, atol=1e-15)


def test_lstm_matches_reference():
    store = ParamStore(seed=5)
    cell = LSTMCell(store, "l", 4, 3)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    h = rng.normal(size=(5, 3))
    c = rng.normal(size=(5, 3))
    h2, c2 = cell(Tensor(x), Tensor(h), Tensor(c))
    wh, wc = lstm_reference(x, h, c, cell.w.values, cell.b.values)
    assert np.allclose(h2.values, wh, atol=1e-12)
    assert np.allclose(c2.values, wc, atol=1e-12)


def test_recurrent_cells_reject_bad_hidden_size():
    store = ParamStore(seed=6)
    with pytest.raises(ConfigurationError):
        GRUCell(store, "g", 3, 0)
    with pytest.raises(ConfigurationError):
        LSTMCell(store, "l", 3, -1)


def test_gru_gradients_match_finite_differences():
    store = ParamStore(seed=7)
    cell = GRUCell(store, "g", 3, 2)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    h0 = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with Tape() as tape:
        h1 = cell(x, h0)
        h2 = cell(x, h1)
        loss = T.reduce_sum(T.mul(h2, h2))
    tape.backward(loss)

    def f(xa, ha):
        s1 = gru_reference(xa, ha, cell.w.values, cell.u_zr.values,
                           cell.u_n.values, cell.b.values)
        s2 = gru_reference(xa, s1, cell.w.values, cell.u_zr.values,
                           cell.u_n.values, cell.b.values)
        return float((s2 * s2).sum())

    num_x, num_h = finite_difference(f, [x.values.copy(), h0.values.copy()])
    assert max_rel_err(x.grad, num_x) < 1e-4
    assert max_rel_err(h0.grad, num_h) < 1e-4


def test_lstm_gradients_flow_to_all_params():
    store = ParamStore(seed=8)
    cell = LSTMCell(store, "l", 3, 2)
    rng = np.random.default_rng(5)
    with Tape() as tape:
        h, c = cell(Tensor(rng.normal(size=(2, 3))),
                    Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
        loss = T.reduce_sum(T.mul(h, h))
    tape.backward(loss)
    for name, t in store.items():
        assert t.grad is not None, name


def test_param_names_are_unique():
    store = ParamStore(seed=9)
    Linear(store, "a", 2, 2)
    with pytest.raises(StateError):
        Linear(store, "a", 2, 2)


def test_init_depends_on_name_not_creation_order():
    s1 = ParamStore(seed=42)
    Linear(s1, "first", 3, 3)
    Linear(s1, "second", 3, 3)
    s2 = ParamStore(seed=42)
    Linear(s2, "second", 3, 3)
    Linear(s2, "first", 3, 3)
    assert np.array_equal(s1["first.w"].values, s2["first.w"].values)
    assert np.array_equal(s1["second.w"].values, s2["second.w"].values)
    s3 = ParamStore(seed=43)
    Linear(s3, "first", 3, 3)
    assert not np.array_equal(s1["first.w"].values, s3["first.w"].values)


def test_glorot_bounds_and_zero_bias():
    store = ParamStore(seed=10)
    lin = Linear(store, "lin", 50, 30)
    limit = np.sqrt(6.0 / 80.0)
    assert np.all(np.abs(lin.w.values) <= limit)
    assert np.all(lin.b.values == 0.0)
