"""Layers: linear, MLP, GRU cell, LSTM cell.

Each layer registers its parameters in a ``ParamStore`` under a dotted
name prefix at construction time and is afterwards a pure function of
its inputs. Weights are Glorot-uniform with per-gate fan, biases zero.
"""

from __future__ import annotations

from . import tensor as T
from .errors import ConfigurationError
from .params import ParamStore
from .tensor import Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.d_in = d_in
        self.d_out = d_out
        self.w = store.glorot(f"{name}.w", d_in, d_out)
        self.b = store.zeros(f"{name}.b", (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class MLP:
    """Stack of linear layers with ReLU between them and a linear output.

    ``out_scale`` shrinks the output layer's initial weights so a fresh
    prediction head starts near zero (untrained logits near uniform).
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden, d_out: int,
                 out_scale: float | None = None):
        dims = [d_in, *hidden, d_out]
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1])
            for i in range(len(dims) - 1)
        ]
        if out_scale is not None:
            self.layers[-1].w.values *= out_scale
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)


class GRUCell:
    """Gated recurrent unit, candidate computed from the reset-scaled state.

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        n = tanh(x Wn + (r * h) Un + bn)
        h' = z * h + (1 - z) * n
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_h: int):
        if d_h <= 0:
            raise ConfigurationError(f"hidden size must be positive, got {d_h}")
        self.d_in = d_in
        self.d_h = d_h
        self.w = store.glorot(f"{name}.w", d_in, d_h, shape=(d_in, 3 * d_h))
        self.u_zr = store.glorot(f"{name}.u_zr", d_h, d_h, shape=(d_h, 2 * d_h))
        self.u_n = store.glorot(f"{name}.u_n", d_h, d_h)
        self.b = store.zeros(f"{name}.b", (3 * d_h,))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        d = self.d_h
        gates = T.add(T.matmul(x, self.w), self.b)
        hzr = T.matmul(h, self.u_zr)
        z = T.sigmoid(T.add(T.cols(gates, 0, d), T.cols(hzr, 0, d)))
        r = T.sigmoid(T.add(T.cols(gates, d, 2 * d), T.cols(hzr, d, 2 * d)))
        n = T.tanh(T.add(T.cols(gates, 2 * d, 3 * d), T.matmul(T.mul(r, h), self.u_n)))
        one_minus_z = T.sub(Tensor(1.0), z)
        return T.add(T.mul(z, h), T.mul(one_minus_z, n))


class LSTMCell:
    """Standard LSTM with a single fused gate transform.

        [i, f, g, o] = split((x | h) W + b)
        c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
        h' = sigmoid(o) * tanh(c')
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_h: int):
        if d_h <= 0:
            raise ConfigurationError(f"hidden size must be positive, got {d_h}")
        self.d_in = d_in
        self.d_h = d_h
        self.w = store.glorot(f"{name}.w", d_in + d_h, d_h, shape=(d_in + d_h, 4 * d_h))
        self.b = store.zeros(f"{name}.b", (4 * d_h,))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        d = self.d_h
        gates = T.add(T.matmul(T.concat([x, h], axis=1), self.w), self.b)
        i = T.sigmoid(T.cols(gates, 0, d))
        f = T.sigmoid(T.cols(gates, d, 2 * d))
        g = T.tanh(T.cols(gates, 2 * d, 3 * d))
        o = T.sigmoid(T.cols(gates, 3 * d, 4 * d))
        c_next = T.add(T.mul(f, c), T.mul(i, g))
        h_next = T.mul(o, T.tanh(c_next))
        return h_next, c_next
