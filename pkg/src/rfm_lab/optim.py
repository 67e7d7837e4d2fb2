"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .params import ParamStore


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


class Adam:
    """Adam over every parameter in a store.

    Gradients are read from ``Tensor.grad``; parameters without a
    gradient this step are skipped (their moments do not advance).
    Before the update the full gradient set is rescaled so its global
    L2 norm is at most ``clip_norm``.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 5.0):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = {name: np.zeros_like(t.values) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.values) for name, t in store.items()}
        self._t = {name: 0 for name in store.names()}

    def step(self):
        items = [(name, t) for name, t in self.store.items() if t.grad is not None]
        if not items:
            raise StateError("no gradients to apply; run backward first")
        grads = [t.grad for _, t in items]
        norm = global_norm(grads)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm and norm > 0.0:
            scale = self.clip_norm / norm
        for name, t in items:
            g = t.grad * scale
            self._t[name] += 1
            k = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** k)
            vhat = v / (1.0 - self.beta2 ** k)
            t.values = t.values - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.store.zero_grads()
        self.step_count += 1
        return norm

    def state(self) -> dict:
        """Serializable optimizer state (moments and per-parameter step counts)."""
        return {
            "lr": self.lr,
            "step_count": self.step_count,
            "t": dict(self._t),
            "m": {n: a.ravel().tolist() for n, a in self._m.items()},
            "v": {n: a.ravel().tolist() for n, a in self._v.items()},
        }

    def load_state(self, state: dict):
        self.lr = float(state.get("lr", self.lr))
        self.step_count = int(state["step_count"])
        self._t = {n: int(v) for n, v in state["t"].items()}
        for n in self._m:
            self._m[n] = np.asarray(state["m"][n]).reshape(self._m[n].shape)
            self._v[n] = np.asarray(state["v"][n]).reshape(self._v[n].shape)
