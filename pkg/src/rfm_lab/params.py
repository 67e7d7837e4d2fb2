"""Named parameter storage with deterministic init and JSON checkpoints.

Every trainable tensor lives in a ``ParamStore`` under a unique
dotted name. Initialization is a pure function of (store seed, name),
so two stores built with the same seed and the same creation order, or
even a different creation order, hold identical values. Checkpoints
round-trip exactly: float64 values are serialized with full precision
via Python's shortest-repr floats.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import ConfigurationError, FormatError, StateError
from .tensor import Tensor

CHECKPOINT_FORMAT = 1


def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class ParamStore:
    """Registry of named trainable tensors."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def glorot(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        """Create a Glorot-uniform tensor; default shape [fan_in, fan_out]."""
        if shape is None:
            shape = (fan_in, fan_out)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        rng = _name_rng(self.seed, name)
        return self._add(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def _add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise StateError(f"parameter {name!r} already exists")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def state_hash(self) -> str:
        """SHA-256 over names and exact parameter bytes, order-independent."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self._params[name].values).tobytes())
        return h.hexdigest()

    def load_values(self, values: dict):
        """Overwrite parameter values in place; shapes must match exactly."""
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise ConfigurationError(
                f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, val in values.items():
            arr = np.asarray(val, dtype=np.float64)
            tgt = self._params[name]
            if arr.shape != tgt.values.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {tgt.values.shape}"
                )
            tgt.values = np.ascontiguousarray(arr)


def save_checkpoint(path, store: ParamStore, *, step: int = 0, model_config=None,
                    optimizer_state=None):
    """Write a JSON checkpoint; keys are sorted so equal states give equal bytes."""
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "seed": store.seed,
        "step": int(step),
        "model_config": model_config if model_config is not None else {},
        "params": {
            name: {"shape": list(t.values.shape), "values": t.values.ravel().tolist()}
            for name, t in store.items()
        },
        "optimizer": optimizer_state if optimizer_state is not None else {},
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Read a checkpoint into {seed, step, model_config, values, optimizer}."""
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format_version {version!r}")
    values = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        values[name] = arr
    return {
        "seed": doc["seed"],
        "step": doc["step"],
        "model_config": doc.get("model_config", {}),
        "values": values,
        "optimizer": doc.get("optimizer", {}),
    }
