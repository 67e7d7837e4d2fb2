"""Dense float64 arrays with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a row-major float64 ndarray. Operations are free
functions (``matmul``, ``add``, ``segment_sum``, ...) that never mutate
their inputs. When a ``Tape`` is active, every operation touching a
differentiable tensor is recorded; ``Tape.backward`` replays the records
in reverse, visiting each node exactly once, and accumulates gradients
into ``Tensor.grad`` for every tensor with ``requires_grad``.

Broadcasting is deliberately narrow: exact shape match, scalars, and a
trailing row vector against a matrix (bias addition). Anything fancier
raises ``DimensionError``.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

from .errors import DimensionError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


class Tensor:
    """A float64 array plus differentiability flag and gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def detach(self) -> "Tensor":
        """A non-differentiable view of the same values."""
        return Tensor(self.values)

    def item(self) -> float:
        return float(self.values)

    def assert_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "needs", "vjp")

    def __init__(self, out, inputs, needs, vjp):
        self.out = out
        self.inputs = inputs
        self.needs = needs
        self.vjp = vjp


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Use as a context manager around the forward computation. Nodes are
    appended in execution order, which is a topological order by
    construction. A tape is single-threaded; independent tapes may run
    concurrently on separate threads.
    """

    def __init__(self):
        self._nodes = []
        self._live = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, output: Tensor, seed=None) -> dict:
        """Accumulate d(output)/d(tensor) for every recorded tensor.

        Returns a mapping id(tensor) -> gradient ndarray and stores the
        gradient on ``tensor.grad`` for tensors with ``requires_grad``.
        """
        if seed is None:
            seed = np.ones_like(output.values)
        grads = {id(output): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g, node.needs)):
                if gi is None:
                    continue
                key = id(t)
                acc = grads.get(key)
                grads[key] = gi if acc is None else acc + gi
        for node in self._nodes:
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) in grads:
                    t.grad = grads[id(t)]
        if output.requires_grad and id(output) in grads:
            output.grad = grads[id(output)]
        return grads


def _record(out: Tensor, inputs, vjp):
    stack = _tape_stack()
    if not stack:
        return out
    tape = stack[-1]
    live = tape._live
    needs = tuple(
        isinstance(t, Tensor) and (t.requires_grad or id(t) in live) for t in inputs
    )
    if not any(needs):
        return out
    tape._nodes.append(_Node(out, inputs, needs, vjp))
    live.add(id(out))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise ops


def _broadcast_check(a: np.ndarray, b: np.ndarray):
    """Allow exact match, scalars, a trailing row vector against a matrix,
    or a [n,1] column against a [n,d] matrix; reject the rest."""
    if a.shape == b.shape:
        return
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] == b.shape[0] and 1 in (a.shape[1], b.shape[1]):
        return
    raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 2 and shape[1] == 1:
        return grad.sum(axis=1, keepdims=True)
    # row vector broadcast over matrix rows
    return grad.sum(axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.values, b.values)
    out = Tensor(a.values + b.values)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.values, b.values)
    out = Tensor(a.values - b.values)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            -_unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.values, b.values)
    out = Tensor(a.values * b.values)

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.values, a.shape) if needs[0] else None,
            _unbroadcast(g * a.values, b.shape) if needs[1] else None,
        )

    return _record(out, (a, b), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.values, 0.0))

    def vjp(g, needs):
        return (g * (x.values > 0.0),) if needs[0] else (None,)

    return _record(out, (x,), vjp)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(expit(x.values))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        s = out.values
        return (g * s * (1.0 - s),)

    return _record(out, (x,), vjp)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.tanh(x.values))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        return (g * (1.0 - out.values * out.values),)

    return _record(out, (x,), vjp)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.values))

    def vjp(g, needs):
        return (g * out.values,) if needs[0] else (None,)

    return _record(out, (x,), vjp)


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch on an op name; binary ops take two inputs, unary ops one."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DimensionError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# linear algebra and structure ops


# Below this row count, matrix products are computed row by row (one
# identical kernel call per row) instead of as one blocked BLAS call.
# Blocked BLAS results depend on a row's position in the matrix at the
# last-ulp level, which would break the exact permutation equivariance
# the graph models guarantee; small instances are where that exactness
# is exercised, large training batches keep the fast path.
_STABLE_ROW_LIMIT = 64


def _row_stable_matmul(av: np.ndarray, bv: np.ndarray) -> np.ndarray:
    if av.shape[0] > _STABLE_ROW_LIMIT:
        return av @ bv
    stacked = np.broadcast_to(bv, (av.shape[0],) + bv.shape)
    return np.matmul(av[:, None, :], stacked)[:, 0, :]


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul requires [m,k] x [k,n], got {av.shape} x {bv.shape}")
    out = Tensor(_row_stable_matmul(av, bv))

    def vjp(g, needs):
        return (
            g @ bv.T if needs[0] else None,
            av.T @ g if needs[1] else None,
        )

    return _record(out, (a, b), vjp)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if axis not in (0, 1):
        raise DimensionError(f"concat supports axis 0 or 1, got {axis}")
    vals = [t.values for t in tensors]
    out = Tensor(np.concatenate(vals, axis=axis))
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g, needs):
        grads = []
        for i, t in enumerate(tensors):
            if not needs[i]:
                grads.append(None)
            elif axis == 0:
                grads.append(g[offsets[i]:offsets[i + 1]])
            else:
                grads.append(g[:, offsets[i]:offsets[i + 1]])
        return tuple(grads)

    return _record(out, tuple(tensors), vjp)


def cols(x, start: int, stop: int) -> Tensor:
    """Column slice of a 2-D tensor."""
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError(f"cols expects a matrix, got shape {x.shape}")
    out = Tensor(x.values[:, start:stop].copy())

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        full = np.zeros_like(x.values)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.values.reshape(shape))

    def vjp(g, needs):
        return (g.reshape(x.shape),) if needs[0] else (None,)

    return _record(out, (x,), vjp)


def gather_rows(x, indices) -> Tensor:
    """Select rows by integer index; gradient scatter-adds back."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.values.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    out = Tensor(x.values[idx])

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        return (_segment_sum_values(g, idx, n),)

    return _record(out, (x,), vjp)


def _segment_sum_values(values: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum rows into segments, accumulating in row order within a segment."""
    d = values.shape[1] if values.ndim == 2 else 1
    flat = values if values.ndim == 2 else values.reshape(-1, 1)
    if ids.size == 0 or d == 0:
        # zero-width rows sum to zero-width rows; the reshape below
        # cannot infer a leading dimension from an empty array
        return np.zeros((num_segments, d))
    sorted_ids = ids
    sorted_vals = flat
    if np.any(ids[1:] < ids[:-1]):
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        sorted_vals = flat[order]
    counts = np.bincount(sorted_ids, minlength=num_segments)
    nonzero = counts > 0
    uniform = counts[nonzero]
    if uniform.size and np.all(uniform == uniform[0]):
        # equal-sized segments: a reshape-sum beats reduceat
        g = int(uniform[0])
        out = np.zeros((num_segments, d))
        out[nonzero] = np.ascontiguousarray(sorted_vals).reshape(-1, g, d).sum(axis=1)
        return out
    starts = np.searchsorted(sorted_ids, np.arange(num_segments))
    # reduceat hands back a[start] for empty segments and cannot address
    # one-past-the-end; a zero sentinel row plus masking fixes both
    padded = np.vstack([np.ascontiguousarray(sorted_vals), np.zeros((1, d))])
    out = np.add.reduceat(padded, starts, axis=0)
    out[~nonzero] = 0.0
    return out


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Row i of the output is the sum of input rows whose id equals i.

    Empty segments come out as zero rows.
    """
    values = _as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.values.ndim != 2:
        raise DimensionError(f"segment_sum expects [n,d] values, got {values.shape}")
    if ids.shape != (values.values.shape[0],):
        raise DimensionError(
            f"segment_ids length {ids.shape} does not match {values.values.shape[0]} rows"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    out = Tensor(_segment_sum_values(values.values, ids, num_segments))

    def vjp(g, needs):
        return (g[ids],) if needs[0] else (None,)

    return _record(out, (values,), vjp)


def _canonical_segment_sum_values(values: np.ndarray, ids: np.ndarray,
                                  num_segments: int) -> np.ndarray:
    """Segment sums that do not depend on row order within a segment.

    Each segment's rows are sorted per column before summing, so any
    permutation of the input rows yields bitwise-identical sums. Used
    for graph-global aggregates, where exact permutation invariance of
    the whole forward pass is a contract.
    """
    d = values.shape[1]
    out = np.zeros((num_segments, d))
    if ids.size == 0:
        return out
    sorted_ids, sorted_vals = ids, values
    if np.any(ids[1:] < ids[:-1]):
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        sorted_vals = values[order]
    counts = np.bincount(sorted_ids, minlength=num_segments)
    nonzero = counts > 0
    uniform = counts[nonzero]
    if uniform.size and np.all(uniform == uniform[0]):
        g = int(uniform[0])
        grouped = np.ascontiguousarray(sorted_vals).reshape(-1, g, d)
        out[nonzero] = np.sort(grouped, axis=1).sum(axis=1)
        return out
    start = 0
    for seg in np.flatnonzero(nonzero):
        block = sorted_vals[start:start + counts[seg]]
        out[seg] = np.sort(block, axis=0).sum(axis=0)
        start += counts[seg]
    return out


def canonical_segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Like segment_sum, but invariant to row order within each segment."""
    values = _as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.values.ndim != 2:
        raise DimensionError(f"expected [n,d] values, got {values.shape}")
    if ids.shape != (values.values.shape[0],):
        raise DimensionError(
            f"segment_ids length {ids.shape} does not match {values.values.shape[0]} rows"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    out = Tensor(_canonical_segment_sum_values(values.values, ids, num_segments))

    def vjp(g, needs):
        return (g[ids],) if needs[0] else (None,)

    return _record(out, (values,), vjp)


def row_sum(x) -> Tensor:
    """Sum each row of a matrix: [n,d] -> [n,1]."""
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError(f"row_sum expects a matrix, got {x.shape}")
    out = Tensor(x.values.sum(axis=1, keepdims=True))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), vjp)


def reduce_sum(x) -> Tensor:
    """Sum all elements to a scalar."""
    x = _as_tensor(x)
    out = Tensor(x.values.sum())

    def vjp(g, needs):
        return (np.full(x.shape, float(g)),) if needs[0] else (None,)

    return _record(out, (x,), vjp)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.values.mean())
    n = x.values.size

    def vjp(g, needs):
        return (np.full(x.shape, float(g) / n),) if needs[0] else (None,)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray) -> np.ndarray:
    """[B,c,h,w] -> [B, c*9, h*w] patches for a 3x3 kernel, zero padding 1."""
    b, c, h, w = x.shape
    padded = np.zeros((b, c, h + 2, w + 2))
    padded[:, :, 1:-1, 1:-1] = x
    patches = np.empty((b, c, 9, h, w))
    for ky in range(3):
        for kx in range(3):
            patches[:, :, ky * 3 + kx] = padded[:, :, ky:ky + h, kx:kx + w]
    return patches.reshape(b, c * 9, h * w)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    patches = cols.reshape(b, c, 9, h, w)
    padded = np.zeros((b, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            padded[:, :, ky:ky + h, kx:kx + w] += patches[:, :, ky * 3 + kx]
    return padded[:, :, 1:-1, 1:-1]


def conv2d(x, kernels) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1, same spatial size.

    ``x`` is [c_in,h,w] or [batch,c_in,h,w]; kernels are [c_out,c_in,3,3].
    """
    x = _as_tensor(x)
    kernels = _as_tensor(kernels)
    kv = kernels.values
    if kv.ndim != 4 or kv.shape[2:] != (3, 3):
        raise DimensionError(f"kernels must be [c_out,c_in,3,3], got {kv.shape}")
    squeeze = x.values.ndim == 3
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise DimensionError(
            f"input channels {xv.shape} do not match kernels {kv.shape}"
        )
    b, c_in, h, w = xv.shape
    c_out = kv.shape[0]
    colsx = _im2col(xv)
    kflat = kv.reshape(c_out, c_in * 9)
    outv = np.einsum("oc,bcp->bop", kflat, colsx).reshape(b, c_out, h, w)
    out = Tensor(outv[0] if squeeze else outv)

    def vjp(g, needs):
        gb = g[None] if squeeze else g
        gflat = gb.reshape(b, c_out, h * w)
        gx = None
        gk = None
        if needs[0]:
            dcols = np.einsum("oc,bop->bcp", kflat, gflat)
            gx = _col2im(dcols, (b, c_in, h, w))
            if squeeze:
                gx = gx[0]
        if needs[1]:
            gk = np.einsum("bop,bcp->oc", gflat, colsx).reshape(kv.shape)
        return (gx, gk)

    return _record(out, (x, kernels), vjp)


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    lv = logits.values
    if lv.ndim != 2:
        raise DimensionError(f"log_softmax expects [n,k] logits, got {logits.shape}")
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(shifted - lse)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        p = np.exp(out.values)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record(out, (logits,), vjp)


def softmax_cross_entropy(logits, labels, weights=None, reduction: str = "mean") -> Tensor:
    """Mean (or weighted sum/mean) cross-entropy between logits rows and labels."""
    logits = _as_tensor(logits)
    lv = logits.values
    if lv.ndim != 2:
        raise DimensionError(f"expected [n,k] logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    n, k = lv.shape
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    ce = lse - shifted[np.arange(n), y]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if reduction == "mean":
        scale = 1.0 / max(n, 1)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise DimensionError(f"unknown reduction {reduction!r}")
    out = Tensor((w * ce).sum() * scale)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return (p * (w[:, None] * (float(g) * scale)),)

    return _record(out, (logits,), vjp)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = max(diff.size, 1)
    out = Tensor(np.asarray((diff * diff).sum() / n))

    def vjp(g, needs):
        gd = (2.0 / n) * float(g) * diff
        return (
            gd if needs[0] else None,
            -gd if needs[1] else None,
        )

    return _record(out, (pred, target), vjp)
