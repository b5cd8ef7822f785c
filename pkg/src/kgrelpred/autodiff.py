"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A forward pass builds a DAG of :class:`Tensor` nodes; :func:`backward` walks
it once in reverse topological order and accumulates gradients into leaf
``grad`` slots. Everything is float64 throughout; ops are plain functions so
the hot batched paths (segment reductions, the fused bilinear edge update)
live beside the small dense primitives they generalize.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

try:  # optional fast path; bit-identical to the numpy fallback
    import numba

    @numba.njit(parallel=True, cache=True)
    def _outer_rows_kernel(a, b, out):  # pragma: no cover - exercised via wrapper
        n, d = a.shape
        for e in numba.prange(n):
            for i in range(d):
                base = i * d
                ai = a[e, i]
                for j in range(d):
                    out[e, base + j] = ai * b[e, j]

    def _outer_rows(a, b, out2d):
        _outer_rows_kernel(a, b, out2d)

except ImportError:  # pragma: no cover

    def _outer_rows(a, b, out2d):
        n, d = a.shape
        np.multiply(a[:, :, None], b[:, None, :], out=out2d.reshape(n, d, d))


_state = threading.local()


def _tracing() -> bool:
    return getattr(_state, "tracing", True)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation passes)."""
    prev = _tracing()
    _state.tracing = False
    try:
        yield
    finally:
        _state.tracing = prev


class Tensor:
    """A node of the tape: value, parents, and a backward closure."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, parents=(), backward_fn=None, op=""):
        self.data = data
        self.grad = None
        self.parents = parents if _tracing() else ()
        self.backward_fn = backward_fn if _tracing() else None
        self.op = op

    @property
    def shape(self):
        return np.shape(self.data)

    @property
    def traced(self) -> bool:
        return self.backward_fn is not None or self.parents != () or self.op == "leaf"

    def add_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, np.shape(self.data)), dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'const'})"


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def leaf(data) -> Tensor:
    """A traced leaf (parameter use); gradients accumulate in ``grad``."""
    t = Tensor(np.asarray(data, dtype=np.float64), op="leaf")
    return t


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def backward(loss: Tensor) -> None:
    """Populate gradients of every traced node reachable from ``loss``.

    ``loss`` must be a traced scalar. Each node's backward closure runs
    exactly once, in reverse topological order.
    """
    if not isinstance(loss, Tensor) or not loss.traced:
        raise ValueError("backward() requires a traced tensor")
    if np.shape(loss.data) != ():
        raise ValueError("backward() requires a scalar loss")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.array(1.0)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# -- gradient scatter helpers -------------------------------------------------


def index_add(acc: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """acc[idx] += rows, correct under repeated indices."""
    if len(idx) == 0:
        return
    if len(idx) < 512:
        np.add.at(acc, idx, rows)
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    srows = rows[order]
    boundaries = np.flatnonzero(np.diff(sidx)) + 1
    starts = np.concatenate([[0], boundaries])
    sums = np.add.reduceat(srows, starts, axis=0)
    acc[sidx[starts]] += sums


def _reduceat_rows(rows: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Segment sums of consecutive row runs; empty segments produce zeros."""
    n_seg = len(ptr) - 1
    out_shape = (n_seg,) + rows.shape[1:]
    if rows.shape[0] == 0 or n_seg == 0:
        return np.zeros(out_shape)
    starts = ptr[:-1]
    empty = ptr[1:] == starts
    safe = np.where(starts >= rows.shape[0], 0, starts)
    out = np.add.reduceat(rows, safe, axis=0)
    if empty.any():
        out[empty] = 0.0
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after a broadcast op."""
    if np.shape(g) == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- dense primitives ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.traced:
            a.add_grad(g @ b.data.T)
        if b.traced:
            b.add_grad(a.data.T @ g)

    return Tensor(out_data, (a, b), bwd, "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        if a.traced:
            a.add_grad(g.T)

    return Tensor(a.data.T, (a,), bwd, "transpose")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.traced:
            a.add_grad(_unbroadcast(g, a.shape))
        if b.traced:
            b.add_grad(_unbroadcast(g, b.shape))

    return Tensor(out_data, (a, b), bwd, "add")


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def bwd(g):
        if a.traced:
            a.add_grad(g * s)

    return Tensor(a.data * s, (a,), bwd, "scale")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of no tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.traced:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.add_grad(g[tuple(sl)])

    return Tensor(out_data, tuple(tensors), bwd, "concat")


def sum_rows(a) -> Tensor:
    """Sum a (n, d) tensor over its rows, yielding (d,)."""
    a = _wrap(a)

    def bwd(g):
        if a.traced:
            a.add_grad(np.broadcast_to(g, a.data.shape))

    return Tensor(a.data.sum(axis=0), (a,), bwd, "sum_rows")


def outer(u, v) -> Tensor:
    u, v = _wrap(u), _wrap(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ValueError(f"outer expects equal-length vectors, got {u.shape}, {v.shape}")
    out_data = np.outer(u.data, v.data)

    def bwd(g):
        if u.traced:
            u.add_grad(g @ v.data)
        if v.traced:
            v.add_grad(g.T @ u.data)

    return Tensor(out_data, (u, v), bwd, "outer")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.data.shape

    def bwd(g):
        if a.traced:
            a.add_grad(g.reshape(orig))

    return Tensor(a.data.reshape(shape), (a,), bwd, "reshape")


def flatten(a) -> Tensor:
    return reshape(a, (-1,))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def bwd(g):
        if a.traced:
            a.add_grad(g * mask)

    return Tensor(out_data, (a,), bwd, "relu")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.traced:
            a.add_grad(g * out_data * (1.0 - out_data))

    return Tensor(out_data, (a,), bwd, "sigmoid")


def softmax(x) -> Tensor:
    """Softmax of a vector, computed with max-subtraction."""
    x = _wrap(x)
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError("softmax expects a non-empty vector")
    z = x.data - x.data.max()
    e = np.exp(z)
    y = e / e.sum()

    def bwd(g):
        if x.traced:
            x.add_grad(y * (g - np.dot(g, y)))

    return Tensor(y, (x,), bwd, "softmax")


def cross_entropy(logits, target: int) -> Tensor:
    """−log softmax(logits)[target], as a scalar."""
    logits = _wrap(logits)
    n = logits.data.size
    if logits.data.ndim != 1 or n == 0:
        raise ValueError("cross_entropy expects a non-empty logit vector")
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range for {n} logits")
    m = logits.data.max()
    lse = m + np.log(np.exp(logits.data - m).sum())
    out_data = np.float64(lse - logits.data[target])

    def bwd(g):
        if logits.traced:
            p = np.exp(logits.data - lse)
            p[target] -= 1.0
            logits.add_grad(g * p)

    return Tensor(np.asarray(out_data), (logits,), bwd, "cross_entropy")


# -- batched ops ---------------------------------------------------------------


def gather_rows(x, idx) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(idx)
    out_data = x.data[idx]

    def bwd(g):
        if x.traced:
            if x.grad is None:
                x.grad = np.zeros_like(x.data, dtype=np.float64)
            index_add(x.grad, idx, g)

    return Tensor(out_data, (x,), bwd, "gather_rows")


def segment_sum(x, gather_idx, seg_ptr) -> Tensor:
    """out[s] = sum of x[gather_idx[seg_ptr[s]:seg_ptr[s+1]]] rows.

    Empty segments yield zero rows.
    """
    x = _wrap(x)
    gather_idx = np.asarray(gather_idx)
    seg_ptr = np.asarray(seg_ptr)
    rows = x.data[gather_idx]
    out_data = _reduceat_rows(rows, seg_ptr)
    counts = np.diff(seg_ptr)
    seg_of = np.repeat(np.arange(len(counts)), counts)

    def bwd(g):
        if x.traced:
            if x.grad is None:
                x.grad = np.zeros_like(x.data, dtype=np.float64)
            index_add(x.grad, gather_idx, g[seg_of])

    return Tensor(out_data, (x,), bwd, "segment_sum")


def scale_rows(x, w) -> Tensor:
    """Multiply each row of x (n, d) by the matching entry of w (n,)."""
    x, w = _wrap(x), _wrap(w)
    out_data = x.data * w.data[:, None]

    def bwd(g):
        if x.traced:
            x.add_grad(g * w.data[:, None])
        if w.traced:
            w.add_grad(np.einsum("nd,nd->n", g, x.data))

    return Tensor(out_data, (x, w), bwd, "scale_rows")


def row_dot(a, b) -> Tensor:
    """Per-row dot product of two (n, d) tensors, yielding (n,)."""
    a, b = _wrap(a), _wrap(b)
    out_data = np.einsum("nd,nd->n", a.data, b.data)

    def bwd(g):
        if a.traced:
            a.add_grad(g[:, None] * b.data)
        if b.traced:
            b.add_grad(g[:, None] * a.data)

    return Tensor(out_data, (a, b), bwd, "row_dot")


def softmax_rows(x, audit=None) -> Tensor:
    """Row-wise softmax of an (n, k) tensor."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    if audit is not None and y.size:
        audit.record(y.sum(axis=1))

    def bwd(g):
        if x.traced:
            x.add_grad(y * (g - np.einsum("nk,nk->n", g, y)[:, None]))

    return Tensor(y, (x,), bwd, "softmax_rows")


def segment_softmax(logits, seg_ptr, audit=None) -> Tensor:
    """Softmax within each consecutive segment of a flat logit vector.

    Segments are given by ``seg_ptr`` (CSR-style offsets); empty segments
    contribute nothing. Max-subtraction is applied per segment.
    """
    logits = _wrap(logits)
    seg_ptr = np.asarray(seg_ptr)
    v = logits.data
    counts = np.diff(seg_ptr)
    seg_of = np.repeat(np.arange(len(counts)), counts)
    if v.size:
        maxes = np.full(len(counts), -np.inf)
        np.maximum.at(maxes, seg_of, v)
        e = np.exp(v - maxes[seg_of])
        denom = _reduceat_rows(e[:, None], seg_ptr)[:, 0]
        y = e / denom[seg_of]
    else:
        y = np.zeros(0)
    if audit is not None and len(counts):
        sums = _reduceat_rows(y[:, None], seg_ptr)[:, 0]
        audit.record(sums[counts > 0])

    def bwd(g):
        if logits.traced:
            gy = _reduceat_rows((g * y)[:, None], seg_ptr)[:, 0]
            logits.add_grad(y * (g - gy[seg_of]))

    return Tensor(y, (logits,), bwd, "segment_softmax")


def cross_entropy_rows(logits, targets) -> Tensor:
    """Per-row −log softmax(logits)[target] for an (n, k) logit matrix."""
    logits = _wrap(logits)
    targets = np.asarray(targets)
    v = logits.data
    m = v.max(axis=1)
    lse = m + np.log(np.exp(v - m[:, None]).sum(axis=1))
    rows = np.arange(v.shape[0])
    out_data = lse - v[rows, targets]

    def bwd(g):
        if logits.traced:
            p = np.exp(v - lse[:, None])
            p[rows, targets] -= 1.0
            logits.add_grad(g[:, None] * p)

    return Tensor(out_data, (logits,), bwd, "cross_entropy_rows")


def slice_cols(x, lo: int, hi: int) -> Tensor:
    x = _wrap(x)

    def bwd(g):
        if x.traced:
            if x.grad is None:
                x.grad = np.zeros_like(x.data, dtype=np.float64)
            x.grad[:, lo:hi] += g

    return Tensor(x.data[:, lo:hi].copy(), (x,), bwd, "slice_cols")


def mean_all(x) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    x = _wrap(x)
    n = x.data.size

    def bwd(g):
        if x.traced:
            x.add_grad(np.full(x.data.shape, g / n))

    return Tensor(np.asarray(x.data.mean()), (x,), bwd, "mean_all")


# -- fused bilinear edge update -------------------------------------------------

_CHUNK = 2048


def _scratch(rows: int, d2: int) -> np.ndarray:
    """Reusable per-thread outer-product buffer (page-fault cost paid once)."""
    buf = getattr(_state, "scratch", None)
    if buf is None or buf.size < rows * d2:
        buf = np.empty(rows * d2)
        _state.scratch = buf
    return buf[: rows * d2].reshape(rows, d2)


def pair_bilinear(mh, mt, s, w1, w2, b, activation: str = "relu") -> Tensor:
    """act(flatten(outer(mh_e, mt_e)) @ W1 + s_e @ W2 + b), over edge rows.

    ``mh``/``mt``/``s`` are (n, D); W1 is (D*D, D), W2 (D, D), b (D,). The
    (n, D*D) outer-product block is never retained: forward streams it in
    chunks, and backward rebuilds the needed outer products on the fly, with
    the W1 contractions rearranged so every GEMM keeps D*D as the contracted
    dimension (the fast shape for this BLAS).
    """
    mh, mt, s, w1, w2, b = map(_wrap, (mh, mt, s, w1, w2, b))
    n, d = mh.data.shape
    z = s.data @ w2.data + b.data
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        o = _scratch(hi - lo, d * d)
        _outer_rows(mh.data[lo:hi], mt.data[lo:hi], o)
        z[lo:hi] += o @ w1.data
    if activation == "relu":
        mask = z > 0
        out_data = np.where(mask, z, 0.0)
    else:
        out_data = 1.0 / (1.0 + np.exp(-z))
        mask = None

    def bwd(g):
        gz = g * mask if mask is not None else g * out_data * (1.0 - out_data)
        if b.traced:
            b.add_grad(gz.sum(axis=0))
        if w2.traced:
            w2.add_grad(s.data.T @ gz)
        if s.traced:
            s.add_grad(gz @ w2.data.T)
        w1r = w1.data.reshape(d, d, d)
        need_mh = mh.traced
        need_mt = mt.traced
        # permuted layouts keep the contraction over D*D (see module docstring)
        w1_for_mh = np.ascontiguousarray(w1r.transpose(1, 2, 0).reshape(d * d, d)) if need_mh else None
        w1_for_mt = np.ascontiguousarray(w1r.transpose(0, 2, 1).reshape(d * d, d)) if need_mt else None
        dw1 = np.zeros((d, d * d)) if w1.traced else None
        dmh = np.empty((n, d)) if need_mh else None
        dmt = np.empty((n, d)) if need_mt else None
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            gzc = gz[lo:hi]
            buf = _scratch(hi - lo, d * d)
            if w1.traced:
                _outer_rows(mh.data[lo:hi], mt.data[lo:hi], buf)
                dw1 += gzc.T @ buf
            if need_mh:
                _outer_rows(mt.data[lo:hi], gzc, buf)
                dmh[lo:hi] = buf @ w1_for_mh
            if need_mt:
                _outer_rows(mh.data[lo:hi], gzc, buf)
                dmt[lo:hi] = buf @ w1_for_mt
        if w1.traced:
            w1.add_grad(dw1.T)
        if need_mh:
            mh.add_grad(dmh)
        if need_mt:
            mt.add_grad(dmt)

    return Tensor(out_data, (mh, mt, s, w1, w2, b), bwd, "pair_bilinear")
