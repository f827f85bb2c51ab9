"""Minimal reverse-mode differentiation on a flat tape.

Tensors wrap float64 numpy buffers. Ops executed while a Tape is active append
records in topological order; backward walks them in reverse, accumulating
gradients additively across fan-out. Every backward rule is itself written in
terms of these ops, so a backward pass can be re-recorded onto the live tape
(``record=True``) and differentiated again for full second-order
meta-gradients.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.special

from .errors import NondeterminismError, ShapeError
from .graphs import SparseGraph, SparseMatrix

_uid = itertools.count(1)
_tape_stack: list = []
_suspended = 0
_debug = False


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness checks on every forward value."""
    global _debug
    _debug = bool(flag)


class Tensor:
    """Dense float64 array with an identity usable as a tape node handle."""

    __slots__ = ("data", "uid")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.uid = next(_uid)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, uid={self.uid})"


def constant(data) -> Tensor:
    return Tensor(data)


class Tape:
    """Ordered record of primitive applications for one differentiation pass."""

    __slots__ = ("records",)

    def __init__(self):
        # each record: (output uid, input tensors, vjp(upstream, needs) -> grads)
        self.records: list[tuple[int, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)


class _NoRecord:
    def __enter__(self):
        global _suspended
        _suspended += 1

    def __exit__(self, *exc):
        global _suspended
        _suspended -= 1


def no_record() -> _NoRecord:
    """Context manager: run ops without recording them."""
    return _NoRecord()


def _emit(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    if _tape_stack and not _suspended:
        _tape_stack[-1].records.append((out.uid, inputs, vjp))
    return out


def _need(flag: bool, fn: Callable[[], Tensor]):
    return fn() if flag else None


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise / scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    def vjp(u, needs):
        return (u if needs[0] else None, u if needs[1] else None)
    return _emit(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    def vjp(u, needs):
        return (u if needs[0] else None, _need(needs[1], lambda: neg(u)))
    return _emit(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    def vjp(u, needs):
        return (
            _need(needs[0], lambda: mul(u, b)),
            _need(needs[1], lambda: mul(u, a)),
        )
    return _emit(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    def vjp(u, needs):
        return (_need(needs[0], lambda: neg(u)),)
    return _emit(out, (a,), vjp)


def scalar_mul(c: float, a: Tensor) -> Tensor:
    c = float(c)
    out = Tensor(c * a.data)
    def vjp(u, needs):
        return (_need(needs[0], lambda: scalar_mul(c, u)),)
    return _emit(out, (a,), vjp)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))
    def vjp(u, needs):
        return (u if needs[0] else None,)
    return _emit(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    out = Tensor(a.data * mask.data)
    def vjp(u, needs):
        return (_need(needs[0], lambda: mul(u, mask)),)
    return _emit(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(scipy.special.expit(a.data))
    def vjp(u, needs):
        return (
            _need(needs[0], lambda: mul(mul(u, out), add_scalar(neg(out), 1.0))),
        )
    return _emit(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    def vjp(u, needs):
        return (_need(needs[0], lambda: mul(u, out)),)
    return _emit(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    def vjp(u, needs):
        return (_need(needs[0], lambda: mul(u, reciprocal(a))),)
    return _emit(out, (a,), vjp)


def reciprocal(a: Tensor) -> Tensor:
    out = Tensor(1.0 / a.data)
    def vjp(u, needs):
        return (_need(needs[0], lambda: neg(mul(u, mul(out, out)))),)
    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# matrix ops


def matmul(
    a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False
) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", a.shape, b.shape)
    av = a.data.T if transpose_a else a.data
    bv = b.data.T if transpose_b else b.data
    if av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(av @ bv)

    def vjp(u, needs):
        if not transpose_a:
            ga = lambda: (
                matmul(u, b) if transpose_b else matmul(u, b, transpose_b=True)
            )
        else:
            ga = lambda: (
                matmul(b, u, transpose_a=True, transpose_b=True)
                if transpose_b
                else matmul(b, u, transpose_b=True)
            )
        if not transpose_b:
            gb = lambda: (
                matmul(a, u)
                if transpose_a
                else matmul(a, u, transpose_a=True)
            )
        else:
            gb = lambda: (
                matmul(u, a, transpose_a=True, transpose_b=True)
                if transpose_a
                else matmul(u, a, transpose_a=True)
            )
        return (_need(needs[0], ga), _need(needs[1], gb))

    return _emit(out, (a, b), vjp)


def spmm(s: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse @ dense; the sparse operand is a non-differentiable constant."""
    if x.ndim != 2 or s.shape[1] != x.shape[0]:
        raise ShapeError("spmm", s.shape, x.shape)
    out = Tensor(s.dot_dense(x.data))
    def vjp(u, needs):
        return (_need(needs[0], lambda: spmm(s.transposed(), u)),)
    return _emit(out, (x,), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    out = Tensor(x.data + b.data[None, :])
    def vjp(u, needs):
        return (u if needs[0] else None, _need(needs[1], lambda: col_sums(u)))
    return _emit(out, (x, b), vjp)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    if x.ndim != 2 or v.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ShapeError("add_rowvec", x.shape, v.shape)
    out = Tensor(x.data + v.data[:, None])
    def vjp(u, needs):
        return (u if needs[0] else None, _need(needs[1], lambda: row_sums(u)))
    return _emit(out, (x, v), vjp)


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    if x.ndim != 2 or v.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ShapeError("scale_rows", x.shape, v.shape)
    out = Tensor(x.data * v.data[:, None])
    def vjp(u, needs):
        return (
            _need(needs[0], lambda: scale_rows(u, v)),
            _need(needs[1], lambda: row_sums(mul(u, x))),
        )
    return _emit(out, (x, v), vjp)


# ---------------------------------------------------------------------------
# reductions and broadcasts


def row_sums(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("row_sums", x.shape)
    out = Tensor(x.data.sum(axis=1))
    cols = x.shape[1]
    def vjp(u, needs):
        return (_need(needs[0], lambda: tile_cols(u, cols)),)
    return _emit(out, (x,), vjp)


def col_sums(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("col_sums", x.shape)
    out = Tensor(x.data.sum(axis=0))
    rows = x.shape[0]
    def vjp(u, needs):
        return (_need(needs[0], lambda: tile_rows(u, rows)),)
    return _emit(out, (x,), vjp)


def tile_cols(v: Tensor, cols: int) -> Tensor:
    if v.ndim != 1:
        raise ShapeError("tile_cols", v.shape)
    out = Tensor(np.repeat(v.data[:, None], cols, axis=1))
    def vjp(u, needs):
        return (_need(needs[0], lambda: row_sums(u)),)
    return _emit(out, (v,), vjp)


def tile_rows(v: Tensor, rows: int) -> Tensor:
    if v.ndim != 1:
        raise ShapeError("tile_rows", v.shape)
    out = Tensor(np.repeat(v.data[None, :], rows, axis=0))
    def vjp(u, needs):
        return (_need(needs[0], lambda: col_sums(u)),)
    return _emit(out, (v,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    shape = x.shape
    def vjp(u, needs):
        return (_need(needs[0], lambda: broadcast_full(u, shape)),)
    return _emit(out, (x,), vjp)


def broadcast_full(s: Tensor, shape) -> Tensor:
    if s.ndim != 0:
        raise ShapeError("broadcast_full", s.shape)
    out = Tensor(np.full(shape, s.data))
    def vjp(u, needs):
        return (_need(needs[0], lambda: sum_all(u)),)
    return _emit(out, (s,), vjp)


def mean_all(x: Tensor) -> Tensor:
    return scalar_mul(1.0 / x.data.size, sum_all(x))


# ---------------------------------------------------------------------------
# indexing and layout


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    out = Tensor(x.data.reshape(shape))
    def vjp(u, needs):
        return (_need(needs[0], lambda: reshape(u, old)),)
    return _emit(out, (x,), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError("gather_rows", x.shape)
    out = Tensor(x.data[idx])
    rows = x.shape[0]
    def vjp(u, needs):
        return (_need(needs[0], lambda: scatter_rows(u, idx, rows)),)
    return _emit(out, (x,), vjp)


def scatter_rows(x: Tensor, idx, rows: int) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError("scatter_rows", x.shape, idx.shape)
    buf = np.zeros((rows, x.shape[1]))
    np.add.at(buf, idx, x.data)
    out = Tensor(buf)
    def vjp(u, needs):
        return (_need(needs[0], lambda: gather_rows(u, idx)),)
    return _emit(out, (x,), vjp)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts or any(p.ndim != 2 for p in parts):
        raise ShapeError("hstack", *[p.shape for p in parts])
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("hstack", *[p.shape for p in parts])
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    def vjp(u, needs):
        return tuple(
            _need(needs[i], lambda lo=bounds[i], hi=bounds[i + 1]: slice_cols(u, lo, hi))
            for i in range(len(parts))
        )
    return _emit(out, tuple(parts), vjp)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.ndim != 2 or not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError("slice_cols", x.shape, (lo, hi))
    out = Tensor(x.data[:, lo:hi].copy())
    total = x.shape[1]
    def vjp(u, needs):
        return (_need(needs[0], lambda: pad_cols(u, lo, total)),)
    return _emit(out, (x,), vjp)


def pad_cols(x: Tensor, lo: int, total: int) -> Tensor:
    if x.ndim != 2 or lo + x.shape[1] > total:
        raise ShapeError("pad_cols", x.shape, (lo, total))
    buf = np.zeros((x.shape[0], total))
    buf[:, lo:lo + x.shape[1]] = x.data
    out = Tensor(buf)
    hi = lo + x.shape[1]
    def vjp(u, needs):
        return (_need(needs[0], lambda: slice_cols(u, lo, hi)),)
    return _emit(out, (x,), vjp)


def pick_per_row(x: Tensor, cols) -> Tensor:
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError("pick_per_row", x.shape, cols.shape)
    out = Tensor(x.data[np.arange(x.shape[0]), cols])
    width = x.shape[1]
    def vjp(u, needs):
        return (_need(needs[0], lambda: scatter_per_row(u, cols, width)),)
    return _emit(out, (x,), vjp)


def scatter_per_row(v: Tensor, cols, width: int) -> Tensor:
    cols = np.asarray(cols, dtype=np.int64)
    if v.ndim != 1 or cols.shape != v.shape:
        raise ShapeError("scatter_per_row", v.shape, cols.shape)
    buf = np.zeros((v.shape[0], width))
    buf[np.arange(v.shape[0]), cols] = v.data
    out = Tensor(buf)
    def vjp(u, needs):
        return (_need(needs[0], lambda: pick_per_row(u, cols)),)
    return _emit(out, (v,), vjp)


# ---------------------------------------------------------------------------
# stochastic / graph-coupled ops


def dropout(x: Tensor, rate: float, seed: int, train_flag: bool) -> Tensor:
    """Inverted dropout; the identity (same tensor) when train_flag is off."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError("dropout", f"rate={rate} outside [0, 1)")
    if not train_flag or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    mask = Tensor(keep)
    out = Tensor(x.data * keep)
    def vjp(u, needs):
        return (_need(needs[0], lambda: mul(u, mask)),)
    return _emit(out, (x,), vjp)


def mean_pool_matrix(g: SparseGraph) -> SparseMatrix:
    import scipy.sparse as sp

    adj = g.adjacency.csr()
    pattern = sp.csr_matrix(
        (np.ones_like(adj.data), adj.indices, adj.indptr), shape=adj.shape
    )
    with_self = (pattern + sp.eye(g.n, format="csr")).tocsr()
    inv_counts = 1.0 / np.asarray(with_self.sum(axis=1)).ravel()
    pooled = with_self.multiply(inv_counts[:, None]).tocsr()
    pooled.sort_indices()
    return SparseMatrix.from_scipy(pooled)


def row_mean_over_neighbors(g: SparseGraph, x: Tensor) -> Tensor:
    """Per-node mean of x over the 1-hop neighborhood including self."""
    cached = getattr(g, "_mean_pool", None)
    if cached is None:
        cached = mean_pool_matrix(g)
        g._mean_pool = cached
    return spmm(cached, x)


def row_max_over_neighbors(g: SparseGraph, x: Tensor) -> Tensor:
    """Per-node entrywise max of x over the 1-hop neighborhood including self."""
    if x.ndim != 2 or x.shape[0] != g.n:
        raise ShapeError("row_max_over_neighbors", (g.n,), x.shape)
    csr = g.adjacency.csr()
    vals = np.empty_like(x.data)
    src = np.empty(x.shape, dtype=np.int64)
    for i in range(g.n):
        nbrs = csr.indices[csr.indptr[i]:csr.indptr[i + 1]]
        group = np.concatenate([[i], nbrs])
        block = x.data[group]
        arg = block.argmax(axis=0)
        vals[i] = block[arg, np.arange(x.shape[1])]
        src[i] = group[arg]
    out = Tensor(vals)
    rows = x.shape[0]
    def vjp(u, needs):
        return (_need(needs[0], lambda: route_rows(u, src, rows)),)
    return _emit(out, (x,), vjp)


def route_rows(x: Tensor, src: np.ndarray, rows: int) -> Tensor:
    """Scatter-add each entry x[i, f] into out[src[i, f], f]."""
    if x.shape != src.shape:
        raise ShapeError("route_rows", x.shape, src.shape)
    buf = np.zeros((rows, x.shape[1]))
    cols = np.broadcast_to(np.arange(x.shape[1]), x.shape)
    np.add.at(buf, (src, cols), x.data)
    out = Tensor(buf)
    def vjp(u, needs):
        return (_need(needs[0], lambda: gather_2d(u, src)),)
    return _emit(out, (x,), vjp)


def gather_2d(x: Tensor, src: np.ndarray) -> Tensor:
    if x.ndim != 2 or src.shape[1] != x.shape[1]:
        raise ShapeError("gather_2d", x.shape, src.shape)
    out = Tensor(np.take_along_axis(x.data, src, axis=0))
    rows = x.shape[0]
    def vjp(u, needs):
        return (_need(needs[0], lambda: route_rows(u, src, rows)),)
    return _emit(out, (x,), vjp)


def weighted_row_sum(weights: Tensor, x: Tensor) -> Tensor:
    """Sum of rows of x weighted by the entries of a vector."""
    if weights.ndim != 1 or x.ndim != 2 or weights.shape[0] != x.shape[0]:
        raise ShapeError("weighted_row_sum", weights.shape, x.shape)
    return reshape(matmul(reshape(weights, (1, -1)), x), (x.shape[1],))


# ---------------------------------------------------------------------------
# loss composites


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax, numerically stabilized by a detached row max."""
    if logits.ndim != 2:
        raise ShapeError("softmax_rows", logits.shape)
    shift = Tensor(-logits.data.max(axis=1))
    e = exp(add_rowvec(logits, shift))
    return scale_rows(e, reciprocal(row_sums(e)))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy", logits.shape, "target out of range")
    # log-sum-exp with a detached shift: exact for any constant shift
    shift = Tensor(logits.data.max(axis=1))
    z = add_rowvec(logits, neg(shift))
    lse = add(log(row_sums(exp(z))), shift)
    picked = pick_per_row(logits, targets)
    return scalar_mul(1.0 / logits.shape[0], sum_all(sub(lse, picked)))


# ---------------------------------------------------------------------------
# backward and gradient checking


def backward(
    tape: Tape,
    loss: Tensor,
    params: Sequence[Tensor] | None = None,
    record: bool = False,
) -> dict[int, Tensor]:
    """Gradients of a scalar loss w.r.t. every requested leaf tensor.

    Returns a map keyed by tensor uid. Leaves in ``params`` that the loss does
    not reach get zero gradients. With ``record=True`` the gradient
    computation is appended to the live tape, making it differentiable in
    turn; otherwise it runs unrecorded.
    """
    if loss.ndim != 0:
        raise ShapeError("backward", loss.shape, "scalar loss required")
    records = list(tape.records)
    needed = {out_uid for out_uid, _, _ in records}
    if params is not None:
        needed.update(p.uid for p in params)
    grads: dict[int, Tensor] = {loss.uid: Tensor(1.0)}
    guard = no_record() if not record else _NullCtx()
    with guard:
        for out_uid, inputs, vjp in reversed(records):
            upstream = grads.get(out_uid)
            if upstream is None:
                continue
            needs = tuple(t.uid in needed for t in inputs)
            if not any(needs):
                continue
            for t, g in zip(inputs, vjp(upstream, needs)):
                if g is None:
                    continue
                prev = grads.get(t.uid)
                grads[t.uid] = g if prev is None else add(prev, g)
    if params is not None:
        return {
            p.uid: grads.get(p.uid) or Tensor(np.zeros_like(p.data)) for p in params
        }
    return grads


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    samples_per_block: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``forward`` must be a deterministic closure over ``params`` returning a
    scalar Tensor; it is evaluated twice up front and a NondeterminismError is
    raised if the values differ.
    """
    with no_record():
        v0 = forward().item()
        v1 = forward().item()
    if v0 != v1:
        raise NondeterminismError(
            f"forward closure returned {v0} then {v1}; disable dropout/fix seeds"
        )
    with Tape() as tape:
        loss = forward()
    grads = backward(tape, loss, [p for _, p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, p in params:
        analytic = grads[p.uid].data
        size = p.data.size
        count = min(samples_per_block, size)
        coords = rng.choice(size, size=count, replace=False)
        for flat_idx in coords:
            idx = np.unravel_index(flat_idx, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            with no_record():
                f_plus = forward().item()
            p.data[idx] = orig - h
            with no_record():
                f_minus = forward().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(numeric), abs(analytic[idx]), 1e-6)
            worst = max(worst, abs(numeric - analytic[idx]) / denom)
    return worst
