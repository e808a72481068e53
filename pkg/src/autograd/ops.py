"""
Differentiable tensor ops

Every op checks its operand shapes and raises ShapeError naming itself.
There is no implicit broadcasting: the only shape-changing rules are the
ones each op documents (add_bias broadcasts a vector over leading axes,
matmul shares a 2-D right operand over leading axes).
"""

from typing import Optional, Sequence

import numpy as np

from src.utils.errors import ShapeError
from .tensor import Tensor, record


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ----------------------------------------------------------------------------
# Elementwise
# ----------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (..., n) + b (n,), the bias repeated over every leading index"""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    n = b.shape[0]
    return record(
        "add_bias",
        x.data + b.data,
        (x, b),
        lambda g: (g, g.reshape(-1, n).sum(axis=0)),
    )


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# Linear algebra and layout
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n), or batched (..., m, k) @ (..., k, n) with equal leading dims"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)

    if b.data.ndim == 2:
        k, n = b.shape
        if a.shape[-1] != k:
            raise ShapeError("matmul", a.shape, b.shape)

        def backward(g):
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b

        return record("matmul", a.data @ b.data, (a, b), backward)

    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def batched_backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return record("matmul", np.matmul(a.data, b.data), (a, b), batched_backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape", x.shape, shape)
    original = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.data.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError("slice", x.shape, (axis, start, stop))
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return record("slice", x.data[index], (x,), backward)


def index_select(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather entries of x along axis (e.g. intervened positions)"""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.data.ndim
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis])):
        raise ShapeError("index_select", x.shape, idx.shape)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(np.moveaxis(grad, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return record("index_select", np.take(x.data, idx, axis=axis), (x,), backward)


def index_replace(x: Tensor, idx: np.ndarray, src: Tensor, axis: int) -> Tensor:
    """Copy of x whose entries at idx along axis are taken from src"""
    x, src = _as_tensor(x), _as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.data.ndim
    expected = x.shape[:axis] + (idx.size,) + x.shape[axis + 1:]
    if idx.ndim != 1 or src.shape != expected or len(set(idx.tolist())) != idx.size:
        raise ShapeError("index_replace", x.shape, idx.shape, src.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError("index_replace", x.shape, idx.shape, src.shape)

    out = x.data.copy()
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(src.data, axis, 0)

    def backward(g):
        grad_x = g.copy()
        np.moveaxis(grad_x, axis, 0)[idx] = 0.0
        return grad_x, np.take(g, idx, axis=axis)

    return record("index_replace", out, (x, src), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; ids is a plain integer array"""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: token id out of range [0, {table.shape[0]})")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return record("embedding", table.data[ids], (table,), backward)


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """x (n, V), idx (n,) -> x[i, idx[i]]"""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError("take_along_last", x.shape, idx.shape)
    rows = np.arange(x.shape[0])

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[rows, idx] = g
        return (grad,)

    return record("take_along_last", x.data[rows, idx], (x,), backward)


# ----------------------------------------------------------------------------
# Reductions and normalisers
# ----------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


def softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift"""
    x = _as_tensor(x)
    n = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (n,):
            raise ShapeError("layer_norm", x.shape, p.shape)

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_sigma = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_sigma
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv_sigma * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return tuple(grads)

    return record("layer_norm", out, parents, backward)


def row_orthonormalize(raw: Tensor) -> Tensor:
    """
    Row-orthonormal factor of an r x d matrix (r <= d) via thin QR of its
    transpose, with the triangular factor's diagonal made positive so the map
    is unique and smooth.
    """
    raw = _as_tensor(raw)
    if raw.data.ndim != 2 or raw.shape[0] > raw.shape[1]:
        raise ShapeError("orthonormalize", raw.shape)

    q, tri = np.linalg.qr(raw.data.T)
    signs = np.sign(np.diag(tri))
    signs[signs == 0] = 1.0
    q = q * signs
    tri = signs[:, None] * tri

    def backward(g):
        # g is dL/d(Q^T); work with G = dL/dQ (d x r)
        grad_q = g.T
        inner = q.T @ grad_q
        skew = np.tril(inner - inner.T, -1)
        m = grad_q - q @ inner + q @ skew
        # dL/dA = M tri^{-T}; returned transposed to match raw
        return (np.linalg.solve(tri, m.T),)

    return record("orthonormalize", q.T.copy(), (raw,), backward)
