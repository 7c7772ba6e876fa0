"""Minimal reverse-mode differentiable arrays on top of numpy.

The graph is rebuilt on every forward pass. Each op records its parents and a
closure that pushes the upstream gradient back to them.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# branch decisions of non-smooth ops, collected only inside record_branches()
_branch_log = None


@contextmanager
def record_branches():
    """Collect the branch pattern (ReLU masks, max-pool winners, smooth-L1 regions) of a forward pass."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(arr):
    if _branch_log is not None:
        _branch_log.append(arr)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior node: drop its gradient once consumed
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t, g, fresh=False):
    """Add ``g`` into ``t.grad``; ``fresh`` arrays are owned by the caller and adopted without a copy."""
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        if fresh and g.shape == t.shape and g.flags.writeable and g.base is None:
            t.grad = g
        else:
            t.grad = g.copy() if g.shape == t.shape else np.broadcast_to(g, t.shape).copy()
    else:
        t.grad += g


def _result(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data)
    if parents:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------


def _pair(a, b):
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        return as_tensor(a, b), b
    return a, as_tensor(b, a)


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        _accum(a, unbroadcast(g, a.shape))
        _accum(b, unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        _accum(a, unbroadcast(g, a.shape))
        _accum(b, unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def square(x):
    def backward(g):
        _accum(x, 2.0 * x.data * g)

    return _result(x.data * x.data, (x,), backward)


def relu(x):
    out = np.maximum(x.data, 0)
    if _branch_log is not None:
        _log_branch(x.data > 0)

    def backward(g):
        _accum(x, g * (out > 0), fresh=True)

    return _result(out, (x,), backward)


def smooth_l1(x, beta=1.0):
    """Elementwise Huber-style penalty: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    d = x.data
    ad = np.abs(d)
    inner = ad < beta
    _log_branch(inner)
    out = np.where(inner, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        _accum(x, g * np.where(inner, d / beta, np.sign(d)))

    return _result(out.astype(x.dtype), (x,), backward)


# --- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def affine(x, w, b=None):
    """y = x w + b over the last axis; leading axes of ``x`` are batch axes."""
    if w.ndim != 2:
        raise ValueError(f"weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape), fresh=True)
        if w.requires_grad:
            _accum(w, x2.T @ g2, fresh=True)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0), fresh=True)

    return _result(y.reshape(*lead, w.shape[1]), parents, backward)


# --- reductions and shape ops -----------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape):
    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _result(np.transpose(x.data, axes), (x,), backward)


def getitem(x, idx):
    def backward(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full, fresh=True)

    return _result(x.data[idx], (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, part)

    return _result(data, tensors, backward)


def repeat_rows(x, n):
    """Tile a B x C tensor into B x n x C."""
    if x.ndim != 2:
        raise ValueError(f"repeat_rows expects B x C, got {x.shape}")

    def backward(g):
        _accum(x, g.sum(axis=1))

    data = np.broadcast_to(x.data[:, None, :], (x.shape[0], n, x.shape[1])).copy()
    return _result(data, (x,), backward)


def global_max_pool(x):
    """Per-channel max over points: B x N x C -> B x C; ties resolve to the first index."""
    if x.ndim != 3:
        raise ValueError(f"global_max_pool expects B x N x C, got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("global_max_pool over zero points")
    arg = np.argmax(x.data, axis=1)
    _log_branch(arg)
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        _accum(x, full, fresh=True)

    return _result(out, (x,), backward)


def global_avg_pool(x):
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool expects B x N x C, got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("global_avg_pool over zero points")
    return tmean(x, axis=1)


def batch_norm(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """Normalize the last axis using statistics over all leading axes.

    ``running_mean``/``running_var`` are plain arrays updated in place while
    training; eval mode reads them instead of batch statistics.
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if training:
        if m < 2:
            raise ValueError("batch_norm in training mode needs more than one sample per channel")
        mu = x2.mean(axis=0)
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
        xhat = x2 - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat *= inv
    y = xhat * gamma.data
    y += beta.data

    def backward(g):
        g2 = g.reshape(-1, c)
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = g2.sum(axis=0)
        _accum(gamma, dgamma, fresh=True)
        _accum(beta, dbeta, fresh=True)
        if x.requires_grad:
            if training:
                # inv * gamma * (g - mean(g) - xhat * mean(g * xhat))
                gx = xhat * (-dgamma / m)
                gx += g2
                gx -= dbeta / m
            else:
                gx = g2.copy()
            gx *= gamma.data * inv
            _accum(x, gx.reshape(x.shape), fresh=True)

    return _result(y.reshape(x.shape).astype(x.dtype), (x, gamma, beta), backward)
