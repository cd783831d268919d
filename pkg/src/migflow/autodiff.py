"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every operation on a :class:`Tensor` that depends on a tensor requiring
gradients records its parents and a vector-Jacobian product. Calling
:func:`backward` on a scalar (or with an explicit seed gradient) walks the
recorded graph once in reverse topological order and accumulates ``.grad`` on
every node that requires gradients.

Only the operations needed by the flow estimator are provided.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def _node(data, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp)
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(n for n, s in enumerate(shape) if s == 1 and grad.shape[n] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data / b.data, (a, b), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp)


def tanh(x):
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def softplus(x):
    y = np.logaddexp(0.0, x.data)
    return _node(y, (x,), lambda g: (g * 0.5 * (np.tanh(0.5 * x.data) + 1.0),))


def identity(x):
    return x


def exp(x):
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x):
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def celu(x, alpha):
    """``max(0, x) + min(0, alpha * (exp(x / alpha) - 1))``, elementwise.

    Written for any non-zero ``alpha``; for negative ``alpha`` the branch is
    active for ``x < 0`` as well.
    """
    e = np.exp(x.data / alpha)
    branch = alpha * (e - 1.0)
    neg = branch < 0
    pos = x.data > 0
    y = np.where(pos, x.data, 0.0) + np.where(neg, branch, 0.0)

    def vjp(g):
        # both one-sided derivatives equal 1 at x = 0
        return (g * ((x.data >= 0) + np.where(neg, e, 0.0)),)

    return _node(y.astype(x.data.dtype), (x,), vjp)


def clamp_max(x, limit):
    """``min(x, limit)``; returns the tensor and the number of clamped entries."""
    over = x.data > limit
    y = np.where(over, limit, x.data).astype(x.data.dtype)
    return _node(y, (x,), lambda g: (np.where(over, 0.0, g),)), int(over.sum())


def clamp_min_zero(x):
    """``max(x, 0)``; returns the tensor and the number of clamped entries."""
    under = x.data < 0
    y = np.where(under, 0.0, x.data)
    return _node(y, (x,), lambda g: (np.where(under, 0.0, g),)), int(under.sum())


def psi(x, lam):
    """Symmetrised Yeo-Johnson transform with its analytic derivative."""
    a = np.abs(x.data)
    lp = np.log1p(a)
    if lam == 1.0:
        return x
    if abs(lam) < 1e-12:
        y = np.sign(x.data) * lp
    else:
        y = np.sign(x.data) * np.expm1(lam * lp) / lam
    return _node(y, (x,), lambda g: (g * np.exp((lam - 1.0) * lp),))


def _act_forward(name, h, alpha):
    if name == "tanh":
        np.tanh(h, out=h)
    elif name == "sigmoid":
        np.tanh(0.5 * h, out=h)
        h += 1.0
        h *= 0.5
    elif name == "relu":
        np.maximum(h, 0.0, out=h)
    elif name == "softplus":
        h[...] = np.logaddexp(0.0, h)
    elif name == "celu":
        branch = np.expm1(np.minimum(h, 0.0) * (1.0 / alpha))
        branch *= alpha
        h = np.where(h < 0, branch, h)
    elif name != "linear":
        raise ValueError(f"unknown activation {name!r}")
    return h


def _act_slope(name, y, alpha):
    """Activation derivative expressed through the activation's output ``y``."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "relu":
        return (y > 0).astype(y.dtype)
    if name == "softplus":
        return -np.expm1(-y)
    if name == "celu":
        # CeLU keeps the sign of its input; the branch slope is exp(x / alpha) = 1 + y / alpha
        return np.where(y < 0, 1.0 + y / alpha, 1.0).astype(y.dtype)
    return None


def dense(blocks, weight, bias, activation="linear", alpha=1.0):
    """``act(sum_b blocks[b] @ weight[rows_b] + bias)`` as a single graph node.

    ``blocks`` split the input along its last axis; each block multiplies the
    matching consecutive rows of ``weight``. Gradients are only formed for
    operands that require them.
    """
    blocks = [as_tensor(b) for b in blocks if b.shape[-1]]
    w, b = as_tensor(weight), as_tensor(bias)
    rows, start = [], 0
    for blk in blocks:
        rows.append(slice(start, start + blk.shape[-1]))
        start += blk.shape[-1]
    if start != w.shape[0]:
        raise ValueError(f"input width {start} does not match weight rows {w.shape[0]}")
    h = None
    for blk, r in zip(blocks, rows):
        part = blk.data @ w.data[r]
        h = part if h is None else h.__iadd__(part)
    h += b.data
    y = _act_forward(activation, h, alpha)

    def vjp(g):
        slope = _act_slope(activation, y, alpha)
        gz = g if slope is None else g * slope
        grads = []
        for blk, r in zip(blocks, rows):
            grads.append(gz @ w.data[r].T if blk.requires_grad else None)
        gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for blk, r in zip(blocks, rows):
                gw[r] = blk.data.T @ gz
        gb = gz.sum(axis=0) if b.requires_grad else None
        return tuple(grads) + (gw, gb)

    return _node(y, tuple(blocks) + (w, b), vjp)


def tsum(x, axis=None):
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(x.data.sum(axis=axis), (x,), vjp)


def mean(x):
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def reshape(x, shape):
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def astype(x, dtype):
    if x.data.dtype == dtype:
        return x
    src = x.data.dtype
    return _node(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def getitem(x, index):
    """Basic indexing (slices / ints); see :func:`take_flat` for gathers."""

    def vjp(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _node(x.data[index], (x,), vjp)


def take_flat(x, flat_index):
    """Gather ``x.ravel()[flat_index]``; repeated indices accumulate gradients."""
    flat_index = np.asarray(flat_index)

    def vjp(g):
        acc = np.bincount(flat_index.ravel(), weights=g.ravel(), minlength=x.data.size)
        return (acc.reshape(x.shape).astype(x.data.dtype, copy=False),)

    return _node(x.data.ravel()[flat_index], (x,), vjp)


def scatter_flat(values, shape, flat_index):
    """Place ``values`` into a zero array of ``shape`` at unique flat indices."""
    out = np.zeros(int(np.prod(shape)), dtype=values.data.dtype)
    out[flat_index] = values.data
    return _node(out.reshape(shape), (values,), lambda g: (g.ravel()[flat_index].reshape(values.shape),))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, n, axis=axis) for n in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, grad=None):
    """Accumulate gradients of ``root`` into every reachable leaf's ``.grad``.

    Intermediate gradients are released as soon as they are propagated, so
    only leaves (nodes without parents) keep ``.grad`` afterwards.
    """
    if not root.requires_grad:
        return
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.data.dtype)
    if seed.shape != root.shape:
        raise ValueError(f"seed gradient shape {seed.shape} does not match {root.shape}")
    root.grad = seed
    for node in reversed(_topological(root)):
        g = node.grad
        if node._vjp is None or g is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            p.grad = pg if p.grad is None else p.grad + pg
        node.grad = None
