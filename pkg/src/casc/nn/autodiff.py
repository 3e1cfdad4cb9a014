"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every public function accepts either a :class:`Tensor` or a plain numpy
array; plain arrays fall through to the equivalent numpy computation, so the
same formula code serves both training (graph recorded) and inference paths.
Convolution and patch folding route through :mod:`casc.kernels`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from casc import kernels

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_grad_fn", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._grad_fn = None
        self._parents: tuple[Tensor, ...] = ()

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autograd ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not self:
                node.grad = None  # free intermediate buffers

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _wrap_pair(a, b) -> tuple[Tensor, Tensor]:
    # Scalars adopt the tensor partner's dtype so float32 graphs stay float32.
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return _wrap(a), _wrap(b)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_plain(*xs) -> bool:
    return not any(isinstance(x, Tensor) for x in xs)


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    if _is_plain(a, b):
        return np.add(a, b)
    a, b = _wrap_pair(a, b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    if _is_plain(a, b):
        return np.subtract(a, b)
    a, b = _wrap_pair(a, b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    if _is_plain(a, b):
        return np.multiply(a, b)
    a, b = _wrap_pair(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    if _is_plain(a, b):
        return np.divide(a, b)
    a, b = _wrap_pair(a, b)
    inv = 1.0 / b.data
    return _node(
        a.data * inv,
        (a, b),
        lambda g: (
            _unbroadcast(g * inv, a.data.shape),
            _unbroadcast(-g * a.data * inv * inv, b.data.shape),
        ),
    )


def power(a, exponent: float):
    if _is_plain(a):
        return np.power(a, exponent)
    a = _wrap(a)
    out = np.power(a.data, exponent)
    return _node(out, (a,), lambda g: (g * exponent * np.power(a.data, exponent - 1),))


def exp(a):
    if _is_plain(a):
        return np.exp(a)
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    if _is_plain(a):
        return np.log(a)
    a = _wrap(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    if _is_plain(a):
        return np.sqrt(a)
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    if _is_plain(a):
        return np.tanh(a)
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates without overflowing exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    if _is_plain(a):
        return _stable_sigmoid(np.asarray(a))
    a = _wrap(a)
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    if _is_plain(a):
        a = np.asarray(a)
        return a * _stable_sigmoid(a)
    a = _wrap(a)
    sig = _stable_sigmoid(a.data)
    return _node(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def relu(a):
    if _is_plain(a):
        return np.maximum(a, 0)
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def absolute(a):
    if _is_plain(a):
        return np.abs(a)
    a = _wrap(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- reductions and shape -----------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    if _is_plain(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False):
    if _is_plain(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else int(
        np.prod([a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )

    def grad_fn(g):
        if axis is None:
            gg = np.broadcast_to(g / count, a.data.shape)
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            ge = g if keepdims else np.expand_dims(g, axes)
            gg = np.broadcast_to(ge / count, a.data.shape)
        return (gg.astype(a.data.dtype, copy=False),)

    return _node(out, (a,), grad_fn)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    if _is_plain(a):
        return np.reshape(a, shape)
    a = _wrap(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    if _is_plain(a):
        return np.transpose(a, axes)
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts, axis: int):
    if all(not isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), grad_fn)


def stop_grad(a):
    if _is_plain(a):
        return a
    return Tensor(a.data)


def straight_through(value, route):
    """Forward the data of `value` unchanged; send the full gradient to
    `route` (identity estimator). `value` receives no gradient."""
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if _is_plain(route):
        return data
    route = _wrap(route)
    if data.shape != route.data.shape:
        raise ValueError(f"straight_through shapes differ: {data.shape} vs {route.data.shape}")
    return _node(data, (route,), lambda g: (g,))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    if _is_plain(a, b):
        return np.matmul(a, b)
    a, b = _wrap(a), _wrap(b)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), grad_fn)


def gather_rows(table, idx: np.ndarray):
    """Select rows of a (K,D) table by integer index array; scatter-add backward."""
    idx = np.asarray(idx)
    if _is_plain(table):
        return table[idx]
    table = _wrap(table)

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(table.data[idx], (table,), grad_fn)


# -- spatial ops (channels-last) ----------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2-D convolution on (B,H,W,C) with kernel (kh,kw,Cin,Cout)."""
    plain = _is_plain(x, w, b) if b is not None else _is_plain(x, w)
    xt, wt = _wrap(x), _wrap(w)
    bt = _wrap(b) if b is not None else None
    kh, kw, cin, cout = wt.data.shape
    bsz, h, wdt, cx = xt.data.shape
    if cx != cin:
        raise ValueError(f"conv2d: input has {cx} channels, kernel expects {cin}")
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    w2d = wt.data.reshape(-1, cout)
    if pointwise:
        cols = None
        oh, ow = h, wdt
        out = xt.data.reshape(-1, cin) @ w2d
    else:
        cols = kernels.im2col(xt.data, kh, kw, stride, padding)
        oh, ow = cols.shape[1], cols.shape[2]
        out = cols.reshape(-1, kh * kw * cin) @ w2d
    out = out.reshape(bsz, oh, ow, cout)
    if bt is not None:
        out = out + bt.data
    if plain:
        return out

    def grad_fn(g):
        g2d = np.ascontiguousarray(g).reshape(-1, cout)
        if pointwise:
            gw = (xt.data.reshape(-1, cin).T @ g2d).reshape(wt.data.shape)
            gx = (g2d @ w2d.T).reshape(xt.data.shape)
        else:
            gw = (cols.reshape(-1, kh * kw * cin).T @ g2d).reshape(wt.data.shape)
            gcols = (g2d @ w2d.T).reshape(bsz, oh, ow, kh * kw * cin)
            gx = kernels.col2im(gcols, h, wdt, kh, kw, stride, padding)
        gb = g.sum(axis=(0, 1, 2)) if bt is not None else None
        return (gx, gw, gb) if bt is not None else (gx, gw)

    parents = (xt, wt, bt) if bt is not None else (xt, wt)
    return _node(out, parents, grad_fn)


def unfold(x, k: int, stride: int = 1, padding: int = 0):
    """im2col as a differentiable op: (B,H,W,C) -> (B,OH,OW,k*k*C)."""
    if _is_plain(x):
        return kernels.im2col(np.asarray(x), k, k, stride, padding)
    x = _wrap(x)
    b, h, w, c = x.data.shape
    cols = kernels.im2col(x.data, k, k, stride, padding)

    def grad_fn(g):
        return (kernels.col2im(np.ascontiguousarray(g), h, w, k, k, stride, padding),)

    return _node(cols, (x,), grad_fn)


def upsample_nearest2x(x):
    if _is_plain(x):
        return x.repeat(2, axis=1).repeat(2, axis=2)
    x = _wrap(x)
    b, h, w, c = x.data.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def grad_fn(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node(out, (x,), grad_fn)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-6):
    """Fused per-group normalization over (H, W, channels-in-group) with a
    channelwise affine, on (B,H,W,C) inputs."""
    plain = _is_plain(x, gamma, beta)
    xt, gt, bt = _wrap(x), _wrap(gamma), _wrap(beta)
    b, h, w, c = xt.data.shape
    cg = c // groups
    xg = xt.data.reshape(b, h, w, groups, cg)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, h, w, c)
    out = xhat * gt.data + bt.data
    if plain:
        return out

    def grad_fn(gout):
        ggamma = (gout * xhat).sum(axis=(0, 1, 2))
        gbeta = gout.sum(axis=(0, 1, 2))
        g = (gout * gt.data).reshape(b, h, w, groups, cg)
        m1 = g.mean(axis=(1, 2, 4), keepdims=True)
        xhg = xhat.reshape(b, h, w, groups, cg)
        m2 = (g * xhg).mean(axis=(1, 2, 4), keepdims=True)
        gx = ((g - m1 - xhg * m2) * inv).reshape(b, h, w, c)
        return gx, ggamma, gbeta

    return _node(out, (xt, gt, bt), grad_fn)


def softmax(x, axis: int = -1):
    if _is_plain(x):
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=axis, keepdims=True)
    shift = sub(x, np.max(x.data, axis=axis, keepdims=True))
    e = exp(shift)
    return div(e, sum_(e, axis=axis, keepdims=True))
