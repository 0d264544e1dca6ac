"""Minimal reverse-mode tape over float64 numpy arrays.

The primitive set is intentionally small: affine layers (with an optional
leading stack dimension looped as independent 2-D GEMMs), ReLU, diagonal
Gaussian log-density / KL / entropy, exp, clip, elementwise min, square,
sums and means, slicing. That is everything the policy-gradient losses in
this package are built from.

Stacked affine layers deliberately loop over the leading axis with plain
2-D matmuls so that slice ``k`` of a stacked computation is bit-identical
to running the same network unstacked.
"""

import numpy as np


class NumericFailure(RuntimeError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term):
        super().__init__(f"non-finite value in term '{term}'")
        self.term = term


class Tensor:
    __slots__ = ("data", "parents", "vjp", "grad", "name")

    def __init__(self, data, parents=(), vjp=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def constant(data):
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    out = Tensor(a.data + b.data, (a, b))
    out.vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return out


def sub(a, b):
    out = Tensor(a.data - b.data, (a, b))
    out.vjp = lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    return out


def mul(a, b):
    out = Tensor(a.data * b.data, (a, b))
    out.vjp = lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    )
    return out


def scale(a, c):
    """Multiply by a python/numpy constant."""
    c = np.asarray(c, dtype=np.float64)
    out = Tensor(a.data * c, (a,))
    out.vjp = lambda g: (_unbroadcast(g * c, a.data.shape),)
    return out


def neg(a):
    out = Tensor(-a.data, (a,))
    out.vjp = lambda g: (-g,)
    return out


def exp(a):
    val = np.exp(a.data)
    out = Tensor(val, (a,))
    out.vjp = lambda g: (g * val,)
    return out


def square(a):
    out = Tensor(a.data * a.data, (a,))
    out.vjp = lambda g: (g * (2.0 * a.data),)
    return out


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    val = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    out = Tensor(val, (a,))
    out.vjp = lambda g: (g * inside,)
    return out


def minimum(a, b):
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b))
    out.vjp = lambda g: (
        _unbroadcast(g * take_a, a.data.shape),
        _unbroadcast(g * ~take_a, b.data.shape),
    )
    return out


def asum(a, axis=None):
    out = Tensor(a.data.sum(axis=axis), (a,))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    out.vjp = vjp
    return out


def amean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    inv_n = 1.0 / n
    out = Tensor(a.data.mean(axis=axis), (a,))

    def vjp(g):
        gs = g * inv_n
        if axis is None:
            return (np.broadcast_to(gs, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(gs, axis), a.data.shape).copy(),)

    out.vjp = vjp
    return out


def getitem(a, index):
    out = Tensor(a.data[index], (a,))

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    out.vjp = vjp
    return out


def unsqueeze(a, axis):
    out = Tensor(np.expand_dims(a.data, axis), (a,))
    out.vjp = lambda g: (np.squeeze(g, axis=axis),)
    return out


def affine(x, w, b):
    """x @ w + b. Either all 2-D, or w/b carry a leading stack axis.

    Stacked case: w is (N, i, o), b is (N, o), x is (B, i) shared or
    (N, B, i) per-slice; the result is (N, B, o), computed slice by slice
    with 2-D matmuls.
    """
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim == 2:
        val = xd @ wd + bd
        out = Tensor(val, (x, w, b))

        def vjp(g):
            return (g @ wd.T, xd.T @ g, g.sum(axis=0))

        out.vjp = vjp
        return out

    n = wd.shape[0]
    shared_x = xd.ndim == 2
    val = np.empty((n, xd.shape[-2], wd.shape[-1]))
    for k in range(n):
        xk = xd if shared_x else xd[k]
        val[k] = xk @ wd[k] + bd[k]
    out = Tensor(val, (x, w, b))

    def vjp(g):
        gw = np.empty_like(wd)
        gb = np.empty_like(bd)
        gx = np.zeros_like(xd)
        for k in range(n):
            xk = xd if shared_x else xd[k]
            gw[k] = xk.T @ g[k]
            gb[k] = g[k].sum(axis=0)
            if shared_x:
                gx += g[k] @ wd[k].T
            else:
                gx[k] = g[k] @ wd[k].T
        return (gx, gw, gb)

    out.vjp = vjp
    return out


def relu(a):
    mask = a.data > 0.0
    out = Tensor(a.data * mask, (a,))
    out.vjp = lambda g: (g * mask,)
    return out


_LOG_2PI = np.log(2.0 * np.pi)


def _as_data(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def gauss_logp(mean, log_std, actions):
    """Diagonal-Gaussian log density, summed over the last axis.

    `actions` is a constant array; mean and log_std are Tensors
    (log_std broadcasts against mean's batch axes).
    """
    md, lsd = mean.data, log_std.data
    act = np.asarray(actions, dtype=np.float64)
    inv_std = np.exp(-lsd)
    z = (act - md) * inv_std
    dim = act.shape[-1]
    val = -0.5 * (z * z).sum(axis=-1) - lsd.sum(axis=-1) - 0.5 * dim * _LOG_2PI
    out = Tensor(val, (mean, log_std), name="gauss_logp")

    def vjp(g):
        ge = g[..., None]
        d_mean = ge * (z * inv_std)
        d_ls = ge * (z * z - 1.0)
        return (
            _unbroadcast(d_mean, md.shape),
            _unbroadcast(d_ls, lsd.shape),
        )

    out.vjp = vjp
    return out


def gauss_kl(p_mean, p_log_std, q_mean, q_log_std):
    """KL(p || q) for diagonal Gaussians, summed over the last axis.

    Any argument may be a Tensor or a constant array; gradients flow only
    into Tensor arguments.
    """
    pm, pls = _as_data(p_mean), _as_data(p_log_std)
    qm, qls = _as_data(q_mean), _as_data(q_log_std)
    diff = pm - qm
    e2p = np.exp(2.0 * pls)
    inv_2q = np.exp(-2.0 * qls)
    per_dim = qls - pls + (e2p + diff * diff) * (0.5 * inv_2q) - 0.5
    val = per_dim.sum(axis=-1)
    parents = tuple(t for t in (p_mean, p_log_std, q_mean, q_log_std) if isinstance(t, Tensor))
    out = Tensor(val, parents, name="gauss_kl")

    def vjp(g):
        ge = g[..., None]
        grads = []
        if isinstance(p_mean, Tensor):
            grads.append(_unbroadcast(ge * (diff * inv_2q), pm.shape))
        if isinstance(p_log_std, Tensor):
            grads.append(_unbroadcast(ge * (e2p * inv_2q - 1.0), pls.shape))
        if isinstance(q_mean, Tensor):
            grads.append(_unbroadcast(ge * (-diff * inv_2q), qm.shape))
        if isinstance(q_log_std, Tensor):
            grads.append(_unbroadcast(ge * (1.0 - (e2p + diff * diff) * inv_2q), qls.shape))
        return tuple(grads)

    out.vjp = vjp
    return out


def gauss_entropy(log_std):
    """Entropy of a diagonal Gaussian: sum_i (0.5 + 0.5 ln 2pi + log_std_i)."""
    lsd = log_std.data
    dim = lsd.shape[-1]
    val = lsd.sum(axis=-1) + 0.5 * dim * (1.0 + _LOG_2PI)
    out = Tensor(val, (log_std,), name="entropy")

    def vjp(g):
        return (np.broadcast_to(g[..., None], lsd.shape).copy(),)

    out.vjp = vjp
    return out


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate gradients of a scalar root into every reachable Tensor."""
    if root.data.shape != ():
        raise ValueError("backward() requires a scalar root")
    if not np.isfinite(root.data):
        for node in _toposort(root):
            if not np.all(np.isfinite(node.data)):
                raise NumericFailure(node.name or "unnamed")
        raise NumericFailure("loss")
    order = _toposort(root)
    root.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
