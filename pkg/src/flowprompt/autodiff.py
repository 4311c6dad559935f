"""Minimal reverse-mode automatic differentiation over numpy arrays.

Design notes:
- Ops are module-level functions building a flat tape of `Tensor` nodes;
  `backward()` walks the tape in reverse topological order.
- Hot-path composites (linear, layernorm, attention, masked losses) are
  fused into single nodes with handwritten backward rules so graphs stay
  small on a single CPU core.
- Inputs that are plain numpy arrays are constants; gradients are only
  computed for `Tensor`s created with requires_grad=True and anything
  downstream of them.
- dtype follows the inputs; callers pick float32 for training and float64
  for finite-difference verification.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "bwd", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents: tuple = ()
        self.bwd: Callable | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _grad_parents(*xs):
    return tuple(x for x in xs if isinstance(x, Tensor) and x.requires_grad)


def _make(data, parents, bwd):
    out = Tensor(data)
    if _GRAD_ENABLED and parents:
        out.requires_grad = True
        out.parents = parents
        out.bwd = bwd
    return out


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root: Tensor):
    """Accumulate gradients of `root` (any shape; seeded with ones) into the tape."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node.bwd is None or node.grad is None:
            continue
        for parent, g in node.bwd(node.grad):
            if g.shape != parent.data.shape:
                g = _unbroadcast(g, parent.data.shape)
            if parent.grad is None:
                parent.grad = g if g.base is None else g.copy()
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    ad, bd = _data(a), _data(b)
    parents = _grad_parents(a, b)

    def bwd(g):
        out = []
        if isinstance(a, Tensor) and a.requires_grad:
            out.append((a, g))
        if isinstance(b, Tensor) and b.requires_grad:
            out.append((b, g))
        return out

    return _make(ad + bd, parents, bwd)


def sub(a, b):
    ad, bd = _data(a), _data(b)
    parents = _grad_parents(a, b)

    def bwd(g):
        out = []
        if isinstance(a, Tensor) and a.requires_grad:
            out.append((a, g))
        if isinstance(b, Tensor) and b.requires_grad:
            out.append((b, -g))
        return out

    return _make(ad - bd, parents, bwd)


def mul(a, b):
    ad, bd = _data(a), _data(b)
    parents = _grad_parents(a, b)

    def bwd(g):
        out = []
        if isinstance(a, Tensor) and a.requires_grad:
            out.append((a, g * bd))
        if isinstance(b, Tensor) and b.requires_grad:
            out.append((b, g * ad))
        return out

    return _make(ad * bd, parents, bwd)


def scale(a, s: float):
    ad = _data(a)
    return _make(ad * s, _grad_parents(a), lambda g: [(a, g * s)])


def sigmoid(a):
    ad = _data(a)
    out = 1.0 / (1.0 + np.exp(-ad))
    return _make(out, _grad_parents(a), lambda g: [(a, g * out * (1.0 - out))])


def gelu(a):
    ad = _data(a)
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        return [(a, g * (cdf + ad * pdf))]

    return _make(ad * cdf, _grad_parents(a), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    ad = _data(a)
    return _make(ad.reshape(shape), _grad_parents(a), lambda g: [(a, g.reshape(ad.shape))])


def swapaxes(a, ax1, ax2):
    ad = _data(a)
    return _make(
        np.ascontiguousarray(np.swapaxes(ad, ax1, ax2)),
        _grad_parents(a),
        lambda g: [(a, np.swapaxes(g, ax1, ax2))],
    )


def concat(xs: Sequence, axis: int):
    datas = [_data(x) for x in xs]
    out = np.concatenate(datas, axis=axis)
    parents = _grad_parents(*xs)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if isinstance(x, Tensor) and x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                grads.append((x, g[tuple(sl)]))
        return grads

    return _make(out, parents, bwd)


def slice_axis(a, axis, start, stop):
    ad = _data(a)
    sl = [slice(None)] * ad.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        full = np.zeros_like(ad)
        full[sl] = g
        return [(a, full)]

    return _make(ad[sl], _grad_parents(a), bwd)


def broadcast_to(a, shape):
    ad = _data(a)
    return _make(
        np.broadcast_to(ad, shape),
        _grad_parents(a),
        lambda g: [(a, _unbroadcast(g, ad.shape))],
    )


def gather_rows(a, idx):
    """Select rows along the first axis: out = a[idx]."""
    ad = _data(a)
    idx = np.asarray(idx)

    def bwd(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return [(a, full)]

    return _make(ad[idx], _grad_parents(a), bwd)


def scatter_rows(idx_list: Sequence[np.ndarray], parts: Sequence, n_rows: int):
    """Inverse of grouped gather: place each part's rows at its indices."""
    datas = [_data(p) for p in parts]
    out = np.zeros((n_rows,) + datas[0].shape[1:], dtype=datas[0].dtype)
    for idx, d in zip(idx_list, datas):
        out[idx] = d
    parents = _grad_parents(*parts)

    def bwd(g):
        grads = []
        for idx, p in zip(idx_list, parts):
            if isinstance(p, Tensor) and p.requires_grad:
                grads.append((p, g[idx]))
        return grads

    return _make(out, parents, bwd)


def embedding(table, ids):
    """Row lookup with dense scatter-add backward; `ids` is integer constant data."""
    td = _data(table)
    ids = np.asarray(ids)

    def bwd(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        return [(table, full)]

    return _make(td[ids], _grad_parents(table), bwd)


# ---------------------------------------------------------------------------
# fused compute ops


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    parents = _grad_parents(a, b)

    def bwd(g):
        out = []
        if isinstance(a, Tensor) and a.requires_grad:
            out.append((a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)))
        if isinstance(b, Tensor) and b.requires_grad:
            out.append((b, _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)))
        return out

    return _make(ad @ bd, parents, bwd)


def linear(x, w, b=None):
    """y = x @ w (+ b); x (..., d_in), w (d_in, d_out), b (d_out,)."""
    xd, wd = _data(x), _data(w)
    y = xd @ wd
    if b is not None:
        y = y + _data(b)
    parents = _grad_parents(x, w, b) if b is not None else _grad_parents(x, w)

    def bwd(g):
        out = []
        g2 = g.reshape(-1, g.shape[-1])
        if isinstance(x, Tensor) and x.requires_grad:
            out.append((x, g @ wd.T))
        if isinstance(w, Tensor) and w.requires_grad:
            out.append((w, xd.reshape(-1, xd.shape[-1]).T @ g2))
        if b is not None and isinstance(b, Tensor) and b.requires_grad:
            out.append((b, g2.sum(axis=0)))
        return out

    return _make(y, parents, bwd)


def layernorm(x, gamma, beta, eps=1e-5):
    xd = _data(x)
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    gd = _data(gamma)
    out = gd * xhat + _data(beta)
    parents = _grad_parents(x, gamma, beta)

    def bwd(g):
        grads = []
        gxhat = g * gd
        if isinstance(x, Tensor) and x.requires_grad:
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            grads.append((x, inv_std * (gxhat - m1 - xhat * m2)))
        axes = tuple(range(g.ndim - 1))
        if isinstance(gamma, Tensor) and gamma.requires_grad:
            grads.append((gamma, (g * xhat).sum(axis=axes)))
        if isinstance(beta, Tensor) and beta.requires_grad:
            grads.append((beta, g.sum(axis=axes)))
        return grads

    return _make(out, parents, bwd)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over (B, H, T, hd) tensors.

    `mask` is optional additive bias broadcastable to (B, H, Tq, Tk), constant.
    """
    qd, kd, vd = _data(q), _data(k), _data(v)
    s = 1.0 / np.sqrt(qd.shape[-1])
    logits = (qd @ np.swapaxes(kd, -1, -2)) * s
    if mask is not None:
        logits = logits + mask
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = probs @ vd
    parents = _grad_parents(q, k, v)

    def bwd(g):
        grads = []
        gp = g @ np.swapaxes(vd, -1, -2)
        glogits = probs * (gp - (probs * gp).sum(axis=-1, keepdims=True))
        if isinstance(q, Tensor) and q.requires_grad:
            grads.append((q, (glogits @ kd) * s))
        if isinstance(k, Tensor) and k.requires_grad:
            grads.append((k, (np.swapaxes(glogits, -1, -2) @ qd) * s))
        if isinstance(v, Tensor) and v.requires_grad:
            grads.append((v, np.swapaxes(probs, -1, -2) @ g))
        return grads

    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# reductions / losses


def mean(a):
    ad = _data(a)
    n = ad.size

    def bwd(g):
        return [(a, np.full_like(ad, float(g) / n))]

    return _make(np.asarray(ad.mean(), dtype=ad.dtype), _grad_parents(a), bwd)


def sum_all(a):
    ad = _data(a)

    def bwd(g):
        return [(a, np.full_like(ad, float(g)))]

    return _make(np.asarray(ad.sum(), dtype=ad.dtype), _grad_parents(a), bwd)


def masked_mse(pred, target, mask):
    """Mean squared error over entries where mask==1; mask is constant."""
    pd, td, md = _data(pred), _data(target), np.asarray(mask)
    count = md.sum()
    if count == 0:
        raise ValueError("masked_mse: empty mask")
    diff = (pd - td) * md
    val = np.asarray((diff * diff).sum() / count, dtype=pd.dtype)

    def bwd(g):
        return [(pred, (2.0 * float(g) / count) * diff)]

    return _make(val, _grad_parents(pred), bwd)


def masked_bce_with_logits(logits, labels, mask):
    """Mean binary cross-entropy with logits over mask==1 entries (stable form)."""
    zd, yd, md = _data(logits), np.asarray(labels), np.asarray(mask)
    count = md.sum()
    if count == 0:
        raise ValueError("masked_bce_with_logits: empty mask")
    per = np.maximum(zd, 0.0) - zd * yd + np.log1p(np.exp(-np.abs(zd)))
    val = np.asarray((per * md).sum() / count, dtype=zd.dtype)

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-zd))
        return [(logits, (float(g) / count) * (sig - yd) * md)]

    return _make(val, _grad_parents(logits), bwd)
