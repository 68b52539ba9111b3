"""A small reverse-mode autodiff over numpy arrays.

Only the operations the decoder needs are provided. Each op returns a
:class:`Tensor` whose ``_backward`` closure pushes the output gradient
into its parents; :meth:`Tensor.backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; ``b`` may be a 2-D weight shared across the batch."""
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accum(gb)

    return _make(out, (a, b), backward)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b^T`` over the last two axes (e.g. queries against keys)."""
    out = a.data @ np.swapaxes(b.data, -1, -2)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(g, -1, -2) @ a.data, b.shape))

    return _make(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accum(gp)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        table._accum(gt)

    return _make(table.data[ids], (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            n = xhat.shape[-1]
            dx = inv / n * (
                n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
            x._accum(dx)

    return _make(out, (x, gain), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd  # float power is far slower than multiplication
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        x._accum(g * d)

    return _make(out, (x,), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs ``(x[2t], x[2t+1])`` by the given angles."""
    out = rotate_pairs(x.data, cos, sin)

    def backward(g):
        x._accum(_unbroadcast(rotate_pairs(g, cos, -sin), x.shape))

    return _make(out, (x,), backward)


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis of ``scores + mask`` (mask is additive)."""
    z = scores.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        scores._accum(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (scores,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean token cross-entropy; ``weights`` sum must be positive."""
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    w = weights.reshape(-1).astype(np.float64)
    total = w.sum()
    z = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1))
    nll = logz - z[np.arange(len(t)), t]
    loss = float((nll * w).sum() / total)

    def backward(g):
        p = np.exp(z - logz[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / total)[:, None] * g
        logits._accum(p.reshape(logits.shape))

    return _make(np.asarray(loss), (logits,), backward)
