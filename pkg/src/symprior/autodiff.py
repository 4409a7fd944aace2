"""Minimal dense reverse-mode differentiation for the prior model.

Only the operations the Transformer needs are provided. Every op records a
closure that accumulates gradients into its inputs; ``Tensor.backward`` runs
them in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
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

        visit(self)
        self._acc(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _track(*ts) -> bool:
    return any(t.requires_grad for t in ts)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    if not _track(a, b):
        return Tensor(out)

    def back(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.shape))

    return Tensor(out, True, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D (weights) or both share batch dims."""
    out = a.data @ b.data
    if not _track(a, b):
        return Tensor(out)

    def back(g):
        if a.requires_grad:
            a._acc(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._acc(_unbroadcast(gb, b.shape))

    return Tensor(out, True, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: x._acc(g * mask))


def dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: x._acc(g * keep))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    if not _track(x, gain, bias):
        return Tensor(out)

    def back(g):
        if gain.requires_grad:
            gain._acc(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._acc(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            x._acc(inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return Tensor(out, True, (x, gain, bias), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    out = table.data[ids]
    if not table.requires_grad:
        return Tensor(out)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._acc(gt)

    return Tensor(out, True, (table,), back)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, D) -> (B, H, T, D/H)."""
    B, T, D = x.shape
    out = x.data.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: x._acc(g.transpose(0, 2, 1, 3).reshape(B, T, D)))


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, T, dh) -> (B, T, H*dh)."""
    B, H, T, dh = x.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, (x,), lambda g: x._acc(g.reshape(B, T, H, dh).transpose(0, 2, 1, 3)))


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask; inputs (B, H, T, dh)."""
    dh = q.shape[-1]
    T = q.shape[-2]
    scale = 1.0 / np.sqrt(dh)
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    s = np.where(mask, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data
    if not _track(q, k, v):
        return Tensor(out)

    def back(g):
        if v.requires_grad:
            v._acc(np.swapaxes(p, -1, -2) @ g)
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            q._acc(gs @ k.data)
        if k.requires_grad:
            k._acc(np.swapaxes(gs, -1, -2) @ q.data)

    return Tensor(out, True, (q, k, v), back)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    count = max(int(mask.sum()), 1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count
    if not logits.requires_grad:
        return Tensor(loss)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        logits._acc(g * (p - onehot) * (mask[..., None] / count))

    return Tensor(loss, True, (logits,), back)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
