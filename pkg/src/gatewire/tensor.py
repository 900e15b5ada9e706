"""Reverse-mode autodiff over dense float64 numpy arrays.

A Tensor wraps a row-major ndarray plus the graph metadata needed for
backward: the op kind that produced it, its parent tensors, and a closure
that routes the upstream gradient to those parents. Gradients accumulate
into ``grad`` on every tensor with ``requires_grad`` set; leaves keep their
gradient across backward calls until ``zero_grad`` is called, intermediate
nodes are re-seeded on each call.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError

PROB_CLAMP = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grad on every requires_grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        # Interior gradients are per-call scratch; leaf gradients accumulate.
        for node in order:
            if node.op != "leaf":
                node.grad = np.zeros_like(node.data)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, op={self.op!r}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor):
    """Iterative post-order DFS; only subgraphs that require grad are visited."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def _make(data, op, parents) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {tuple(a.data.shape)} x {tuple(b.data.shape)}"
        )
    out = _make(a.data @ b.data, "matmul", (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(
            f"add shape mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        ) from None
    out = _make(data, "add", (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(
            f"mul shape mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        ) from None
    out = _make(data, "mul", (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = _make(x.data.sum(), "sum", (x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), "relu", (x,))

    def backward(g):
        if x.requires_grad:
            # Subgradient at exactly 0 is 0.
            x._accumulate(g * (x.data > 0.0))

    out._backward = backward
    return out


class BatchNormState:
    """Learnable affine plus running statistics for one batchnorm layer."""

    def __init__(self, width: int, eps: float = 1e-5, momentum: float = 0.1):
        if width < 1:
            raise ShapeError(f"batchnorm width must be positive, got {width}")
        if eps <= 0:
            raise ShapeError(f"batchnorm eps must be positive, got {eps}")
        self.width = width
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps
        self.mode = "eval"


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    if x.data.ndim != 2 or x.data.shape[1] != state.width:
        raise ShapeError(
            f"batchnorm expects batch x {state.width}, got {tuple(x.data.shape)}"
        )
    gamma, beta = state.gamma, state.beta
    if state.mode == "train":
        n = x.data.shape[0]
        if n < 2:
            raise ShapeError(f"batchnorm in train mode needs batch >= 2, got {n}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # biased, used for normalization
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * invstd
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1.0))
        out = _make(gamma.data * xhat + beta.data, "batchnorm", (x, gamma, beta))

        def backward(g):
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                dx = (invstd / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
                x._accumulate(dx)

        out._backward = backward
        return out

    invstd = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean) * invstd
    out = _make(gamma.data * xhat + beta.data, "batchnorm", (x, gamma, beta))

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if x.requires_grad:
            x._accumulate(g * gamma.data * invstd)

    out._backward = backward
    return out


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects a batch x classes tensor, got {tuple(x.data.shape)}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = _make(s, "softmax", (x,))

    def backward(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=1, keepdims=True)
            x._accumulate(s * (g - dot))

    out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _make(s, "sigmoid", (x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    out._backward = backward
    return out


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under probability rows."""
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects batch x classes, got {tuple(probs.data.shape)}")
    labels = np.asarray(labels)
    n, c = probs.data.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {tuple(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c}): {int(labels[(labels < 0) | (labels >= c)][0])}")
    picked = probs.data[np.arange(n), labels]
    clamped = np.maximum(picked, PROB_CLAMP)
    out = _make(-np.log(clamped).mean(), "ce_loss", (probs,))

    def backward(g):
        if probs.requires_grad:
            dp = np.zeros_like(probs.data)
            live = picked >= PROB_CLAMP  # clamped entries get zero gradient
            dp[np.arange(n)[live], labels[live]] = -float(g) / (n * clamped[live])
            probs._accumulate(dp)

    out._backward = backward
    return out


def bce(probs: Tensor, labels) -> Tensor:
    """Binary cross entropy over sigmoid outputs against 0/1 labels."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    p = probs.data.reshape(-1)
    if labels.shape != p.shape:
        raise DataError(f"expected {p.shape[0]} labels, got {labels.shape[0]}")
    if labels.size and not np.all((labels == 0.0) | (labels == 1.0)):
        raise DataError("bce labels must be 0 or 1")
    n = p.shape[0]
    p1 = np.maximum(p, PROB_CLAMP)
    p0 = np.maximum(1.0 - p, PROB_CLAMP)
    out = _make(-(labels * np.log(p1) + (1.0 - labels) * np.log(p0)).mean(), "bce_loss", (probs,))

    def backward(g):
        if probs.requires_grad:
            dp = np.zeros(n)
            live1 = p >= PROB_CLAMP
            dp[live1] -= labels[live1] / p1[live1]
            live0 = (1.0 - p) >= PROB_CLAMP
            dp[live0] += (1.0 - labels[live0]) / p0[live0]
            probs._accumulate((float(g) / n) * dp.reshape(probs.data.shape))

    out._backward = backward
    return out
