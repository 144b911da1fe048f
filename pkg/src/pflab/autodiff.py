"""A small reverse-mode automatic differentiation engine over dense numpy arrays.

Only the primitives the surrogate models need are provided: matrix products
(with batch broadcasting), row-wise bias, ReLU, a channels-last 1-D
convolution, reshape, elementwise add/mul, sum and the MSE loss. Each op
records its parents and a backward closure; :class:`Tape` orders the recorded
graph and replays the closures in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NotScalar, ShapeMismatch

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the leading axes that broadcasting added."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b) -> Tensor:
    """``a @ b`` for operands of rank >= 2, broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def add_bias(a, bias) -> Tensor:
    """Add a vector to every row (the last axis) of ``a``."""
    a, bias = as_tensor(a), as_tensor(bias)
    if bias.data.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeMismatch(f"bias of shape {bias.shape} does not fit rows of {a.shape}")
    out = a.data + bias.data

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return (g if a.requires_grad else None), gb

    return _result(out, (a, bias), backward, "add_bias")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return _result(out, (a,), lambda g: (g * mask,), "relu")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add operands differ: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul operands differ: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g),), "sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-padded 1-D cross-correlation along axis 1 of a ``(batch, length, in)`` input.

    ``weight`` has shape ``(kernel, in, out)`` with an odd kernel size;
    ``out[n] = sum_k x[n + k - kernel // 2] @ weight[k]`` with zero padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise ShapeMismatch(f"conv1d expects (B, L, C) input and (K, C, O) weight, got {x.shape}, {weight.shape}")
    ksize, c_in, c_out = weight.shape
    if ksize % 2 != 1 or x.shape[2] != c_in:
        raise ShapeMismatch(f"conv1d weight {weight.shape} incompatible with input {x.shape}")
    batch, length, _ = x.shape
    pad = ksize // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = np.concatenate([xp[:, k : k + length, :] for k in range(ksize)], axis=2)
    w2 = weight.data.reshape(ksize * c_in, c_out)
    out = cols @ w2

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = (cols.reshape(-1, ksize * c_in).T @ g.reshape(-1, c_out)).reshape(weight.shape)
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(batch, length, ksize, c_in)
            gxp = np.zeros_like(xp)
            for k in range(ksize):
                gxp[:, k : k + length, :] += gcols[:, :, k, :]
            gx = gxp[:, pad : pad + length, :]
        return gx, gw

    result = _result(out, (x, weight), backward, "conv1d")
    return add_bias(result, bias) if bias is not None else result


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return _result(np.array(np.mean(diff * diff)), (pred, target), backward, "mse")


class Tape:
    """The recorded operations reachable from a scalar output, in forward order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, output: Tensor) -> None:
        grads = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad += g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf ``t`` that requires it."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar output, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad += 1.0
        return
    Tape.record(loss).backward(loss)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    root_c2 = np.sqrt(1.0 - b2**state.t)
    # lr * (m / c1) / (sqrt(v / c2) + eps) with the corrections folded into scalars
    step = state.lr * root_c2 / c1
    eps_hat = state.eps * root_c2
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        g *= g
        v *= b2
        v += (1.0 - b2) * g
        denom = np.sqrt(v)
        denom += eps_hat
        np.divide(m, denom, out=denom)
        denom *= step
        p.data -= denom
        g.fill(0.0)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
