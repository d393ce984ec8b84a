"""Tape-based reverse-mode automatic differentiation and the Adam optimizer.

A :class:`Graph` is an append-only list of nodes.  Each node records its
operation, the indices of its operands (always earlier nodes) and its value,
computed eagerly at construction.  Values are NumPy arrays; a 0-d array is a
plain scalar, so scalar expressions and batched ones share one code path.

    g = Graph()
    x = g.input(2.0)
    y = x ** 3
    g.backward(y)   # -> [array(12.)]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "Graph",
    "Var",
    "exp",
    "log",
    "tanh",
    "maximum",
    "minimum",
    "relu",
    "clip",
    "matmul",
    "hstack",
    "AdamState",
    "adam_step",
]


class _Node:
    __slots__ = ("op", "args", "value", "extra", "needs_grad")

    def __init__(self, op, args, value, extra, needs_grad):
        self.op = op
        self.args = args
        self.value = value
        self.extra = extra
        self.needs_grad = needs_grad


class Var:
    """Handle to one node of a graph; supports arithmetic operators."""

    __slots__ = ("graph", "index")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, {self.graph.nodes[self.index].op}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.graph.const(other)

    def __add__(self, other):
        return self.graph._apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph._apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph._apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph._apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph._apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph._apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph._apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph._apply("div", self._lift(other), self)

    def __pow__(self, other):
        return self.graph._apply("pow", self, self._lift(other))

    def __rpow__(self, other):
        return self.graph._apply("pow", self._lift(other), self)

    def __neg__(self):
        return self.graph._apply("neg", self)

    def __matmul__(self, other):
        return self.graph._apply("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.graph._apply("matmul", self._lift(other), self)

    def exp(self):
        return self.graph._apply("exp", self)

    def log(self):
        return self.graph._apply("log", self)

    def tanh(self):
        return self.graph._apply("tanh", self)

    def sum(self, axis: int | None = None):
        return self.graph._apply("sum", self, extra=axis)

    def mean(self, axis: int | None = None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) / float(n)

    def column(self, j: int):
        """Column ``j`` of a 2-D value, kept 2-D (n, 1)."""
        return self.graph._apply("column", self, extra=j)


def exp(x: Var) -> Var:
    return x.exp()


def log(x: Var) -> Var:
    return x.log()


def tanh(x: Var) -> Var:
    return x.tanh()


def maximum(a, b) -> Var:
    """Elementwise max; the gradient goes to ``a`` on ties."""
    g = a.graph if isinstance(a, Var) else b.graph
    return g._apply("max", g._as_var(a), g._as_var(b))


def minimum(a, b) -> Var:
    return -maximum(-_as_var_of(a, b), -_as_var_of(b, a))


def relu(x: Var) -> Var:
    return maximum(x, 0.0)


def clip(x: Var, lo, hi) -> Var:
    return maximum(minimum(x, hi), lo)


def matmul(a, b) -> Var:
    g = a.graph if isinstance(a, Var) else b.graph
    return g._apply("matmul", g._as_var(a), g._as_var(b))


def hstack(parts: list[Var]) -> Var:
    g = parts[0].graph
    return g._apply("hstack", *parts)


def _as_var_of(x, other) -> Var:
    return x if isinstance(x, Var) else other.graph.const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _forward(op: str, vals: list[np.ndarray], extra) -> np.ndarray:
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        if np.any(vals[1] == 0):
            raise DomainError("division by zero")
        return vals[0] / vals[1]
    if op == "neg":
        return -vals[0]
    if op == "exp":
        with np.errstate(over="raise"):
            try:
                return np.exp(vals[0])
            except FloatingPointError:
                raise DomainError("exp overflow") from None
    if op == "log":
        if np.any(vals[0] <= 0):
            raise DomainError("log of a non-positive value")
        return np.log(vals[0])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "max":
        return np.where(vals[0] >= vals[1], vals[0], vals[1])
    if op == "pow":
        base, ex = vals
        if np.any(base < 0) and np.any(ex != np.round(ex)):
            raise DomainError("fractional power of a negative base")
        if np.any((base == 0) & (ex < 0)):
            raise DomainError("negative power of zero")
        return base**ex
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "sum":
        return np.sum(vals[0], axis=extra, keepdims=extra is not None)
    if op == "column":
        return vals[0][:, extra : extra + 1]
    if op == "hstack":
        return np.hstack(vals)
    raise ValueError(f"unknown op {op!r}")


def _vjp(op: str, node: _Node, vals: list[np.ndarray], g: np.ndarray, which: int) -> np.ndarray:
    """Vector-Jacobian product of ``node`` with respect to operand ``which``."""
    y = node.value
    if op == "add":
        return _unbroadcast(g, vals[which].shape)
    if op == "sub":
        return _unbroadcast(g if which == 0 else -g, vals[which].shape)
    if op == "mul":
        return _unbroadcast(g * vals[1 - which], vals[which].shape)
    if op == "div":
        a, b = vals
        if which == 0:
            return _unbroadcast(g / b, a.shape)
        return _unbroadcast(-g * a / (b * b), b.shape)
    if op == "neg":
        return -g
    if op == "exp":
        return g * y
    if op == "log":
        return g / vals[0]
    if op == "tanh":
        return g * (1.0 - y * y)
    if op == "max":
        first = vals[0] >= vals[1]
        mask = first if which == 0 else ~first
        return _unbroadcast(np.where(mask, g, 0.0), vals[which].shape)
    if op == "pow":
        base, ex = vals
        if which == 0:
            return _unbroadcast(g * ex * base ** (ex - 1.0), base.shape)
        safe = np.where(base > 0, base, 1.0)
        return _unbroadcast(np.where(base > 0, g * y * np.log(safe), 0.0), ex.shape)
    if op == "matmul":
        a, b = vals
        return g @ b.T if which == 0 else a.T @ g
    if op == "sum":
        # keepdims on axis sums means g always broadcasts back to the operand
        return np.broadcast_to(g, vals[0].shape).copy()
    if op == "column":
        out = np.zeros_like(vals[0])
        out[:, node.extra : node.extra + 1] = g
        return out
    if op == "hstack":
        start = sum(v.shape[1] for v in vals[:which])
        return g[:, start : start + vals[which].shape[1]]
    raise ValueError(f"unknown op {op!r}")


class Graph:
    """Append-only expression tape (the ExprGraph)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.inputs: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def input(self, value) -> Var:
        """A leaf whose gradient ``backward`` reports."""
        idx = self._push("input", (), np.array(value, dtype=float), None, True)
        self.inputs.append(idx)
        return Var(self, idx)

    def const(self, value) -> Var:
        return Var(self, self._push("const", (), np.asarray(value, dtype=float), None, False))

    def _as_var(self, x) -> Var:
        return x if isinstance(x, Var) else self.const(x)

    def _push(self, op, args, value, extra, needs_grad) -> int:
        self.nodes.append(_Node(op, args, value, extra, needs_grad))
        return len(self.nodes) - 1

    def _apply(self, op: str, *operands: Var, extra=None) -> Var:
        for v in operands:
            if v.graph is not self:
                raise ValueError("operands belong to a different graph")
        args = tuple(v.index for v in operands)
        vals = [self.nodes[i].value for i in args]
        value = np.asarray(_forward(op, vals, extra), dtype=float)
        needs = any(self.nodes[i].needs_grad for i in args)
        return Var(self, self._push(op, args, value, extra, needs))

    def backward(self, output: Var) -> list[np.ndarray]:
        """Gradients of a scalar ``output`` with respect to every input leaf,
        in the order the inputs were created."""
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.args:
                continue
            vals = [self.nodes[j].value for j in node.args]
            for which, j in enumerate(node.args):
                if not self.nodes[j].needs_grad:
                    continue
                contrib = _vjp(node.op, node, vals, g, which)
                grads[j] = contrib if grads[j] is None else grads[j] + contrib
        out = []
        for idx in self.inputs:
            g = grads[idx] if idx < len(grads) else None
            out.append(np.zeros_like(self.nodes[idx].value) if g is None else np.asarray(g))
        return out


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int | tuple[int, ...], **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, learning_rate: float | None = None
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, never mutates."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    if not (0 < state.beta1 < 1 and 0 < state.beta2 < 1):
        raise ValueError("beta1 and beta2 must lie in (0, 1)")
    lr = state.learning_rate if learning_rate is None else learning_rate
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return new_params, new_state
