"""Reverse-mode automatic differentiation on an append-only tape.

Every node holds a float64 ``numpy`` value (0-d for scalars, 1-d/2-d for
batched quantities).  Binary element-wise ops require equal shapes; there
is no general broadcasting.  Constants enter through ``scale`` / ``shift``
and through the ``constants`` slot of :meth:`Tape.record`.

Subgradient convention: ``d|x|/dx`` and ``d relu(x)/dx`` are 0 at ``x = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class UsageError(ValueError):
    """Raised for structurally invalid graph construction."""


class NumericError(ArithmeticError):
    """Raised when an operation produces a non-finite value."""


# -- op table ---------------------------------------------------------------
# forward(values, constants) -> value
# vjp(g, values, out, constants) -> tuple of input cotangents


def _same_shape(op, values):
    s = values[0].shape
    for v in values[1:]:
        if v.shape != s:
            raise UsageError(f"{op}: shape mismatch {s} vs {v.shape}")


def _fwd_affine(vals, consts):
    x, w, b = vals
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise UsageError(f"affine: incompatible shapes x{x.shape} W{w.shape} b{b.shape}")
    return x @ w + b


def _vjp_affine(g, vals, out, consts):
    x, w, _ = vals
    if x.ndim == 1:
        return g @ w.T, np.outer(x, g), g
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _fwd_column(vals, consts):
    (x,) = vals
    return x[:, consts[0]].copy()


def _vjp_column(g, vals, out, consts):
    gx = np.zeros_like(vals[0])
    gx[:, consts[0]] = g
    return (gx,)


def _fwd_embed(vals, consts):
    # write the input as column j of a constant template
    (x,) = vals
    template, j = consts
    if template.ndim != 2 or template.shape[0] != x.shape[0] or x.ndim != 1:
        raise UsageError("embed_column: template must be (n, k) and input (n,)")
    out = np.array(template, dtype=np.float64, copy=True)
    out[:, j] = x
    return out


def _vjp_embed(g, vals, out, consts):
    return (g[:, consts[1]].copy(),)


def _fwd_scale(vals, consts):
    (x,) = vals
    c = np.asarray(consts[0], dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise UsageError(f"scale: constant shape {c.shape} would change {x.shape}")
    return x * c


def _fwd_shift(vals, consts):
    (x,) = vals
    c = np.asarray(consts[0], dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise UsageError(f"shift: constant shape {c.shape} would change {x.shape}")
    return x + c


def _vjp_slice(g, vals, out, consts):
    gx = np.zeros_like(vals[0])
    gx[consts[0] : consts[1]] = g
    return (gx,)


_OPS: dict[str, tuple[Callable, Callable, int | None]] = {
    "add": (lambda v, c: v[0] + v[1], lambda g, v, o, c: (g, g), 2),
    "sub": (lambda v, c: v[0] - v[1], lambda g, v, o, c: (g, -g), 2),
    "mul": (lambda v, c: v[0] * v[1], lambda g, v, o, c: (g * v[1], g * v[0]), 2),
    "div": (
        lambda v, c: v[0] / v[1],
        lambda g, v, o, c: (g / v[1], -g * v[0] / (v[1] * v[1])),
        2,
    ),
    "neg": (lambda v, c: -v[0], lambda g, v, o, c: (-g,), 1),
    "relu": (
        lambda v, c: np.maximum(v[0], 0.0),
        lambda g, v, o, c: (g * (v[0] > 0.0),),
        1,
    ),
    "abs": (lambda v, c: np.abs(v[0]), lambda g, v, o, c: (g * np.sign(v[0]),), 1),
    "square": (lambda v, c: v[0] * v[0], lambda g, v, o, c: (2.0 * v[0] * g,), 1),
    "sum": (lambda v, c: np.sum(v[0]), lambda g, v, o, c: (np.full_like(v[0], g),), 1),
    "mean": (
        lambda v, c: np.mean(v[0]),
        lambda g, v, o, c: (np.full_like(v[0], g / v[0].size),),
        1,
    ),
    "scale": (_fwd_scale, lambda g, v, o, c: (g * np.asarray(c[0]),), 1),
    "shift": (_fwd_shift, lambda g, v, o, c: (g,), 1),
    "affine": (_fwd_affine, _vjp_affine, 3),
    "column": (_fwd_column, _vjp_column, 1),
    "embed_column": (_fwd_embed, _vjp_embed, 1),
    "slice": (lambda v, c: v[0][c[0] : c[1]].copy(), _vjp_slice, 1),
    "reshape": (lambda v, c: v[0].reshape(c[0]), lambda g, v, o, c: (g.reshape(v[0].shape),), 1),
}

_ELEMENTWISE_BINARY = {"add", "sub", "mul", "div"}
KINK_OPS = ("relu", "abs")


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    constants: tuple = ()


@dataclass
class Tape:
    """Append-only computation record.  One tape per rollout."""

    nodes: list[_Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError("leaf: non-finite value")
        self.nodes.append(_Node("leaf", ()))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    def record(self, op_kind: str, inputs: Sequence["Var"], constants: Sequence = ()) -> "Var":
        try:
            fwd, _, arity = _OPS[op_kind]
        except KeyError:
            raise UsageError(f"unknown op {op_kind!r}") from None
        if arity is not None and len(inputs) != arity:
            raise UsageError(f"{op_kind}: expected {arity} inputs, got {len(inputs)}")
        for v in inputs:
            if not isinstance(v, Var):
                raise UsageError(f"{op_kind}: inputs must be Var, got {type(v).__name__}")
            if v.tape is not self:
                raise UsageError(f"{op_kind}: input lives on a different tape")
        vals = [self.values[v.index] for v in inputs]
        if op_kind in _ELEMENTWISE_BINARY:
            _same_shape(op_kind, vals)
        with np.errstate(all="ignore"):
            out = np.asarray(fwd(vals, tuple(constants)), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{op_kind}: non-finite result")
        self.nodes.append(_Node(op_kind, tuple(v.index for v in inputs), tuple(constants)))
        self.values.append(out)
        return Var(self, len(self.nodes) - 1)

    def backward(self, output: "Var") -> "Gradients":
        """Cotangents of ``output`` with respect to every node on the tape."""
        if output.tape is not self:
            raise UsageError("backward: output lives on a different tape")
        out_val = self.values[output.index]
        if out_val.size != 1:
            raise UsageError(f"backward: output must be scalar, got shape {out_val.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = np.ones_like(out_val)
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.op == "leaf":
                continue
            vals = [self.values[j] for j in node.inputs]
            contribs = _OPS[node.op][1](g, vals, self.values[i], node.constants)
            for j, c in zip(node.inputs, contribs):
                c = np.asarray(c, dtype=np.float64).reshape(self.values[j].shape)
                grads[j] = c if grads[j] is None else grads[j] + c
        return Gradients(self, grads)

    def flop_count(self) -> int:
        """Forward multiply-adds: ``rows * fan_in * fan_out`` per affine, one per element otherwise."""
        total = 0
        for node, val in zip(self.nodes, self.values):
            if node.op == "affine":
                w = self.values[node.inputs[1]]
                total += val.shape[0] * w.size if val.ndim > 1 else w.size
            elif node.op != "leaf":
                total += val.size
        return total

    def kink_margin(self) -> float:
        """Smallest |argument| seen by any relu/abs node (inf if none)."""
        m = np.inf
        for node in self.nodes:
            if node.op in KINK_OPS:
                arg = self.values[node.inputs[0]]
                if arg.size:
                    m = min(m, float(np.min(np.abs(arg))))
        return m


class Gradients:
    """Node-indexed gradient map; nodes off every path to the output read 0."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        i = key.index if isinstance(key, Var) else int(key)
        g = self._grads[i]
        return np.zeros_like(self._tape.values[i]) if g is None else g

    def __len__(self):
        return len(self._grads)


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "index")
    # keep numpy from broadcasting over Var elementwise; defer to our reflected ops
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.value!r}, index={self.index})"

    def _binary(self, other, op, const_op):
        if isinstance(other, Var):
            return self.tape.record(op, [self, other])
        return const_op(other)

    def __add__(self, other):
        return self._binary(other, "add", lambda c: self.tape.record("shift", [self], [c]))

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(
            other, "sub", lambda c: self.tape.record("shift", [self], [-np.asarray(c)])
        )

    def __rsub__(self, other):
        neg = self.tape.record("neg", [self])
        return neg.tape.record("shift", [neg], [np.asarray(other)])

    def __mul__(self, other):
        return self._binary(other, "mul", lambda c: self.tape.record("scale", [self], [c]))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.tape.record("div", [self, other])
        return self.tape.record("scale", [self], [1.0 / np.asarray(other, dtype=np.float64)])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __abs__(self):
        return self.tape.record("abs", [self])


# -- generic helpers working on both Var and plain arrays --------------------


def relu(x):
    if isinstance(x, Var):
        return x.tape.record("relu", [x])
    return np.maximum(x, 0.0)


def square(x):
    if isinstance(x, Var):
        return x.tape.record("square", [x])
    return x * x


def affine(x, w, b):
    if isinstance(x, Var) or isinstance(w, Var):
        tape = x.tape if isinstance(x, Var) else w.tape
        ins = [v if isinstance(v, Var) else tape.leaf(v) for v in (x, w, b)]
        return tape.record("affine", ins)
    return x @ w + b


def mean(x):
    if isinstance(x, Var):
        return x.tape.record("mean", [x])
    return np.mean(x)


def column(x, j: int):
    if isinstance(x, Var):
        return x.tape.record("column", [x], [j])
    return x[:, j].copy()


def embed_column(template: np.ndarray, x, j: int):
    """``template`` with column ``j`` replaced by ``x`` (differentiable in ``x``)."""
    if isinstance(x, Var):
        return x.tape.record("embed_column", [x], [template, j])
    out = np.array(template, dtype=np.float64, copy=True)
    out[:, j] = x
    return out


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# -- verification --------------------------------------------------------------


def grad_check(f: Callable[[Var], Var], point, eps: float = 1e-5) -> float:
    """Max relative error between AD and central differences.

    ``f`` maps a 1-d leaf ``Var`` to a scalar ``Var``.  The point must sit
    at least ``eps`` away from every relu/abs kink of ``f``.
    """
    point = np.array(point, dtype=np.float64).ravel()
    tape = Tape()
    x = tape.leaf(point)
    ad = tape.backward(f(x))[x]

    def evaluate(p):
        t = Tape()
        return float(f(t.leaf(p)).value)

    worst = 0.0
    for i in range(point.size):
        hi = point.copy()
        lo = point.copy()
        hi[i] += eps
        lo[i] -= eps
        fd = (evaluate(hi) - evaluate(lo)) / (2.0 * eps)
        worst = max(worst, abs(ad[i] - fd) / (abs(fd) + 1e-12))
    return worst
