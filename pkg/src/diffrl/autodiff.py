"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every op evaluates eagerly and appends a node to the graph, so node order is
a valid topological order by construction. ``forward_backward`` then sweeps
the tape in reverse and accumulates vector-Jacobian products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: VJP | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _as_array(x) -> np.ndarray:
    return np.array(x, dtype=np.float64, copy=True)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Graph:
    """Computation tape. One graph per loss evaluation; not shared across threads."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _push(self, op: str, inputs: Sequence[Node], value: np.ndarray, vjp: VJP | None) -> Node:
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), value, vjp)
        self.nodes.append(node)
        return node

    # leaves -------------------------------------------------------------
    def leaf(self, value) -> Node:
        return self._push("leaf", (), _as_array(value), None)

    def const(self, value) -> Node:
        return self._push("const", (), _as_array(value), None)

    # elementwise binary -------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        _same_shape("add", a, b)
        return self._push("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape("sub", a, b)
        return self._push("sub", (a, b), a.value - b.value, lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        _same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._push("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def minimum(self, a: Node, b: Node) -> Node:
        """Elementwise min; ties route the gradient to ``a``."""
        _same_shape("minimum", a, b)
        pick_a = a.value <= b.value
        out = np.where(pick_a, a.value, b.value)
        return self._push("minimum", (a, b), out, lambda g: (g * pick_a, g * ~pick_a))

    # unary / scalar -----------------------------------------------------
    def neg(self, a: Node) -> Node:
        return self._push("neg", (a,), -a.value, lambda g: (-g,))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("scale", (a,), a.value * c, lambda g: (g * c,))

    def add_scalar(self, a: Node, c: float) -> Node:
        return self._push("add_scalar", (a,), a.value + float(c), lambda g: (g,))

    def square(self, a: Node) -> Node:
        av = a.value
        return self._push("square", (a,), av * av, lambda g: (2.0 * g * av,))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._push("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._push("exp", (a,), out, lambda g: (g * out,))

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        inside = (a.value > lo) & (a.value < hi)
        out = np.clip(a.value, lo, hi)
        return self._push("clip", (a,), out, lambda g: (g * inside,))

    # linear algebra -----------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self._push("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def add_row(self, a: Node, row: Node) -> Node:
        """(n, k) + (k,) broadcast over rows."""
        if a.value.ndim != 2 or row.shape != (a.shape[1],):
            raise ShapeError(f"add_row: shape mismatch {a.shape} vs {row.shape}")
        return self._push("add_row", (a, row), a.value + row.value, lambda g: (g, g.sum(axis=0)))

    def mul_col(self, a: Node, col: Node) -> Node:
        """(n, k) * (n,) broadcast over columns."""
        if a.value.ndim != 2 or col.shape != (a.shape[0],):
            raise ShapeError(f"mul_col: shape mismatch {a.shape} vs {col.shape}")
        av, cv = a.value, col.value
        return self._push(
            "mul_col", (a, col), av * cv[:, None], lambda g: (g * cv[:, None], (g * av).sum(axis=1))
        )

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        rows = {p.shape[0] for p in parts}
        if any(p.value.ndim != 2 for p in parts) or len(rows) != 1:
            raise ShapeError(f"concat_cols: shape mismatch {[p.shape for p in parts]}")
        widths = [p.shape[1] for p in parts]
        splits = np.cumsum(widths)[:-1]
        out = np.concatenate([p.value for p in parts], axis=1)
        return self._push("concat_cols", parts, out, lambda g: tuple(np.split(g, splits, axis=1)))

    # reductions ---------------------------------------------------------
    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._push("sum", (a,), np.array(a.value.sum()), lambda g: (np.full(shape, float(g)),))

    def mean(self, a: Node) -> Node:
        n = a.value.size
        if n == 0:
            raise ShapeError("mean: empty input")
        return self.scale(self.sum(a), 1.0 / n)

    def sum_cols(self, a: Node) -> Node:
        """Row-wise sum, (n, k) -> (n,)."""
        if a.value.ndim != 2:
            raise ShapeError(f"sum_cols: expected 2-D input, got {a.shape}")
        k = a.shape[1]
        return self._push("sum_cols", (a,), a.value.sum(axis=1), lambda g: (np.repeat(g[:, None], k, axis=1),))


def forward_backward(graph: Graph, output: Node | int) -> tuple[float, dict[int, np.ndarray]]:
    """Return the scalar value of ``output`` and d(output)/d(leaf) for every leaf."""
    out = graph.nodes[output] if isinstance(output, int) else output
    if out.value.size != 1:
        raise ContractError(f"output node {out.id} is not scalar (shape {out.shape})")
    grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
    for node in reversed(graph.nodes[: out.id + 1]):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    leaf_grads = {}
    for node in graph.nodes:
        if node.op == "leaf":
            leaf_grads[node.id] = np.asarray(grads.get(node.id, np.zeros_like(node.value)), dtype=np.float64)
    return float(out.value.reshape(())), leaf_grads
