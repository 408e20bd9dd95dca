"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is a symbolic expression built from a fixed set of
primitives.  Leaves are named slots that receive arrays at evaluation time
through a ``bindings`` mapping; constants are embedded in the graph.

>>> g = Graph()
>>> x = g.leaf("x")
>>> c = g.const([0.0, 0.0])
>>> g.output = 0.5 * g.squared_norm(x - c)
>>> float(evaluate(g, {"x": np.array([1.0, 2.0])}))
2.5
>>> gradient(g, {"x": np.array([1.0, 2.0])}, ["x"])["x"]
array([1., 2.])

Row-wise primitives (softmax, l2-normalize, squared-norm, concat, slice)
act on the last axis, so a batch is an ``(n, d)`` matrix and a single
sample a ``(d,)`` vector.  Broadcasting is limited to the bias of
``affine`` and to scalar ``scale``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "UnboundLeafError",
    "Graph",
    "Node",
    "evaluate",
    "gradient",
    "value_and_gradient",
    "finite_diff_gradient",
]


class AutodiffError(ValueError):
    """Base class for graph construction and evaluation failures."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError, ArithmeticError):
    pass


class UnboundLeafError(AutodiffError, KeyError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Node:
    """Handle to one operation in a :class:`Graph`.

    Arithmetic operators build new nodes: ``a + b``, ``a - b``, ``a * b``
    (elementwise, equal shapes), ``-a``, and ``c * a`` / ``a * c`` with a
    Python scalar ``c`` (``scale``).
    """

    __slots__ = ("graph", "index", "op", "inputs", "attrs")

    def __init__(self, graph: "Graph", index: int, op: str, inputs: tuple, attrs: dict):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs

    def __repr__(self) -> str:
        label = self.attrs.get("name")
        tag = f" {label!r}" if label is not None else ""
        return f"<Node #{self.index} {self.op}{tag}>"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, other)

    def __rmul__(self, other):
        return self.graph.scale(self, other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)


class Graph:
    """Append-only expression graph; node order is a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self._output: Node | None = None

    # -- construction -----------------------------------------------------

    def _add(self, op: str, inputs: Sequence[Node], **attrs) -> Node:
        for node in inputs:
            if not isinstance(node, Node) or node.graph is not self:
                raise AutodiffError(f"{op}: operand {node!r} does not belong to this graph")
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs)
        self.nodes.append(node)
        return node

    @property
    def output(self) -> Node:
        if self._output is not None:
            return self._output
        if not self.nodes:
            raise AutodiffError("empty graph has no output")
        return self.nodes[-1]

    @output.setter
    def output(self, node: Node) -> None:
        if node.graph is not self:
            raise AutodiffError("output node belongs to another graph")
        self._output = node

    def leaf(self, name: str) -> Node:
        """Named input slot; asking twice for the same name returns the same node."""
        if name in self.leaves:
            return self.leaves[name]
        node = self._add("leaf", (), name=name)
        self.leaves[name] = node
        return node

    def const(self, value, name: str | None = None) -> Node:
        arr = _as_array(value).copy()
        arr.setflags(write=False)
        return self._add("const", (), value=arr, name=name)

    def affine(self, x: Node, weight: Node, bias: Node | None = None) -> Node:
        """``x @ weight.T + bias`` for ``x`` of shape (d_in,) or (n, d_in)."""
        inputs = (x, weight) if bias is None else (x, weight, bias)
        return self._add("affine", inputs)

    def relu(self, x: Node) -> Node:
        return self._add("relu", (x,))

    def softmax(self, x: Node, tau: float = 1.0) -> Node:
        if not tau > 0:
            raise AutodiffError(f"softmax temperature must be positive, got {tau}")
        return self._add("softmax", (x,), tau=float(tau))

    def log(self, x: Node) -> Node:
        return self._add("log", (x,))

    def exp(self, x: Node) -> Node:
        return self._add("exp", (x,))

    def add(self, a: Node, b: Node) -> Node:
        return self._add("add", (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        return self._add("sub", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        return self._add("mul", (a, b))

    def scale(self, x: Node, factor: float) -> Node:
        return self._add("scale", (x,), factor=float(factor))

    def l2_normalize(self, x: Node) -> Node:
        return self._add("l2_normalize", (x,))

    def concat(self, parts: Sequence[Node]) -> Node:
        if not parts:
            raise AutodiffError("concat needs at least one operand")
        return self._add("concat", tuple(parts))

    def sum(self, x: Node, axis: int | None = None) -> Node:
        return self._add("sum", (x,), axis=_check_axis(axis))

    def mean(self, x: Node, axis: int | None = None) -> Node:
        return self._add("mean", (x,), axis=_check_axis(axis))

    def squared_norm(self, x: Node) -> Node:
        """Sum of squares over the last axis (a scalar for a vector)."""
        return self._add("squared_norm", (x,))

    def slice(self, x: Node, start: int, stop: int) -> Node:
        """Columns ``start:stop`` of the last axis."""
        if not 0 <= start < stop:
            raise AutodiffError(f"invalid slice [{start}:{stop}]")
        return self._add("slice", (x,), start=int(start), stop=int(stop))

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        return self._add("reshape", (x,), shape=tuple(int(s) for s in shape))


def _check_axis(axis):
    if axis not in (None, -1):
        raise AutodiffError(f"reductions support axis=None or axis=-1, got {axis}")
    return axis


# -- forward kernels ------------------------------------------------------


def _softmax_rows(x: np.ndarray, tau: float) -> np.ndarray:
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _shape_fail(node: Node, detail: str):
    raise ShapeError(f"{node!r}: {detail}")


def _forward(node: Node, args: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "affine":
        x, w = args[0], args[1]
        if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
            _shape_fail(node, f"cannot apply weight {w.shape} to input {x.shape}")
        out = x @ w.T
        if len(args) == 3:
            b = args[2]
            if b.shape != (w.shape[0],):
                _shape_fail(node, f"bias {b.shape} does not match weight {w.shape}")
            out = out + b
        return out
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "softmax":
        if args[0].ndim == 0:
            _shape_fail(node, "softmax of a scalar")
        return _softmax_rows(args[0], node.attrs["tau"])
    if op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(args[0])
    if op == "exp":
        with np.errstate(over="ignore"):
            return np.exp(args[0])
    if op in ("add", "sub", "mul"):
        a, b = args
        if a.shape != b.shape:
            _shape_fail(node, f"operand shapes {a.shape} and {b.shape} differ")
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "scale":
        return node.attrs["factor"] * args[0]
    if op == "l2_normalize":
        x = args[0]
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        if np.any(norm == 0.0):
            raise NonFiniteError(f"{node!r}: l2-normalize of a zero vector")
        return x / norm
    if op == "concat":
        if any(a.ndim == 0 for a in args) or len({a.shape[:-1] for a in args}) != 1:
            _shape_fail(node, f"cannot concatenate shapes {[a.shape for a in args]}")
        return np.concatenate(args, axis=-1)
    if op == "sum":
        return np.sum(args[0], axis=node.attrs["axis"])
    if op == "mean":
        x = args[0]
        if x.size == 0:
            _shape_fail(node, "mean of an empty array")
        return np.mean(x, axis=node.attrs["axis"])
    if op == "squared_norm":
        x = args[0]
        return np.sum(x * x, axis=-1)
    if op == "slice":
        x = args[0]
        start, stop = node.attrs["start"], node.attrs["stop"]
        if x.ndim == 0 or stop > x.shape[-1]:
            _shape_fail(node, f"slice [{start}:{stop}] out of range for {x.shape}")
        return x[..., start:stop]
    if op == "reshape":
        x = args[0]
        shape = node.attrs["shape"]
        if int(np.prod(shape)) != x.size:
            _shape_fail(node, f"cannot reshape {x.shape} to {shape}")
        return x.reshape(shape)
    raise AutodiffError(f"unknown op {op!r}")


def _backward(node: Node, args: list[np.ndarray], out: np.ndarray, g: np.ndarray) -> list:
    op = node.op
    if op == "affine":
        x, w = args[0], args[1]
        gx = g @ w
        gw = np.outer(g, x) if x.ndim == 1 else g.T @ x
        grads = [gx, gw]
        if len(args) == 3:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return grads
    if op == "relu":
        return [g * (args[0] > 0.0)]
    if op == "softmax":
        tau = node.attrs["tau"]
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return [out * (g - inner) / tau]
    if op == "log":
        return [g / args[0]]
    if op == "exp":
        return [g * out]
    if op == "add":
        return [g, g]
    if op == "sub":
        return [g, -g]
    if op == "mul":
        return [g * args[1], g * args[0]]
    if op == "scale":
        return [node.attrs["factor"] * g]
    if op == "l2_normalize":
        x = args[0]
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return [(g - out * inner) / norm]
    if op == "concat":
        grads, col = [], 0
        for a in args:
            width = a.shape[-1]
            grads.append(g[..., col:col + width])
            col += width
        return grads
    if op in ("sum", "mean"):
        x = args[0]
        axis = node.attrs["axis"]
        if axis is None:
            full = np.full(x.shape, g)
            count = x.size
        else:
            full = np.broadcast_to(np.expand_dims(g, -1), x.shape)
            count = x.shape[-1]
        return [full / count if op == "mean" else np.array(full)]
    if op == "squared_norm":
        x = args[0]
        return [2.0 * x * np.expand_dims(g, -1)]
    if op == "slice":
        x = args[0]
        gx = np.zeros_like(x)
        gx[..., node.attrs["start"]:node.attrs["stop"]] = g
        return [gx]
    if op == "reshape":
        return [g.reshape(args[0].shape)]
    raise AutodiffError(f"no backward rule for {op!r}")


# -- evaluation -----------------------------------------------------------


def _needed(graph: Graph, target: Node) -> list[Node]:
    """Nodes the target depends on, in graph (topological) order."""
    keep = np.zeros(len(graph.nodes), dtype=bool)
    keep[target.index] = True
    for node in reversed(graph.nodes[: target.index + 1]):
        if keep[node.index]:
            for arg in node.inputs:
                keep[arg.index] = True
    return [n for n in graph.nodes[: target.index + 1] if keep[n.index]]


def _run_forward(graph: Graph, bindings: Mapping[str, np.ndarray], target: Node):
    order = _needed(graph, target)
    values: dict[int, np.ndarray] = {}
    for node in order:
        if node.op == "leaf":
            name = node.attrs["name"]
            if name not in bindings:
                raise UnboundLeafError(f"leaf {name!r} is not bound")
            val = _as_array(bindings[name])
        elif node.op == "const":
            val = node.attrs["value"]
        else:
            val = _forward(node, [values[a.index] for a in node.inputs])
        if not np.all(np.isfinite(val)):
            raise NonFiniteError(f"{node!r}: non-finite value")
        values[node.index] = val
    return order, values


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray], node: Node | None = None) -> np.ndarray:
    """Forward value of ``node`` (default: the graph output)."""
    target = graph.output if node is None else node
    _, values = _run_forward(graph, bindings, target)
    return values[target.index]


def value_and_gradient(
    graph: Graph,
    bindings: Mapping[str, np.ndarray],
    wrt: Iterable[str],
    node: Node | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar value of ``node`` and its gradient with respect to each leaf in ``wrt``."""
    target = graph.output if node is None else node
    wrt = list(wrt)
    for name in wrt:
        if name not in bindings:
            raise UnboundLeafError(f"leaf {name!r} is not bound")
    order, values = _run_forward(graph, bindings, target)
    out = values[target.index]
    if out.shape != ():
        raise ShapeError(f"{target!r}: gradient needs a scalar output, got shape {out.shape}")

    grads: dict[int, np.ndarray] = {target.index: np.ones(())}
    for n in reversed(order):
        g = grads.pop(n.index, None) if n.op not in ("leaf",) else grads.get(n.index)
        if g is None or n.op in ("leaf", "const"):
            continue
        args = [values[a.index] for a in n.inputs]
        for arg, ga in zip(n.inputs, _backward(n, args, values[n.index], g)):
            if arg.op == "const":
                continue
            prev = grads.get(arg.index)
            grads[arg.index] = ga if prev is None else prev + ga

    result = {}
    for name in wrt:
        leaf = graph.leaves.get(name)
        g = grads.get(leaf.index) if leaf is not None else None
        shape = np.shape(bindings[name])
        result[name] = np.zeros(shape) if g is None else np.array(g, dtype=np.float64).reshape(shape)
    return float(out), result


def gradient(
    graph: Graph,
    bindings: Mapping[str, np.ndarray],
    wrt: Iterable[str],
    node: Node | None = None,
) -> dict[str, np.ndarray]:
    return value_and_gradient(graph, bindings, wrt, node)[1]


def finite_diff_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    point: Mapping[str, np.ndarray],
    h: float = 1e-6,
    wrt: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference estimate ``(f(x+h) - f(x-h)) / 2h`` for every coordinate."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    base = {k: _as_array(v).copy() for k, v in point.items()}
    names = list(base) if wrt is None else list(wrt)
    result = {}
    for name in names:
        arr = base[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(base))
            flat[i] = orig - h
            down = float(f(base))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite objective when perturbing {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * h)
        result[name] = grad
    return result
