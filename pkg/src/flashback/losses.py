"""Task, stability and plasticity losses and the two phase objectives.

All terms are built on a shared :class:`LossContext` so a composite
objective is one graph: the model forward on each input batch is built
once and reused by every term that needs it.

Masking: a stored reference output (``f_s``, ``o_s``, ``f_p``) may have
fewer classes than the current head.  Comparisons then use the leading
coordinates the reference knows about, so stability losses look at the
``C_{t-1}`` old classes while plasticity losses see all ``C_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import model as mdl
from .autodiff import Graph, Node, evaluate, value_and_gradient
from .knowledge import DistillSnapshot, DynExtractor, DynModule, RegPack, ReplayPack
from .model import ModelParams

DEFAULT_TAU = 2.0
OUTPUT_TARGETS = ("logits", "embeddings", "both")


class LossError(ValueError):
    pass


@dataclass
class Batch:
    """A task minibatch plus, for replay, a minibatch drawn from memory.

    ``memory`` holds indices into the replay pack; ``mem_x``/``mem_y`` the
    corresponding samples.
    """

    x: np.ndarray
    y: np.ndarray
    memory: np.ndarray | None = None
    mem_x: np.ndarray | None = None
    mem_y: np.ndarray | None = None


def memory_batch(x, y, pack: ReplayPack, index) -> Batch:
    index = np.asarray(index, dtype=np.int64)
    return Batch(np.asarray(x), np.asarray(y), index, pack.x[index], pack.y[index])


class LossContext:
    """Graph, parameter nodes and bindings for one model.

    ``flat=True`` makes the whole parameter vector a single leaf ``theta``
    (the per-array nodes are slices of it), so gradients come back as one
    flat vector in canonical order.
    """

    def __init__(self, params: ModelParams, flat: bool = False):
        self.params = params
        self.graph = Graph()
        self.flat = flat
        self._forward: dict[str, tuple[Node, Node]] = {}
        self._inputs: dict[str, np.ndarray] = {}
        self._theta: Node | None = None
        if flat:
            theta = self.graph.leaf("theta")
            self.nodes, pos = {}, 0
            for name, arr in params.named_arrays():
                part = self.graph.slice(theta, pos, pos + arr.size) if arr.size else None
                self.nodes[name] = self.graph.reshape(part, arr.shape) if part is not None else None
                pos += arr.size
            self._theta = theta
            self.wrt = ["theta"]
            self.param_bindings = {"theta": mdl.flatten(params)}
        else:
            self.nodes = mdl.parameter_nodes(self.graph, params)
            self.wrt = params.trainable_names()
            self.param_bindings = {n: params.arrays()[n] for n in self.wrt}

    def bindings(self) -> dict[str, np.ndarray]:
        return {**self.param_bindings, **self._inputs}

    def forward(self, key: str, x) -> tuple[Node, Node]:
        """``(z, o)`` nodes for input ``x``; built once per key."""
        if key not in self._forward:
            self._inputs["in:" + key] = np.asarray(x, dtype=np.float64)
            xn = self.graph.leaf("in:" + key)
            self._forward[key] = mdl.build_forward(self.graph, xn, self.params, self.nodes)
        return self._forward[key]

    def theta(self) -> Node:
        """Flat parameter vector node in canonical order."""
        if self._theta is None:
            g = self.graph
            parts = [g.reshape(self.nodes[n], (a.size,)) for n, a in self.params.named_arrays() if a.size]
            self._theta = g.concat(parts)
        return self._theta

    def value(self, node: Node) -> float:
        return float(evaluate(self.graph, self.bindings(), node))

    def value_and_grad(self, node: Node) -> tuple[float, dict[str, np.ndarray]]:
        return value_and_gradient(self.graph, self.bindings(), self.wrt, node)


@dataclass
class LossTerm:
    kind: str
    category: str | None
    value: float
    ctx: LossContext = field(repr=False)
    node: Node = field(repr=False)
    parts: dict[str, Node] = field(default_factory=dict, repr=False)

    @property
    def graph(self) -> Graph:
        return self.ctx.graph

    def gradient(self) -> dict[str, np.ndarray]:
        return self.ctx.value_and_grad(self.node)[1]

    def part_values(self) -> dict[str, float]:
        return {k: self.ctx.value(n) for k, n in self.parts.items()}


# -- building blocks ------------------------------------------------------------------


def _check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LossError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y


def _ce_sum(ctx: LossContext, o: Node, y) -> Node:
    g = ctx.graph
    onehot = np.eye(ctx.params.n_classes)[y]
    return -g.sum(g.mul(g.const(onehot), g.log(g.softmax(o))))


def _prefix(g: Graph, node: Node, width: int, full: int) -> Node:
    if width > full:
        raise LossError(f"reference has {width} outputs but the model only {full}")
    return node if width == full else g.slice(node, 0, width)


def _mse(ctx: LossContext, out: Node, target: np.ndarray, full: int) -> Node:
    """Batch mean of ``0.5 * ||out[:, :w] - target||^2``."""
    g = ctx.graph
    target = np.asarray(target, dtype=np.float64)
    diff = _prefix(g, out, target.shape[-1], full) - g.const(target)
    return g.scale(g.sum(g.squared_norm(diff)), 0.5 / target.shape[0])


def _soft_ce(ctx: LossContext, o: Node, ref_logits: np.ndarray, tau: float) -> Node:
    """``-mean_x softmax(ref/tau)^T log softmax(o[:, :w]/tau)``."""
    g = ctx.graph
    ref_logits = np.asarray(ref_logits, dtype=np.float64)
    target = np.exp(ref_logits / tau - np.max(ref_logits / tau, axis=-1, keepdims=True))
    target /= target.sum(axis=-1, keepdims=True)
    head = _prefix(g, o, ref_logits.shape[-1], ctx.params.n_classes)
    return g.scale(g.sum(g.mul(g.const(target), g.log(g.softmax(head, tau)))), -1.0 / ref_logits.shape[0])


def _quadratic(ctx: LossContext, theta_ref: np.ndarray, fisher) -> Node:
    """``0.5 (theta - ref)^T F (theta - ref)`` over the first ``len(ref)`` coordinates."""
    g = ctx.graph
    width = theta_ref.size
    theta = ctx.theta()
    total = ctx.params.n_params
    d = _prefix(g, theta, width, total) - g.const(theta_ref)
    if fisher.mode == "diag":
        fd = g.mul(g.const(fisher.values), d)
    else:
        fd = g.affine(d, g.const(fisher.values))
    return g.scale(g.sum(g.mul(d, fd)), 0.5)


def _output_match(ctx, z: Node, o: Node, logits, embeds, output: str) -> Node:
    if output not in OUTPUT_TARGETS:
        raise LossError(f"output target must be one of {OUTPUT_TARGETS}, got {output!r}")
    terms = []
    if output in ("logits", "both"):
        terms.append(_mse(ctx, o, logits, ctx.params.n_classes))
    if output in ("embeddings", "both"):
        terms.append(_mse(ctx, z, embeds, ctx.params.embed_dim))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def _task_node(ctx: LossContext, batch: Batch) -> Node:
    g = ctx.graph
    C = ctx.params.n_classes
    y = _check_labels(batch.y, C)
    _, o = ctx.forward("task", batch.x)
    total, count = _ce_sum(ctx, o, y), len(y)
    if batch.mem_x is not None and len(batch.mem_x):
        my = _check_labels(batch.mem_y, C)
        _, om = ctx.forward("memory", batch.mem_x)
        total, count = total + _ce_sum(ctx, om, my), count + len(my)
    if count == 0:
        raise LossError("empty batch")
    return g.scale(total, 1.0 / count)


def _reference_node(ctx: LossContext, category: str, ref, batch: Batch, tau: float, output: str,
                    role: str) -> Node:
    """Shared body of the stability and plasticity losses."""
    expected = {
        "distill": (DistillSnapshot,),
        "replay": (ReplayPack,),
        "reg": (RegPack,),
        "dyn": (DynExtractor,) if role == "stability" else (DynModule,),
    }
    if category not in expected:
        raise LossError(f"unknown category {category!r}")
    if not isinstance(ref, expected[category]):
        raise LossError(f"{role} loss for {category!r} got {type(ref).__name__}")
    if category == "reg":
        if ref.theta.size > ctx.params.n_params:
            raise LossError("reference parameter vector is longer than the model's")
        return _quadratic(ctx, ref.theta, ref.fisher.padded(ref.theta.size))
    if category == "replay":
        if batch.memory is None or len(batch.memory) == 0:
            raise LossError("replay loss needs a nonempty memory batch")
        idx = np.asarray(batch.memory, dtype=np.int64)
        z, o = ctx.forward("memory", ref.x[idx])
        return _output_match(ctx, z, o, ref.logits[idx], ref.embeddings[idx], output)
    z, o = ctx.forward("task", batch.x)
    ref_params = ref.model.params
    if category == "distill":
        rz = mdl.features(batch.x, ref_params)
        return _output_match(ctx, z, o, mdl.classify(rz, ref_params), rz, output)
    if not tau > 0:
        raise LossError(f"temperature must be positive, got {tau}")
    return _soft_ce(ctx, o, mdl.logits(batch.x, ref_params), tau)


# -- public terms -------------------------------------------------------------------------


def task_loss(params: ModelParams, batch: Batch, ctx: LossContext | None = None) -> LossTerm:
    """Mean softmax cross-entropy over the task batch (and the memory batch, if any)."""
    ctx = ctx or LossContext(params)
    node = _task_node(ctx, batch)
    return LossTerm("task", None, ctx.value(node), ctx, node)


def stability_loss(category: str, params: ModelParams, S, batch: Batch, *, tau: float = DEFAULT_TAU,
                   output: str = "logits", ctx: LossContext | None = None) -> LossTerm:
    ctx = ctx or LossContext(params)
    node = _reference_node(ctx, category, S, batch, tau, output, "stability")
    return LossTerm("stability", category, ctx.value(node), ctx, node)


def plasticity_loss(category: str, params: ModelParams, P, batch: Batch, *, tau: float = DEFAULT_TAU,
                    output: str = "logits", ctx: LossContext | None = None) -> LossTerm:
    ctx = ctx or LossContext(params)
    node = _reference_node(ctx, category, P, batch, tau, output, "plasticity")
    return LossTerm("plasticity", category, ctx.value(node), ctx, node)


def build_objective(ctx: LossContext, category: str, batch: Batch, S=None, P=None, alpha_s: float = 0.0,
                    alpha_p: float = 0.0, tau: float = DEFAULT_TAU, output: str = "logits") -> tuple[Node, dict]:
    """Graph node for ``L_c + alpha_s L_s [+ alpha_p L_p]`` plus the term nodes.

    A term is left out when its knowledge base is absent (first task) or,
    for the plasticity term, when ``alpha_p == 0``; with ``alpha_s == 0``
    the stability term stays in the graph with weight zero.
    """
    if alpha_s < 0 or alpha_p < 0:
        raise LossError("loss weights must be non-negative")
    g = ctx.graph
    parts = {"task": _task_node(ctx, batch)}
    total = parts["task"]
    if S is not None:
        parts["stability"] = _reference_node(ctx, category, S, batch, tau, output, "stability")
        total = total + g.scale(parts["stability"], alpha_s)
    if P is not None and alpha_p != 0.0:
        parts["plasticity"] = _reference_node(ctx, category, P, batch, tau, output, "plasticity")
        total = total + g.scale(parts["plasticity"], alpha_p)
    return total, parts


def phase1_objective(category: str, params: ModelParams, batch: Batch, S, alpha_s: float, *,
                     tau: float = DEFAULT_TAU, output: str = "logits", ctx: LossContext | None = None) -> LossTerm:
    """``L_1 = L_c + alpha_s L_s``; just ``L_c`` when there is no stable knowledge yet."""
    ctx = ctx or LossContext(params)
    node, parts = build_objective(ctx, category, batch, S, None, alpha_s, 0.0, tau, output)
    return LossTerm("objective", category, ctx.value(node), ctx, node, parts)


def phase2_objective(category: str, params: ModelParams, batch: Batch, S, P, alpha_s: float, alpha_p: float, *,
                     tau: float = DEFAULT_TAU, output: str = "logits", ctx: LossContext | None = None) -> LossTerm:
    """``L_2 = L_c + alpha_s L_s + alpha_p L_p``."""
    ctx = ctx or LossContext(params)
    node, parts = build_objective(ctx, category, batch, S, P, alpha_s, alpha_p, tau, output)
    return LossTerm("objective", category, ctx.value(node), ctx, node, parts)


def cosine_equivalence_check(f, f_s) -> tuple[float, float]:
    """``(1 - <f/|f|, f_s/|f_s|>, 0.5 * ||f/|f| - f_s/|f_s|||^2)``; equal for nonzero inputs."""
    f = np.asarray(f, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    nf, ns = np.linalg.norm(f), np.linalg.norm(f_s)
    if nf == 0 or ns == 0:
        raise LossError("cosine comparison of a zero vector")
    u, v = f / nf, f_s / ns
    return 1.0 - float(u @ v), 0.5 * float(np.sum((u - v) ** 2))


def term_values(ctx: LossContext, parts: Mapping[str, Node]) -> dict[str, float]:
    return {k: ctx.value(n) for k, n in parts.items()}
