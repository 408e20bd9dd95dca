"""Stable and plastic knowledge bases, Fisher information, replay memory.

Each host category keeps one kind of knowledge record.  The stable record
``S`` is extracted from the model at the end of a task; the plastic record
``P`` is extracted from the Phase-1 primary model and always has the same
kind (and the same memory footprint) as the ``S`` it pairs with.

========  =====================  =====================  =========
category  stable                 plastic                units
========  =====================  =====================  =========
distill   model snapshot         model snapshot         1 model
replay    memory logits/embeds   memory logits/embeds   |memory|
reg       theta + Fisher         theta + Fisher         2 vectors
dyn       stable extractor       trained new module     1 module
========  =====================  =====================  =========
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import numpy as np

from . import model as mdl
from .autodiff import Graph, value_and_gradient
from .model import ModelParams, ModelSnapshot
from .tasks import Sample

CATEGORIES = ("distill", "replay", "reg", "dyn")


def _readonly(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


# -- Fisher information ----------------------------------------------------------


@dataclass(frozen=True)
class FisherMatrix:
    """Diagonal (vector) or full (P x P) importance matrix over a flat parameter vector."""

    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in ("diag", "full"):
            raise ValueError(f"unknown Fisher mode {self.mode!r}")
        vals = _readonly(self.values)
        if self.mode == "diag" and vals.ndim != 1:
            raise ValueError("diagonal Fisher must be a vector")
        if self.mode == "full" and (vals.ndim != 2 or vals.shape[0] != vals.shape[1]):
            raise ValueError("full Fisher must be square")
        object.__setattr__(self, "values", vals)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def dense(self) -> np.ndarray:
        return np.diag(self.values) if self.mode == "diag" else np.array(self.values)

    def padded(self, size: int) -> "FisherMatrix":
        """Zero importance for coordinates appended after the first ``self.size``."""
        if size < self.size:
            raise ValueError(f"cannot pad Fisher of size {self.size} down to {size}")
        if size == self.size:
            return self
        if self.mode == "diag":
            return FisherMatrix("diag", np.concatenate([self.values, np.zeros(size - self.size)]))
        out = np.zeros((size, size))
        out[: self.size, : self.size] = self.values
        return FisherMatrix("full", out)

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.values * v if self.mode == "diag" else self.values @ v

    def quadratic(self, v) -> float:
        """``0.5 * v^T F v``."""
        return 0.5 * float(np.dot(v, self.matvec(v)))


def _log_likelihood_graph(params: ModelParams):
    g = Graph()
    nodes = mdl.parameter_nodes(g, params)
    x = g.leaf("x")
    onehot = g.leaf("onehot")
    _, o = mdl.build_forward(g, x, params, nodes)
    g.output = g.sum(g.mul(onehot, g.log(g.softmax(o))))
    return g


def per_sample_log_likelihood_grads(params: ModelParams, x, y, names: Sequence[str] | None = None) -> np.ndarray:
    """Rows are ``grad_theta log p(y_i | x_i)`` flattened in ``names`` order."""
    names = list(params.trainable_names()) if names is None else list(names)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("Fisher estimation needs at least one sample")
    if y.min() < 0 or y.max() >= params.n_classes:
        raise ValueError(f"labels must lie in [0, {params.n_classes})")
    graph = _log_likelihood_graph(params)
    bindings = params.arrays()
    rows = []
    eye = np.eye(params.n_classes)
    for xi, yi in zip(x, y):
        bindings["x"] = xi
        bindings["onehot"] = eye[yi]
        _, grads = value_and_gradient(graph, bindings, names)
        rows.append(np.concatenate([grads[n].reshape(-1) for n in names]))
    return np.vstack(rows)


def estimate_fisher(params: ModelParams, x, y, mode: str = "diag", names: Sequence[str] | None = None) -> FisherMatrix:
    """Empirical Fisher: mean of ``g g^T`` (full) or ``g * g`` (diag) over the data."""
    grads = per_sample_log_likelihood_grads(params, x, y, names)
    if mode == "diag":
        return FisherMatrix("diag", np.mean(grads * grads, axis=0))
    if mode == "full":
        full = grads.T @ grads / len(grads)
        return FisherMatrix("full", 0.5 * (full + full.T))
    raise ValueError(f"unknown Fisher mode {mode!r}")


def online_fisher_update(previous: FisherMatrix, new: FisherMatrix, gamma: float, weight: float = 1.0) -> FisherMatrix:
    """``gamma * previous + weight * new`` (online EWC running average)."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if previous.mode != new.mode or previous.values.shape != new.values.shape:
        raise ValueError(
            f"Fisher mismatch: {previous.mode}{previous.values.shape} vs {new.mode}{new.values.shape}"
        )
    return FisherMatrix(new.mode, gamma * previous.values + weight * new.values)


# -- replay memory ----------------------------------------------------------------


@dataclass
class MemoryBuffer:
    """Reservoir-sampled memory of past ``(x, y)`` pairs with capacity ``M``."""

    capacity: int
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")

    def __len__(self) -> int:
        return len(self.y)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.y:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.vstack(self.x), np.array(self.y, dtype=np.int64)


def reservoir_insert(buffer: MemoryBuffer, sample: Sample, rng: np.random.Generator) -> MemoryBuffer:
    """Algorithm R: after N inserts every item is retained with probability M/N."""
    x, y = sample.x, sample.y
    buffer.seen_count += 1
    if len(buffer) < buffer.capacity:
        buffer.x.append(np.array(x, dtype=np.float64))
        buffer.y.append(int(y))
    elif buffer.capacity:
        j = int(rng.integers(0, buffer.seen_count))
        if j < buffer.capacity:
            buffer.x[j] = np.array(x, dtype=np.float64)
            buffer.y[j] = int(y)
    return buffer


# -- knowledge records --------------------------------------------------------------


@dataclass(frozen=True)
class DistillSnapshot:
    kind: ClassVar[str] = "distill"
    model: ModelSnapshot

    @property
    def units(self) -> int:
        return 1


@dataclass(frozen=True)
class ReplayPack:
    """Memory samples with the logits/embeddings one model assigned them."""

    kind: ClassVar[str] = "replay"
    x: np.ndarray
    y: np.ndarray
    logits: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        for name in ("x", "logits", "embeddings"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        y = np.array(self.y, dtype=np.int64)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def units(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class RegPack:
    kind: ClassVar[str] = "reg"
    theta: np.ndarray
    fisher: FisherMatrix

    def __post_init__(self):
        object.__setattr__(self, "theta", _readonly(self.theta))
        if self.fisher.size != self.theta.size:
            raise ValueError(f"Fisher size {self.fisher.size} != theta size {self.theta.size}")

    @property
    def units(self) -> int:
        return 2


@dataclass(frozen=True)
class DynExtractor:
    """Stable model of a dynamic host; its extractor becomes the frozen base."""

    kind: ClassVar[str] = "dyn"
    model: ModelSnapshot

    @property
    def units(self) -> int:
        return 1


@dataclass(frozen=True)
class DynModule:
    """Primary (Phase-1) new module ``nu_p`` together with the head ``psi_p``."""

    kind: ClassVar[str] = "dyn"
    model: ModelSnapshot

    @property
    def nu(self) -> list[tuple[str, np.ndarray]]:
        last = len(self.model.params.branches) - 1
        return [(n, a) for n, a in self.model.params.named_arrays() if n.startswith(f"phi{last}.")]

    @property
    def psi(self) -> np.ndarray:
        return self.model.params.psi

    @property
    def units(self) -> int:
        return 1


StableKnowledge = DistillSnapshot | ReplayPack | RegPack | DynExtractor
PlasticKnowledge = DistillSnapshot | ReplayPack | RegPack | DynModule


def _replay_pack(params: ModelParams, x, y) -> ReplayPack:
    z = mdl.features(x, params)
    return ReplayPack(x, y, mdl.classify(z, params), z)


def snapshot_stable(
    category: str,
    params: ModelParams,
    buffer: MemoryBuffer | None = None,
    *,
    x=None,
    y=None,
    previous: RegPack | None = None,
    gamma: float = 0.9,
    weight: float = 1.0,
    fisher_mode: str = "diag",
) -> StableKnowledge:
    """Extract ``S`` from the model trained up to the current task.

    ``x, y`` is the task's training data (needed by ``reg`` for the Fisher);
    ``previous`` is the prior ``reg`` record whose Fisher enters the online
    recursion.
    """
    if category == "distill":
        return DistillSnapshot(ModelSnapshot(params, "stable"))
    if category == "replay":
        if buffer is None:
            raise ValueError("replay knowledge needs a memory buffer")
        bx, by = buffer.arrays()
        return _replay_pack(params, bx, by)
    if category == "reg":
        if x is None or y is None:
            raise ValueError("reg knowledge needs the task data for the Fisher")
        fisher = estimate_fisher(params, x, y, mode=fisher_mode)
        if weight != 1.0:
            fisher = FisherMatrix(fisher.mode, weight * fisher.values)
        if previous is not None:
            fisher = online_fisher_update(previous.fisher.padded(fisher.size), fisher, gamma)
        return RegPack(mdl.flatten(params), fisher)
    if category == "dyn":
        return DynExtractor(ModelSnapshot(params, "stable"))
    raise ValueError(f"unknown category {category!r}")


def extract_plastic(category: str, primary: ModelParams, stable: StableKnowledge, *, x=None, y=None,
                    fisher_mode: str = "diag") -> PlasticKnowledge:
    """Extract ``P`` from the Phase-1 primary model, mirroring the kind of ``stable``."""
    if stable.kind != category:
        raise ValueError(f"stable knowledge is {stable.kind!r} but category is {category!r}")
    if category == "distill":
        return DistillSnapshot(ModelSnapshot(primary, "primary"))
    if category == "replay":
        return _replay_pack(primary, stable.x, stable.y)
    if category == "reg":
        if x is None or y is None:
            raise ValueError("reg knowledge needs the task data for the Fisher")
        return RegPack(mdl.flatten(primary), estimate_fisher(primary, x, y, mode=fisher_mode))
    if category == "dyn":
        return DynModule(ModelSnapshot(primary, "primary"))
    raise ValueError(f"unknown category {category!r}")


def memory_units(knowledge) -> int:
    return 0 if knowledge is None else knowledge.units


def knowledge_to_dict(k) -> dict:
    """JSON-ready form for checkpoint containers."""
    if isinstance(k, (DistillSnapshot, DynExtractor, DynModule)):
        return {"type": type(k).__name__, "role": k.model.role, "model": mdl.params_to_dict(k.model.params)}
    if isinstance(k, ReplayPack):
        return {
            "type": "ReplayPack",
            "x": k.x.tolist(),
            "y": k.y.tolist(),
            "logits": k.logits.tolist(),
            "embeddings": k.embeddings.tolist(),
        }
    if isinstance(k, RegPack):
        return {"type": "RegPack", "theta": k.theta.tolist(), "mode": k.fisher.mode, "fisher": k.fisher.values.tolist()}
    raise TypeError(f"not a knowledge record: {k!r}")


def knowledge_from_dict(d: dict):
    kind = d["type"]
    if kind in ("DistillSnapshot", "DynExtractor", "DynModule"):
        snap = ModelSnapshot(mdl.params_from_dict(d["model"]), d["role"])
        return {"DistillSnapshot": DistillSnapshot, "DynExtractor": DynExtractor, "DynModule": DynModule}[kind](snap)
    if kind == "ReplayPack":
        return ReplayPack(np.array(d["x"]), np.array(d["y"]), np.array(d["logits"]), np.array(d["embeddings"]))
    if kind == "RegPack":
        return RegPack(np.array(d["theta"]), FisherMatrix(d["mode"], np.array(d["fisher"])))
    raise ValueError(f"unknown knowledge type {kind!r}")
