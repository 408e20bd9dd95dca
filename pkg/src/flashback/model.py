"""MLP classifier ``f(x) = psi @ h(x)`` with a growable head and extractor.

The feature extractor ``h`` is a list of branches.  Each branch is a ReLU
MLP and ``h(x)`` is the concatenation of the branch outputs, so a plain
model has one branch and a dynamically expanded one has a frozen base
followed by a trainable new module.  The classifier ``psi`` is a
``(n_classes, embed_dim)`` matrix without bias.

Parameters are addressed by canonical names (``phi{b}.{l}.W``,
``phi{b}.{l}.b``, ``psi``); :func:`flatten` walks them in that order, so
rows appended to ``psi`` land at the end of the flat vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph, Node

CHECKPOINT_FORMAT = "flashback-checkpoint"
CHECKPOINT_VERSION = 1

DEFAULT_HIDDEN = (64, 64)
DEFAULT_EMBED = 16
DEFAULT_MODULE_HIDDEN = 32
DEFAULT_MODULE_OUT = 16
CLASSIFIER_INIT_RANGE = 0.05


@dataclass
class Branch:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: bool = False

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Branch":
        return Branch([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.frozen)


@dataclass
class ModelParams:
    branches: list[Branch]
    psi: np.ndarray

    def __post_init__(self):
        in_dims = {b.in_dim for b in self.branches}
        if len(in_dims) != 1:
            raise ValueError(f"branches disagree on input dimension: {sorted(in_dims)}")
        if self.psi.ndim != 2 or self.psi.shape[1] != self.embed_dim:
            raise ValueError(f"classifier shape {self.psi.shape} does not match embedding dim {self.embed_dim}")

    @property
    def in_dim(self) -> int:
        return self.branches[0].in_dim

    @property
    def embed_dim(self) -> int:
        return sum(b.out_dim for b in self.branches)

    @property
    def n_classes(self) -> int:
        return self.psi.shape[0]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bi, branch in enumerate(self.branches):
            for li, (w, b) in enumerate(zip(branch.weights, branch.biases)):
                out.append((f"phi{bi}.{li}.W", w))
                out.append((f"phi{bi}.{li}.b", b))
        out.append(("psi", self.psi))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())

    def frozen_names(self) -> list[str]:
        return [n for n, _ in self.named_arrays() if n.startswith("phi") and self.branches[_branch_index(n)].frozen]

    def trainable_names(self) -> list[str]:
        frozen = set(self.frozen_names())
        return [n for n, _ in self.named_arrays() if n not in frozen]

    def copy(self) -> "ModelParams":
        return ModelParams([b.copy() for b in self.branches], self.psi.copy())

    def with_arrays(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        """A copy with the named arrays replaced."""
        new = self.copy()
        for name, value in updates.items():
            _set_array(new, name, np.array(value, dtype=np.float64))
        return new

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


def _branch_index(name: str) -> int:
    return int(name[3:].split(".", 1)[0])


def _set_array(params: ModelParams, name: str, value: np.ndarray) -> None:
    if name == "psi":
        if value.shape != params.psi.shape:
            raise ValueError(f"psi: shape {value.shape} != {params.psi.shape}")
        params.psi = value
        return
    bi, li, kind = name[3:].split(".")
    branch = params.branches[int(bi)]
    target = branch.weights if kind == "W" else branch.biases
    if value.shape != target[int(li)].shape:
        raise ValueError(f"{name}: shape {value.shape} != {target[int(li)].shape}")
    target[int(li)] = value


@dataclass(frozen=True)
class ModelSnapshot:
    """Read-only deep copy of a model tagged with its role (stable or primary)."""

    params: ModelParams = field(repr=False)
    role: str

    def __post_init__(self):
        if self.role not in ("stable", "primary"):
            raise ValueError(f"unknown snapshot role {self.role!r}")
        frozen = self.params.copy()
        for _, arr in frozen.named_arrays():
            arr.setflags(write=False)
        object.__setattr__(self, "params", frozen)

    def thaw(self) -> ModelParams:
        """A writable copy of the stored parameters."""
        return self.params.copy()


# -- construction ---------------------------------------------------------


def _mlp_branch(in_dim: int, widths: Sequence[int], rng: np.random.Generator, frozen=False) -> Branch:
    weights, biases = [], []
    fan_in = in_dim
    for width in widths:
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(width, fan_in)))
        biases.append(np.zeros(width))
        fan_in = width
    return Branch(weights, biases, frozen)


def init_model(
    in_dim: int,
    seed: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    embed_dim: int = DEFAULT_EMBED,
    n_classes: int = 0,
) -> ModelParams:
    """He-uniform ReLU extractor; the head starts with ``n_classes`` rows (default none)."""
    rng = np.random.default_rng(seed)
    branch = _mlp_branch(in_dim, [*hidden, embed_dim], rng)
    params = ModelParams([branch], np.zeros((0, embed_dim)))
    if n_classes:
        params = extend_classifier(params, n_classes, seed=int(rng.integers(2**63 - 1)))
    return params


def extend_classifier(params: ModelParams, new_class_count: int, seed: int) -> ModelParams:
    """Append ``new_class_count`` rows drawn from U(-0.05, 0.05); old rows are kept bitwise."""
    if new_class_count <= 0:
        raise ValueError(f"new_class_count must be positive, got {new_class_count}")
    rng = np.random.default_rng(seed)
    rows = rng.uniform(-CLASSIFIER_INIT_RANGE, CLASSIFIER_INIT_RANGE, size=(new_class_count, params.embed_dim))
    new = params.copy()
    new.psi = np.vstack([new.psi, rows])
    return new


def expand_extractor(
    params: ModelParams,
    seed: int,
    hidden: int = DEFAULT_MODULE_HIDDEN,
    out_dim: int = DEFAULT_MODULE_OUT,
) -> ModelParams:
    """Freeze every existing branch and append a trainable module ``m(x; nu)``.

    The head gains ``out_dim`` zero columns, so logits are unchanged until the
    head or the module is trained.
    """
    if hidden <= 0 or out_dim <= 0:
        raise ValueError("module widths must be positive")
    rng = np.random.default_rng(seed)
    new = params.copy()
    for branch in new.branches:
        branch.frozen = True
    new.branches.append(_mlp_branch(params.in_dim, [hidden, out_dim], rng))
    new.psi = np.hstack([new.psi, np.zeros((new.n_classes, out_dim))])
    return new


# -- forward ----------------------------------------------------------------


def _branch_forward(x: np.ndarray, branch: Branch) -> np.ndarray:
    for w, b in zip(branch.weights, branch.biases):
        x = np.maximum(x @ w.T + b, 0.0)
    return x


def features(x, params: ModelParams) -> np.ndarray:
    """Embedding ``h(x; phi)`` for one sample ``(n_in,)`` or a batch ``(n, n_in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match extractor input {params.in_dim}")
    parts = [_branch_forward(x, b) for b in params.branches]
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)


def classify(z, params: ModelParams) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ params.psi.T


def logits(x, params: ModelParams) -> np.ndarray:
    return classify(features(x, params), params)


def parameter_nodes(graph: Graph, params: ModelParams, prefix: str = "") -> dict[str, Node]:
    """Leaves for trainable parameters and constants for frozen ones."""
    frozen = set(params.frozen_names())
    nodes = {}
    for name, arr in params.named_arrays():
        nodes[name] = graph.const(arr, name=prefix + name) if name in frozen else graph.leaf(prefix + name)
    return nodes


def build_forward(graph: Graph, x: Node, params: ModelParams, nodes: Mapping[str, Node]) -> tuple[Node, Node]:
    """Graph nodes for ``(h(x), f(x))`` using parameter nodes from ``nodes``."""
    parts = []
    for bi, branch in enumerate(params.branches):
        h = x
        for li in range(len(branch.weights)):
            h = graph.relu(graph.affine(h, nodes[f"phi{bi}.{li}.W"], nodes[f"phi{bi}.{li}.b"]))
        parts.append(h)
    z = parts[0] if len(parts) == 1 else graph.concat(parts)
    return z, graph.affine(z, nodes["psi"])


# -- flattening -------------------------------------------------------------


def layer_specs(params: ModelParams) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, arr.shape) for name, arr in params.named_arrays()]


def flatten(params: ModelParams, names: Sequence[str] | None = None) -> np.ndarray:
    arrays = params.arrays()
    order = [n for n, _ in params.named_arrays()] if names is None else list(names)
    if not order:
        return np.zeros(0)
    return np.concatenate([arrays[n].reshape(-1) for n in order])


def unflatten(vector, template: ModelParams, names: Sequence[str] | None = None) -> ModelParams:
    """Inverse of :func:`flatten` for the layout of ``template``."""
    vector = np.asarray(vector, dtype=np.float64)
    arrays = template.arrays()
    order = [n for n, _ in template.named_arrays()] if names is None else list(names)
    expected = sum(arrays[n].size for n in order)
    if vector.shape != (expected,):
        raise ValueError(f"flat vector has shape {vector.shape}, expected ({expected},)")
    updates, pos = {}, 0
    for n in order:
        size = arrays[n].size
        updates[n] = vector[pos:pos + size].reshape(arrays[n].shape).copy()
        pos += size
    return template.with_arrays(updates)


def digest(params: ModelParams, names: Sequence[str] | None = None) -> str:
    """SHA-256 over the bytes of the named arrays (all by default)."""
    arrays = params.arrays()
    order = [n for n, _ in params.named_arrays()] if names is None else list(names)
    h = hashlib.sha256()
    for n in order:
        h.update(n.encode())
        h.update(np.ascontiguousarray(arrays[n]).tobytes())
    return h.hexdigest()


# -- checkpoints ----------------------------------------------------------------


def params_to_dict(params: ModelParams) -> dict:
    return {
        "branches": [
            {"widths": [w.shape[0] for w in b.weights], "frozen": b.frozen} for b in params.branches
        ],
        "in_dim": params.in_dim,
        "n_classes": params.n_classes,
        "theta": flatten(params).tolist(),
    }


def params_from_dict(data: Mapping) -> ModelParams:
    branches = []
    for entry in data["branches"]:
        fan_in, weights, biases = data["in_dim"], [], []
        for width in entry["widths"]:
            weights.append(np.zeros((width, fan_in)))
            biases.append(np.zeros(width))
            fan_in = width
        branches.append(Branch(weights, biases, bool(entry["frozen"])))
    embed = sum(b.out_dim for b in branches)
    template = ModelParams(branches, np.zeros((data["n_classes"], embed)))
    return unflatten(np.array(data["theta"], dtype=np.float64), template)


def save_checkpoint(path, params: ModelParams, knowledge: Mapping | None = None) -> None:
    """Write a versioned JSON container: layer specs, flat theta, optional knowledge bases.

    Floats are written with shortest round-trip repr, so loading is exact.
    """
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": params_to_dict(params)}
    if knowledge:
        doc["knowledge"] = dict(knowledge)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return params_from_dict(doc["model"]), doc.get("knowledge", {})
