"""Host continual-learning strategies at toy fidelity.

=======  ==============  ===============================================
name     category        stability mechanism
=======  ==============  ===============================================
distill  LwF-like        logit distillation on the new task's inputs
replay   DER-like        logit matching on a reservoir memory
reg      online EWC      Fisher-weighted quadratic pull towards theta_s
dyn      FOSTER-like     frozen old extractor + new module, soft-label CE
=======  ==============  ===============================================

A host owns the stable knowledge ``S`` and exposes the hooks the training
protocols drive: :meth:`Host.begin_task`, :meth:`Host.epoch_step`,
:meth:`Host.end_task` and :meth:`Host.extract_plastic`.  ``begin_task`` is
a pure function of the host state, the stable model and the task index, so
calling it twice yields identical new classifier rows and new modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import knowledge as kb
from . import model as mdl
from .losses import Batch, LossContext, build_objective
from .model import ModelParams
from .seeding import BUFFER, INIT, stream, stream_seed
from .tasks import Task, batches

CATEGORIES = kb.CATEGORIES


# Per-category weights used when ``alpha_s`` / ``alpha_p`` are left unset.
# The losses live on very different scales (logit MSE, soft-label CE, a
# Fisher quadratic whose entries are ~1e-3), so one shared value does not fit.
CATEGORY_DEFAULTS = {
    "distill": {"alpha_s": 1.0, "alpha_p": 0.1},
    "replay": {"alpha_s": 1.0, "alpha_p": 1.0},
    "reg": {"alpha_s": 100.0, "alpha_p": 0.1},
    "dyn": {"alpha_s": 5.0, "alpha_p": 1.0},
}


@dataclass(frozen=True)
class HostConfig:
    """Host hyperparameters; ``alpha_p`` is the plastic weight flashback runs use by default."""

    category: str
    alpha_s: float | None = None
    alpha_p: float | None = None
    lr: float = 0.005
    batch_size: int = 32
    epochs: int = 30
    memory: int = 200
    gamma: float = 0.9
    lambdas: tuple[float, ...] = ()
    tau: float = 2.0
    module_hidden: int = mdl.DEFAULT_MODULE_HIDDEN
    module_out: int = mdl.DEFAULT_MODULE_OUT
    output: str = "logits"
    fisher_mode: str = "diag"
    hidden: tuple[int, ...] = mdl.DEFAULT_HIDDEN
    embed_dim: int = mdl.DEFAULT_EMBED

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown host category {self.category!r}; expected one of {CATEGORIES}")
        for name in ("alpha_s", "alpha_p"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, CATEGORY_DEFAULTS[self.category][name])
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("a task needs at least one epoch")
        if self.category == "replay" and self.memory < 1:
            raise ValueError("replay needs a memory capacity >= 1")
        if self.category == "reg" and not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.category == "dyn" and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.fisher_mode not in ("diag", "full"):
            raise ValueError(f"unknown Fisher mode {self.fisher_mode!r}")

    def with_updates(self, **kw) -> "HostConfig":
        return replace(self, **kw)


@dataclass
class StepTrace:
    losses: list[float] = field(default_factory=list)


class Host:
    """Shared training loop; subclasses specialize knowledge handling."""

    def __init__(self, cfg: HostConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        self.S = None
        self.t = 0
        self.seen: list[int] = []
        self.stable_params: ModelParams | None = None

    @property
    def category(self) -> str:
        return self.cfg.category

    # -- hooks --------------------------------------------------------------------

    def begin_task(self, params: ModelParams, task: Task) -> ModelParams:
        """Add head rows for the task's classes (and, for ``dyn``, a new module)."""
        overlap = set(task.classes) & set(self.seen)
        if overlap:
            raise ValueError(f"task classes {sorted(overlap)} were already learned")
        out = self._expand(params)
        return mdl.extend_classifier(out, len(task.classes), seed=stream_seed(self.seed, INIT, self.t, 0))

    def _expand(self, params: ModelParams) -> ModelParams:
        return params

    def memory_indices(self, rng: np.random.Generator) -> np.ndarray | None:
        return None

    def epoch_step(self, params: ModelParams, task: Task, S, P, alpha_s: float, alpha_p: float,
                   rng: np.random.Generator, trace: StepTrace | None = None) -> ModelParams:
        """One epoch of minibatch SGD on ``L_c + alpha_s L_s [+ alpha_p L_p]``."""
        cfg = self.cfg
        for idx in batches(len(task), cfg.batch_size, rng):
            batch = self.make_batch(task.x_train[idx], task.y_train[idx], S, rng)
            ctx = LossContext(params)
            node, _ = build_objective(ctx, self.category, batch, S, P, alpha_s, alpha_p, cfg.tau, cfg.output)
            value, grads = ctx.value_and_grad(node)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at task {self.t}")
            if trace is not None:
                trace.losses.append(value)
            arrays = params.arrays()
            params = params.with_arrays({n: arrays[n] - cfg.lr * g for n, g in grads.items()})
        return params

    def make_batch(self, x, y, S, rng) -> Batch:
        return Batch(x, y)

    def end_task(self, params: ModelParams, task: Task) -> None:
        """Record ``S`` from the trained model and advance the task counter."""
        self.S = self._stable(params, task)
        self.stable_params = params.copy()
        self.seen.extend(task.classes)
        self.t += 1

    def _stable(self, params: ModelParams, task: Task):
        raise NotImplementedError

    def extract_plastic(self, primary: ModelParams, task: Task):
        return kb.extract_plastic(self.category, primary, self.S, x=task.x_train, y=task.y_train,
                                  fisher_mode=self.cfg.fisher_mode)

    def untrained_primary(self, task: Task) -> ModelParams:
        """The primary model when Phase 1 has zero epochs.

        Parameter-shaped knowledge must cover the new rows (and module), so
        the default is the prepared stable model.
        """
        return self.begin_task(self.stable_params, task)

    def knowledge_units(self) -> int:
        return kb.memory_units(self.S)


class DistillHost(Host):
    def _stable(self, params, task):
        return kb.snapshot_stable("distill", params)

    def untrained_primary(self, task):
        # untrained new rows carry no targets, so the teacher is theta_s itself
        return self.stable_params


class ReplayHost(Host):
    def __init__(self, cfg: HostConfig, seed: int = 0):
        super().__init__(cfg, seed)
        self.buffer = kb.MemoryBuffer(cfg.memory)

    def make_batch(self, x, y, S, rng) -> Batch:
        if S is None or S.units == 0:
            return Batch(x, y)
        idx = rng.choice(S.units, size=min(self.cfg.batch_size, S.units), replace=False)
        return Batch(x, y, idx, S.x[idx], S.y[idx])

    def _stable(self, params, task):
        rng = stream(self.seed, BUFFER, self.t)
        for sample in task.samples("train"):
            kb.reservoir_insert(self.buffer, sample, rng)
        return kb.snapshot_stable("replay", params, self.buffer)

    def untrained_primary(self, task):
        return self.stable_params


class RegHost(Host):
    def _stable(self, params, task):
        lambdas = self.cfg.lambdas
        weight = lambdas[self.t] if self.t < len(lambdas) else 1.0
        return kb.snapshot_stable(
            "reg", params, x=task.x_train, y=task.y_train, previous=self.S,
            gamma=self.cfg.gamma, weight=weight, fisher_mode=self.cfg.fisher_mode,
        )


class DynHost(Host):
    def _expand(self, params):
        if self.S is None:
            return params
        return mdl.expand_extractor(params, seed=stream_seed(self.seed, INIT, self.t, 1),
                                    hidden=self.cfg.module_hidden, out_dim=self.cfg.module_out)

    def _stable(self, params, task):
        return kb.snapshot_stable("dyn", params)


HOSTS = {"distill": DistillHost, "replay": ReplayHost, "reg": RegHost, "dyn": DynHost}


def make_host(cfg: HostConfig, seed: int = 0) -> Host:
    return HOSTS[cfg.category](cfg, seed)


def default_config(category: str, **overrides) -> HostConfig:
    return HostConfig(category, **overrides)


def default_configs(categories: Sequence[str] = CATEGORIES, **overrides) -> list[HostConfig]:
    return [default_config(c, **overrides) for c in categories]
