"""The two-phase flashback protocol, the plain continual-learning loop, budget audits.

For every task after the first, a flashback run

1. starts from the stable model ``theta_s`` and trains ``E1`` epochs on
   ``L_c + alpha_s L_s`` (Phase 1), giving the primary model ``theta_p``;
2. extracts plastic knowledge ``P`` from ``theta_p``;
3. resets to ``theta_s``, re-creating the new head rows (and, for ``dyn``,
   the new module) from the same seeds as in Phase 1;
4. trains ``E2`` epochs on ``L_c + alpha_s L_s + alpha_p L_p`` (Phase 2);
5. hands the result to the host's ``end_task``.

The plain loop and Phase 2 draw their shuffles from the same random stream
and Phase 1 from a separate one, so ``alpha_p = 0`` with ``E2 = E_CL``
reproduces the plain run bit for bit.  With ``E1 = 0`` there is no Phase 1;
output-based hosts then extract ``P`` from ``theta_s`` itself and the others
from the freshly prepared model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .hosts import Host, HostConfig, StepTrace, make_host
from .metrics import AccuracyMatrix
from .model import ModelParams
from .seeding import INIT, SHUFFLE_PHASE1, SHUFFLE_PHASE2, stream, stream_seed
from .tasks import Task, TaskStream

MODES = ("CL", "FL")


class BudgetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FLConfig:
    """Phase lengths and the plastic weight; ``alpha_p=None`` defers to the host's default."""

    E1: int = 5
    E2: int = 25
    alpha_p: float | None = None
    allow_over_budget: bool = False

    def __post_init__(self):
        if self.E1 < 0:
            raise ValueError("E1 must be >= 0")
        if self.E2 < 1:
            raise ValueError("E2 must be >= 1")
        if self.alpha_p is not None and self.alpha_p < 0:
            raise ValueError("alpha_p must be non-negative")

    @property
    def epochs(self) -> int:
        return self.E1 + self.E2

    def plastic_weight(self, host_cfg: HostConfig) -> float:
        return host_cfg.alpha_p if self.alpha_p is None else self.alpha_p

    def check_budget(self, E_CL: int) -> None:
        if self.epochs != E_CL:
            msg = f"E1 + E2 = {self.epochs} differs from the plain budget E_CL = {E_CL}"
            if not self.allow_over_budget:
                raise ValueError(msg + " (set allow_over_budget to override)")
            warnings.warn(msg, BudgetWarning, stacklevel=2)


@dataclass
class TaskRecord:
    t: int
    mode: str
    phase1: list[list[float]] = field(default_factory=list)
    phase2: list[list[float]] = field(default_factory=list)
    stable_units: int = 0
    plastic_units: int = 0

    @property
    def epochs(self) -> int:
        return len(self.phase1) + len(self.phase2)

    @property
    def memory_units(self) -> int:
        return self.stable_units + self.plastic_units


@dataclass
class RunRecord:
    mode: str
    category: str
    seed: int
    tasks: list[TaskRecord] = field(default_factory=list)
    matrices: dict[str, AccuracyMatrix] = field(default_factory=dict)
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def epochs(self) -> list[int]:
        return [r.epochs for r in self.tasks]

    def losses(self) -> list[float]:
        return [v for r in self.tasks for epoch in (*r.phase1, *r.phase2) for v in epoch]


def _epochs(host: Host, params, task, n, which, S, P, alpha_s, alpha_p, log) -> ModelParams:
    for e in range(n):
        trace = StepTrace()
        params = host.epoch_step(params, task, S, P, alpha_s, alpha_p, stream(host.seed, which, host.t, e), trace)
        log.append(trace.losses)
    return params


def train_task_cl(host: Host, params: ModelParams, task: Task, epochs: int | None = None,
                  start: ModelParams | None = None) -> tuple[ModelParams, TaskRecord]:
    """``E_CL`` epochs on ``L_c + alpha_s L_s``, then ``end_task``.

    ``start`` is an already prepared model (``begin_task`` applied).
    """
    E = host.cfg.epochs if epochs is None else epochs
    if E < 1:
        raise ValueError("a task needs at least one epoch")
    rec = TaskRecord(host.t, "CL", stable_units=host.knowledge_units())
    params = host.begin_task(params, task) if start is None else start
    params = _epochs(host, params, task, E, SHUFFLE_PHASE2, host.S, None, host.cfg.alpha_s, 0.0, rec.phase2)
    host.end_task(params, task)
    return params, rec


def train_task_fl(host: Host, params: ModelParams, task: Task, cfg: FLConfig,
                  start: ModelParams | None = None) -> tuple[ModelParams, TaskRecord]:
    """One flashback task: Phase 1, plastic extraction, reset, Phase 2, ``end_task``.

    The first task has no stable knowledge to flash back to; it is trained
    for ``E1 + E2`` epochs on the task loss alone.
    """
    if host.S is None:
        params, rec = train_task_cl(host, params, task, cfg.epochs, start)
        rec.mode = "FL"
        return params, rec
    rec = TaskRecord(host.t, "FL", stable_units=host.knowledge_units())
    theta_s = host.stable_params
    alpha_s = host.cfg.alpha_s
    if cfg.E1 == 0:
        primary = host.untrained_primary(task)
    else:
        primary = host.begin_task(theta_s, task) if start is None else start
        primary = _epochs(host, primary, task, cfg.E1, SHUFFLE_PHASE1, host.S, None, alpha_s, 0.0, rec.phase1)
    P = host.extract_plastic(primary, task)
    if P.kind != host.S.kind:
        raise ValueError(f"plastic knowledge kind {P.kind!r} does not match stable {host.S.kind!r}")
    rec.plastic_units = P.units
    params = host.begin_task(theta_s, task)
    params = _epochs(host, params, task, cfg.E2, SHUFFLE_PHASE2, host.S, P, alpha_s, cfg.plastic_weight(host.cfg), rec.phase2)
    host.end_task(params, task)
    return params, rec


# -- evaluation ---------------------------------------------------------------------------


def accuracy(params: ModelParams, x, y, rows=None) -> float:
    """Top-1 accuracy; ``rows`` restricts the argmax to those head rows."""
    if len(y) == 0:
        return 0.0
    o = mdl.logits(x, params)
    if rows is None:
        pred = np.argmax(o, axis=1)
    else:
        rows = np.asarray(rows)
        pred = rows[np.argmax(o[:, rows], axis=1)]
    return float(np.mean(pred == np.asarray(y)))


def evaluate_task(params: ModelParams, task: Task) -> dict[str, float]:
    """Class-incremental (all head rows) and task-incremental (task rows) accuracy."""
    return {
        "CI": accuracy(params, task.x_test, task.y_test),
        "TI": accuracy(params, task.x_test, task.y_test, rows=list(task.classes)),
    }


def canonical_stream(stream_: TaskStream) -> TaskStream:
    """Relabel classes to head-row indices ``0..C-1`` in stream order."""
    order = stream_.classes_up_to(stream_.T - 1)
    if order == list(range(len(order))):
        return stream_
    to_row = {c: i for i, c in enumerate(order)}
    remap = np.vectorize(to_row.__getitem__, otypes=[np.int64])
    tasks = []
    for task in stream_.tasks:
        tasks.append(
            Task(
                tuple(to_row[c] for c in task.classes),
                task.x_train,
                remap(task.y_train) if len(task.y_train) else task.y_train,
                task.x_test,
                remap(task.y_test) if len(task.y_test) else task.y_test,
            )
        )
    return TaskStream(tasks)


def initial_model(host_cfg: HostConfig, in_dim: int, seed: int) -> ModelParams:
    return mdl.init_model(in_dim, stream_seed(seed, INIT), host_cfg.hidden, host_cfg.embed_dim)


def baseline_accuracies(host_cfg: HostConfig, stream_: TaskStream, seed: int) -> dict[int, float]:
    """Task-incremental accuracy of an untrained model on every task (1-based)."""
    params = initial_model(host_cfg, stream_.in_dim, seed)
    out = {}
    for t, task in enumerate(stream_.tasks):
        params = mdl.extend_classifier(params, len(task.classes), seed=stream_seed(seed, INIT, t, 0))
        out[t + 1] = evaluate_task(params, task)["TI"]
    return out


def run_stream(mode: str, host_cfg: HostConfig, fl_cfg: FLConfig | None, stream_: TaskStream,
               seed: int = 0, eval_every_task: bool = True) -> RunRecord:
    """Train every task in order and fill the CI and TI accuracy matrices."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "FL":
        if fl_cfg is None:
            raise ValueError("FL mode needs an FLConfig")
        fl_cfg.check_budget(host_cfg.epochs)
    stream_.validate()
    stream_ = canonical_stream(stream_)
    host = make_host(host_cfg, seed)
    params = initial_model(host_cfg, stream_.in_dim, seed)
    record = RunRecord(mode, host_cfg.category, seed)
    mats = {r: AccuracyMatrix(stream_.T) for r in ("CI", "TI")}
    base = baseline_accuracies(host_cfg, stream_, seed)
    for r in mats:
        mats[r].baseline.update(base)
    for t, task in enumerate(stream_.tasks):
        start = host.begin_task(params if host.stable_params is None else host.stable_params, task)
        if t > 0 and eval_every_task:
            for r, acc in evaluate_task(start, task).items():
                mats[r].pre[t + 1] = acc
        if mode == "CL":
            params, rec = train_task_cl(host, params, task, start=start)
        else:
            params, rec = train_task_fl(host, params, task, fl_cfg, start=start)
        record.tasks.append(rec)
        if eval_every_task or t == stream_.T - 1:
            for j in range(t + 1):
                for r, acc in evaluate_task(params, stream_.tasks[j]).items():
                    mats[r].set(t + 1, j + 1, acc)
    record.matrices = mats
    record.params = params
    return record


# -- budget --------------------------------------------------------------------------------


@dataclass
class BudgetReport:
    passed: bool
    epochs_expected: int
    epochs_per_task: list[int]
    units_expected: list[int]
    units_per_task: list[int]
    messages: list[str]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"budget {status}: epochs {self.epochs_per_task} (expected {self.epochs_expected} each), "
                 f"memory units {self.units_per_task} (expected {self.units_expected})"]
        return "\n".join(lines + [f"  {m}" for m in self.messages])


def budget_audit(record: RunRecord | None, host_cfg: HostConfig, fl_cfg: FLConfig | None) -> BudgetReport:
    """Check the epoch and memory budget of a run (or, without a record, of a config).

    FL must spend ``E1 + E2 = E_CL`` epochs per task and keep exactly twice
    the knowledge memory of the plain host (``S`` plus a same-size ``P``).
    """
    E_CL = host_cfg.epochs
    msgs = []
    if fl_cfg is not None and fl_cfg.epochs != E_CL:
        msgs.append(f"budget violation: E1 + E2 = {fl_cfg.E1} + {fl_cfg.E2} = {fl_cfg.epochs} != E_CL = {E_CL}")
    epochs, units, expected = [], [], []
    if record is not None:
        epochs = record.epochs
        for rec in record.tasks:
            units.append(rec.memory_units)
            expected.append(rec.stable_units * (2 if record.mode == "FL" else 1))
            if record.mode == "FL" and rec.stable_units and rec.plastic_units != rec.stable_units:
                msgs.append(f"task {rec.t + 1}: plastic units {rec.plastic_units} != stable units {rec.stable_units}")
        target = E_CL if record.mode == "CL" or fl_cfg is None else fl_cfg.epochs
        for i, e in enumerate(epochs):
            if e != target or e != E_CL:
                msgs.append(f"task {i + 1}: {e} epochs, budget is {E_CL}")
        for i, (u, x) in enumerate(zip(units, expected)):
            if u != x:
                msgs.append(f"task {i + 1}: {u} memory units, expected {x}")
    return BudgetReport(not msgs, E_CL, epochs, expected, units, msgs)
