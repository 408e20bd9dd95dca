"""Class-incremental task streams: seeded Gaussian blobs or a labelled CSV file."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int


@dataclass
class Task:
    """One task: its class set plus train and test arrays (rows are samples)."""

    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __len__(self) -> int:
        return len(self.y_train)

    def samples(self, split: str = "train") -> Iterator[Sample]:
        xs, ys = (self.x_train, self.y_train) if split == "train" else (self.x_test, self.y_test)
        for x, y in zip(xs, ys):
            yield Sample(x, int(y))


@dataclass
class TaskStream:
    tasks: list[Task]

    @property
    def T(self) -> int:
        return len(self.tasks)

    @property
    def in_dim(self) -> int:
        return self.tasks[0].x_train.shape[1]

    def classes_up_to(self, t: int) -> list[int]:
        """Classes of tasks ``0..t`` (0-based), in stream order."""
        return [c for task in self.tasks[: t + 1] for c in task.classes]

    def validate(self) -> None:
        seen: set[int] = set()
        for i, task in enumerate(self.tasks):
            cls = set(task.classes)
            if cls & seen:
                raise ValueError(f"task {i} reuses classes {sorted(cls & seen)}")
            seen |= cls
            for split, ys in (("train", task.y_train), ("test", task.y_test)):
                stray = set(np.unique(ys).tolist()) - cls
                if stray:
                    raise ValueError(f"task {i} {split} labels {sorted(stray)} outside its class set")

    def equals(self, other: "TaskStream") -> bool:
        if self.T != other.T:
            return False
        for a, b in zip(self.tasks, other.tasks):
            if a.classes != b.classes:
                return False
            for name in ("x_train", "y_train", "x_test", "y_test"):
                u, v = getattr(a, name), getattr(b, name)
                if u.shape != v.shape or u.tobytes() != v.tobytes():
                    return False
        return True


@dataclass(frozen=True)
class SyntheticSpec:
    T: int = 5
    K: int = 2
    n: int = 20
    train_per_class: int = 100
    test_per_class: int = 100
    separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("T", "K", "n", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"SyntheticSpec.{name} must be >= 1")
        if not self.separation > 0:
            raise ValueError("SyntheticSpec.separation must be positive")


def generate_synthetic(spec: SyntheticSpec) -> TaskStream:
    """Split benchmark over ``T*K`` unit-variance Gaussian classes.

    Class means are standard-normal draws rescaled to norm ``separation``.
    Task ``t`` owns classes ``t*K .. t*K+K-1``.
    """
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.T * spec.K
    means = rng.standard_normal((n_classes, spec.n))
    means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
    tasks = []
    for t in range(spec.T):
        classes = tuple(range(t * spec.K, (t + 1) * spec.K))
        splits = []
        for count in (spec.train_per_class, spec.test_per_class):
            xs = [means[c] + rng.standard_normal((count, spec.n)) for c in classes]
            ys = [np.full(count, c, dtype=np.int64) for c in classes]
            splits.append((np.vstack(xs), np.concatenate(ys)))
        (xtr, ytr), (xte, yte) = splits
        tasks.append(Task(classes, xtr, ytr, xte, yte))
    return TaskStream(tasks)


class CSVFormatError(ValueError):
    pass


def _parse_rows(path) -> list[tuple[int, int, list[float]]]:
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not f.strip() for f in record):
                continue
            try:
                label = float(record[0])
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header row
                raise CSVFormatError(f"{path}:{lineno}: non-numeric label {record[0]!r}") from None
            if label != int(label):
                raise CSVFormatError(f"{path}:{lineno}: label {record[0]!r} is not an integer")
            try:
                feats = [float(v) for v in record[1:]]
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: malformed feature ({exc})") from None
            if not feats:
                raise CSVFormatError(f"{path}:{lineno}: row has no features")
            if not all(np.isfinite(feats)):
                raise CSVFormatError(f"{path}:{lineno}: non-finite feature")
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise CSVFormatError(f"{path}:{lineno}: ragged row ({len(feats)} features, expected {width})")
            rows.append((lineno, int(label), feats))
    return rows


def load_csv(path, partition: Sequence[Sequence[int]], test_path=None) -> TaskStream:
    """Read ``label,f1,...,fn`` rows and split them into tasks by ``partition``.

    Without ``test_path`` the same rows serve as both train and test data.
    """
    seen: set[int] = set()
    for group in partition:
        overlap = seen & set(group)
        if overlap:
            raise ValueError(f"partition reuses classes {sorted(overlap)}")
        seen |= set(group)
    owner = {c: i for i, group in enumerate(partition) for c in group}

    def split(rows):
        per_task = [([], []) for _ in partition]
        for lineno, label, feats in rows:
            if label not in owner:
                raise CSVFormatError(f"{path}:{lineno}: label {label} outside partition")
            xs, ys = per_task[owner[label]]
            xs.append(feats)
            ys.append(label)
        return per_task

    train = split(_parse_rows(path))
    test = split(_parse_rows(test_path)) if test_path is not None else train
    width = next((len(xs[0]) for xs, _ in train if xs), 0)
    tasks = []
    for group, (xtr, ytr), (xte, yte) in zip(partition, train, test):
        tasks.append(
            Task(
                tuple(int(c) for c in group),
                np.array(xtr, dtype=np.float64).reshape(-1, width),
                np.array(ytr, dtype=np.int64),
                np.array(xte, dtype=np.float64).reshape(-1, width),
                np.array(yte, dtype=np.int64),
            )
        )
    return TaskStream(tasks)


def write_csv(stream: TaskStream, path, split: str = "train") -> None:
    """Inverse of :func:`load_csv` for one split; floats use round-trip repr."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for task in stream.tasks:
        xs, ys = (task.x_train, task.y_train) if split == "train" else (task.x_test, task.y_test)
        for x, y in zip(xs, ys):
            w.writerow([int(y), *(repr(float(v)) for v in x)])
    Path(path).write_text(buf.getvalue())


def batches(n_samples: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches over one shuffled epoch; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start:start + batch_size]


def epoch_batches(task: Task, batch_size: int, epoch_seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """``(x, y)`` minibatches of the training split for one seeded epoch."""
    rng = epoch_seed if isinstance(epoch_seed, np.random.Generator) else np.random.default_rng(epoch_seed)
    for idx in batches(len(task), batch_size, rng):
        yield task.x_train[idx], task.y_train[idx]
