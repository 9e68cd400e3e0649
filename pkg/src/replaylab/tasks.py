"""Class-incremental task streams over synthetic Gaussian clusters.

Each class is a Gaussian cluster in input space; tasks own disjoint blocks of
classes and are presented in order, every training sample exactly once.  All
generation randomness comes from one dedicated stream seeded by data_seed, so
datasets and batch order are identical across trials regardless of what the
other streams consume.

A CSV with header ``label,f0,f1,...`` can replace the synthetic data; the
task/batching machinery is unchanged.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .nn import ModelParams, forward
from .rng import RngStream, new_stream

MEAN_SCALE = 3.0  # class means are drawn from N(0, I) * MEAN_SCALE


@dataclass(frozen=True)
class TaskStreamConfig:
    task_count: int = 5
    classes_per_task: int = 2
    input_dim: int = 32
    samples_per_class: int = 250
    test_per_class: int = 200
    cluster_spread: float = 5.0
    online_batch: int = 32
    data_seed: int = 0
    dataset_csv: str | None = None

    def __post_init__(self):
        for name in (
            "task_count",
            "classes_per_task",
            "input_dim",
            "samples_per_class",
            "test_per_class",
            "online_batch",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.cluster_spread > 0:
            raise ValueError(f"cluster_spread must be > 0, got {self.cluster_spread}")

    @property
    def n_classes(self) -> int:
        return self.task_count * self.classes_per_task


@dataclass
class OnlineBatch:
    samples: np.ndarray  # [B x d]
    labels: np.ndarray  # [B]
    uids: np.ndarray  # [B]
    task_id: int


@dataclass
class _TaskData:
    """Immutable dataset + batch schedule, shared by all trials of a seed."""

    config: TaskStreamConfig
    train_x: np.ndarray
    train_y: np.ndarray
    train_uids: np.ndarray
    batches: list[tuple[np.ndarray, int]]  # (train row indices, task_id)
    test_x: list[np.ndarray]  # per task
    test_y: list[np.ndarray]
    test_uids: list[np.ndarray]


def _gauss_vec(stream: RngStream, dim: int) -> np.ndarray:
    return np.array([stream.next_gaussian() for _ in range(dim)], dtype=np.float64)


def _shuffled(indices: np.ndarray, stream: RngStream) -> np.ndarray:
    """Fisher-Yates permutation driven by the data stream."""
    out = indices.copy()
    for i in range(len(out) - 1, 0, -1):
        j = stream.next_below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def _schedule(
    config: TaskStreamConfig,
    train_x: np.ndarray,
    train_y: np.ndarray,
    train_uids: np.ndarray,
    test_rows: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    stream: RngStream,
) -> _TaskData:
    """Shuffle each task's training rows and cut them into online batches."""
    k = config.classes_per_task
    batches: list[tuple[np.ndarray, int]] = []
    test_x, test_y, test_uids = [], [], []
    for t in range(config.task_count):
        lo, hi = t * k, (t + 1) * k
        rows = np.where((train_y >= lo) & (train_y < hi))[0]
        rows = _shuffled(rows, stream)
        for start in range(0, len(rows), config.online_batch):
            batches.append((rows[start : start + config.online_batch], t))
        xs = np.vstack([test_rows[c][0] for c in range(lo, hi)])
        ys = np.concatenate([test_rows[c][1] for c in range(lo, hi)])
        us = np.concatenate([test_rows[c][2] for c in range(lo, hi)])
        test_x.append(xs)
        test_y.append(ys)
        test_uids.append(us)
    return _TaskData(config, train_x, train_y, train_uids, batches, test_x, test_y, test_uids)


def _build_synthetic(config: TaskStreamConfig) -> _TaskData:
    stream = new_stream(config.data_seed, "data")
    d = config.input_dim
    n_train = config.n_classes * config.samples_per_class

    # Standardize by the population per-dimension std so features are
    # unit-scale regardless of the spread setting; He-init logits then stay
    # O(1), which keeps the unbounded logit-distillation losses trainable at
    # the default learning rate.  Cluster geometry is unaffected.
    scale = 1.0 / np.sqrt(MEAN_SCALE**2 + config.cluster_spread**2)

    train_x = np.empty((n_train, d), dtype=np.float64)
    train_y = np.empty(n_train, dtype=np.int64)
    train_uids = np.empty(n_train, dtype=np.int64)
    test_rows = []
    uid = 0
    row = 0
    for c in range(config.n_classes):
        mean = MEAN_SCALE * _gauss_vec(stream, d)
        for _ in range(config.samples_per_class):
            train_x[row] = scale * (mean + config.cluster_spread * _gauss_vec(stream, d))
            train_y[row] = c
            train_uids[row] = uid
            uid += 1
            row += 1
        tx = np.empty((config.test_per_class, d), dtype=np.float64)
        tu = np.empty(config.test_per_class, dtype=np.int64)
        for i in range(config.test_per_class):
            tx[i] = scale * (mean + config.cluster_spread * _gauss_vec(stream, d))
            tu[i] = uid
            uid += 1
        test_rows.append((tx, np.full(config.test_per_class, c, dtype=np.int64), tu))

    return _schedule(config, train_x, train_y, train_uids, test_rows, stream)


def _parse_csv(path: str, expected_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(labels, features) from a `label,f0,f1,...` file; errors carry row numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = [h.strip() for h in lines[0].split(",")]
    if header[0] != "label":
        raise ValueError(f"{path}: row 1: header must start with 'label'")
    n_features = len(header) - 1
    if n_features != expected_dim:
        raise ValueError(
            f"{path}: {n_features} features in header but input_dim={expected_dim}"
        )
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n_features + 1:
            raise ValueError(f"{path}: row {lineno}: expected {n_features + 1} fields")
        try:
            label = int(parts[0])
            feats = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: row {lineno}: {exc}") from None
        if label < 0:
            raise ValueError(f"{path}: row {lineno}: negative label")
        labels.append(label)
        rows.append(feats)
    return np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64)


def _build_from_csv(config: TaskStreamConfig) -> _TaskData:
    assert config.dataset_csv is not None
    labels, feats = _parse_csv(config.dataset_csv, config.input_dim)
    stream = new_stream(config.data_seed, "data")

    n_train = config.n_classes * config.samples_per_class
    train_x = np.empty((n_train, config.input_dim), dtype=np.float64)
    train_y = np.empty(n_train, dtype=np.int64)
    train_uids = np.empty(n_train, dtype=np.int64)
    test_rows = []
    row = 0
    need = config.samples_per_class + config.test_per_class
    for c in range(config.n_classes):
        class_rows = np.where(labels == c)[0]
        if len(class_rows) < need:
            raise ValueError(
                f"{config.dataset_csv}: class {c} has {len(class_rows)} rows, "
                f"needs {need}"
            )
        tr = class_rows[: config.samples_per_class]
        te = class_rows[config.samples_per_class : need]
        train_x[row : row + len(tr)] = feats[tr]
        train_y[row : row + len(tr)] = c
        train_uids[row : row + len(tr)] = tr
        row += len(tr)
        test_rows.append((feats[te], np.full(len(te), c, dtype=np.int64), te.astype(np.int64)))

    return _schedule(config, train_x, train_y, train_uids, test_rows, stream)


@functools.lru_cache(maxsize=8)
def _build_task_data(config: TaskStreamConfig) -> _TaskData:
    if config.dataset_csv is not None:
        return _build_from_csv(config)
    return _build_synthetic(config)


class TaskStream:
    """A private cursor over shared immutable task data."""

    def __init__(self, data: _TaskData):
        self._data = data
        self._cursor = 0

    @property
    def config(self) -> TaskStreamConfig:
        return self._data.config

    @property
    def total_batches(self) -> int:
        return len(self._data.batches)

    @property
    def train_uids(self) -> np.ndarray:
        return self._data.train_uids

    @property
    def test_uids(self) -> list[np.ndarray]:
        return self._data.test_uids

    def reset(self) -> None:
        self._cursor = 0

    def next_batch(self) -> OnlineBatch | None:
        if self._cursor >= len(self._data.batches):
            return None
        rows, task_id = self._data.batches[self._cursor]
        self._cursor += 1
        d = self._data
        return OnlineBatch(d.train_x[rows], d.train_y[rows], d.train_uids[rows], task_id)


def build_stream(config: TaskStreamConfig) -> TaskStream:
    """Build (or fetch from the per-process cache) the dataset; fresh cursor."""
    return TaskStream(_build_task_data(config))


def evaluate_accuracy(
    params: ModelParams, stream: TaskStream
) -> tuple[list[float], float]:
    """Single-head class-incremental evaluation over all task test sets.

    Predictions argmax over all C logits; per-task accuracies averaged with
    equal task weight.
    """
    data = stream._data
    per_task = []
    for t in range(data.config.task_count):
        logits, _ = forward(params, data.test_x[t])
        pred = np.argmax(logits, axis=1)
        per_task.append(float(np.mean(pred == data.test_y[t])))
    return per_task, float(np.mean(per_task))
