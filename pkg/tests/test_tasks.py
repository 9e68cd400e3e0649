import numpy as np
import pytest

from replaylab.nn import ModelParams, init_params
from replaylab.rng import new_stream
from replaylab.tasks import (
    TaskStreamConfig,
    _build_task_data,
    build_stream,
    evaluate_accuracy,
)

SMALL = TaskStreamConfig(samples_per_class=50, test_per_class=20, input_dim=8, data_seed=3)


def drain(stream):
    batches = []
    while (b := stream.next_batch()) is not None:
        batches.append(b)
    return batches


def fresh_build(config):
    _build_task_data.cache_clear()
    return build_stream(config)


# --- generation ----------------------------------------------------------


def test_generation_is_deterministic():
    a = fresh_build(SMALL)
    b = fresh_build(SMALL)
    batches_a = drain(a)
    batches_b = drain(b)
    assert len(batches_a) == len(batches_b)
    for x, y in zip(batches_a, batches_b):
        assert np.array_equal(x.samples, y.samples)
        assert np.array_equal(x.labels, y.labels)
        assert np.array_equal(x.uids, y.uids)
        assert x.task_id == y.task_id


def test_generation_independent_of_other_streams():
    a = fresh_build(SMALL)
    first_a = a.next_batch()
    _build_task_data.cache_clear()
    # consuming unrelated streams must not shift the data stream
    for _ in range(1234):
        new_stream(3, "sampling").next_f64()
    b = build_stream(SMALL)
    first_b = b.next_batch()
    assert np.array_equal(first_a.samples, first_b.samples)


def test_total_batches_counting():
    config = TaskStreamConfig(samples_per_class=500, online_batch=32)
    stream = build_stream(config)
    # 1000 samples per task at batch 32 -> 32 batches per task, 5 tasks
    assert stream.total_batches == 32 * 5


def test_last_batch_of_task_is_short():
    config = TaskStreamConfig(samples_per_class=500, online_batch=32)
    per_task_sizes = {}
    stream = build_stream(config)
    for batch in drain(stream):
        per_task_sizes.setdefault(batch.task_id, []).append(len(batch.labels))
    for sizes in per_task_sizes.values():
        assert sizes[:-1] == [32] * 31
        assert sizes[-1] == 8


def test_single_pass_uids_are_a_permutation():
    stream = fresh_build(SMALL)
    uids = np.concatenate([b.uids for b in drain(stream)])
    assert len(uids) == len(set(uids.tolist()))
    assert set(uids.tolist()) == set(stream.train_uids.tolist())


def test_task_ids_non_decreasing():
    stream = fresh_build(SMALL)
    ids = [b.task_id for b in drain(stream)]
    assert ids == sorted(ids)


def test_labels_stay_within_task():
    stream = fresh_build(SMALL)
    k = SMALL.classes_per_task
    for batch in drain(stream):
        lo, hi = batch.task_id * k, (batch.task_id + 1) * k
        assert np.all((batch.labels >= lo) & (batch.labels < hi))


def test_tasks_are_class_disjoint():
    stream = fresh_build(SMALL)
    seen = {}
    for batch in drain(stream):
        for label in batch.labels:
            seen.setdefault(int(label), set()).add(batch.task_id)
    assert all(len(tasks) == 1 for tasks in seen.values())


def test_test_sets_disjoint_from_training():
    stream = fresh_build(SMALL)
    train = set(stream.train_uids.tolist())
    test = set(np.concatenate(stream.test_uids).tolist())
    assert not train & test


def test_reset_replays_the_stream():
    stream = fresh_build(SMALL)
    first = stream.next_batch()
    drain(stream)
    stream.reset()
    again = stream.next_batch()
    assert np.array_equal(first.samples, again.samples)


def test_config_validation():
    with pytest.raises(ValueError):
        TaskStreamConfig(task_count=0)
    with pytest.raises(ValueError):
        TaskStreamConfig(cluster_spread=0.0)


# --- evaluation -----------------------------------------------------------------


def nearest_mean_params(stream):
    """Linear nearest-mean classifier: argmax(2 mu_c . x - |mu_c|^2)."""
    config = stream.config
    sums = np.zeros((config.n_classes, config.input_dim))
    counts = np.zeros(config.n_classes)
    stream.reset()
    for batch in drain(stream):
        for x, y in zip(batch.samples, batch.labels):
            sums[y] += x
            counts[y] += 1
    means = sums / counts[:, None]
    w = 2.0 * means
    b = -np.sum(means * means, axis=1)
    return ModelParams([w], [b], [np.zeros_like(w)], [np.zeros_like(b)])


def test_tiny_spread_nearest_mean_is_perfect():
    config = TaskStreamConfig(
        samples_per_class=30, test_per_class=15, input_dim=8,
        cluster_spread=1e-9, data_seed=1,
    )
    stream = fresh_build(config)
    per_task, final = evaluate_accuracy(nearest_mean_params(stream), stream)
    assert final == 1.0
    assert per_task == [1.0] * config.task_count


def test_untrained_model_is_chance_level():
    config = TaskStreamConfig(samples_per_class=5, test_per_class=200, data_seed=0)
    stream = fresh_build(config)
    params = init_params([config.input_dim, 64, 64, config.n_classes], new_stream(0, "init"))
    per_task, final = evaluate_accuracy(params, stream)
    assert len(per_task) == 5
    assert abs(final - 0.10) < 0.03


def test_perfect_params_reach_full_accuracy():
    stream = fresh_build(TaskStreamConfig(
        samples_per_class=40, test_per_class=20, input_dim=8,
        cluster_spread=0.05, data_seed=2,
    ))
    _, final = evaluate_accuracy(nearest_mean_params(stream), stream)
    assert final == 1.0


# --- CSV ingestion -----------------------------------------------------------------


def stream_to_csv(stream, path):
    config = stream.config
    rows = []
    stream.reset()
    for batch in drain(stream):
        for x, y in zip(batch.samples, batch.labels):
            rows.append((int(y), x))
    data = stream._data
    for t in range(config.task_count):
        for x, y in zip(data.test_x[t], data.test_y[t]):
            rows.append((int(y), x))
    # group per class so the first rows of each class become training data
    rows.sort(key=lambda r: r[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(config.input_dim)) + "\n")
        for label, x in rows:
            fh.write(f"{label}," + ",".join(f"{v:.17g}" for v in x) + "\n")


def test_csv_round_trip(tmp_path):
    base = fresh_build(SMALL)
    csv_path = tmp_path / "data.csv"
    stream_to_csv(base, str(csv_path))
    config = TaskStreamConfig(
        samples_per_class=50, test_per_class=20, input_dim=8,
        data_seed=3, dataset_csv=str(csv_path),
    )
    stream = fresh_build(config)
    batches = drain(stream)
    assert sum(len(b.labels) for b in batches) == 50 * config.n_classes
    labels = np.concatenate([b.labels for b in batches])
    for c in range(config.n_classes):
        assert np.sum(labels == c) == 50


def test_csv_insufficient_class_rows(tmp_path):
    path = tmp_path / "small.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,f0,f1\n")
        for c in range(4):
            for _ in range(3):
                fh.write(f"{c},0.0,1.0\n")
    config = TaskStreamConfig(
        task_count=2, classes_per_task=2, input_dim=2,
        samples_per_class=3, test_per_class=1, dataset_csv=str(path),
    )
    with pytest.raises(ValueError, match="class 0 has 3 rows"):
        fresh_build(config)


def test_csv_malformed_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,f0,f1\n")
        fh.write("0,1.0,2.0\n")
        fh.write("0,oops,2.0\n")
    config = TaskStreamConfig(
        task_count=1, classes_per_task=1, input_dim=2,
        samples_per_class=1, test_per_class=1, dataset_csv=str(path),
    )
    with pytest.raises(ValueError, match="row 3"):
        fresh_build(config)


def test_csv_header_dim_mismatch(tmp_path):
    path = tmp_path / "dim.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,f0,f1,f2\n")
        fh.write("0,1.0,2.0,3.0\n")
    config = TaskStreamConfig(
        task_count=1, classes_per_task=1, input_dim=2,
        samples_per_class=1, test_per_class=1, dataset_csv=str(path),
    )
    with pytest.raises(ValueError, match="input_dim"):
        fresh_build(config)


def test_csv_field_count_mismatch(tmp_path):
    path = tmp_path / "fields.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,f0,f1\n")
        fh.write("0,1.0\n")
    config = TaskStreamConfig(
        task_count=1, classes_per_task=1, input_dim=2,
        samples_per_class=1, test_per_class=1, dataset_csv=str(path),
    )
    with pytest.raises(ValueError, match="row 2"):
        fresh_build(config)
