import numpy as np
import pytest

from replaylab.buffer import (
    WEIGHT_FLOOR,
    ReplayBuffer,
    ReplaySlot,
    WeightPolicy,
    generate_weights,
    normalize_weights,
)
from replaylab.rng import new_stream


def make_item(uid, label=0, step=0):
    return ReplaySlot(
        sample=np.array([float(uid)]),
        label=label,
        stored_logits=None,
        inserted_at=step,
        sample_uid=uid,
    )


# --- reservoir insertion -------------------------------------------------


def test_fill_phase_is_sequential():
    buf = ReplayBuffer(3)
    stream = new_stream(0, "buffer")
    slots = [buf.reservoir_insert(make_item(uid), stream) for uid in range(3)]
    assert slots == [0, 1, 2]
    assert buf.occupied == 3
    assert [s.sample_uid for s in buf.slots] == [0, 1, 2]


def test_fill_phase_consumes_no_randomness():
    buf = ReplayBuffer(3)
    stream = new_stream(5, "buffer")
    untouched = new_stream(5, "buffer")
    for uid in range(3):
        buf.reservoir_insert(make_item(uid), stream)
    assert stream.state == untouched.state


def test_item_past_capacity_discard_and_replace():
    # find stream seeds whose first draw mod 4 lands on each side of M=3
    discard_seed = next(
        s for s in range(100) if new_stream(s, "buffer").next_u64() % 4 == 3
    )
    replace_seed = next(
        s for s in range(100) if new_stream(s, "buffer").next_u64() % 4 < 3
    )

    buf = ReplayBuffer(3)
    stream = new_stream(discard_seed, "buffer")
    for uid in range(3):
        buf.reservoir_insert(make_item(uid), stream)
    assert buf.reservoir_insert(make_item(99), stream) is None
    assert buf.seen_count == 4
    assert [s.sample_uid for s in buf.slots] == [0, 1, 2]

    buf = ReplayBuffer(3)
    stream = new_stream(replace_seed, "buffer")
    for uid in range(3):
        buf.reservoir_insert(make_item(uid), stream)
    j = new_stream(replace_seed, "buffer").next_u64() % 4
    assert buf.reservoir_insert(make_item(99), stream) == j
    assert buf.slots[j].sample_uid == 99


def test_reservoir_retention_is_uniform():
    """Each of 64 streamed items survives in an 8-slot buffer with
    probability 8/64 (Monte Carlo against the reservoir-uniformity theorem)."""
    m, n, reps = 8, 64, 20_000
    stream = new_stream(31337, "buffer")
    counts = np.zeros(n, dtype=np.int64)
    for _ in range(reps):
        buf = ReplayBuffer(m)
        for uid in range(n):
            buf.reservoir_insert(make_item(uid), stream)
        for slot in buf.slots:
            counts[slot.sample_uid] += 1
    freqs = counts / reps
    assert np.all(np.abs(freqs - m / n) < 0.01)


def test_buffer_history_ignores_other_streams():
    def history(consume_other):
        buf = ReplayBuffer(4)
        stream = new_stream(9, "buffer")
        other = new_stream(9, "sampling")
        hist = []
        for uid in range(40):
            if consume_other:
                other.next_f64()
            hist.append((uid, buf.reservoir_insert(make_item(uid), stream)))
        return hist

    assert history(False) == history(True)


# --- weight generation ------------------------------------------------------


def test_uniform_policy_all_ones():
    w = generate_weights(4, WeightPolicy("uniform"), new_stream(0, "weights"))
    assert np.array_equal(w, np.ones(4))


def test_random_fixed_deterministic():
    a = generate_weights(4, WeightPolicy("random_fixed", 3), new_stream(12, "weights"))
    b = generate_weights(4, WeightPolicy("random_fixed", 3), new_stream(12, "weights"))
    assert np.array_equal(a, b)


def test_random_fixed_range_and_mean():
    w = generate_weights(100_000, WeightPolicy("random_fixed"), new_stream(7, "weights"))
    assert np.all(w > WEIGHT_FLOOR)
    assert np.all(w <= 1.0)
    assert abs(w.mean() - 0.5) < 0.01


def test_weight_policy_rejects_unknown_kind():
    with pytest.raises(ValueError):
        WeightPolicy("adaptive")


def test_generate_weights_rejects_bad_capacity():
    with pytest.raises(ValueError):
        generate_weights(0, WeightPolicy("uniform"), new_stream(0, "w"))


# --- normalization ------------------------------------------------------------


def test_normalize_uniform_gives_equal_probabilities():
    p = normalize_weights(np.array([1.0, 1.0, 1.0, 1.0]), 4)
    np.testing.assert_allclose(p, [0.25, 0.25, 0.25, 0.25], atol=1e-15)


def test_normalize_proportional():
    np.testing.assert_allclose(normalize_weights(np.array([1.0, 3.0]), 2), [0.25, 0.75])


def test_normalize_ignores_unoccupied_tail():
    p = normalize_weights(np.array([2.0, 2.0, 2.0, 100.0]), 2)
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)


def test_normalize_sums_to_one():
    w = generate_weights(333, WeightPolicy("random_fixed"), new_stream(2, "weights"))
    assert abs(normalize_weights(w, 333).sum() - 1.0) < 1e-12


def test_normalize_zero_occupied_raises():
    with pytest.raises(ValueError):
        normalize_weights(np.ones(3), 0)


# --- weighted sampling -----------------------------------------------------------


def filled_buffer(weights):
    buf = ReplayBuffer(len(weights), np.asarray(weights, dtype=np.float64))
    stream = new_stream(0, "buffer")
    for uid in range(len(weights)):
        buf.reservoir_insert(make_item(uid), stream)
    return buf


def test_single_slot_degenerate_sampling():
    buf = ReplayBuffer(5)
    buf.reservoir_insert(make_item(0), new_stream(0, "buffer"))
    assert buf.sample_batch(16, new_stream(1, "sampling")) == [0] * 16


def test_sampling_frequencies_follow_weights():
    buf = filled_buffer([1.0, 2.0, 3.0, 4.0])
    draws = buf.sample_batch(200_000, new_stream(3, "sampling"))
    freqs = np.bincount(draws, minlength=4) / len(draws)
    np.testing.assert_allclose(freqs, [0.1, 0.2, 0.3, 0.4], atol=0.01)


def test_sampling_only_occupied_prefix():
    buf = ReplayBuffer(10, np.ones(10))
    stream = new_stream(0, "buffer")
    for uid in range(4):
        buf.reservoir_insert(make_item(uid), stream)
    draws = buf.sample_batch(5000, new_stream(5, "sampling"))
    assert max(draws) <= 3


def test_sampling_empty_buffer_raises():
    with pytest.raises(ValueError):
        ReplayBuffer(3).sample_batch(4, new_stream(0, "sampling"))


def test_sampling_consumes_one_uniform_per_draw():
    buf = filled_buffer([1.0, 2.0, 3.0])
    stream = new_stream(4, "sampling")
    counter = new_stream(4, "sampling")
    buf.sample_batch(25, stream)
    for _ in range(25):
        counter.next_u64()
    assert stream.state == counter.state


def test_slot_weights_never_change():
    weights = generate_weights(16, WeightPolicy("random_fixed", 1), new_stream(6, "weights"))
    buf = ReplayBuffer(16, weights)
    snapshot = buf.weights.copy()
    bstream = new_stream(6, "buffer")
    sstream = new_stream(6, "sampling")
    for uid in range(200):
        buf.reservoir_insert(make_item(uid), bstream)
        buf.sample_batch(8, sstream)
    assert np.array_equal(buf.weights, snapshot)


def test_set_weights_validation():
    buf = ReplayBuffer(3)
    with pytest.raises(ValueError):
        buf.set_weights(np.array([1.0, 0.0, 2.0]))
    with pytest.raises(ValueError):
        buf.set_weights(np.ones(4))


# --- snapshot ----------------------------------------------------------------------


def test_snapshot_csv_columns():
    buf = ReplayBuffer(4, np.array([1.0, 0.5, 2.0, 1.5]))
    stream = new_stream(0, "buffer")
    for uid, label in [(10, 1), (11, 0)]:
        buf.reservoir_insert(make_item(uid, label=label, step=uid - 10), stream)
    lines = buf.snapshot_csv().splitlines()
    assert lines[0] == "slot,sample_uid,label,weight,inserted_at"
    assert lines[1] == "0,10,1,1,0"
    assert lines[2] == "1,11,0,0.5,1"
    assert len(lines) == 3
