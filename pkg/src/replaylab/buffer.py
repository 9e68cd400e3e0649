"""Fixed-capacity replay memory with slot-bound sampling weights.

Insertion is reservoir sampling driven by a dedicated stream, so the sequence
of replacements is a function of the (seed, item order) pair alone.  Sampling
weights are generated once per trial for all capacity slots and belong to the
slot, not the occupant: a replacement inherits the slot's weight.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class WeightPolicy:
    """Per-slot sampling-weight policy: all-ones or one fixed random vector."""

    kind: str  # "uniform" | "random_fixed"
    trial_id: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "random_fixed"):
            raise ValueError(f"unknown weight policy kind: {self.kind!r}")


@dataclass
class ReplaySlot:
    """One stored item: raw sample, label, optional logits, provenance."""

    sample: np.ndarray
    label: int
    stored_logits: np.ndarray | None
    inserted_at: int
    sample_uid: int


class ReplayBuffer:
    """Reservoir-filled slot array with per-slot weights.

    Slots fill front-to-back for the first `capacity` items, then each later
    item replaces a uniformly chosen slot with probability capacity/(n+1).
    Weights must be assigned once (per trial) before sampling and never
    change afterwards.
    """

    def __init__(self, capacity: int, weights: np.ndarray | None = None):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.slots: list[ReplaySlot | None] = [None] * capacity
        self.seen_count = 0
        if weights is None:
            weights = np.ones(capacity, dtype=np.float64)
        self.set_weights(weights)

    def set_weights(self, weights: np.ndarray) -> None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.capacity,):
            raise ValueError(
                f"weights shape {weights.shape} != capacity ({self.capacity},)"
            )
        if np.any(weights <= 0.0):
            raise ValueError("all slot weights must be strictly positive")
        self.weights = weights

    @property
    def occupied(self) -> int:
        return min(self.seen_count, self.capacity)

    def reservoir_insert(self, item: ReplaySlot, buffer_stream: RngStream) -> int | None:
        """Offer one item; returns the slot index if stored, None if discarded.

        Draws from buffer_stream only after the fill phase (one draw per
        offered item), so the replacement schedule depends solely on the
        stream's seed and the number of items offered.
        """
        n = self.seen_count
        self.seen_count = n + 1
        if n < self.capacity:
            self.slots[n] = item
            return n
        j = buffer_stream.next_below(n + 1)
        if j < self.capacity:
            self.slots[j] = item
            return j
        return None

    def sample_batch(self, batch_size: int, sampling_stream: RngStream) -> list[int]:
        """batch_size slot indices drawn with replacement, weight-proportional.

        Inverse-CDF over the cumulative weights of the occupied prefix; one
        uniform consumed per draw.
        """
        occupied = self.occupied
        if occupied == 0:
            raise ValueError("cannot sample from an empty buffer")
        cum = np.cumsum(self.weights[:occupied])
        total = cum[-1]
        targets = np.array(
            [sampling_stream.next_f64() for _ in range(batch_size)], dtype=np.float64
        )
        idx = np.searchsorted(cum, targets * total, side="right")
        # float rounding can land exactly on the total; clamp into range
        np.minimum(idx, occupied - 1, out=idx)
        return idx.tolist()

    def snapshot_csv(self) -> str:
        """Occupied-slot dump: slot, sample_uid, label, weight, inserted_at."""
        out = io.StringIO()
        out.write("slot,sample_uid,label,weight,inserted_at\n")
        for k in range(self.occupied):
            slot = self.slots[k]
            assert slot is not None
            out.write(
                f"{k},{slot.sample_uid},{slot.label},"
                f"{self.weights[k]:.17g},{slot.inserted_at}\n"
            )
        return out.getvalue()


def generate_weights(
    capacity: int, policy: WeightPolicy, weight_stream: RngStream
) -> np.ndarray:
    """One weight per capacity slot, drawn exactly once per trial.

    random_fixed maps uniforms into (WEIGHT_FLOOR, 1] so every slot stays
    reachable and normalization is well-conditioned.
    """
    if capacity <= 0:
        raise ValueError(f"capacity must be positive, got {capacity}")
    if policy.kind == "uniform":
        return np.ones(capacity, dtype=np.float64)
    span = 1.0 - WEIGHT_FLOOR
    return np.array(
        [1.0 - span * weight_stream.next_f64() for _ in range(capacity)],
        dtype=np.float64,
    )


def normalize_weights(weights: np.ndarray, occupied: int) -> np.ndarray:
    """Probabilities over the occupied prefix: p_i = w_i / sum_{j<occupied} w_j."""
    if occupied < 1:
        raise ValueError("cannot normalize over zero occupied slots")
    head = np.asarray(weights, dtype=np.float64)[:occupied]
    return head / head.sum()
