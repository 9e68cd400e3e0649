"""Replay loss family: ER, DER, DER++, and X-DER with its auxiliary terms.

All functions are pure: they take logits (and labels / stored logits) and
return the scalar loss together with gradients with respect to the logits of
the new batch and of the replay batch.  Zero-coefficient terms are skipped
outright, which makes the reduction identities (DER++ with beta=0 equals DER,
and so on) hold bit-for-bit, not just approximately.

An empty replay batch may be passed as None; the corresponding gradient
comes back as None.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .buffer import ReplaySlot
from .nn import softmax_ce


@dataclass
class LossConfig:
    """Coefficients of the loss family; defaults are conventional magnitudes."""

    lambda_replay: float = 1.0  # ER replay-CE weight
    alpha: float = 0.3  # logit-distillation weight
    beta: float = 0.5  # replay-CE weight (DER++ / selective CE)
    lambda_fp: float = 0.1  # future-preparation weight
    eta: float = 0.1  # past/future-constraint weight
    tau: float = 0.1  # contrastive temperature
    margin: float = 0.3  # hinge margin

    def __post_init__(self):
        for name in ("lambda_replay", "alpha", "beta", "lambda_fp", "eta", "margin"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"tau must be finite and > 0, got {self.tau}")


@dataclass(frozen=True)
class HeadLayout:
    """Contiguous logit heads: task t owns indices [t*k, (t+1)*k)."""

    classes_per_task: int
    task_count: int
    current_task: int

    def __post_init__(self):
        if self.classes_per_task < 1 or self.task_count < 1:
            raise ValueError("classes_per_task and task_count must be >= 1")
        if not 0 <= self.current_task < self.task_count:
            raise ValueError(
                f"current_task {self.current_task} outside [0, {self.task_count})"
            )

    @property
    def n_classes(self) -> int:
        return self.classes_per_task * self.task_count

    @property
    def current_slice(self) -> slice:
        k = self.classes_per_task
        return slice(self.current_task * k, (self.current_task + 1) * k)

    @property
    def past_width(self) -> int:
        return self.current_task * self.classes_per_task

    @property
    def future_start(self) -> int:
        return (self.current_task + 1) * self.classes_per_task

    @property
    def future_width(self) -> int:
        return self.n_classes - self.future_start

    def task_of_label(self, label: int) -> int:
        return int(label) // self.classes_per_task


def _is_empty(batch: np.ndarray | None) -> bool:
    return batch is None or len(batch) == 0


def _empty_like(logits: np.ndarray | None) -> np.ndarray | None:
    if logits is None:
        return None
    return np.zeros_like(logits)


# --- ER / DER / DER++ -----------------------------------------------------


def er_loss(
    new_logits: np.ndarray,
    new_labels: np.ndarray,
    replay_logits: np.ndarray | None,
    replay_labels: np.ndarray | None,
    lambda_replay: float,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """CE(new) + lambda * CE(replay); replay term vanishes on empty batches."""
    loss, dnew = softmax_ce(new_logits, new_labels)
    if lambda_replay == 0.0 or _is_empty(replay_logits):
        return loss, dnew, _empty_like(replay_logits)
    loss_r, dreplay = softmax_ce(replay_logits, replay_labels)
    return loss + lambda_replay * loss_r, dnew, lambda_replay * dreplay


def _distillation(
    replay_logits: np.ndarray, stored_logits: np.ndarray, alpha: float
) -> tuple[float, np.ndarray]:
    """alpha * mean_j ||h_j - z_j||^2 and its gradient with respect to h."""
    if replay_logits.shape != stored_logits.shape:
        raise ValueError(
            f"replay logits {replay_logits.shape} vs stored {stored_logits.shape}"
        )
    b = replay_logits.shape[0]
    diff = replay_logits - stored_logits
    loss = alpha * float(np.sum(diff * diff)) / b
    return loss, (2.0 * alpha / b) * diff


def der_loss(
    new_logits: np.ndarray,
    new_labels: np.ndarray,
    replay_logits: np.ndarray | None,
    stored_logits: np.ndarray | None,
    alpha: float,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """CE(new) + alpha * mean squared distance to the stored logits."""
    loss, dnew = softmax_ce(new_logits, new_labels)
    if alpha == 0.0 or _is_empty(replay_logits):
        return loss, dnew, _empty_like(replay_logits)
    dist, dreplay = _distillation(replay_logits, stored_logits, alpha)
    return loss + dist, dnew, dreplay


def derpp_loss(
    new_logits: np.ndarray,
    new_labels: np.ndarray,
    replay_logits: np.ndarray | None,
    replay_labels: np.ndarray | None,
    stored_logits: np.ndarray | None,
    alpha: float,
    beta: float,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """DER plus beta * CE on the replayed samples' ground-truth labels."""
    loss, dnew, dreplay = der_loss(
        new_logits, new_labels, replay_logits, stored_logits, alpha
    )
    if beta == 0.0 or _is_empty(replay_logits):
        return loss, dnew, dreplay
    loss_r, dr = softmax_ce(replay_logits, replay_labels)
    if dreplay is None or dreplay.size == 0:
        dreplay = np.zeros_like(replay_logits)
    return loss + beta * loss_r, dnew, dreplay + beta * dr


# --- X-DER auxiliary terms --------------------------------------------------


def selective_ce(
    new_logits: np.ndarray,
    new_labels: np.ndarray,
    replay_logits: np.ndarray | None,
    replay_labels: np.ndarray | None,
    layout: HeadLayout,
    beta: float,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Cross-entropy restricted to the current task's logit slice.

    New-batch labels must belong to the current task.  Replay rows join the
    beta-weighted term only when their label falls inside the current task
    (a mini-batch mean over those rows); other replay rows are skipped.
    """
    k = layout.classes_per_task
    base = layout.current_task * k
    new_labels = np.asarray(new_labels, dtype=np.int64)
    if new_labels.size and (new_labels.min() < base or new_labels.max() >= base + k):
        raise ValueError("new-batch label outside the current task")

    sl = layout.current_slice
    loss, d_slice = softmax_ce(new_logits[:, sl], new_labels - base)
    dnew = np.zeros_like(new_logits)
    dnew[:, sl] = d_slice

    dreplay = _empty_like(replay_logits)
    if beta == 0.0 or _is_empty(replay_logits):
        return loss, dnew, dreplay

    replay_labels = np.asarray(replay_labels, dtype=np.int64)
    mask = (replay_labels >= base) & (replay_labels < base + k)
    if not mask.any():
        return loss, dnew, dreplay
    loss_r, d_r = softmax_ce(replay_logits[mask][:, sl], replay_labels[mask] - base)
    rows = np.where(mask)[0]
    dreplay[rows[:, None], np.arange(sl.start, sl.stop)[None, :]] = beta * d_r
    return loss + beta * loss_r, dnew, dreplay


def _future_prep_core(
    h_norm: np.ndarray, labels: np.ndarray, layout: HeadLayout, tau: float
) -> tuple[float, np.ndarray]:
    """Contrastive loss over future-head rows, gradient w.r.t. the rows.

    Assumes rows are already L2-normalized; the formula itself is defined for
    any rows, which is what the finite-difference checks exercise.
    """
    n = h_norm.shape[0]
    grad = np.zeros_like(h_norm)
    if n < 2:
        return 0.0, grad

    labels = np.asarray(labels, dtype=np.int64)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    anchor_rows = np.where(same.any(axis=1))[0]
    if anchor_rows.size == 0:
        return 0.0, grad

    kappa = 1.0 / (layout.task_count - (layout.current_task + 1))
    sim = (h_norm @ h_norm.T) / tau

    n_anchors = anchor_rows.size
    total = 0.0
    dsim = np.zeros_like(sim)
    for i in anchor_rows:
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        row = sim[i, others]
        m = row.max()
        e = np.exp(row - m)
        z = e.sum()
        log_z = m + np.log(z)
        pos = others[same[i, others]]
        total += kappa * (log_z - sim[i, pos].mean())
        # d(loss_i)/d(sim[i, k]) = kappa * (softmax_k - 1[k positive]/|P|)
        coeff = (kappa / n_anchors) * (e / z)
        dsim[i, others] += coeff
        dsim[i, pos] -= kappa / (n_anchors * pos.size)
    loss = total / n_anchors
    grad = (dsim + dsim.T) @ h_norm / tau
    return loss, grad


def future_prep_loss(
    h_future: np.ndarray, labels: np.ndarray, layout: HeadLayout, tau: float
) -> tuple[float, np.ndarray]:
    """Future-head consistency loss on L2-normalized future logits.

    Anchors without a same-class partner contribute nothing; with no future
    heads (last task) the loss is identically zero.
    """
    h_future = np.asarray(h_future, dtype=np.float64)
    if layout.future_width == 0:
        return 0.0, np.zeros_like(h_future)
    if h_future.ndim != 2 or h_future.shape[1] != layout.future_width:
        raise ValueError(
            f"expected [N x {layout.future_width}] future logits, got {h_future.shape}"
        )
    if h_future.shape[0] > 0:
        norms = np.linalg.norm(h_future, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("future logits rows must be L2-normalized")
    return _future_prep_core(h_future, labels, layout, tau)


def past_future_constraint(
    logits: np.ndarray, label: int, layout: HeadLayout, margin: float
) -> tuple[float, np.ndarray]:
    """Hinge keeping past/future head maxima below the ground-truth logit.

    Missing slices (first or last task) contribute zero; the subgradient at
    an exactly-zero hinge is zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    c_total = layout.n_classes
    if logits.shape != (c_total,):
        raise ValueError(f"expected logits of shape ({c_total},), got {logits.shape}")
    if not 0 <= label < c_total:
        raise ValueError(f"label {label} outside [0, {c_total})")

    grad = np.zeros_like(logits)
    h_gt = logits[label]
    loss = 0.0

    pw = layout.past_width
    if pw > 0:
        arg = int(np.argmax(logits[:pw]))
        gap = logits[arg] - h_gt + margin
        if gap > 0.0:
            loss += gap
            grad[arg] += 1.0
            grad[label] -= 1.0

    fs = layout.future_start
    if fs < c_total:
        arg = fs + int(np.argmax(logits[fs:]))
        gap = logits[arg] - h_gt + margin
        if gap > 0.0:
            loss += gap
            grad[arg] += 1.0
            grad[label] -= 1.0
    return loss, grad


def xder_loss(
    new_logits: np.ndarray,
    new_labels: np.ndarray,
    replay_logits: np.ndarray | None,
    replay_labels: np.ndarray | None,
    stored_logits: np.ndarray | None,
    config: LossConfig,
    layout: HeadLayout,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Selective CE + logit distillation + future-preparation terms.

    The future-preparation and past/future-constraint terms act on the
    combined (new + replay) batch; gradients of the contrastive term are
    chained through the row L2 normalization of the future logits.
    """
    total, dnew, dreplay = selective_ce(
        new_logits, new_labels, replay_logits, replay_labels, layout, config.beta
    )
    has_replay = not _is_empty(replay_logits)
    if config.alpha != 0.0 and has_replay:
        dist, d_dist = _distillation(replay_logits, stored_logits, config.alpha)
        total += dist
        dreplay = dreplay + d_dist

    n_new = new_logits.shape[0]
    if has_replay:
        combined = np.vstack([new_logits, replay_logits])
        labels_comb = np.concatenate(
            [np.asarray(new_labels, dtype=np.int64), np.asarray(replay_labels, dtype=np.int64)]
        )
    else:
        combined = new_logits
        labels_comb = np.asarray(new_labels, dtype=np.int64)
    n_comb = combined.shape[0]

    if config.lambda_fp != 0.0 and layout.future_width > 0 and n_comb >= 2:
        fu = slice(layout.future_start, layout.n_classes)
        h = combined[:, fu]
        norms = np.linalg.norm(h, axis=1)
        valid = norms > 1e-12
        if int(valid.sum()) >= 2:
            h_unit = h[valid] / norms[valid, None]
            fp, d_unit = _future_prep_core(h_unit, labels_comb[valid], layout, config.tau)
            total += config.lambda_fp * fp
            d_unit = config.lambda_fp * d_unit
            # chain rule through h_unit = h / |h|
            radial = np.sum(d_unit * h_unit, axis=1, keepdims=True)
            d_rows = (d_unit - h_unit * radial) / norms[valid, None]
            d_fu = np.zeros_like(h)
            d_fu[valid] = d_rows
            dnew[:, fu] += d_fu[:n_new]
            if has_replay:
                dreplay[:, fu] += d_fu[n_new:]

    if config.eta != 0.0:
        pfc_sum = 0.0
        pfc_grads = np.zeros_like(combined)
        for i in range(n_comb):
            l_i, g_i = past_future_constraint(
                combined[i], int(labels_comb[i]), layout, config.margin
            )
            pfc_sum += l_i
            pfc_grads[i] = g_i
        total += config.eta * pfc_sum / n_comb
        scale = config.eta / n_comb
        dnew += scale * pfc_grads[:n_new]
        if has_replay:
            dreplay += scale * pfc_grads[n_new:]

    return total, dnew, dreplay


def revise_stored_logits(
    slot: ReplaySlot, current_logits: np.ndarray, layout: HeadLayout
) -> np.ndarray:
    """Overwrite stored-logit entries of tasks learned after the slot's own.

    Head slices for tasks t_insert+1 .. current_task take the current model
    logits; the slot's own task and earlier, and not-yet-started tasks, keep
    their stored values.  Idempotent for a fixed current_logits.
    """
    if slot.stored_logits is None:
        raise ValueError("slot has no stored logits to revise")
    current_logits = np.asarray(current_logits, dtype=np.float64)
    c_total = layout.n_classes
    if slot.stored_logits.shape != (c_total,) or current_logits.shape != (c_total,):
        raise ValueError("stored/current logits must have length n_classes")
    k = layout.classes_per_task
    lo = (layout.task_of_label(slot.label) + 1) * k
    hi = (layout.current_task + 1) * k
    updated = slot.stored_logits.copy()
    if hi > lo:
        updated[lo:hi] = current_logits[lo:hi]
    return updated
