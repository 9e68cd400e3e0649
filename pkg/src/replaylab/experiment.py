"""Trial protocol: fixed buffer evolution, per-trial sampling distributions.

A run seed fixes the dataset, the model init, and the buffer-update stream;
the trial id only selects the weight and sampling streams.  Trials therefore
share a bit-identical buffer (sample, label, slot) history while replaying
under different per-slot distributions; the uniform baseline is the trial
with id `uniform_trial_id`.  One combined parameter update per online batch.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .buffer import ReplayBuffer, ReplaySlot, WeightPolicy, generate_weights, normalize_weights
from .losses import (
    HeadLayout,
    LossConfig,
    der_loss,
    derpp_loss,
    er_loss,
    revise_stored_logits,
    xder_loss,
)
from .nn import backward, forward, init_params, per_sample_ce, per_sample_grad_norms, sgd_step
from .rng import new_stream
from .stats import TestResult, mann_whitney_u, mean_std, paired_t_test, spearman
from .tasks import TaskStreamConfig, build_stream, evaluate_accuracy

_MASK64 = (1 << 64) - 1

METHODS = ("er", "der", "derpp", "xder")


@dataclass
class TrialConfig:
    run_seed: int
    trial_id: int
    buffer_capacity: int = 200
    online_batch: int = 32
    replay_batch: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    method: str = "er"
    loss_config: LossConfig = field(default_factory=LossConfig)
    stream_config: TaskStreamConfig = field(default_factory=TaskStreamConfig)
    hidden_sizes: tuple[int, ...] = (64, 64)
    uniform_trial_id: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.buffer_capacity < 1 or self.replay_batch < 1 or self.online_batch < 1:
            raise ValueError("buffer_capacity, replay_batch, online_batch must be >= 1")

    @property
    def policy(self) -> WeightPolicy:
        if self.trial_id == self.uniform_trial_id:
            return WeightPolicy("uniform", self.trial_id)
        return WeightPolicy("random_fixed", self.trial_id)

    @property
    def trial_seed(self) -> int:
        """Seed of the trial-unique streams (weights, sampling)."""
        return (self.run_seed * 64 + self.trial_id) & _MASK64


@dataclass
class SlotMetrics:
    slot: int
    weight: float
    probability: float
    replay_count: int  # lifetime draws of this slot index
    mean_replay_loss: float  # averaged over the final occupant's tenure (nan if none)
    mean_grad_norm: float


@dataclass
class TrialResult:
    run_seed: int
    trial_id: int
    policy_kind: str
    method: str
    buffer_capacity: int
    final_average_accuracy: float
    per_task_accuracy: list[float]
    per_slot_metrics: list[SlotMetrics]
    wall_time: float
    # (step, sample_uid, label, slot) per offered item; slot -1 means discarded
    insert_history: list[tuple[int, int, int, int]]
    update_count: int
    replay_draws: int


def run_trial(config: TrialConfig) -> TrialResult:
    """Execute one trial: stream tasks once, replay under the trial's weights."""
    t_start = time.perf_counter()
    stream_cfg = replace(
        config.stream_config,
        data_seed=config.run_seed,
        online_batch=config.online_batch,
    )
    task_stream = build_stream(stream_cfg)
    t_count = stream_cfg.task_count
    k = stream_cfg.classes_per_task
    n_classes = stream_cfg.n_classes

    params = init_params(
        [stream_cfg.input_dim, *config.hidden_sizes, n_classes],
        new_stream(config.run_seed, "init"),
    )
    buffer_stream = new_stream(config.run_seed, "buffer")
    weights_stream = new_stream(config.trial_seed, "weights")
    sampling_stream = new_stream(config.trial_seed, "sampling")

    cap = config.buffer_capacity
    buf = ReplayBuffer(cap, generate_weights(cap, config.policy, weights_stream))

    lifetime_count = np.zeros(cap, dtype=np.int64)
    tenure_count = np.zeros(cap, dtype=np.int64)
    loss_sum = np.zeros(cap, dtype=np.float64)
    grad_sum = np.zeros(cap, dtype=np.float64)
    history: list[tuple[int, int, int, int]] = []

    store_logits = config.method != "er"
    lcfg = config.loss_config
    step = 0
    updates = 0
    replay_draws = 0

    while (batch := task_stream.next_batch()) is not None:
        layout = HeadLayout(k, t_count, batch.task_id)
        logits_new, cache_new = forward(params, batch.samples)

        replay_logits = None
        cache_replay = None
        idxs: list[int] = []
        replay_x = replay_y = stored = None
        if buf.occupied > 0:
            idxs = buf.sample_batch(config.replay_batch, sampling_stream)
            replay_draws += len(idxs)
            replay_x = np.stack([buf.slots[i].sample for i in idxs])
            replay_y = np.array([buf.slots[i].label for i in idxs], dtype=np.int64)
            if store_logits:
                stored = np.stack([buf.slots[i].stored_logits for i in idxs])
            replay_logits, cache_replay = forward(params, replay_x)

        if config.method == "er":
            loss, dnew, dreplay = er_loss(
                logits_new, batch.labels, replay_logits, replay_y, lcfg.lambda_replay
            )
        elif config.method == "der":
            loss, dnew, dreplay = der_loss(
                logits_new, batch.labels, replay_logits, stored, lcfg.alpha
            )
        elif config.method == "derpp":
            loss, dnew, dreplay = derpp_loss(
                logits_new, batch.labels, replay_logits, replay_y, stored,
                lcfg.alpha, lcfg.beta,
            )
        else:
            loss, dnew, dreplay = xder_loss(
                logits_new, batch.labels, replay_logits, replay_y, stored, lcfg, layout
            )
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")

        # per-slot metrics use the pre-update model, like the replay forward
        if replay_logits is not None:
            ce_rows = per_sample_ce(replay_logits, replay_y)
            gn_rows = per_sample_grad_norms(params, replay_x, replay_y)
            for pos, slot_idx in enumerate(idxs):
                lifetime_count[slot_idx] += 1
                tenure_count[slot_idx] += 1
                loss_sum[slot_idx] += ce_rows[pos]
                grad_sum[slot_idx] += gn_rows[pos]

        dweights, dbiases = backward(params, cache_new, dnew)
        if replay_logits is not None and dreplay is not None and dreplay.any():
            dw2, db2 = backward(params, cache_replay, dreplay)
            dweights = [a + b for a, b in zip(dweights, dw2)]
            dbiases = [a + b for a, b in zip(dbiases, db2)]
        sgd_step(params, dweights, dbiases, config.lr, config.momentum)
        updates += 1

        if config.method == "xder" and replay_logits is not None:
            revised: set[int] = set()
            for pos, slot_idx in enumerate(idxs):
                if slot_idx in revised:
                    continue
                revised.add(slot_idx)
                slot = buf.slots[slot_idx]
                slot.stored_logits = revise_stored_logits(slot, replay_logits[pos], layout)

        for i in range(len(batch.labels)):
            item = ReplaySlot(
                sample=batch.samples[i].copy(),
                label=int(batch.labels[i]),
                stored_logits=logits_new[i].copy() if store_logits else None,
                inserted_at=step,
                sample_uid=int(batch.uids[i]),
            )
            slot = buf.reservoir_insert(item, buffer_stream)
            history.append((step, item.sample_uid, item.label, -1 if slot is None else slot))
            if slot is not None:
                tenure_count[slot] = 0
                loss_sum[slot] = 0.0
                grad_sum[slot] = 0.0
        step += 1

    per_task, final_avg = evaluate_accuracy(params, task_stream)

    occupied = buf.occupied
    probs = normalize_weights(buf.weights, occupied) if occupied else np.zeros(0)
    metrics = []
    for i in range(cap):
        n_tenure = int(tenure_count[i])
        metrics.append(
            SlotMetrics(
                slot=i,
                weight=float(buf.weights[i]),
                probability=float(probs[i]) if i < occupied else 0.0,
                replay_count=int(lifetime_count[i]),
                mean_replay_loss=loss_sum[i] / n_tenure if n_tenure else math.nan,
                mean_grad_norm=grad_sum[i] / n_tenure if n_tenure else math.nan,
            )
        )
    return TrialResult(
        run_seed=config.run_seed,
        trial_id=config.trial_id,
        policy_kind=config.policy.kind,
        method=config.method,
        buffer_capacity=cap,
        final_average_accuracy=final_avg,
        per_task_accuracy=per_task,
        per_slot_metrics=metrics,
        wall_time=time.perf_counter() - t_start,
        insert_history=history,
        update_count=updates,
        replay_draws=replay_draws,
    )


# --- suite ------------------------------------------------------------------


@dataclass
class SuiteResult:
    results: dict[tuple[int, int], TrialResult]
    failures: dict[tuple[int, int], str]
    run_seeds: list[int]
    uniform_trial_id: int
    task_count: int

    def uniform_accuracy(self, seed: int) -> float:
        return self.results[(seed, self.uniform_trial_id)].final_average_accuracy

    def best_nonuniform(self, seed: int) -> tuple[int, float]:
        best_tid, best_acc = -1, -math.inf
        for (s, tid), res in self.results.items():
            if s != seed or tid == self.uniform_trial_id:
                continue
            if res.final_average_accuracy > best_acc:
                best_tid, best_acc = tid, res.final_average_accuracy
        if best_tid < 0:
            raise KeyError(f"no non-uniform trials for seed {seed}")
        return best_tid, best_acc


def _trial_worker(args: tuple[tuple[int, int], TrialConfig]):
    key, cfg = args
    try:
        return key, True, run_trial(cfg)
    except Exception as exc:  # suite keeps going and marks the failure
        return key, False, f"{type(exc).__name__}: {exc}"


def run_suite(
    base_config: TrialConfig, run_seeds: list[int], parallelism: int = 1
) -> SuiteResult:
    """All trials (uniform_trial_id non-uniform + 1 uniform) for each seed."""
    if len(set(run_seeds)) != len(run_seeds):
        raise ValueError("run seeds must be distinct")
    n_trials = base_config.uniform_trial_id + 1
    jobs = [
        ((seed, tid), replace(base_config, run_seed=seed, trial_id=tid))
        for seed in run_seeds
        for tid in range(n_trials)
    ]
    results: dict[tuple[int, int], TrialResult] = {}
    failures: dict[tuple[int, int], str] = {}
    if parallelism <= 1:
        outcomes = map(_trial_worker, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=parallelism)
        chunk = max(1, len(jobs) // (parallelism * 4))
        outcomes = pool.map(_trial_worker, jobs, chunksize=chunk)
    for key, ok, payload in outcomes:
        if ok:
            results[key] = payload
        else:
            failures[key] = payload
    if parallelism > 1:
        pool.shutdown()
    return SuiteResult(
        results=results,
        failures=failures,
        run_seeds=list(run_seeds),
        uniform_trial_id=base_config.uniform_trial_id,
        task_count=base_config.stream_config.task_count,
    )


# --- analysis ----------------------------------------------------------------


@dataclass
class AnalysisReport:
    seeds: list[int]
    uniform_accs: list[float]
    best_accs: list[float]
    best_trial_ids: list[int]
    uniform_mean: float | None
    uniform_std: float | None
    best_mean: float | None
    best_std: float | None
    margin_points: float | None  # (best - uniform) in accuracy points (x100)
    paired_t: TestResult | None
    paired_t_note: str
    corr_seed: int | None
    corr_trial_id: int | None
    spearman_loss: TestResult | None
    spearman_loss_note: str
    spearman_grad: TestResult | None
    spearman_grad_note: str
    high_threshold: float
    low_threshold: float
    high_count: int
    low_count: int
    high_mean_loss: float | None
    low_mean_loss: float | None
    mwu: TestResult | None
    mwu_note: str


def _slot_pairs(result: TrialResult) -> tuple[list[float], list[float], list[float]]:
    """(probability, mean loss, mean grad norm) over slots with replay data."""
    probs, losses, grads = [], [], []
    for m in result.per_slot_metrics:
        if m.replay_count > 0 and math.isfinite(m.mean_replay_loss):
            probs.append(m.probability)
            losses.append(m.mean_replay_loss)
            grads.append(m.mean_grad_norm)
    return probs, losses, grads


def analyze_trials(
    suite: SuiteResult,
    high_threshold: float,
    low_threshold: float,
    corr_seed: int | None = None,
    corr_trial_id: int | None = None,
) -> AnalysisReport:
    """Uniform-vs-best summary, rank correlations, and group comparison.

    Correlations are computed within one trial (default: the best non-uniform
    trial of the first seed); the high/low group comparison pools per-slot
    mean losses over that seed's trials.
    """
    seeds = sorted(set(suite.run_seeds))
    uniform_accs, best_accs, best_tids, paired_seeds = [], [], [], []
    for seed in seeds:
        if (seed, suite.uniform_trial_id) not in suite.results:
            continue
        try:
            tid, best = suite.best_nonuniform(seed)
        except KeyError:
            continue
        paired_seeds.append(seed)
        uniform_accs.append(suite.uniform_accuracy(seed))
        best_accs.append(best)
        best_tids.append(tid)

    uniform_mean = uniform_std = best_mean = best_std = margin = None
    if uniform_accs:
        uniform_mean, uniform_std = mean_std(uniform_accs)
        best_mean, best_std = mean_std(best_accs)
        margin = (best_mean - uniform_mean) * 100.0

    paired_t = None
    paired_t_note = ""
    if len(uniform_accs) >= 2:
        paired_t = paired_t_test(best_accs, uniform_accs)
    else:
        paired_t_note = "unavailable: needs >= 2 seeds with complete trials"

    # correlation trial selection
    sp_loss = sp_grad = None
    sp_loss_note = sp_grad_note = ""
    chosen_seed = corr_seed if corr_seed is not None else (paired_seeds[0] if paired_seeds else None)
    chosen_tid = None
    if chosen_seed is not None:
        if corr_trial_id is not None:
            chosen_tid = corr_trial_id
        else:
            try:
                chosen_tid, _ = suite.best_nonuniform(chosen_seed)
            except KeyError:
                chosen_tid = None
    if chosen_seed is not None and chosen_tid is not None and (chosen_seed, chosen_tid) in suite.results:
        probs, losses, grads = _slot_pairs(suite.results[(chosen_seed, chosen_tid)])
        for values, name in ((losses, "loss"), (grads, "grad")):
            try:
                res = spearman(probs, values)
                note = ""
            except ValueError as exc:
                res, note = None, f"unavailable: {exc}"
            if name == "loss":
                sp_loss, sp_loss_note = res, note
            else:
                sp_grad, sp_grad_note = res, note
    else:
        sp_loss_note = sp_grad_note = "unavailable: no trial with per-slot metrics"

    # high/low group comparison within the chosen seed
    high_pool: list[float] = []
    low_pool: list[float] = []
    high_count = low_count = 0
    if chosen_seed is not None:
        for (seed, _tid), res in sorted(suite.results.items()):
            if seed != chosen_seed:
                continue
            acc = res.final_average_accuracy
            if acc > high_threshold:
                pool = high_pool
                high_count += 1
            elif acc < low_threshold:
                pool = low_pool
                low_count += 1
            else:
                continue
            pool.extend(v for v in _slot_pairs(res)[1])
    mwu = None
    mwu_note = ""
    high_mean = sum(high_pool) / len(high_pool) if high_pool else None
    low_mean = sum(low_pool) / len(low_pool) if low_pool else None
    if high_pool and low_pool:
        mwu = mann_whitney_u(high_pool, low_pool)
    else:
        empty = []
        if not high_pool:
            empty.append("high")
        if not low_pool:
            empty.append("low")
        mwu_note = f"unavailable: empty group(s): {', '.join(empty)}"

    return AnalysisReport(
        seeds=paired_seeds,
        uniform_accs=uniform_accs,
        best_accs=best_accs,
        best_trial_ids=best_tids,
        uniform_mean=uniform_mean,
        uniform_std=uniform_std,
        best_mean=best_mean,
        best_std=best_std,
        margin_points=margin,
        paired_t=paired_t,
        paired_t_note=paired_t_note,
        corr_seed=chosen_seed,
        corr_trial_id=chosen_tid,
        spearman_loss=sp_loss,
        spearman_loss_note=sp_loss_note,
        spearman_grad=sp_grad,
        spearman_grad_note=sp_grad_note,
        high_threshold=high_threshold,
        low_threshold=low_threshold,
        high_count=high_count,
        low_count=low_count,
        high_mean_loss=high_mean,
        low_mean_loss=low_mean,
        mwu=mwu,
        mwu_note=mwu_note,
    )


def format_analysis(report: AnalysisReport) -> str:
    """Plain-text rendering of an AnalysisReport."""

    def fmt_ms(mean: float | None, std: float | None) -> str:
        if mean is None:
            return "n/a"
        std_s = f"{std * 100:.2f}" if std is not None else "n/a"
        return f"{mean * 100:.2f} +- {std_s}"

    def fmt_test(res: TestResult | None, note: str, stat_name: str) -> str:
        if res is None:
            return note or "unavailable"
        return f"{stat_name}={res.statistic:.4f}, p={res.p_value:.4g} ({res.method_note})"

    lines = [
        "non-uniform replay sampling analysis",
        "====================================",
        "",
        f"seeds analyzed: {report.seeds}",
        f"uniform accuracy (%):          {fmt_ms(report.uniform_mean, report.uniform_std)}",
        f"best non-uniform accuracy (%): {fmt_ms(report.best_mean, report.best_std)}",
    ]
    if report.margin_points is not None:
        lines.append(f"margin (accuracy points):      {report.margin_points:+.2f}")
    lines += [
        f"best trial ids per seed: {report.best_trial_ids}",
        "",
        f"paired t-test (best vs uniform): {fmt_test(report.paired_t, report.paired_t_note, 't')}",
        "",
        f"correlation trial: seed={report.corr_seed}, trial={report.corr_trial_id}",
        f"spearman probability vs mean replay loss: "
        f"{fmt_test(report.spearman_loss, report.spearman_loss_note, 'rho')}",
        f"spearman probability vs mean grad norm:   "
        f"{fmt_test(report.spearman_grad, report.spearman_grad_note, 'rho')}",
        "",
        f"groups: high (> {report.high_threshold:.4g}): {report.high_count} trials; "
        f"low (< {report.low_threshold:.4g}): {report.low_count} trials",
    ]
    if report.high_mean_loss is not None:
        lines.append(f"high-group mean per-slot loss: {report.high_mean_loss:.4f}")
    if report.low_mean_loss is not None:
        lines.append(f"low-group mean per-slot loss:  {report.low_mean_loss:.4f}")
    lines.append(
        f"mann-whitney high vs low per-slot loss: {fmt_test(report.mwu, report.mwu_note, 'U')}"
    )
    lines.append("")
    return "\n".join(lines)


# --- CSV I/O ------------------------------------------------------------------


def _g(x: float) -> str:
    """17-significant-digit float field (round-trip exact for doubles)."""
    return f"{x:.17g}"


def write_results_csv(suite: SuiteResult, path: str) -> None:
    """One row per successful trial; wall times live in the manifest, so the
    wall_time_s column is pinned to 0 to keep output byte-deterministic."""
    t_count = suite.task_count
    header = (
        ["run_seed", "trial_id", "policy", "method", "buffer_capacity", "final_avg_accuracy"]
        + [f"acc_task_{t}" for t in range(t_count)]
        + ["wall_time_s"]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for key in sorted(suite.results):
            r = suite.results[key]
            row = [
                str(r.run_seed),
                str(r.trial_id),
                r.policy_kind,
                r.method,
                str(r.buffer_capacity),
                _g(r.final_average_accuracy),
            ]
            row += [_g(a) for a in r.per_task_accuracy]
            row.append("0")
            fh.write(",".join(row) + "\n")


def write_slot_metrics_csv(suite: SuiteResult, path: str) -> None:
    header = [
        "run_seed", "trial_id", "slot", "weight", "probability",
        "replay_count", "mean_replay_loss", "mean_grad_norm",
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for key in sorted(suite.results):
            r = suite.results[key]
            for m in r.per_slot_metrics:
                fh.write(
                    f"{r.run_seed},{r.trial_id},{m.slot},{_g(m.weight)},"
                    f"{_g(m.probability)},{m.replay_count},"
                    f"{_g(m.mean_replay_loss)},{_g(m.mean_grad_norm)}\n"
                )


def suite_from_csvs(results_path: str, slot_metrics_path: str | None) -> SuiteResult:
    """Rebuild the analyzable part of a SuiteResult from the two CSVs.

    slot_metrics_path may be None when per-slot data is not needed (report).
    """
    results: dict[tuple[int, int], TrialResult] = {}
    uniform_tid = None
    t_count = 0
    with open(results_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "final_avg_accuracy" not in reader.fieldnames:
            raise ValueError(f"{results_path}: row 1: missing results header")
        acc_cols = [c for c in reader.fieldnames if c.startswith("acc_task_")]
        t_count = len(acc_cols)
        for lineno, row in enumerate(reader, start=2):
            try:
                seed = int(row["run_seed"])
                tid = int(row["trial_id"])
                results[(seed, tid)] = TrialResult(
                    run_seed=seed,
                    trial_id=tid,
                    policy_kind=row["policy"],
                    method=row["method"],
                    buffer_capacity=int(row["buffer_capacity"]),
                    final_average_accuracy=float(row["final_avg_accuracy"]),
                    per_task_accuracy=[float(row[c]) for c in acc_cols],
                    per_slot_metrics=[],
                    wall_time=float(row["wall_time_s"]),
                    insert_history=[],
                    update_count=0,
                    replay_draws=0,
                )
                if row["policy"] == "uniform":
                    uniform_tid = tid
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{results_path}: row {lineno}: {exc}") from None
    if uniform_tid is None:
        raise ValueError(f"{results_path}: no uniform trial found")

    if slot_metrics_path is None:
        return SuiteResult(
            results=results,
            failures={},
            run_seeds=sorted({seed for seed, _ in results}),
            uniform_trial_id=uniform_tid,
            task_count=t_count,
        )

    with open(slot_metrics_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "mean_replay_loss" not in reader.fieldnames:
            raise ValueError(f"{slot_metrics_path}: row 1: missing slot metrics header")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (int(row["run_seed"]), int(row["trial_id"]))
                metric = SlotMetrics(
                    slot=int(row["slot"]),
                    weight=float(row["weight"]),
                    probability=float(row["probability"]),
                    replay_count=int(row["replay_count"]),
                    mean_replay_loss=float(row["mean_replay_loss"]),
                    mean_grad_norm=float(row["mean_grad_norm"]),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{slot_metrics_path}: row {lineno}: {exc}") from None
            if key in results:
                results[key].per_slot_metrics.append(metric)

    return SuiteResult(
        results=results,
        failures={},
        run_seeds=sorted({seed for seed, _ in results}),
        uniform_trial_id=uniform_tid,
        task_count=t_count,
    )
