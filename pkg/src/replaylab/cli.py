"""Batch front end: run trial suites, analyze results, print the report table.

Config files are line-oriented ``key = value`` text with ``#`` comments.
Unknown keys are hard errors so a typo cannot silently fall back to a
default and invalidate an experiment.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

from . import __version__
from .experiment import (
    SuiteResult,
    TrialConfig,
    analyze_trials,
    format_analysis,
    run_suite,
    suite_from_csvs,
    write_results_csv,
    write_slot_metrics_csv,
)
from .losses import LossConfig
from .stats import mean_std
from .tasks import TaskStreamConfig


class ConfigError(Exception):
    pass


_INT_KEYS = {
    "buffer_capacity", "online_batch", "replay_batch", "task_count",
    "classes_per_task", "input_dim", "samples_per_class", "test_per_class",
    "trials_nonuniform",
}
_FLOAT_KEYS = {
    "lr", "momentum", "cluster_spread", "lambda_replay", "alpha", "beta",
    "lambda_fp", "eta", "tau", "margin",
}
_STR_KEYS = {"method", "dataset_csv", "run_seeds"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS

_METHOD_ALIASES = {
    "er": "er",
    "der": "der",
    "der++": "derpp",
    "derpp": "derpp",
    "x-der": "xder",
    "xder": "xder",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """key = value lines to a typed dict; unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    return values


def build_run_config(values: dict[str, object]) -> tuple[TrialConfig, list[int]]:
    """Resolve a parsed config dict into a base TrialConfig and seed list."""
    method_raw = str(values.get("method", "er")).lower()
    if method_raw not in _METHOD_ALIASES:
        raise ConfigError(f"unknown method {method_raw!r}")
    seeds_raw = str(values.get("run_seeds", "0,1,2,3,4"))
    try:
        run_seeds = [int(s.strip()) for s in seeds_raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad run_seeds: {seeds_raw!r}") from None
    if not run_seeds:
        raise ConfigError("run_seeds is empty")
    if len(set(run_seeds)) != len(run_seeds):
        raise ConfigError("run_seeds must be distinct")

    stream_kwargs = {}
    for key in ("task_count", "classes_per_task", "input_dim", "samples_per_class",
                "test_per_class", "cluster_spread", "online_batch"):
        if key in values:
            stream_kwargs[key] = values[key]
    if "dataset_csv" in values:
        stream_kwargs["dataset_csv"] = str(values["dataset_csv"])
    loss_kwargs = {k: values[k] for k in
                   ("lambda_replay", "alpha", "beta", "lambda_fp", "eta", "tau") if k in values}
    if "margin" in values:
        loss_kwargs["margin"] = values["margin"]

    try:
        stream_config = TaskStreamConfig(**stream_kwargs)
        loss_config = LossConfig(**loss_kwargs)
        base = TrialConfig(
            run_seed=0,
            trial_id=0,
            buffer_capacity=int(values.get("buffer_capacity", 200)),
            online_batch=int(values.get("online_batch", 32)),
            replay_batch=int(values.get("replay_batch", 64)),
            lr=float(values.get("lr", 0.01)),
            momentum=float(values.get("momentum", 0.9)),
            method=_METHOD_ALIASES[method_raw],
            loss_config=loss_config,
            stream_config=stream_config,
            uniform_trial_id=int(values.get("trials_nonuniform", 50)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return base, run_seeds


def _resolved_lines(base: TrialConfig, run_seeds: list[int]) -> list[str]:
    s, l = base.stream_config, base.loss_config
    return [
        f"method = {base.method}",
        f"buffer_capacity = {base.buffer_capacity}",
        f"online_batch = {base.online_batch}",
        f"replay_batch = {base.replay_batch}",
        f"lr = {base.lr}",
        f"momentum = {base.momentum}",
        f"task_count = {s.task_count}",
        f"classes_per_task = {s.classes_per_task}",
        f"input_dim = {s.input_dim}",
        f"samples_per_class = {s.samples_per_class}",
        f"test_per_class = {s.test_per_class}",
        f"cluster_spread = {s.cluster_spread}",
        f"dataset_csv = {s.dataset_csv or ''}",
        f"run_seeds = {','.join(str(x) for x in run_seeds)}",
        f"trials_nonuniform = {base.uniform_trial_id}",
        f"lambda_replay = {l.lambda_replay}",
        f"alpha = {l.alpha}",
        f"beta = {l.beta}",
        f"lambda_fp = {l.lambda_fp}",
        f"eta = {l.eta}",
        f"tau = {l.tau}",
        f"margin = {l.margin}",
    ]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def cmd_run(config_path: str, out_dir: str, parallelism: int = 1) -> int:
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config {config_path}: {exc}", file=sys.stderr)
        return 1
    try:
        base, run_seeds = build_run_config(parse_config_text(text, config_path))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.txt")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("replaylab run manifest\n")
        fh.write(f"version: {__version__}\n")
        fh.write(f"config_path: {os.path.abspath(config_path)}\n")
        fh.write(f"out_dir: {os.path.abspath(out_dir)}\n")
        fh.write(f"parallelism: {parallelism}\n")
        fh.write(f"started_utc: {_utc_now()}\n")
        fh.write("resolved_config:\n")
        for line in _resolved_lines(base, run_seeds):
            fh.write(f"  {line}\n")

    suite = run_suite(base, run_seeds, parallelism=parallelism)

    write_results_csv(suite, os.path.join(out_dir, "results.csv"))
    write_slot_metrics_csv(suite, os.path.join(out_dir, "slot_metrics.csv"))
    with open(manifest_path, "a", encoding="utf-8") as fh:
        fh.write(f"finished_utc: {_utc_now()}\n")
        total = sum(r.wall_time for r in suite.results.values())
        fh.write(f"total_trial_wall_s: {total:.3f}\n")
        fh.write("trial_wall_s:\n")
        for key in sorted(suite.results):
            fh.write(f"  {key[0]},{key[1]},{suite.results[key].wall_time:.3f}\n")
        if suite.failures:
            fh.write("failures:\n")
            for key in sorted(suite.failures):
                fh.write(f"  {key[0]},{key[1]}: {suite.failures[key]}\n")

    if suite.failures:
        for key in sorted(suite.failures):
            print(f"trial {key} failed: {suite.failures[key]}", file=sys.stderr)
        return 2
    return 0


def cmd_analyze(
    in_dir: str,
    high: float = 0.45,
    low: float = 0.42,
    corr_seed: int | None = None,
    corr_trial: int | None = None,
) -> int:
    results_path = os.path.join(in_dir, "results.csv")
    slots_path = os.path.join(in_dir, "slot_metrics.csv")
    try:
        suite = suite_from_csvs(results_path, slots_path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report = analyze_trials(
        suite,
        high_threshold=high,
        low_threshold=low,
        corr_seed=corr_seed,
        corr_trial_id=corr_trial,
    )
    text = format_analysis(report)
    with open(os.path.join(in_dir, "analysis.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def report_table(suite: SuiteResult) -> str:
    """Accuracy table: one row per buffer size, uniform vs best non-uniform."""

    def cell(values: list[float]) -> str:
        mean, std = mean_std(values)
        std_s = f"{std * 100:.2f}" if std is not None else "n/a"
        return f"{mean * 100:.2f} +- {std_s}"

    capacities = sorted({r.buffer_capacity for r in suite.results.values()})
    lines = [
        f"final average accuracy (%), mean +- std over {len(suite.run_seeds)} seed(s)",
        "",
        f"{'buffer size':>11} | {'uniform':>16} | {'best non-uniform':>16}",
        f"{'-' * 11} | {'-' * 16} | {'-' * 16}",
    ]
    for cap in capacities:
        uniform_vals, best_vals = [], []
        for seed in suite.run_seeds:
            per_seed = {
                tid: r for (s, tid), r in suite.results.items()
                if s == seed and r.buffer_capacity == cap
            }
            if suite.uniform_trial_id in per_seed:
                uniform_vals.append(per_seed[suite.uniform_trial_id].final_average_accuracy)
            nonuni = [r.final_average_accuracy for tid, r in per_seed.items()
                      if tid != suite.uniform_trial_id]
            if nonuni:
                best_vals.append(max(nonuni))
        u = cell(uniform_vals) if uniform_vals else "n/a"
        b = cell(best_vals) if best_vals else "n/a"
        lines.append(f"{cap:>11} | {u:>16} | {b:>16}")
    lines.append("")
    return "\n".join(lines)


def cmd_report(in_dir: str) -> int:
    results_path = os.path.join(in_dir, "results.csv")
    try:
        suite = suite_from_csvs(results_path, None)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = report_table(suite)
    with open(os.path.join(in_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="replaylab",
        description="replay-based continual learning with non-uniform memory sampling",
    )
    parser.add_argument("--version", action="version", version=f"replaylab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a trial suite from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--parallel", type=int, default=1)

    p_an = sub.add_parser("analyze", help="statistical analysis of a results directory")
    p_an.add_argument("--in", dest="in_dir", required=True)
    p_an.add_argument("--high", type=float, default=0.45)
    p_an.add_argument("--low", type=float, default=0.42)
    p_an.add_argument("--corr-seed", type=int, default=None,
                      help="seed whose trial supplies per-slot correlations")
    p_an.add_argument("--corr-trial", type=int, default=None,
                      help="trial id for per-slot correlations (default: best non-uniform)")

    p_rep = sub.add_parser("report", help="accuracy table from a results directory")
    p_rep.add_argument("--in", dest="in_dir", required=True)

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.parallel)
    if args.command == "analyze":
        return cmd_analyze(args.in_dir, args.high, args.low, args.corr_seed, args.corr_trial)
    return cmd_report(args.in_dir)


if __name__ == "__main__":
    sys.exit(main())
