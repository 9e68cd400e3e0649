"""replaylab: replay-based continual learning with non-uniform memory sampling."""

__version__ = "0.1.0"

from .buffer import ReplayBuffer, ReplaySlot, WeightPolicy, generate_weights, normalize_weights
from .experiment import (
    AnalysisReport,
    SuiteResult,
    TrialConfig,
    TrialResult,
    analyze_trials,
    run_suite,
    run_trial,
)
from .losses import HeadLayout, LossConfig
from .rng import RngStream, new_stream
from .tasks import TaskStream, TaskStreamConfig, build_stream, evaluate_accuracy

__all__ = [
    "AnalysisReport",
    "HeadLayout",
    "LossConfig",
    "ReplayBuffer",
    "ReplaySlot",
    "RngStream",
    "SuiteResult",
    "TaskStream",
    "TaskStreamConfig",
    "TrialConfig",
    "TrialResult",
    "WeightPolicy",
    "analyze_trials",
    "build_stream",
    "evaluate_accuracy",
    "generate_weights",
    "new_stream",
    "normalize_weights",
    "run_suite",
    "run_trial",
    "__version__",
]
