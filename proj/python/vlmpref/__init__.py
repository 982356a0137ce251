"""Preference-based reinforcement learning from vision-language model feedback."""

from ._core import (
    Environment,
    ProviderUnavailable,
    TrainingRun,
    VlmprefError,
    alignment,
    bin_accuracy,
    bin_accuracy_from_run,
    bt_probability,
    default_config,
    expert_rollout,
    learning_curve,
    load_config,
    make_environment,
    normalize_config,
    oracle_label,
    parse_preference,
    parse_schedule,
    parse_score,
    preference_loss,
    prepare_run_dir,
    provider_names,
    train,
)

__all__ = [
    "Environment",
    "ProviderUnavailable",
    "TrainingRun",
    "VlmprefError",
    "alignment",
    "bin_accuracy",
    "bin_accuracy_from_run",
    "bt_probability",
    "default_config",
    "expert_rollout",
    "learning_curve",
    "load_config",
    "make_environment",
    "normalize_config",
    "oracle_label",
    "parse_preference",
    "parse_schedule",
    "parse_score",
    "preference_loss",
    "prepare_run_dir",
    "provider_names",
    "train",
]
