"""Trainable sequence models: assembly, objective, training, evaluation."""

from .config import ModelConfig
from .core import (
    ElboReport,
    ModelState,
    SequenceModel,
    StepData,
    kl_diag_gaussians,
    steps_for,
)
from .infer import (
    ISResult,
    RolloutStep,
    RolloutTrace,
    elbo_estimate,
    is_log_marginal,
    predictive_log_density,
    rollout,
    rollout_scores,
    split_exact_log_likelihood,
    state_sequence,
    warm_state,
)
from .mdn import MdnHead, MdnParams, mdn_log_prob, mdn_sample
from .train import TrainOptions, TrainResult, beta_schedule, train

__all__ = [
    "ElboReport",
    "ISResult",
    "MdnHead",
    "MdnParams",
    "ModelConfig",
    "ModelState",
    "RolloutStep",
    "RolloutTrace",
    "SequenceModel",
    "StepData",
    "TrainOptions",
    "TrainResult",
    "beta_schedule",
    "elbo_estimate",
    "is_log_marginal",
    "kl_diag_gaussians",
    "mdn_log_prob",
    "mdn_sample",
    "predictive_log_density",
    "rollout",
    "rollout_scores",
    "split_exact_log_likelihood",
    "state_sequence",
    "steps_for",
    "train",
    "warm_state",
]
