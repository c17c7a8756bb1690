"""Desk-scale diffusion preference alignment: MaPO, Diffusion-DPO and SFT on toy mixtures."""

__version__ = "0.1.0"

from .diffusion import DenoiserParams, Schedule, ancestral_sample, init_denoiser, make_schedule
from .estimator import PreferenceAligner, check_conditions, check_preference_array
from .metrics import MetricsReport, evaluate, two_sample_distance, win_rate
from .objectives import ObjectiveConfig, amplification_factor, dpo_loss, link_phi, mapo_loss, margin_loss
from .tasks import Dataset, TaskSpec, load_dataset, preset, save_dataset, synthesize_preferences
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Checkpoint",
    "Dataset",
    "DenoiserParams",
    "MetricsReport",
    "ObjectiveConfig",
    "PreferenceAligner",
    "Schedule",
    "TaskSpec",
    "TrainConfig",
    "amplification_factor",
    "ancestral_sample",
    "check_conditions",
    "check_preference_array",
    "dpo_loss",
    "evaluate",
    "init_denoiser",
    "link_phi",
    "load_checkpoint",
    "load_dataset",
    "make_schedule",
    "mapo_loss",
    "margin_loss",
    "preset",
    "save_checkpoint",
    "save_dataset",
    "synthesize_preferences",
    "train",
    "two_sample_distance",
    "win_rate",
]
