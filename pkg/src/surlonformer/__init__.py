"""Deep survival analysis on longitudinal image sequences.

A numpy-only reverse-mode autodiff engine drives a vision-transformer /
sequence-transformer encoder trained with the Cox partial likelihood,
alongside an FPCA-Cox comparator, landmark evaluation metrics, a
synthetic-cohort generator and occlusion-sensitivity interpretation.
"""
__version__ = "0.1.0"

from .cox import (BaselineHazardTable, SurvivalRecord, TrainConfig, breslow_baseline,
                  dynamic_survival, neg_log_partial_likelihood, survival_probability, train)
from .model import ImageSequence, ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .simgen import SimConfig, generate_cohort, load_dataset, save_dataset

__all__ = [
    "__version__",
    "BaselineHazardTable",
    "SurvivalRecord",
    "TrainConfig",
    "breslow_baseline",
    "dynamic_survival",
    "neg_log_partial_likelihood",
    "survival_probability",
    "train",
    "ImageSequence",
    "ModelConfig",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "SimConfig",
    "generate_cohort",
    "load_dataset",
    "save_dataset",
]
