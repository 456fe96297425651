"""Hausdorff-bounded point-addition attacks on point-cloud classifiers."""

from .attack import (
    VARIANTS,
    AttackConfig,
    AttackResult,
    default_hyperparams,
    run_attack,
    run_attack_batch,
)
from .defense import DefenseConfig, evaluate_under_defense, sor_filter, spr_filter
from .geometry import hausdorff_distance, normalize_unit_sphere, project_points
from .model import init_model, load_weights, predict, save_weights, train

__all__ = [
    "VARIANTS",
    "AttackConfig",
    "AttackResult",
    "DefenseConfig",
    "default_hyperparams",
    "evaluate_under_defense",
    "hausdorff_distance",
    "init_model",
    "load_weights",
    "normalize_unit_sphere",
    "predict",
    "project_points",
    "run_attack",
    "run_attack_batch",
    "save_weights",
    "sor_filter",
    "spr_filter",
    "train",
]
