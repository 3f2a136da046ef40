from metapix.meta.ablation import SWEEPS, AblationResult, run_ablation
from metapix.meta.schedule import MODES, Segment, Trainer, plan, resume, run_schedule
from metapix.meta.steps import (
    StepResult,
    meta_losses,
    meta_step,
    pretrain_step,
    target_only_step,
    weighted_train_step,
)

__all__ = [
    "MODES",
    "SWEEPS",
    "AblationResult",
    "Segment",
    "StepResult",
    "Trainer",
    "meta_losses",
    "meta_step",
    "plan",
    "pretrain_step",
    "resume",
    "run_ablation",
    "run_schedule",
    "target_only_step",
    "weighted_train_step",
]
