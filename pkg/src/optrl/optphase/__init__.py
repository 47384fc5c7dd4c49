"""Online pre-training, kappa-blended fine-tuning and the end-to-end pipeline."""

from .agent import AgentState, PhaseBudget
from .kappa import KAPPA_PRESETS, KappaSchedule, kappa_at, preset_for_tier
from .objectives import (
    finetune_policy_loss, iql_finetune_policy_loss, iql_pretrain_v_objective,
    online_pretrain_objective,
)
from .pipeline import run_finetuning, run_online_pretraining, run_pipeline

__all__ = [
    "AgentState", "PhaseBudget", "KappaSchedule", "KAPPA_PRESETS", "kappa_at", "preset_for_tier",
    "online_pretrain_objective", "iql_pretrain_v_objective", "finetune_policy_loss",
    "iql_finetune_policy_loss", "run_online_pretraining", "run_finetuning", "run_pipeline",
]
