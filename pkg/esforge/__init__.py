"""
esforge - Evolution Strategies vs GRPO fine-tuning with forgetting diagnostics.

A small autoregressive policy is pretrained on a prior task, fine-tuned on a
new task with either Evolution Strategies (seed-regenerated Gaussian
perturbations, z-scored rewards) or GRPO (clipped group-relative surrogate
with a k3 KL penalty), and every checkpoint is measured for new-task gain,
prior-task forgetting, parameter drift, update sparsity and KL from the base.

Run layout:
- runs/<name>/base.esck           - pretrained base model
- runs/<name>/checkpoints/*.esck  - fine-tuning checkpoints
- runs/<name>/*.csv               - metrics, sparsity, pareto, drift, kl, forgetting
- runs/<name>/report.svg          - plots regenerated from the CSVs
"""

__version__ = "1.0.0"

from esforge.models import (
    EsConfig,
    GrpoConfig,
    ExperimentConfig,
    FinetuneMethod,
    SigmaDivisorMode,
    TaskId,
)

from esforge.config import ConfigManager
from esforge.noise import NoiseStream, stream_create, mix_seed
from esforge.params import ParamSet, ParamKind, ParamGroup, diff_frobenius, diff_sparsity
from esforge.policy import PolicyArch, Vocab, DEFAULT_VOCAB, init_params, generate
from esforge.es import es_train, es_step
from esforge.grpo import grpo_train, grpo_step
from esforge.checkpoint import save_checkpoint, load_checkpoint
from esforge.lab import run_experiment, run_sweep, pretrain

__all__ = [
    # Models
    "EsConfig",
    "GrpoConfig",
    "ExperimentConfig",
    "FinetuneMethod",
    "SigmaDivisorMode",
    "TaskId",
    # Config
    "ConfigManager",
    # Core
    "NoiseStream",
    "stream_create",
    "mix_seed",
    "ParamSet",
    "ParamKind",
    "ParamGroup",
    "diff_frobenius",
    "diff_sparsity",
    "PolicyArch",
    "Vocab",
    "DEFAULT_VOCAB",
    "init_params",
    "generate",
    # Trainers
    "es_train",
    "es_step",
    "grpo_train",
    "grpo_step",
    # Persistence and orchestration
    "save_checkpoint",
    "load_checkpoint",
    "run_experiment",
    "run_sweep",
    "pretrain",
]
