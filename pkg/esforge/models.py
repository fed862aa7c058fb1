"""
Configuration models for esforge.

Every experiment knob lives in one of these pydantic models; the key=value
config files parsed by ConfigManager map one-to-one onto their fields
(`es.sigma` -> ExperimentConfig.es.sigma).
"""

from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from esforge.constants import (
    DEFAULT_CHECKPOINT_EVERY,
    DEFAULT_EVAL_SIZE,
    DEFAULT_TAU,
    DEFAULT_TRAIN_POOL_SIZE,
    ESFORGE_OUTPUT_DIR,
)

MAX_SEED = 2**64 - 1


class TaskId(str, Enum):
    """CLI-visible task identifiers."""

    COUNTDOWN = "countdown-mini"
    PARITY = "parity8"


class SigmaDivisorMode(str, Enum):
    """Whether the ES update coefficient is alpha/N (as written) or alpha/(N*sigma)."""

    AS_WRITTEN = "as_written"
    CANONICAL = "canonical"


class FinetuneMethod(str, Enum):
    ES = "es"
    GRPO = "grpo"


class PretrainMethod(str, Enum):
    SUPERVISED = "supervised"
    GRPO = "grpo"


class EsConfig(BaseModel):
    """Evolution Strategies hyperparameters."""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    population_size: int = Field(default=30, ge=2, description="Population size N")
    sigma: float = Field(default=0.001, gt=0, description="Noise scale")
    alpha: float = Field(default=0.0005, ge=0, description="Learning rate (0 freezes params)")
    max_tokens: int = Field(default=16, ge=1, description="Decode cap for member evaluation")
    run_seed: int = Field(default=0, ge=0, le=MAX_SEED, description="Seed for member noise")
    sigma_divisor_mode: SigmaDivisorMode = Field(
        default=SigmaDivisorMode.AS_WRITTEN, description="Update coefficient variant"
    )
    rank_transform: bool = Field(
        default=False, description="Replace rewards by centered ranks before z-scoring"
    )
    exact_restore: bool = Field(
        default=False, description="Restore from a snapshot instead of subtracting the noise"
    )
    workers: Optional[int] = Field(
        default=None, ge=1, description="Evaluation workers (None = ESFORGE_THREADS)"
    )
    batch_subsample: int = Field(
        default=0, ge=0, description="Instances per iteration drawn from the pool (0 = all)"
    )
    log_every: int = Field(default=10, ge=1, description="INFO log cadence in iterations")


class GrpoConfig(BaseModel):
    """Group-relative policy-gradient hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    group_size: int = Field(default=30, ge=2, description="Rollouts per prompt G")
    clip_eps: float = Field(default=0.2, gt=0, lt=1, description="Ratio clip epsilon")
    kl_beta: float = Field(default=0.001, ge=0, description="k3 KL penalty coefficient")
    learning_rate: float = Field(
        default=3e-7, ge=0, description="Plain ascent step size (desk-tuned, 0 freezes params)"
    )
    sample_temperature: float = Field(default=1.0, gt=0, description="Rollout temperature")
    minibatch: int = Field(default=32, ge=1, description="Prompts per gradient step")
    max_tokens: int = Field(default=16, ge=1, description="Decode cap for rollouts")
    run_seed: int = Field(default=0, ge=0, le=MAX_SEED, description="Seed for rollout sampling")
    log_every: int = Field(default=10, ge=1, description="INFO log cadence in iterations")


class PolicySpec(BaseModel):
    """Policy architecture."""

    model_config = ConfigDict(extra="forbid")

    context_window: int = Field(default=24, ge=1, description="Tokens in the context window")
    embed_dim: int = Field(default=16, ge=1, description="Embedding width")
    hidden_dim: int = Field(default=32, ge=1, description="Hidden layer width")
    layers: int = Field(default=1, ge=1, le=2, description="Hidden layers (1 or 2)")

    def to_arch(self):
        from esforge.policy import PolicyArch

        return PolicyArch(
            context_window=self.context_window,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            layers=self.layers,
        )


class PretrainSpec(BaseModel):
    """Base-model pretraining on the prior task."""

    model_config = ConfigDict(extra="forbid")

    method: PretrainMethod = Field(default=PretrainMethod.SUPERVISED)
    iterations: int = Field(default=4000, ge=0, description="Iteration cap")
    target_accuracy: float = Field(default=0.95, ge=0, le=1, description="Stop at this prior acc")
    learning_rate: float = Field(
        default=0.01, gt=0, description="Adam step (supervised) or ascent step (grpo)"
    )
    batch_size: int = Field(default=128, ge=1, description="Sequences per Adam step")
    format_mix: float = Field(
        default=0.25, ge=0, le=1, description="Share of new-task format demonstrations per batch"
    )
    parity_curriculum: bool = Field(
        default=True, description="Mix shorter suffix parities into parity prior-task batches"
    )
    eval_every: int = Field(default=25, ge=1, description="Prior-accuracy check cadence")
    eval_n: int = Field(default=200, ge=1, description="Instances per pretraining check")


class FinetuneSpec(BaseModel):
    """Fine-tuning phase."""

    model_config = ConfigDict(extra="forbid")

    method: FinetuneMethod = Field(default=FinetuneMethod.ES)
    iterations: int = Field(default=300, ge=1)
    checkpoint_every: int = Field(default=DEFAULT_CHECKPOINT_EVERY, ge=1)
    pool_size: int = Field(default=DEFAULT_TRAIN_POOL_SIZE, ge=1, description="Training pool size")


class EvalSpec(BaseModel):
    """Checkpoint evaluation."""

    model_config = ConfigDict(extra="forbid")

    n: int = Field(default=DEFAULT_EVAL_SIZE, ge=1, description="Instances per task")
    seed: int = Field(default=2024, ge=0, le=MAX_SEED, description="Evaluation seed")
    kl_prompts: int = Field(default=64, ge=1, description="New-task prompts used for KL")
    tau: float = Field(default=DEFAULT_TAU, gt=0, description="Sparsity threshold")


class TasksSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    new: TaskId = Field(default=TaskId.COUNTDOWN, description="Task fine-tuned on")
    prior: TaskId = Field(default=TaskId.PARITY, description="Capability that may be forgotten")


class RunSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=1, ge=0, le=MAX_SEED, description="Master run seed")
    name: str = Field(default="", description="Free-form label")


class OutputSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: Path = Field(default=ESFORGE_OUTPUT_DIR, description="Run output directory")


class ExperimentConfig(BaseModel):
    """
    Full experiment configuration.

    The ES and GRPO run seeds always follow `run.seed`, so one seed pins the
    whole experiment.
    """

    model_config = ConfigDict(extra="forbid")

    run: RunSpec = Field(default_factory=RunSpec)
    tasks: TasksSpec = Field(default_factory=TasksSpec)
    policy: PolicySpec = Field(default_factory=PolicySpec)
    pretrain: PretrainSpec = Field(default_factory=PretrainSpec)
    finetune: FinetuneSpec = Field(default_factory=FinetuneSpec)
    es: EsConfig = Field(default_factory=EsConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    eval: EvalSpec = Field(default_factory=EvalSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    @model_validator(mode="after")
    def _sync_run_seeds(self) -> "ExperimentConfig":
        self.es = self.es.model_copy(update={"run_seed": self.run.seed})
        self.grpo = self.grpo.model_copy(update={"run_seed": self.run.seed})
        return self

    def with_seed(self, seed: int, output_dir: Optional[Path] = None) -> "ExperimentConfig":
        """Copy with a different run seed (and optionally output directory)."""
        data = self.model_dump()
        data["run"]["seed"] = seed
        if output_dir is not None:
            data["output"]["dir"] = output_dir
        return ExperimentConfig.model_validate(data)
