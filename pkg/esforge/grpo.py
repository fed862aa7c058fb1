"""
Group-relative policy optimization baseline.

For each prompt q, G outputs o_i are sampled from the Old policy. Rewards are
z-scored within the group into advantages A_i and the Current policy ascends

    J = 1/P sum_q 1/G sum_i [ min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)
                              - beta * k3(r_i) ]

with sequence-level ratios rho_i = pi_cur(o_i|q) / pi_old(o_i|q),
r_i = pi_ref(o_i|q) / pi_cur(o_i|q) and k3(r) = r - ln r - 1.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from esforge.constants import DEFAULT_TRAIN_POOL_SIZE, TAG_ROLLOUT
from esforge.errors import ConfigurationError, DomainError, GradientError
from esforge.es import zscores
from esforge.models import GrpoConfig, TaskId
from esforge.noise import mix_seed, stream_create
from esforge.params import ParamSet
from esforge.policy import generate_batch, sequence_logprobs, weighted_logprob_grad
from esforge.tasks import Instance, batch_rewards, decode_cap, get_task, task_of, training_pool
from esforge.training import RunLog, TrainHooks, run_loop

logger = logging.getLogger(__name__)

Sequences = Sequence[Tuple[Sequence[int], Sequence[int]]]


class PolicyRole(str, Enum):
    CURRENT = "current"
    OLD = "old"
    REFERENCE = "reference"


@dataclass
class PolicySnapshot:
    """Parameters playing one role in the objective; Old and Reference stay frozen during a step."""

    role: PolicyRole
    params: ParamSet


@dataclass
class GrpoStepMetrics:
    iteration: int
    mean_reward: float
    mean_abs_advantage: float
    clip_fraction: float
    mean_k3: float
    objective: float
    update_norm: float


@dataclass
class ObjectiveTerms:
    """Objective value, its gradient and the per-sequence quantities behind them."""

    objective: float
    grad: ParamSet
    ratios: np.ndarray
    k3: np.ndarray
    clipped: np.ndarray
    weights: np.ndarray
    logprobs: np.ndarray


def advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group z-scores; same contract as es.zscores."""
    return zscores(rewards)


def kl_k3(ratio_ref_over_cur: float) -> float:
    """
    k3 KL estimate r - ln r - 1 (never negative).

    Raises:
        DomainError: If the ratio is not a positive finite number
    """
    r = float(ratio_ref_over_cur)
    if not (r > 0) or math.isinf(r):
        raise DomainError(f"k3 needs a positive finite ratio, got {ratio_ref_over_cur!r}")
    if 0.5 <= r <= 2.0:
        d = r - 1.0
        value = d - math.log1p(d)
    else:
        value = r - math.log(r) - 1.0
    return max(value, 0.0)


def k3_from_log_ratio(log_ratio: np.ndarray) -> np.ndarray:
    """Vectorised k3 on x = ln r: expm1(x) - x."""
    x = np.asarray(log_ratio, dtype=np.float64)
    return np.maximum(np.expm1(x) - x, 0.0)


def surrogate_term(ratio: float, advantage: float, clip_eps: float) -> float:
    """
    min(rho * A, clip(rho, 1 - eps, 1 + eps) * A).

    Raises:
        DomainError: If the ratio is not positive
    """
    if not ratio > 0:
        raise DomainError(f"ratio must be > 0, got {ratio!r}")
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def grpo_objective_and_grad(
    params: ParamSet,
    sequences: Sequences,
    advantages_: Sequence[float],
    old_logprobs: Sequence[float],
    ref_logprobs: Sequence[float],
    clip_eps: float,
    kl_beta: float,
    prompt_count: int,
    group_size: int,
) -> ObjectiveTerms:
    """
    The clipped objective over one minibatch and its exact gradient.

    Each sequence contributes (1/(P*G)) * [A * rho * [unclipped] - beta * (1 - r)]
    times the gradient of its log-probability under params.

    Args:
        params: Current policy
        sequences: (prompt, output) pairs, G per prompt, prompt-major
        advantages_: Advantage per sequence
        old_logprobs: Sequence log-probs under Old
        ref_logprobs: Sequence log-probs under Reference
        clip_eps: Ratio clip epsilon
        kl_beta: k3 penalty coefficient
        prompt_count: P
        group_size: G

    Returns:
        ObjectiveTerms
    """
    adv = np.asarray(advantages_, dtype=np.float64)
    old = np.asarray(old_logprobs, dtype=np.float64)
    ref = np.asarray(ref_logprobs, dtype=np.float64)
    norm = 1.0 / (prompt_count * group_size)
    state = {}

    def weights_from(logprobs: np.ndarray) -> np.ndarray:
        ratios = np.exp(logprobs - old)
        clipped_ratios = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps)
        unclipped = ratios * adv <= clipped_ratios * adv
        log_ref_ratio = ref - logprobs
        state.update(
            ratios=ratios,
            surrogate=np.minimum(ratios * adv, clipped_ratios * adv),
            clipped=~unclipped,
            k3=k3_from_log_ratio(log_ref_ratio),
        )
        weights = norm * (
            np.where(unclipped, adv * ratios, 0.0) - kl_beta * (1.0 - np.exp(log_ref_ratio))
        )
        state["weights"] = weights
        return weights

    logprobs, grad = weighted_logprob_grad(params, sequences, weights_from)
    if not state:
        weights_from(logprobs)
    objective = norm * float(np.sum(state["surrogate"] - kl_beta * state["k3"]))
    return ObjectiveTerms(
        objective=objective,
        grad=grad,
        ratios=state["ratios"],
        k3=state["k3"],
        clipped=state["clipped"],
        weights=state["weights"],
        logprobs=logprobs,
    )


def _check_gradient(
    grad: ParamSet, logprobs: np.ndarray, step: int, first_prompt: int, group_size: int
) -> None:
    if grad.is_finite():
        return
    bad = np.flatnonzero(~np.isfinite(logprobs))
    if bad.size:
        index = int(bad[0])
        raise GradientError(step, first_prompt + index // group_size, index % group_size)
    raise GradientError(step, -1, -1, "non-finite values in accumulated gradient")


def grpo_step(
    current: PolicySnapshot,
    old: PolicySnapshot,
    reference: PolicySnapshot,
    batch: Sequence[Instance],
    cfg: GrpoConfig,
    step: int = 0,
) -> GrpoStepMetrics:
    """
    One pass over `batch`: sample G rollouts per prompt from Old, then one
    ascent step on Current per minibatch of prompts, then Old <- Current.

    Raises:
        ComparabilityError: Snapshots with different structure
        GradientError: Non-finite gradient (step, prompt, member)
    """
    if not batch:
        raise ConfigurationError("grpo_step needs a non-empty batch")
    current.params.check_comparable(old.params)
    current.params.check_comparable(reference.params)
    task = task_of(batch[0])
    task_def = get_task(task)
    g = cfg.group_size
    cap = decode_cap(task, cfg.max_tokens)

    rng = stream_create(mix_seed(TAG_ROLLOUT, cfg.run_seed, step))
    prompts = [list(inst.prompt_tokens) for inst in batch for _ in range(g)]
    rollouts = generate_batch(old.params, prompts, cfg.sample_temperature, cap, rng)
    rewards = np.array(
        [task_def.reward(batch[i // g], r.generated) for i, r in enumerate(rollouts)],
        dtype=np.float64,
    )
    adv = np.concatenate([advantages(rewards[k * g:(k + 1) * g]) for k in range(len(batch))])
    sequences = [(r.prompt, r.generated) for r in rollouts]

    objectives, clip_counts, k3_values, update_sq = [], 0, [], 0.0
    for start in range(0, len(batch), cfg.minibatch):
        stop = min(start + cfg.minibatch, len(batch))
        rows = slice(start * g, stop * g)
        mb_sequences = sequences[rows]
        old_lp = sequence_logprobs(old.params, mb_sequences)
        ref_lp = sequence_logprobs(reference.params, mb_sequences)
        terms = grpo_objective_and_grad(
            current.params, mb_sequences, adv[rows], old_lp, ref_lp,
            cfg.clip_eps, cfg.kl_beta, stop - start, g,
        )
        _check_gradient(terms.grad, terms.logprobs, step, start, g)
        objectives.append(terms.objective)
        clip_counts += int(np.count_nonzero(terms.clipped))
        k3_values.append(terms.k3)
        if cfg.learning_rate > 0 and np.any(terms.weights):
            current.params.add_scaled(terms.grad, cfg.learning_rate)
            update_sq += (cfg.learning_rate * terms.grad.global_norm()) ** 2

    old.params.restore_from(current.params)
    return GrpoStepMetrics(
        iteration=step + 1,
        mean_reward=float(np.mean(rewards)),
        mean_abs_advantage=float(np.mean(np.abs(adv))),
        clip_fraction=clip_counts / len(sequences),
        mean_k3=float(np.mean(np.concatenate(k3_values))),
        objective=float(np.mean(objectives)),
        update_norm=math.sqrt(update_sq),
    )


def grpo_train(
    params: ParamSet,
    cfg: GrpoConfig,
    task: Union[str, TaskId],
    iterations: int,
    hooks: Optional[TrainHooks] = None,
    pool_size: int = DEFAULT_TRAIN_POOL_SIZE,
    reference: Optional[ParamSet] = None,
) -> RunLog:
    """
    Fine-tune params in place with GRPO; one iteration is one pass over the
    training pool in minibatches. The reference policy defaults to a frozen
    copy of the starting params.
    """
    task = TaskId(task)
    pool = training_pool(task, cfg.run_seed, pool_size)
    current = PolicySnapshot(PolicyRole.CURRENT, params)
    old = PolicySnapshot(PolicyRole.OLD, params.deep_copy())
    ref = PolicySnapshot(
        PolicyRole.REFERENCE, reference if reference is not None else params.deep_copy()
    )
    initial = float(np.mean(batch_rewards(params, task, pool, cfg.max_tokens)))
    logger.info(
        f"[grpo] G={cfg.group_size} clip={cfg.clip_eps} beta={cfg.kl_beta} "
        f"lr={cfg.learning_rate} pool={len(pool)} iterations={iterations}"
    )

    def step(t: int) -> GrpoStepMetrics:
        return grpo_step(current, old, ref, pool, cfg, step=t)

    return run_loop("grpo", params, iterations, hooks, step, initial, cfg.log_every)
