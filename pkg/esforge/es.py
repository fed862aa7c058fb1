"""
Evolution Strategies with seed replay.

One iteration:
    for each member n:   perturb theta in place by sigma * eps_n (eps_n from
                         member_seed), score it, restore in place
    Z = zscores(R)
    theta += sum_n c * Z_n * eps_n     c = alpha/N, or alpha/(N*sigma) in
                                       canonical mode

Noise is never stored: every pass regenerates eps_n from its seed.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TypeVar, Union

import numpy as np

from esforge.constants import DEFAULT_TRAIN_POOL_SIZE, TAG_BATCH, TAG_ES_MEMBER, ZSCORE_STD_FLOOR
from esforge.errors import ConfigurationError, IntegrityError, MemberError
from esforge.models import EsConfig, SigmaDivisorMode, TaskId
from esforge.noise import NoiseSeed, mix_seed, stream_create
from esforge.params import ParamSet, axpy_noise_inplace
from esforge.tasks import Instance, batch_rewards, task_of, training_pool
from esforge.training import RunLog, TrainHooks, run_loop
from esforge.workers import WorkerPool

logger = logging.getLogger(__name__)

T = TypeVar("T")
RewardFn = Callable[[Instance, Sequence[int]], float]


@dataclass(frozen=True)
class MemberResult:
    member_index: int
    seed: NoiseSeed
    reward: float


@dataclass
class EsIterationStats:
    iteration: int
    mean_reward: float
    max_reward: float
    min_reward: float
    update_norm: float


def member_seed(run_seed: int, iteration: int, member: int) -> NoiseSeed:
    """Seed of population member `member` at `iteration` of run `run_seed`."""
    if iteration < 0 or member < 0:
        raise ConfigurationError(f"iteration and member must be >= 0, got {iteration}, {member}")
    return mix_seed(TAG_ES_MEMBER, run_seed, iteration, member)


def zscores(rewards: Sequence[float]) -> np.ndarray:
    """
    (R - mean) / std with the population std; all zeros when std < 1e-12.

    Raises:
        ConfigurationError: Fewer than two rewards
    """
    values = np.asarray(rewards, dtype=np.float64)
    if values.size < 2:
        raise ConfigurationError(f"z-scores need at least 2 values, got {values.size}")
    std = float(values.std())
    if std < ZSCORE_STD_FLOOR:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def rank_transform(rewards: Sequence[float]) -> np.ndarray:
    """Centered ranks in [-0.5, 0.5]; tied rewards share their average rank."""
    values = np.asarray(rewards, dtype=np.float64)
    n = values.size
    if n < 2:
        return np.zeros(n, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.arange(n, dtype=np.float64)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    sums = np.zeros(counts.size, dtype=np.float64)
    np.add.at(sums, inverse, ranks)
    ranks = (sums / counts)[inverse]
    return ranks / (n - 1) - 0.5


def _mean_reward(
    params: ParamSet,
    batch: Sequence[Instance],
    task: TaskId,
    max_tokens: int,
    reward_fn: Optional[RewardFn],
) -> float:
    return float(np.mean(batch_rewards(params, task, batch, max_tokens, reward_fn)))


def eval_population(
    params: ParamSet,
    cfg: EsConfig,
    iteration: int,
    batch: Sequence[Instance],
    reward_fn: Optional[RewardFn] = None,
) -> List[MemberResult]:
    """
    Score every population member on `batch` with greedy decoding.

    Each member is produced by perturbing params in place and restoring them
    afterwards (subtracting the replayed noise, or copying a snapshot back
    when cfg.exact_restore or alpha is 0). With more than one worker the
    calling thread still walks that same perturb/restore sequence, handing a
    copy of every perturbed point to the pool in waves of `workers`, so
    rewards and any restore drift are bitwise those of the serial run.

    Args:
        params: Current parameters
        cfg: ES configuration
        iteration: 0-based iteration index (part of every member seed)
        batch: Instances of one task
        reward_fn: Optional (instance, output) scorer replacing the task reward

    Returns:
        One MemberResult per member, in member order

    Raises:
        MemberError: If a member's mean reward is non-finite
        NoiseOverflowError: If a perturbation overflows
    """
    if not batch:
        raise ConfigurationError("eval_population needs a non-empty batch")
    task = task_of(batch[0])
    seeds = [member_seed(cfg.run_seed, iteration, n) for n in range(cfg.population_size)]
    pool = WorkerPool(cfg.workers, name="es")
    # alpha == 0 must leave params bitwise untouched
    exact = cfg.exact_restore or cfg.alpha == 0.0
    snapshot = params.snapshot() if exact else None

    def perturbed(seed: NoiseSeed, evaluate: Callable[[ParamSet], T]) -> T:
        axpy_noise_inplace(params, cfg.sigma, stream_create(seed))
        try:
            return evaluate(params)
        finally:
            if snapshot is not None:
                params.restore_from(snapshot)
            else:
                axpy_noise_inplace(params, -cfg.sigma, stream_create(seed))

    def score(member_params: ParamSet) -> float:
        return _mean_reward(member_params, batch, task, cfg.max_tokens, reward_fn)

    if pool.is_serial:
        rewards = [perturbed(seed, score) for seed in seeds]
    else:
        rewards = []
        for start in range(0, len(seeds), pool.workers):
            wave = seeds[start : start + pool.workers]
            copies = [perturbed(seed, ParamSet.deep_copy) for seed in wave]
            rewards.extend(pool.map(score, copies))

    results = []
    for index, (seed, reward) in enumerate(zip(seeds, rewards)):
        if not np.isfinite(reward):
            raise MemberError(index, reward)
        results.append(MemberResult(member_index=index, seed=seed, reward=float(reward)))
    return results


def _ordered(results: Sequence[MemberResult], population_size: int) -> List[MemberResult]:
    indices = sorted(r.member_index for r in results)
    if indices != list(range(population_size)):
        raise IntegrityError(
            f"member indices {indices} do not cover 0..{population_size - 1} exactly once"
        )
    return sorted(results, key=lambda r: r.member_index)


def update_coefficients(results: Sequence[MemberResult], cfg: EsConfig) -> np.ndarray:
    """Per-member noise coefficients, in member order."""
    ordered = _ordered(results, cfg.population_size)
    rewards = np.array([r.reward for r in ordered], dtype=np.float64)
    if cfg.rank_transform:
        rewards = rank_transform(rewards)
    n = cfg.population_size
    if cfg.sigma_divisor_mode == SigmaDivisorMode.CANONICAL:
        scale = cfg.alpha / (n * cfg.sigma)
    else:
        scale = cfg.alpha / n
    return scale * zscores(rewards)


def update_delta(params: ParamSet, results: Sequence[MemberResult], cfg: EsConfig) -> ParamSet:
    """
    The update as a float64 ParamSet: sum over members (ascending index) of
    coefficient * replayed noise.

    Raises:
        IntegrityError: Duplicate or missing member indices
    """
    coefficients = update_coefficients(results, cfg)
    delta = params.zeros_like(np.float64)
    for result, coefficient in zip(_ordered(results, cfg.population_size), coefficients):
        if coefficient != 0.0:
            axpy_noise_inplace(delta, float(coefficient), stream_create(result.seed))
    return delta


def apply_update(params: ParamSet, results: Sequence[MemberResult], cfg: EsConfig) -> float:
    """
    Replay every member's noise and move params along the z-score weighted sum.

    Returns:
        L2 norm of the applied float64 delta (0.0 when nothing moved)

    Raises:
        IntegrityError: Duplicate or missing member indices
    """
    coefficients = update_coefficients(results, cfg)
    if not np.any(coefficients):
        return 0.0
    delta = update_delta(params, results, cfg)
    params.add_scaled(delta, 1.0)
    return delta.global_norm()


def iteration_batch(
    pool: Sequence[Instance], cfg: EsConfig, iteration: int
) -> Sequence[Instance]:
    """The whole pool, or a deterministic per-iteration subsample of it."""
    k = cfg.batch_subsample
    if k == 0 or k >= len(pool):
        return pool
    stream = stream_create(mix_seed(TAG_BATCH, cfg.run_seed, iteration))
    indices = list(range(len(pool)))
    for i in range(k):
        j = i + min(int(stream.next_uniform() * (len(pool) - i)), len(pool) - i - 1)
        indices[i], indices[j] = indices[j], indices[i]
    return [pool[i] for i in sorted(indices[:k])]


def es_step(
    params: ParamSet,
    cfg: EsConfig,
    iteration: int,
    batch: Sequence[Instance],
    reward_fn: Optional[RewardFn] = None,
) -> EsIterationStats:
    """eval_population -> zscores -> apply_update for one iteration."""
    results = eval_population(params, cfg, iteration, batch, reward_fn)
    norm = apply_update(params, results, cfg)
    rewards = [r.reward for r in results]
    return EsIterationStats(
        iteration=iteration + 1,
        mean_reward=float(np.mean(rewards)),
        max_reward=float(np.max(rewards)),
        min_reward=float(np.min(rewards)),
        update_norm=norm,
    )


def es_train(
    params: ParamSet,
    cfg: EsConfig,
    task: Union[str, TaskId],
    iterations: int,
    hooks: Optional[TrainHooks] = None,
    pool_size: int = DEFAULT_TRAIN_POOL_SIZE,
) -> RunLog:
    """
    Fine-tune params in place with ES on the task's fixed training pool.

    Returns:
        RunLog with a row for iteration 0 and every checkpoint iteration
    """
    task = TaskId(task)
    pool = training_pool(task, cfg.run_seed, pool_size)
    initial = _mean_reward(params, pool, task, cfg.max_tokens, None)
    logger.info(
        f"[es] N={cfg.population_size} sigma={cfg.sigma} alpha={cfg.alpha} "
        f"mode={cfg.sigma_divisor_mode.value} pool={len(pool)} iterations={iterations}"
    )

    def step(t: int) -> EsIterationStats:
        return es_step(params, cfg, t, iteration_batch(pool, cfg, t))

    return run_loop("es", params, iterations, hooks, step, initial, cfg.log_every)
