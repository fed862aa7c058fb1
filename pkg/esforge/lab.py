"""
Experiment orchestration.

run_experiment:
    1. pretrain a base policy on the prior task (plus new-task format
       demonstrations) until the target accuracy or the iteration cap;
       save base.esck
    2. fine-tune on the new task with ES or GRPO, checkpointing every
       `checkpoint_every` iterations (and always the last one)
    3. evaluate every checkpoint on both tasks, measure drift, sparsity and
       KL against the base, and write the CSV tables and report.svg

Files written into the run directory are kept if a later phase fails.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from esforge.analysis import (
    DriftPoint,
    kl_exact,
    sparsity_profile,
    write_csv,
    write_drift_csv,
    write_forgetting_csv,
    write_kl_csv,
    write_metrics_csv,
    write_pareto_csv,
    write_sparsity_csv,
)
from esforge.checkpoint import load_checkpoint, save_checkpoint
from esforge.config import resolved_text
from esforge.constants import TAG_DEMO, TAG_PRETRAIN
from esforge.es import es_train
from esforge.file_utils import AtomicFileWriter, FileLock
from esforge.grpo import PolicyRole, PolicySnapshot, grpo_step, grpo_train
from esforge.models import ExperimentConfig, FinetuneMethod, PretrainMethod, TaskId
from esforge.noise import mix_seed
from esforge.optim import Adam
from esforge.params import ParamSet, diff_frobenius
from esforge.policy import DEFAULT_VOCAB, generate, init_params, weighted_logprob_grad
from esforge.report import write_report
from esforge.tasks import (
    CountdownInstance,
    accuracy_on,
    eval_set,
    evaluate,
    format_demo,
    gen_parity_suffix,
    get_task,
    render,
    training_pool,
)
from esforge.training import RunLog, TrainHooks

logger = logging.getLogger(__name__)

SWEEP_HEADER = (
    "iteration", "method", "seeds", "new_task_acc", "prior_task_acc",
    "frobenius_vs_base", "kl_vs_base",
)


@dataclass
class PretrainResult:
    iterations: int
    prior_accuracy: float
    history: List[tuple] = field(default_factory=list)

    @property
    def reached_target(self) -> bool:
        return bool(self.history) and self.history[-1][2]


@dataclass
class ExperimentResult:
    run_dir: Path
    run_log: RunLog
    pretrain: PretrainResult
    profiles: List[tuple] = field(default_factory=list)
    drift: List[DriftPoint] = field(default_factory=list)


def _prior_check_set(cfg: ExperimentConfig) -> list:
    return eval_set(cfg.tasks.prior, mix_seed(TAG_PRETRAIN, cfg.eval.seed), cfg.pretrain.eval_n)


def _supervised_batch(cfg: ExperimentConfig, iteration: int) -> list:
    """
    Prior-task instances with their answers, mixed with new-task format
    demonstrations. With parity_curriculum every other parity example is a
    shorter suffix parity, which gives each extra bit a learnable signal.
    """
    size = cfg.pretrain.batch_size
    demos = int(round(cfg.pretrain.format_mix * size))
    prior = get_task(cfg.tasks.prior)
    new = get_task(cfg.tasks.new)
    curriculum = cfg.pretrain.parity_curriculum and prior.task_id == TaskId.PARITY
    sequences = []
    for j in range(size - demos):
        seed = mix_seed(TAG_PRETRAIN, cfg.run.seed, iteration, j)
        inst = gen_parity_suffix(seed) if curriculum and j % 2 else prior.generate(seed)
        sequences.append((list(inst.prompt_tokens), _answer(inst)))
    for j in range(demos):
        seed = mix_seed(TAG_DEMO, cfg.run.seed, iteration, j)
        inst = new.generate(seed)
        if isinstance(inst, CountdownInstance):
            sequences.append((list(inst.prompt_tokens), format_demo(inst, mix_seed(seed, 1))))
        else:
            sequences.append((list(inst.prompt_tokens), _answer(inst)))
    return sequences


def _answer(instance) -> List[int]:
    return [int(instance.label), DEFAULT_VOCAB.eos]


def pretrain(params: ParamSet, cfg: ExperimentConfig) -> PretrainResult:
    """
    Train params in place on the prior task until `pretrain.target_accuracy`
    or `pretrain.iterations`.

    The supervised method maximizes the log-likelihood of correct prior-task
    answers and of new-task format demonstrations with Adam; the grpo method
    runs GRPO steps on the prior task's training pool.
    """
    pre = cfg.pretrain
    check_set = _prior_check_set(cfg)
    history = []

    def check(iteration: int) -> bool:
        acc = accuracy_on(params, cfg.tasks.prior, check_set)
        done = acc >= pre.target_accuracy
        history.append((iteration, acc, done))
        logger.info(f"[pretrain it={iteration}] prior_acc={acc:.4f}")
        return done

    if check(0) or pre.iterations == 0:
        return PretrainResult(0, history[-1][1], history)

    if pre.method == PretrainMethod.GRPO:
        grpo_cfg = cfg.grpo.model_copy(
            update={
                "run_seed": mix_seed(TAG_PRETRAIN, cfg.run.seed),
                "learning_rate": pre.learning_rate,
            }
        )
        pool = training_pool(cfg.tasks.prior, grpo_cfg.run_seed, cfg.finetune.pool_size)
        current = PolicySnapshot(PolicyRole.CURRENT, params)
        old = PolicySnapshot(PolicyRole.OLD, params.deep_copy())
        ref = PolicySnapshot(PolicyRole.REFERENCE, params.deep_copy())

        def step(t: int) -> None:
            grpo_step(current, old, ref, pool, grpo_cfg, step=t)

    else:
        optimizer = Adam(params, pre.learning_rate)

        def step(t: int) -> None:
            sequences = _supervised_batch(cfg, t)
            weights = np.full(len(sequences), 1.0 / len(sequences))
            _, grad = weighted_logprob_grad(params, sequences, weights)
            optimizer.step(grad)

    iteration = 0
    for iteration in range(1, pre.iterations + 1):
        step(iteration - 1)
        if iteration % pre.eval_every == 0 or iteration == pre.iterations:
            if check(iteration):
                break
    if not history[-1][2]:
        logger.warning(
            f"[pretrain] stopped at iteration {iteration} with prior accuracy "
            f"{history[-1][1]:.4f} < target {pre.target_accuracy}"
        )
    return PretrainResult(iteration, history[-1][1], history)


def _finetune(params: ParamSet, cfg: ExperimentConfig, run_dir: Path) -> RunLog:
    ckpt_dir = run_dir / "checkpoints"

    def on_checkpoint(iteration: int, current: ParamSet) -> Path:
        return save_checkpoint(current, ckpt_dir / f"ckpt-{iteration:05d}.esck")

    hooks = TrainHooks(checkpoint_every=cfg.finetune.checkpoint_every, on_checkpoint=on_checkpoint)
    if cfg.finetune.method == FinetuneMethod.ES:
        return es_train(
            params, cfg.es, cfg.tasks.new, cfg.finetune.iterations, hooks, cfg.finetune.pool_size
        )
    return grpo_train(
        params, cfg.grpo, cfg.tasks.new, cfg.finetune.iterations, hooks, cfg.finetune.pool_size
    )


def evaluate_checkpoints(
    run_log: RunLog, base: ParamSet, cfg: ExperimentConfig
) -> tuple:
    """
    Fill every row's accuracies, drift and KL from its checkpoint file.

    Returns:
        (sparsity profiles by iteration, drift points)
    """
    kl_set = eval_set(cfg.tasks.new, cfg.eval.seed, cfg.eval.kl_prompts)
    kl_prompts = [list(inst.prompt_tokens) for inst in kl_set]
    profiles: List[tuple] = []
    drift: List[DriftPoint] = []
    for iteration, path in run_log.checkpoints:
        params = load_checkpoint(path)
        row = run_log.row_at(iteration)
        row.new_task_acc = evaluate(params, cfg.tasks.new, cfg.eval.n, cfg.eval.seed)
        row.prior_task_acc = evaluate(params, cfg.tasks.prior, cfg.eval.n, cfg.eval.seed)
        row.frobenius_vs_base = diff_frobenius(base, params)
        row.kl_vs_base = kl_exact(params, base, kl_prompts)
        profiles.append((iteration, sparsity_profile(base, params, cfg.eval.tau)))
        drift.append(DriftPoint(iteration, row.frobenius_vs_base))
        logger.info(
            f"[lab it={iteration}] new_acc={row.new_task_acc:.4f} "
            f"prior_acc={row.prior_task_acc:.4f} "
            f"frob={row.frobenius_vs_base:.3e} kl={row.kl_vs_base:.3e}"
        )
        if kl_prompts and logger.isEnabledFor(logging.DEBUG):
            sample = generate(params, kl_prompts[0], 0.0, get_task(cfg.tasks.new).max_tokens)
            logger.debug(
                f"[lab it={iteration}] greedy {render(sample.prompt)} -> {render(sample.generated)}"
            )
    return profiles, drift


def write_tables(
    run_dir: Path,
    run_log: RunLog,
    profiles: Sequence[tuple],
    drift: Sequence[DriftPoint],
) -> None:
    write_metrics_csv(run_log, run_dir / "metrics.csv")
    write_sparsity_csv(profiles, run_dir / "sparsity.csv")
    write_pareto_csv(run_log, run_dir / "pareto.csv")
    write_drift_csv(drift, run_dir / "drift.csv")
    write_kl_csv(run_log, run_dir / "kl.csv")
    write_forgetting_csv(run_log, run_dir / "forgetting.csv")


def run_experiment(cfg: ExperimentConfig, run_dir: Optional[Path] = None) -> ExperimentResult:
    """
    Pretrain, fine-tune and evaluate one configuration.

    Args:
        cfg: Experiment configuration
        run_dir: Output directory (defaults to cfg.output.dir)

    Returns:
        ExperimentResult with the completed RunLog

    Raises:
        RuntimeError: If another process holds the run directory lock
        EsforgeError: From any phase; files already written are kept
    """
    run_dir = Path(run_dir or cfg.output.dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(run_dir / "run.lock"):
        AtomicFileWriter.write_text(run_dir / "config.resolved", resolved_text(cfg))
        logger.info(f"[lab] run {run_dir} method={cfg.finetune.method.value} seed={cfg.run.seed}")
        phase = "pretrain"
        try:
            params = init_params(cfg.policy.to_arch(), cfg.run.seed)
            pre = pretrain(params, cfg)
            base = params.deep_copy()
            save_checkpoint(base, run_dir / "base.esck")

            phase = "finetune"
            run_log = _finetune(params, cfg, run_dir)
            write_metrics_csv(run_log, run_dir / "metrics.csv")

            phase = "evaluate"
            profiles, drift = evaluate_checkpoints(run_log, base, cfg)
            write_tables(run_dir, run_log, profiles, drift)
            write_report(run_dir)
        except Exception as e:
            logger.error(f"[lab] {phase} phase failed: {e}; partial outputs kept in {run_dir}")
            raise
    return ExperimentResult(run_dir, run_log, pre, profiles, drift)


def run_sweep(cfg: ExperimentConfig, seeds: Sequence[int], out_dir: Optional[Path] = None) -> Path:
    """
    One experiment per seed in `seed-<s>/`, then sweep.csv with per-iteration
    means across seeds.
    """
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    out_dir = Path(out_dir or cfg.output.dir)
    results = []
    for seed in seeds:
        seed_dir = out_dir / f"seed-{seed}"
        results.append(run_experiment(cfg.with_seed(seed, seed_dir), seed_dir))
    path = out_dir / "sweep.csv"
    write_csv(path, SWEEP_HEADER, sweep_rows([r.run_log for r in results]))
    logger.info(f"[lab] sweep over {len(seeds)} seeds written to {path}")
    return path


def sweep_rows(logs: Sequence[RunLog]) -> List[tuple]:
    """Mean of every metric across runs at each iteration all runs share."""
    shared = sorted(set.intersection(*(set(log.iterations()) for log in logs)))
    rows = []
    for iteration in shared:
        picked = [log.row_at(iteration) for log in logs]
        means: Dict[str, Optional[float]] = {}
        for name in ("new_task_acc", "prior_task_acc", "frobenius_vs_base", "kl_vs_base"):
            values = [getattr(row, name) for row in picked]
            means[name] = None if any(v is None for v in values) else float(np.mean(values))
        rows.append(
            (iteration, picked[0].method, len(picked), means["new_task_acc"],
             means["prior_task_acc"], means["frobenius_vs_base"], means["kl_vs_base"])
        )
    return rows
