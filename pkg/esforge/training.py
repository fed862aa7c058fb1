"""
Run log and the iteration loop shared by the ES and GRPO trainers.

Both trainers record a row for the starting parameters (iteration 0) and for
every checkpoint iteration, so their curves line up point for point.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from esforge.constants import DEFAULT_CHECKPOINT_EVERY
from esforge.errors import ConfigurationError, IntegrityError
from esforge.params import ParamSet

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("new_task_acc", "prior_task_acc", "frobenius_vs_base", "kl_vs_base")


@dataclass
class RunRow:
    """Metrics at one checkpoint iteration; evaluation fields stay None until measured."""

    iteration: int
    method: str
    mean_reward: float
    new_task_acc: Optional[float] = None
    prior_task_acc: Optional[float] = None
    frobenius_vs_base: Optional[float] = None
    kl_vs_base: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunLog:
    """Per-checkpoint metrics plus the checkpoint files written for them."""

    method: str
    rows: List[RunRow] = field(default_factory=list)
    checkpoints: List[Tuple[int, Path]] = field(default_factory=list)

    def add_row(self, row: RunRow) -> None:
        """
        Append a row.

        Raises:
            IntegrityError: Non-increasing iteration or accuracy outside [0, 1]
        """
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise IntegrityError(
                f"iteration {row.iteration} does not follow {self.rows[-1].iteration}"
            )
        for name in ("new_task_acc", "prior_task_acc"):
            value = getattr(row, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise IntegrityError(f"{name}={value} outside [0, 1] at iteration {row.iteration}")
        self.rows.append(row)

    def iterations(self) -> List[int]:
        return [row.iteration for row in self.rows]

    def row_at(self, iteration: int) -> RunRow:
        for row in self.rows:
            if row.iteration == iteration:
                return row
        raise KeyError(iteration)


@dataclass
class TrainHooks:
    """
    Callbacks fired by the training loops.

    on_checkpoint(iteration, params) may persist params and return the path.
    evaluate(iteration, params) returns any of the RunRow metric fields.
    on_iteration(iteration, stats) sees every iteration's statistics.
    """

    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    on_checkpoint: Optional[Callable[[int, ParamSet], Optional[Path]]] = None
    evaluate: Optional[Callable[[int, ParamSet], Dict[str, float]]] = None
    on_iteration: Optional[Callable[[int, Any], None]] = None

    def __post_init__(self) -> None:
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def is_checkpoint(self, iteration: int, total: int) -> bool:
        """Every `checkpoint_every` iterations, and always the final one."""
        return iteration % self.checkpoint_every == 0 or iteration == total


def record_checkpoint(
    log: RunLog, hooks: TrainHooks, iteration: int, params: ParamSet, mean_reward: float
) -> RunRow:
    """Fire the checkpoint and evaluation hooks and append the resulting row."""
    if hooks.on_checkpoint is not None:
        path = hooks.on_checkpoint(iteration, params)
        if path is not None:
            log.checkpoints.append((iteration, Path(path)))
    metrics: Dict[str, float] = {}
    if hooks.evaluate is not None:
        metrics = {k: v for k, v in hooks.evaluate(iteration, params).items() if k in METRIC_FIELDS}
    row = RunRow(iteration=iteration, method=log.method, mean_reward=float(mean_reward), **metrics)
    log.add_row(row)
    return row


def run_loop(
    method: str,
    params: ParamSet,
    iterations: int,
    hooks: Optional[TrainHooks],
    step: Callable[[int], Any],
    initial_reward: float,
    log_every: int = 10,
) -> RunLog:
    """
    Drive `step(t)` for t = 0..iterations-1.

    `step` returns a statistics object with a `mean_reward` attribute. Row
    iteration k holds the parameters after k steps.

    Raises:
        ConfigurationError: If iterations < 1
    """
    if iterations < 1:
        raise ConfigurationError(f"iterations must be >= 1, got {iterations}")
    hooks = hooks or TrainHooks()
    log = RunLog(method=method)
    record_checkpoint(log, hooks, 0, params, initial_reward)
    for t in range(iterations):
        stats = step(t)
        iteration = t + 1
        message = f"[{method} it={iteration}] mean_reward={stats.mean_reward:.4f}"
        if iteration % log_every == 0 or iteration == iterations:
            logger.info(message)
        else:
            logger.debug(message)
        if hooks.on_iteration is not None:
            hooks.on_iteration(iteration, stats)
        if hooks.is_checkpoint(iteration, iterations):
            record_checkpoint(log, hooks, iteration, params, stats.mean_reward)
    return log
