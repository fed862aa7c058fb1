"""
Forgetting diagnostics: drift curves, layerwise sparsity, exact KL, Pareto
and forgetting tables, and their CSV files.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from esforge.constants import DEFAULT_TAU
from esforge.file_utils import AtomicFileWriter
from esforge.params import ParamKind, ParamSet, diff_frobenius, diff_sparsity
from esforge.policy import forward_batch, generate_batch
from esforge.training import RunLog, RunRow

logger = logging.getLogger(__name__)

METRICS_HEADER = (
    "iteration", "method", "new_task_acc", "prior_task_acc",
    "mean_reward", "frobenius_vs_base", "kl_vs_base",
)
SPARSITY_HEADER = ("iteration", "layer_index", "kind", "sparsity", "count", "tau")
PARETO_HEADER = ("iteration", "new_task_acc", "prior_task_acc")
DRIFT_HEADER = ("iteration", "frobenius", "log10_frobenius")
KL_HEADER = ("iteration", "kl_vs_base", "new_task_acc", "prior_task_acc")
FORGETTING_HEADER = ("iteration", "prior_task_acc", "drop_from_max")

KL_MAX_TOKENS = 8


class DriftPoint(NamedTuple):
    iteration: int
    frobenius: float

    @property
    def log10(self) -> float:
        """log10 of the drift; -inf for a zero drift."""
        return math.log10(self.frobenius) if self.frobenius > 0 else -math.inf


class SparsityRow(NamedTuple):
    layer_index: int
    kind: ParamKind
    sparsity: float
    count: int


@dataclass
class SparsityProfile:
    rows: List[SparsityRow]
    tau: float

    @property
    def global_sparsity(self) -> float:
        """Count-weighted mean over rows."""
        total = sum(row.count for row in self.rows)
        if total == 0:
            return 1.0
        return sum(row.sparsity * row.count for row in self.rows) / total


def drift_curve(base: ParamSet, checkpoints: Sequence[Tuple[int, ParamSet]]) -> List[DriftPoint]:
    """
    Frobenius distance of every checkpoint from base.

    Raises:
        ComparabilityError: If a checkpoint does not match base
    """
    return [DriftPoint(int(it), diff_frobenius(base, params)) for it, params in checkpoints]


def sparsity_profile(
    base: ParamSet, checkpoint: ParamSet, tau: float = DEFAULT_TAU
) -> SparsityProfile:
    """Per (layer, kind) fraction of update elements below tau, with element counts."""
    stats = diff_sparsity(base, checkpoint, tau)
    rows = [
        SparsityRow(group.layer_index, group.kind, stats.per_group_sparsity[group],
                    stats.per_group_count[group])
        for group in stats.groups()
    ]
    return SparsityProfile(rows=rows, tau=tau)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise sum_v p ln(p / q), clamped at 0."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    values = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return np.maximum(values, 0.0)


def kl_exact(
    p_params: ParamSet,
    q_params: ParamSet,
    prompts: Sequence[Sequence[int]],
    max_tokens: int = KL_MAX_TOKENS,
) -> float:
    """
    Mean KL(p || q) over every position of p's greedy rollouts.

    Positions from all prompts are pooled with equal weight. Contexts longer
    than the window keep their last W tokens, as during decoding.
    """
    rollouts = generate_batch(p_params, prompts, 0.0, max_tokens)
    contexts = []
    for rollout in rollouts:
        for t in range(len(rollout.generated)):
            contexts.append(rollout.prompt + rollout.generated[:t])
    if not contexts:
        return 0.0
    p = forward_batch(p_params, contexts, strict=False)
    q = forward_batch(q_params, contexts, strict=False)
    return float(np.mean(kl_divergence(p, q)))


def pareto_table(run: RunLog) -> List[Tuple[Optional[float], Optional[float], int]]:
    """(new_task_acc, prior_task_acc, iteration) for every row, in iteration order."""
    return [(row.new_task_acc, row.prior_task_acc, row.iteration) for row in run.rows]


def kl_table(run: RunLog) -> List[Tuple[Optional[float], Optional[float], Optional[float], int]]:
    """(kl_vs_base, new_task_acc, prior_task_acc, iteration) for every row."""
    return [
        (row.kl_vs_base, row.new_task_acc, row.prior_task_acc, row.iteration) for row in run.rows
    ]


def forgetting_curve(run: RunLog) -> List[Tuple[int, float, float]]:
    """(iteration, prior_task_acc, drop from the running maximum) for measured rows."""
    curve = []
    best = -math.inf
    for row in run.rows:
        if row.prior_task_acc is None:
            continue
        best = max(best, row.prior_task_acc)
        curve.append((row.iteration, row.prior_task_acc, best - row.prior_task_acc))
    return curve


def forgetting_summary(run: RunLog) -> Dict[str, float]:
    """Best and final prior-task accuracy and the final drop from the best."""
    curve = forgetting_curve(run)
    if not curve:
        return {"best": math.nan, "best_iteration": math.nan, "final": math.nan, "drop": math.nan}
    best_iteration, best, _ = max(curve, key=lambda point: (point[1], -point[0]))
    final = curve[-1][1]
    return {"best": best, "best_iteration": best_iteration, "final": final, "drop": best - final}


# CSV files

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return ""
        return repr(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    AtomicFileWriter.write_text(Path(path), buffer.getvalue())
    return Path(path)


def read_csv(path: Path) -> List[Dict[str, str]]:
    """Rows of a CSV file as dicts of raw strings."""
    text = AtomicFileWriter.read_text(Path(path))
    if text is None:
        raise FileNotFoundError(path)
    return list(csv.DictReader(io.StringIO(text)))


def _float_or_none(text: str) -> Optional[float]:
    return float(text) if text != "" else None


def write_metrics_csv(run: RunLog, path: Path) -> Path:
    return write_csv(
        path,
        METRICS_HEADER,
        [
            (row.iteration, row.method, row.new_task_acc, row.prior_task_acc,
             row.mean_reward, row.frobenius_vs_base, row.kl_vs_base)
            for row in run.rows
        ],
    )


def read_metrics_csv(path: Path) -> RunLog:
    """
    Parse metrics.csv back into a RunLog.

    Raises:
        ValueError: On a header other than the fixed metrics schema
    """
    text = AtomicFileWriter.read_text(Path(path))
    if text is None:
        raise FileNotFoundError(path)
    header = text.splitlines()[0].split(",") if text else []
    if tuple(header) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header {header}")
    rows = read_csv(path)
    run = RunLog(method=rows[0]["method"] if rows else "")
    for raw in rows:
        run.add_row(
            RunRow(
                iteration=int(raw["iteration"]),
                method=raw["method"],
                mean_reward=float(raw["mean_reward"]),
                new_task_acc=_float_or_none(raw["new_task_acc"]),
                prior_task_acc=_float_or_none(raw["prior_task_acc"]),
                frobenius_vs_base=_float_or_none(raw["frobenius_vs_base"]),
                kl_vs_base=_float_or_none(raw["kl_vs_base"]),
            )
        )
    return run


def write_sparsity_csv(profiles: Sequence[Tuple[int, SparsityProfile]], path: Path) -> Path:
    """One block of rows per checkpoint, iteration column first."""
    rows = [
        (iteration, row.layer_index, row.kind.label, row.sparsity, row.count, profile.tau)
        for iteration, profile in profiles
        for row in profile.rows
    ]
    return write_csv(path, SPARSITY_HEADER, rows)


def write_pareto_csv(run: RunLog, path: Path) -> Path:
    return write_csv(
        path, PARETO_HEADER, [(it, new, prior) for new, prior, it in pareto_table(run)]
    )


def write_drift_csv(points: Sequence[DriftPoint], path: Path) -> Path:
    return write_csv(
        path, DRIFT_HEADER, [(p.iteration, p.frobenius, p.log10) for p in points]
    )


def write_kl_csv(run: RunLog, path: Path) -> Path:
    return write_csv(
        path, KL_HEADER, [(it, kl, new, prior) for kl, new, prior, it in kl_table(run)]
    )


def write_forgetting_csv(run: RunLog, path: Path) -> Path:
    return write_csv(path, FORGETTING_HEADER, forgetting_curve(run))
