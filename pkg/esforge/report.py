"""
SVG report built purely from a run directory's CSV files.

Three panels: task accuracies over iterations (forgetting curve), Frobenius
drift on a log10 scale, and the new-vs-prior accuracy Pareto scatter. Output
depends only on the CSV contents, so regenerating it gives identical bytes.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from esforge.analysis import read_csv  # noqa: E402
from esforge.file_utils import AtomicFileWriter  # noqa: E402

logger = logging.getLogger(__name__)

PANEL_SIZE = (4.0, 3.2)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")

# Fixed salt and no timestamp keep the SVG bytes a pure function of the data
SVG_RC = {"svg.hashsalt": "esforge-report", "svg.fonttype": "none"}

Point = Tuple[float, float]


@dataclass
class Series:
    label: str
    points: List[Point]
    scatter: bool = False


@dataclass
class Panel:
    title: str
    xlabel: str
    ylabel: str
    series: List[Series] = field(default_factory=list)
    y_range: Optional[Tuple[float, float]] = None


def _draw(ax, panel: Panel) -> None:
    ax.set_title(panel.title, fontsize=11)
    ax.set_xlabel(panel.xlabel)
    ax.set_ylabel(panel.ylabel)
    if not any(s.points for s in panel.series):
        ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
        return

    for index, series in enumerate(panel.series):
        if not series.points:
            continue
        xs, ys = zip(*series.points)
        color = COLORS[index % len(COLORS)]
        if series.scatter:
            ax.scatter(xs, ys, s=14, color=color, label=series.label)
        else:
            ax.plot(xs, ys, linewidth=1.5, color=color, label=series.label)
    if panel.y_range:
        ax.set_ylim(*panel.y_range)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)


def render_svg(panels: Sequence[Panel]) -> str:
    """Lay panels out left to right in one SVG document."""
    width, height = PANEL_SIZE
    with plt.rc_context(SVG_RC):
        fig, axes = plt.subplots(
            1, max(len(panels), 1), figsize=(width * max(len(panels), 1), height), squeeze=False
        )
        try:
            for ax, panel in zip(axes[0], panels):
                _draw(ax, panel)
            fig.tight_layout()
            buffer = io.StringIO()
            fig.savefig(buffer, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buffer.getvalue()


def _rows(path: Path) -> List[Dict[str, str]]:
    if not path.exists():
        logger.warning(f"[report] {path.name} missing, panel left empty")
        return []
    return read_csv(path)


def _points(rows: List[Dict[str, str]], x_key: str, y_key: str) -> List[Point]:
    points = []
    for row in rows:
        x, y = row.get(x_key, ""), row.get(y_key, "")
        if x != "" and y != "":
            points.append((float(x), float(y)))
    return points


def _is_finite_number(text: str) -> bool:
    try:
        return math.isfinite(float(text))
    except ValueError:
        return False


def build_panels(run_dir: Path) -> List[Panel]:
    run_dir = Path(run_dir)
    metrics = _rows(run_dir / "metrics.csv")
    drift = _rows(run_dir / "drift.csv")
    pareto = _rows(run_dir / "pareto.csv")
    method = metrics[0]["method"] if metrics else "run"
    finite_drift = [r for r in drift if _is_finite_number(r.get("log10_frobenius", ""))]
    return [
        Panel(
            title=f"Task accuracy ({method})",
            xlabel="iteration",
            ylabel="accuracy",
            series=[
                Series("new task", _points(metrics, "iteration", "new_task_acc")),
                Series("prior task", _points(metrics, "iteration", "prior_task_acc")),
            ],
            y_range=(0.0, 1.0),
        ),
        Panel(
            title="Drift from base",
            xlabel="iteration",
            ylabel="log10 Frobenius",
            series=[Series("log10 ||dW||", _points(finite_drift, "iteration", "log10_frobenius"))],
        ),
        Panel(
            title="New vs prior task",
            xlabel="new-task accuracy",
            ylabel="prior-task accuracy",
            series=[
                Series(
                    "checkpoints",
                    _points(pareto, "new_task_acc", "prior_task_acc"),
                    scatter=True,
                )
            ],
        ),
    ]


def write_report(run_dir: Path) -> Path:
    """Regenerate report.svg in `run_dir` from its CSVs."""
    run_dir = Path(run_dir)
    path = run_dir / "report.svg"
    AtomicFileWriter.write_text(path, render_svg(build_panels(run_dir)))
    logger.info(f"[report] wrote {path}")
    return path
