"""
Command-line interface for esforge.

Commands:
- train-es / train-grpo: full experiment (pretrain, fine-tune, evaluate)
- pretrain: manufacture and save a base model only
- eval: accuracy of a checkpoint on a task
- diff: drift and layerwise sparsity between two checkpoints
- report: regenerate report.svg from a run's CSVs
- sweep: one experiment per seed plus mean curves

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from esforge.checkpoint import load_checkpoint, save_checkpoint
from esforge.config import ConfigManager
from esforge.constants import DEFAULT_TAU, ESFORGE_LOG_LEVEL, LOG_FORMAT
from esforge.errors import ConfigurationError
from esforge.lab import pretrain, run_experiment, run_sweep
from esforge.models import MAX_SEED, ExperimentConfig, FinetuneMethod
from esforge.params import diff_sparsity
from esforge.policy import init_params
from esforge.report import write_report
from esforge.tasks import evaluate

logger = logging.getLogger("esforge")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors instead of exiting with 2."""

    def error(self, message):
        raise UsageError(message)


def setup_logging(verbose: bool = False) -> None:
    """Log to stdout; --verbose switches to DEBUG."""
    level = logging.DEBUG if verbose else getattr(logging, ESFORGE_LOG_LEVEL, logging.INFO)
    logging.basicConfig(
        level=level, format=LOG_FORMAT, handlers=[logging.StreamHandler(sys.stdout)]
    )
    logger.setLevel(level)


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits: {text}")
    return value


def _seed_list(text: str) -> List[int]:
    try:
        seeds = [_u64(part.strip()) for part in text.split(",") if part.strip()]
    except argparse.ArgumentTypeError as e:
        raise argparse.ArgumentTypeError(f"bad --seeds value: {e}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds needs at least one seed")
    return seeds


def _load_config(path: Path, method: Optional[FinetuneMethod] = None) -> ExperimentConfig:
    manager = ConfigManager(path)
    config = manager.config
    if method is not None:
        if manager.is_set("finetune.method") and config.finetune.method != method:
            logger.warning(
                f"[config] finetune.method = {config.finetune.method.value} overridden by "
                f"train-{method.value}"
            )
        config = config.model_copy(
            update={"finetune": config.finetune.model_copy(update={"method": method})}
        )
    return config


# =============================================================================
# TRAINING COMMANDS
# =============================================================================

def _train(args, method: FinetuneMethod) -> int:
    config = _load_config(args.config, method)
    run_dir = args.out or config.output.dir
    print(f"🚀 {method.value.upper()} run (seed {config.run.seed}) → {run_dir}")
    result = run_experiment(config, run_dir)
    last = result.run_log.rows[-1]
    print(f"✅ Finished {last.iteration} iterations")
    print(f"   Base prior-task accuracy: {result.pretrain.prior_accuracy:.4f}")
    print(f"   New-task accuracy:        {last.new_task_acc:.4f}")
    print(f"   Prior-task accuracy:      {last.prior_task_acc:.4f}")
    print(f"   Drift from base:          {last.frobenius_vs_base:.6g}")
    print(f"   Outputs: {result.run_dir}")
    return EXIT_OK


def cmd_train_es(args) -> int:
    """Run a full experiment with ES fine-tuning."""
    return _train(args, FinetuneMethod.ES)


def cmd_train_grpo(args) -> int:
    """Run a full experiment with GRPO fine-tuning."""
    return _train(args, FinetuneMethod.GRPO)


def cmd_pretrain(args) -> int:
    """Pretrain a base model and save it as base.esck."""
    config = _load_config(args.config)
    run_dir = Path(args.out or config.output.dir)
    params = init_params(config.policy.to_arch(), config.run.seed)
    result = pretrain(params, config)
    path = save_checkpoint(params, run_dir / "base.esck")
    status = "✅" if result.reached_target else "⚠️ "
    print(
        f"{status} Prior-task accuracy {result.prior_accuracy:.4f} after "
        f"{result.iterations} iterations (target {config.pretrain.target_accuracy})"
    )
    print(f"💾 Saved {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Run one experiment per seed and write sweep.csv."""
    config = _load_config(args.config)
    out_dir = Path(args.out or config.output.dir)
    print(f"🚀 Sweep over seeds {', '.join(str(s) for s in args.seeds)} → {out_dir}")
    path = run_sweep(config, args.seeds, out_dir)
    print(f"✅ Wrote {path}")
    return EXIT_OK


# =============================================================================
# ANALYSIS COMMANDS
# =============================================================================

def cmd_eval(args) -> int:
    """Print a checkpoint's greedy accuracy on a task."""
    params = load_checkpoint(args.ckpt)
    accuracy = evaluate(params, args.task, args.n, args.seed)
    print(f"task={args.task} n={args.n} seed={args.seed} accuracy={accuracy!r}")
    return EXIT_OK


def cmd_diff(args) -> int:
    """Print Frobenius drift and per-group sparsity between two checkpoints."""
    base = load_checkpoint(args.base)
    new = load_checkpoint(args.ckpt)
    stats = diff_sparsity(base, new, args.tau)
    print(f"frobenius {stats.frobenius!r}")
    print(f"tau {stats.tau!r}")
    for group in stats.groups():
        print(
            f"sparsity {group} {stats.per_group_sparsity[group]!r} "
            f"(n={stats.per_group_count[group]})"
        )
    print(f"global_sparsity {stats.global_sparsity!r}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Regenerate report.svg from a run directory's CSVs."""
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ConfigurationError(f"run directory not found: {run_dir}")
    path = write_report(run_dir)
    print(f"📊 Wrote {path}")
    return EXIT_OK


# =============================================================================
# MAIN
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="esforge",
        description="Evolution Strategies vs GRPO fine-tuning with forgetting diagnostics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full experiments
  esforge train-es es.cfg
  esforge train-grpo grpo.cfg --out runs/grpo-1

  # Checkpoint analysis
  esforge eval --ckpt runs/es/checkpoints/ckpt-00300.esck --task parity8 --n 500 --seed 2024
  esforge diff --base runs/es/base.esck --ckpt runs/es/checkpoints/ckpt-00300.esck

  # Reports and sweeps
  esforge report --run runs/es
  esforge sweep es.cfg --seeds 1,2,3
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name, func, help_text in (
        ("train-es", cmd_train_es, "Pretrain, fine-tune with ES, evaluate"),
        ("train-grpo", cmd_train_grpo, "Pretrain, fine-tune with GRPO, evaluate"),
        ("pretrain", cmd_pretrain, "Pretrain a base model only"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("config", type=Path, help="key = value configuration file")
        sub.add_argument("--out", type=Path, default=None, help="Override output.dir")
        sub.set_defaults(func=func)

    sweep_parser = subparsers.add_parser("sweep", help="One run per seed plus mean curves")
    sweep_parser.add_argument("config", type=Path, help="key = value configuration file")
    sweep_parser.add_argument("--seeds", type=_seed_list, required=True, help="e.g. 1,2,3")
    sweep_parser.add_argument("--out", type=Path, default=None, help="Override output.dir")
    sweep_parser.set_defaults(func=cmd_sweep)

    eval_parser = subparsers.add_parser("eval", help="Accuracy of a checkpoint on a task")
    eval_parser.add_argument("--ckpt", type=Path, required=True, help="Checkpoint file")
    eval_parser.add_argument("--task", required=True, help="countdown-mini or parity8")
    eval_parser.add_argument("--n", type=int, required=True, help="Number of eval instances")
    eval_parser.add_argument("--seed", type=_u64, required=True, help="Eval seed")
    eval_parser.set_defaults(func=cmd_eval)

    diff_parser = subparsers.add_parser("diff", help="Drift and sparsity between checkpoints")
    diff_parser.add_argument("--base", type=Path, required=True, help="Base checkpoint")
    diff_parser.add_argument("--ckpt", type=Path, required=True, help="Fine-tuned checkpoint")
    diff_parser.add_argument("--tau", type=float, default=DEFAULT_TAU, help="Sparsity threshold")
    diff_parser.set_defaults(func=cmd_diff)

    report_parser = subparsers.add_parser("report", help="Regenerate report.svg")
    report_parser.add_argument("--run", type=Path, required=True, help="Run directory")
    report_parser.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_USAGE

    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE

    setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n\nInterrupted", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
