"""Tests for esforge.analysis."""

import math

import numpy as np
import pytest

from esforge.analysis import (
    DRIFT_HEADER,
    METRICS_HEADER,
    SPARSITY_HEADER,
    DriftPoint,
    drift_curve,
    forgetting_curve,
    forgetting_summary,
    kl_divergence,
    kl_exact,
    kl_table,
    pareto_table,
    read_csv,
    read_metrics_csv,
    sparsity_profile,
    write_drift_csv,
    write_forgetting_csv,
    write_kl_csv,
    write_metrics_csv,
    write_pareto_csv,
    write_sparsity_csv,
)
from esforge.errors import ComparabilityError
from esforge.params import ParamKind, ParamSet
from esforge.tasks import gen_countdown
from esforge.training import RunLog, RunRow


def _run(prior_accs, method="es") -> RunLog:
    run = RunLog(method=method)
    for i, prior in enumerate(prior_accs):
        run.add_row(
            RunRow(
                iteration=i * 5,
                method=method,
                mean_reward=0.1 * i,
                new_task_acc=0.2 * i,
                prior_task_acc=prior,
                frobenius_vs_base=float(i),
                kl_vs_base=0.01 * i,
            )
        )
    return run


class TestDrift:
    """drift_curve."""

    def test_base_has_zero_drift(self, rough_params):
        """A checkpoint equal to base sits at 0 with log10 -inf."""
        (point,) = drift_curve(rough_params, [(0, rough_params.deep_copy())])
        assert point == DriftPoint(0, 0.0)
        assert point.log10 == -math.inf

    def test_linear_drift(self, rough_params):
        """base + k * d drifts by k * |d|."""
        direction = ParamSet.from_flat(
            rough_params, np.ones(rough_params.size), dtype=np.float64
        )
        checkpoints = []
        for k in range(1, 4):
            params = rough_params.deep_copy()
            params.add_scaled(direction, float(k))
            checkpoints.append((k, params))
        curve = drift_curve(rough_params, checkpoints)
        expected = math.sqrt(rough_params.size)
        for k, point in zip(range(1, 4), curve):
            assert point.iteration == k
            assert point.frobenius == pytest.approx(k * expected, rel=1e-9)

    def test_mismatched_checkpoint(self, rough_params, two_group_params):
        """Checkpoints must match base's structure."""
        with pytest.raises(ComparabilityError):
            drift_curve(rough_params, [(1, two_group_params)])


class TestSparsityProfile:
    """sparsity_profile."""

    def test_rows_per_group(self, two_group_params):
        """One row per (layer, kind) with element counts."""
        moved = two_group_params.deep_copy()
        moved.array("a")[0, 0] = 1.0
        profile = sparsity_profile(two_group_params, moved, tau=1e-6)
        assert [(r.kind, r.sparsity, r.count) for r in profile.rows] == [
            (ParamKind.HIDDEN_WEIGHT, 0.75, 4),
            (ParamKind.HIDDEN_BIAS, 1.0, 3),
        ]
        assert profile.global_sparsity == pytest.approx(6 / 7)

    def test_identical_is_fully_sparse(self, tiny_params):
        """No change means sparsity 1 everywhere."""
        profile = sparsity_profile(tiny_params, tiny_params.deep_copy())
        assert all(row.sparsity == 1.0 for row in profile.rows)
        assert profile.tau == 1e-6


class TestKl:
    """KL diagnostics."""

    def test_known_value(self):
        """KL([.5,.5] || [.25,.75])."""
        value = kl_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
        assert value[0] == pytest.approx(0.14384103622589045, rel=1e-12)

    def test_self_divergence_zero(self):
        """KL(p || p) = 0."""
        p = np.array([[0.1, 0.2, 0.7], [0.3, 0.3, 0.4]])
        assert np.array_equal(kl_divergence(p, p), np.zeros(2))

    def test_never_negative(self):
        """Random distribution pairs give KL >= 0."""
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(18), size=2000)
        q = rng.dirichlet(np.ones(18), size=2000)
        assert np.all(kl_divergence(p, q) >= 0.0)

    def test_exact_kl_of_identical_policies(self, tiny_params):
        """A policy does not diverge from itself."""
        prompts = [list(gen_countdown(s).prompt_tokens) for s in range(4)]
        assert kl_exact(tiny_params, tiny_params.deep_copy(), prompts) == 0.0

    def test_exact_kl_positive_after_change(self, tiny_params, rough_params):
        """Different policies diverge."""
        prompts = [list(gen_countdown(s).prompt_tokens) for s in range(4)]
        assert kl_exact(rough_params, tiny_params, prompts) > 0.0


class TestTables:
    """Pareto, KL and forgetting tables."""

    def test_empty_run(self):
        """An empty run gives empty tables and a nan summary."""
        run = RunLog(method="es")
        assert pareto_table(run) == []
        assert kl_table(run) == []
        assert forgetting_curve(run) == []
        assert math.isnan(forgetting_summary(run)["drop"])

    def test_iteration_order(self):
        """Rows follow the run log."""
        run = _run([0.9, 0.8, 0.85])
        assert [row[-1] for row in pareto_table(run)] == [0, 5, 10]
        assert kl_table(run)[2] == (0.02, 0.4, 0.85, 10)

    def test_forgetting_curve(self):
        """Drops are measured from the running maximum."""
        curve = forgetting_curve(_run([0.9, 0.95, 0.8, None]))
        assert [(it, acc) for it, acc, _ in curve] == [(0, 0.9), (5, 0.95), (10, 0.8)]
        assert [drop for _, _, drop in curve] == pytest.approx([0.0, 0.0, 0.15])

    def test_forgetting_summary(self):
        """Best, its iteration, final and drop."""
        summary = forgetting_summary(_run([0.9, 0.95, 0.95, 0.7]))
        assert summary["best"] == 0.95
        assert summary["best_iteration"] == 5
        assert summary["final"] == 0.7
        assert summary["drop"] == pytest.approx(0.25)


class TestCsvFiles:
    """CSV writers and readers."""

    def test_metrics_round_trip(self, tmp_path):
        """metrics.csv parses back into the same rows."""
        run = _run([0.9, None, 0.7])
        path = write_metrics_csv(run, tmp_path / "metrics.csv")
        assert path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)
        parsed = read_metrics_csv(path)
        assert [r.to_dict() for r in parsed.rows] == [r.to_dict() for r in run.rows]

    def test_bad_metrics_header(self, tmp_path):
        """A foreign CSV is rejected."""
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_metrics_csv(path)

    def test_missing_file(self, tmp_path):
        """Reading a missing CSV raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_csv(tmp_path / "nope.csv")

    def test_drift_zero_written_empty(self, tmp_path):
        """-inf log10 cells are left empty."""
        path = write_drift_csv([DriftPoint(0, 0.0), DriftPoint(5, 10.0)], tmp_path / "d.csv")
        rows = read_csv(path)
        assert path.read_text().splitlines()[0] == ",".join(DRIFT_HEADER)
        assert rows[0]["log10_frobenius"] == ""
        assert float(rows[1]["log10_frobenius"]) == 1.0

    def test_sparsity_csv(self, tmp_path, two_group_params):
        """Sparsity rows carry iteration, group, count and tau."""
        profile = sparsity_profile(two_group_params, two_group_params.deep_copy())
        path = write_sparsity_csv([(5, profile)], tmp_path / "s.csv")
        rows = read_csv(path)
        assert list(rows[0]) == list(SPARSITY_HEADER)
        assert [(r["iteration"], r["kind"], r["count"]) for r in rows] == [
            ("5", "hidden_weight", "4"),
            ("5", "hidden_bias", "3"),
        ]

    def test_table_csvs(self, tmp_path):
        """Pareto, KL and forgetting files have one row per measured point."""
        run = _run([0.9, 0.8])
        assert len(read_csv(write_pareto_csv(run, tmp_path / "p.csv"))) == 2
        assert read_csv(write_kl_csv(run, tmp_path / "k.csv"))[1]["kl_vs_base"] == "0.01"
        forgetting = read_csv(write_forgetting_csv(run, tmp_path / "f.csv"))
        assert float(forgetting[1]["drop_from_max"]) == pytest.approx(0.1)
