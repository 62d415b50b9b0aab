import json

import pytest

from forge import experiments as xp
from forge.cli import main
from forge.distill import DistillConfig
from forge.merge import CoeffOptimConfig
from forge.model import TrainConfig


@pytest.fixture(scope="module")
def fast_settings():
    return xp.ExperimentSettings(
        seeds=(1,),
        train=TrainConfig(epochs=10),
        distill=DistillConfig(iterations=40, ipc=3, eval_iterations=80),
        coeff=CoeffOptimConfig(max_iterations=10))


class TestOrderExperiment:
    def test_matrix_shape_and_summary(self, tmp_path, fast_settings):
        orders = [["B-toy", "L-toy", "M-toy"], ["M-toy", "L-toy", "B-toy"]]
        runs, summary = xp.run_order_experiment(tmp_path, fast_settings,
                                                strategies=("mixture",),
                                                orders=orders)
        assert len(runs) == 2  # 1 strategy x 2 orders x 1 seed
        assert len(summary) == 2
        for row in summary:
            assert 0.0 <= row["avg_acc_mean"] <= 1.0
            assert row["seeds"] == 1
        for report in runs:
            assert set(report.per_task) == {"B-toy", "L-toy", "M-toy"}

    def test_two_strategies_three_orders_three_seeds_bookkeeping(self, tmp_path):
        # 2 strategies x 3 orders x 3 seeds = 18 runs, 6 summary rows
        settings = xp.ExperimentSettings(
            seeds=(1, 2, 3),
            train=TrainConfig(epochs=4),
            distill=DistillConfig(iterations=10, ipc=2, eval_iterations=20),
            coeff=CoeffOptimConfig(max_iterations=6))
        orders = [["B-toy", "L-toy", "M-toy"], ["L-toy", "M-toy", "B-toy"],
                  ["M-toy", "B-toy", "L-toy"]]
        runs, summary = xp.run_order_experiment(tmp_path, settings, orders=orders)
        assert len(runs) == 18
        assert len(summary) == 6
        assert all(row["seeds"] == 3 for row in summary)

    def test_report_file_round_trips(self, tmp_path, fast_settings):
        orders = [["B-toy", "L-toy", "M-toy"]]
        runs, summary = xp.run_order_experiment(tmp_path / "runs", fast_settings,
                                                strategies=("mixture",),
                                                orders=orders)
        path = xp.write_report(tmp_path / "reports", "orders", runs, summary)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        kinds = {line["kind"] for line in lines}
        assert kinds == {"run", "summary"}

    def test_render_summary_is_table(self, fast_settings):
        summary = [{"strategy": "mixture", "order": "B->L->M",
                    "avg_acc_mean": 0.9, "avg_acc_std": 0.01,
                    "avg_auc_mean": 0.95, "avg_auc_std": 0.02, "seeds": 3}]
        text = xp.render_summary(summary, "strategy")
        assert "mixture" in text and "0.900" in text


class TestBaselineExperiment:
    def test_all_methods_present(self, tmp_path, fast_settings):
        runs, summary = xp.run_baseline_experiment(tmp_path, fast_settings)
        methods = [row["method"] for row in summary]
        assert methods == ["single-task tuning", "distilled only",
                           "lorahub w/o distill", "lorahub w/ distill",
                           "modelsoup", "fusion", "mixture"]
        assert len(runs) == 7  # 7 methods x 1 seed
        by_method = {r["strategy"]: r for r in runs}
        # single-task tuning should be at least as strong as plain averaging
        assert by_method["single-task tuning"]["avg_acc"] >= \
            by_method["modelsoup"]["avg_acc"] - 0.05


class TestExperimentCli:
    def test_orders_fast(self, tmp_path, capsys):
        code = main(["experiment", "orders", str(tmp_path / "exp"),
                     "--seeds", "1", "--fast"])
        assert code == 0
        out = capsys.readouterr().out
        assert "mixture" in out and "fusion" in out
        reports = list((tmp_path / "exp" / "reports" / "orders").glob("*.jsonl"))
        assert len(reports) == 1
