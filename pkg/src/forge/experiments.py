"""Experiment harnesses: branch preparation, merge-order ablation, and the
baseline comparison table (single-task tuning, distilled-only, joint
merging with and without distilled guidance, parameter averaging, and both
merging strategies of this package)."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill as dst
from . import merge as mrg
from . import model as mdl
from . import numerics as nm
from .datasets import LabeledDataset, TaskSpec, generate_tasks
from .distill import DistillConfig, DistilledDataset
from .evaluation import MetricsReport, evaluate_deltas
from .merge import CoeffOptimConfig
from .model import BaseEncoder, LabelEmbeddingTable, PluginModule, TrainConfig
from .registry import BranchContribution, Repository


@dataclass
class BranchArtifacts:
    """Everything one simulated contributor produces for a task."""

    spec: TaskSpec
    train: LabeledDataset
    test: LabeledDataset
    plugin: PluginModule
    distilled: DistilledDataset


def table_for(base: BaseEncoder, spec: TaskSpec) -> LabelEmbeddingTable:
    return LabelEmbeddingTable(spec.name, spec.labels, base.embed_dim)


def train_branch(base: BaseEncoder, spec: TaskSpec, train: LabeledDataset,
                 config: TrainConfig, rng: np.random.Generator) -> PluginModule:
    """Single-task adapter training on a labeled dataset."""
    table = table_for(base, spec)
    return mdl.train_plugin(base, table, train.inputs, train.labels, config, rng)


def prepare_branch_artifacts(base: BaseEncoder, seed: int,
                             train_cfg: TrainConfig, distill_cfg: DistillConfig,
                             ) -> dict[str, BranchArtifacts]:
    """Generate the toy tasks and each contributor's plugin + distilled set."""
    out: dict[str, BranchArtifacts] = {}
    for spec, train, test in generate_tasks(seed):
        plugin = train_branch(base, spec, train, train_cfg,
                              nm.make_rng(nm.derive_seed("train", spec.name, seed)))
        distilled = dst.distill(spec, train, base, distill_cfg,
                                nm.make_rng(nm.derive_seed("distill", spec.name, seed)))
        out[spec.name] = BranchArtifacts(spec, train, test, plugin, distilled)
    return out


def evaluate_deltas_on_tasks(base: BaseEncoder, deltas: dict[int, np.ndarray] | None,
                             artifacts: dict[str, BranchArtifacts],
                             report: MetricsReport,
                             temperature: float = mdl.DEFAULT_TEMPERATURE) -> MetricsReport:
    for name, art in artifacts.items():
        acc, auc_value = evaluate_deltas(base, deltas, table_for(base, art.spec),
                                         art.test, temperature)
        report.add(name, acc, auc_value)
    return report


def merge_in_order(workdir: Path, base_seed: int, strategy: str,
                   artifacts: dict[str, BranchArtifacts], order: list[str],
                   coeff: CoeffOptimConfig, rank: int, alpha: float,
                   run_config: dict | None = None) -> Repository:
    """Fresh repository, commits in the given order, merge everything."""
    repo = Repository.init(workdir, base_seed, strategy, rank=rank, alpha=alpha,
                           coeff=coeff, extra_config=run_config)
    for name in order:
        art = artifacts[name]
        repo.commit_contribution(BranchContribution(
            art.spec, art.plugin, art.distilled, author=f"branch-{name}"))
    repo.merge_all()
    return repo


@dataclass
class ExperimentSettings:
    """Desk-scale defaults for the experiment harnesses."""

    base_seed: int = 0
    seeds: tuple[int, ...] = (1, 2, 3)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(
        default_factory=lambda: DistillConfig(iterations=500, ipc=10,
                                              eval_iterations=300))
    coeff: CoeffOptimConfig = field(default_factory=CoeffOptimConfig)

    @property
    def rank(self) -> int:
        return self.train.rank

    @property
    def alpha(self) -> float:
        return self.train.alpha


def run_order_experiment(workdir: str | Path, settings: ExperimentSettings,
                         strategies: tuple[str, ...] = ("fusion", "mixture"),
                         orders: list[list[str]] | None = None,
                         ) -> tuple[list[MetricsReport], list[dict]]:
    """Strategy x task-order x seed sweep; returns runs and summary rows."""
    workdir = Path(workdir)
    task_names = ["B-toy", "L-toy", "M-toy"]
    if orders is None:
        orders = [list(p) for p in itertools.permutations(task_names)]
    runs: list[MetricsReport] = []
    prepared: dict[int, dict[str, BranchArtifacts]] = {}
    for seed in settings.seeds:
        base = BaseEncoder.from_seed(seed)
        prepared[seed] = prepare_branch_artifacts(base, seed, settings.train,
                                                  settings.distill)
    for strategy in strategies:
        for order in orders:
            for seed in settings.seeds:
                base = BaseEncoder.from_seed(seed)
                tag = f"{strategy}-{'_'.join(n[0] for n in order)}-s{seed}"
                repo = merge_in_order(workdir / tag, seed, strategy, prepared[seed],
                                      order, settings.coeff, settings.rank,
                                      settings.alpha)
                report = MetricsReport(strategy, order, seed)
                evaluate_deltas_on_tasks(base, repo.current_item().deltas(),
                                         prepared[seed], report)
                runs.append(report)
    summary = summarize_orders(runs)
    return runs, summary


def summarize_orders(runs: list[MetricsReport]) -> list[dict]:
    rows = []
    keys = sorted({(r.strategy, tuple(r.order)) for r in runs})
    for strategy, order in keys:
        cell = [r for r in runs if r.strategy == strategy and tuple(r.order) == order]
        accs = np.array([r.avg_acc for r in cell])
        aucs = np.array([r.avg_auc for r in cell])
        rows.append({
            "strategy": strategy,
            "order": "->".join(n[0] for n in order),
            "avg_acc_mean": float(accs.mean()), "avg_acc_std": float(accs.std()),
            "avg_auc_mean": float(aucs.mean()), "avg_auc_std": float(aucs.std()),
            "seeds": len(cell),
        })
    return rows


def _ten_percent_guidance(artifacts: dict[str, BranchArtifacts], base: BaseEncoder,
                          seed: int) -> list:
    """Class-stratified 10% raw sample per task (the no-distillation variant)."""
    guidance = []
    for name, art in artifacts.items():
        rng = nm.make_rng(nm.derive_seed("ten-percent", name, seed))
        rows, labels = [], []
        for cls, idx in enumerate(art.train.class_indices(art.spec.num_classes)):
            take = rng.choice(idx, size=max(1, round(0.1 * idx.size)), replace=False)
            rows.append(art.train.inputs[take])
            labels.extend([cls] * take.size)
        # guidance only needs .inputs/.labels, so a raw subset works here
        sample = LabeledDataset(np.concatenate(rows), np.array(labels))
        guidance.append((sample, table_for(base, art.spec)))
    return guidance


def run_baseline_experiment(workdir: str | Path, settings: ExperimentSettings,
                            order: list[str] | None = None,
                            ) -> tuple[list[dict], list[dict]]:
    """Desk-scale analogue of the main comparison table; returns (runs, summary)."""
    workdir = Path(workdir)
    order = order or ["B-toy", "M-toy", "L-toy"]
    methods = ["single-task tuning", "distilled only", "lorahub w/o distill",
               "lorahub w/ distill", "modelsoup", "fusion", "mixture"]
    runs: list[dict] = []
    for seed in settings.seeds:
        base = BaseEncoder.from_seed(seed)
        artifacts = prepare_branch_artifacts(base, seed, settings.train,
                                             settings.distill)
        plugins = [artifacts[n].plugin for n in order]
        distilled_guidance = [(artifacts[n].distilled, table_for(base, artifacts[n].spec))
                              for n in order]

        per_method: dict[str, MetricsReport] = {}

        report = MetricsReport("single-task tuning", order, seed)
        for name, art in artifacts.items():
            acc, auc_value = evaluate_deltas(base, art.plugin.layer_deltas(),
                                             table_for(base, art.spec), art.test)
            report.add(name, acc, auc_value)
        per_method["single-task tuning"] = report

        report = MetricsReport("distilled only", order, seed)
        for name, art in artifacts.items():
            metrics = dst.eval_distilled(
                art.distilled, base, art.spec, art.test, settings.distill,
                nm.make_rng(nm.derive_seed("distilled-eval", name, seed)))
            report.add(name, metrics["acc"], metrics["auc"])
        per_method["distilled only"] = report

        raw_guidance = _ten_percent_guidance(artifacts, base, seed)
        for label, guidance in (("lorahub w/o distill", raw_guidance),
                                ("lorahub w/ distill", distilled_guidance)):
            merged, _, _ = mrg.baseline_lorahub(base, plugins, guidance, settings.coeff)
            per_method[label] = evaluate_deltas_on_tasks(
                base, merged.layer_deltas(), artifacts,
                MetricsReport(label, order, seed))

        soup = mrg.baseline_modelsoup(plugins)
        per_method["modelsoup"] = evaluate_deltas_on_tasks(
            base, soup.layer_deltas(), artifacts,
            MetricsReport("modelsoup", order, seed))

        for strategy in ("fusion", "mixture"):
            repo = merge_in_order(workdir / f"{strategy}-s{seed}", seed, strategy,
                                  artifacts, order, settings.coeff, settings.rank,
                                  settings.alpha)
            per_method[strategy] = evaluate_deltas_on_tasks(
                base, repo.current_item().deltas(), artifacts,
                MetricsReport(strategy, order, seed))

        for method in methods:
            runs.append(per_method[method].to_dict())

    summary = []
    for method in methods:
        cell = [r for r in runs if r["strategy"] == method]
        accs = np.array([r["avg_acc"] for r in cell])
        aucs = np.array([r["avg_auc"] for r in cell])
        summary.append({"method": method,
                        "avg_acc_mean": float(accs.mean()),
                        "avg_acc_std": float(accs.std()),
                        "avg_auc_mean": float(aucs.mean()),
                        "avg_auc_std": float(aucs.std()),
                        "seeds": len(cell)})
    return runs, summary


def write_report(report_dir: str | Path, experiment: str, runs: list,
                 summary: list[dict]) -> Path:
    """Line-delimited records under reports/<experiment>/<timestamp>.jsonl."""
    report_dir = Path(report_dir) / experiment
    report_dir.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = report_dir / f"{stamp}.jsonl"
    with open(path, "w") as fh:
        for run in runs:
            doc = run.to_dict() if isinstance(run, MetricsReport) else run
            fh.write(json.dumps({"kind": "run", **doc}, sort_keys=True) + "\n")
        for row in summary:
            fh.write(json.dumps({"kind": "summary", **row}, sort_keys=True) + "\n")
    return path


def render_summary(summary: list[dict], label_key: str) -> str:
    """Fixed-width text table of mean +/- std rows."""
    header = f"{'':24s} {'avg ACC':>16s} {'avg AUC':>16s}  seeds"
    lines = [header, "-" * len(header)]
    for row in summary:
        label = row.get(label_key, "?")
        if "order" in row and label_key != "order":
            label = f"{label} {row['order']}"
        acc = f"{row['avg_acc_mean']:.3f} ± {row['avg_acc_std']:.3f}"
        auc_s = f"{row['avg_auc_mean']:.3f} ± {row['avg_auc_std']:.3f}"
        lines.append(f"{label:24s} {acc:>16s} {auc_s:>16s}  {row['seeds']:d}")
    return "\n".join(lines)
