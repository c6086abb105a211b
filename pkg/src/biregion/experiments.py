"""Single runs, ablation grids and their reports.

Run directory layout::

    run/
      config.json      # effective TrainConfig plus dataset path
      metrics.jsonl    # one JSON object per iteration, both phases
      checkpoints/     # teacher0.ckpt (after pretraining), final.ckpt
      report.json      # test/val MetricsRecord, pretrain metrics, diagnostics
      figures/         # loss curve
"""

from __future__ import annotations

import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .datasets import DatasetBundle, load_bundle
from .errors import ConfigError
from .metrics import METRIC_NAMES, MetricsRecord, evaluate, pseudo_label_recall
from .training import (
    TrainConfig,
    checkpoint_save,
    eval_network,
    pretrain_teacher,
    save_network,
    train_semi,
)

log = logging.getLogger(__name__)

PLAN_DIR = Path(__file__).parent / "plans"


def merge_overrides(base: dict, overrides: dict) -> dict:
    """Apply flat (``ablation_flags.url_on``) or nested overrides to a config dict."""
    out = json.loads(json.dumps(base))
    for key, value in overrides.items():
        if key == "label":
            continue
        if isinstance(value, dict):
            out[key] = merge_overrides(out.get(key, {}), value)
            continue
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _loss_curve_figure(records: list, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for phase, key in (("pretrain", "l_total"), ("semi", "total")):
        ys = [r[key] for r in records if r["phase"] == phase]
        if ys:
            xs = np.arange(len(ys)) + (0 if phase == "pretrain" else sum(r["phase"] == "pretrain" for r in records))
            ax.plot(xs, ys, lw=0.8, label=phase)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_experiment(config: TrainConfig, bundle: DatasetBundle, run_dir, dataset_path: str = "",
                   figures: bool = True) -> dict:
    """Pretrain, train semi-supervised, evaluate; everything lands in ``run_dir``."""
    config.validate()
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    effective = {"train_config": config.to_dict(), "dataset": str(dataset_path),
                 "labeled_ids": bundle.manifest.labeled_ids}
    (run_dir / "config.json").write_text(json.dumps(effective, indent=2))
    num_classes = bundle.num_classes
    torch.manual_seed(config.seed)
    records = []
    t0 = time.time()
    with open(run_dir / "metrics.jsonl", "w") as mf:
        def log_fn(rec):
            records.append(rec)
            mf.write(json.dumps(rec) + "\n")

        teacher0, _ = pretrain_teacher(bundle.labeled, config, num_classes, log_fn=log_fn)
        save_network(run_dir / "checkpoints" / "teacher0.ckpt", teacher0, step=config.pretrain_iters)
        eval_set = bundle.test or bundle.val
        pre_metrics = evaluate(teacher0, eval_set, num_classes)
        diag = pseudo_label_recall(teacher0, _with_labels(bundle), q=config.q_unsup, seed=config.seed)
        state, _ = train_semi(bundle.labeled, bundle.unlabeled, teacher0, config, num_classes, log_fn=log_fn)
    checkpoint_save(state, run_dir / "checkpoints" / "final.ckpt")
    net = eval_network(state)
    report = {
        "test": evaluate(net, bundle.test, num_classes).to_dict() if bundle.test else None,
        "val": evaluate(net, bundle.val, num_classes).to_dict() if bundle.val else None,
        "pretrain": pre_metrics.to_dict(),
        "pseudo_label_diagnostic": diag,
        "seconds": round(time.time() - t0, 2),
        "seed": config.seed,
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=2))
    if figures:
        (run_dir / "figures").mkdir(exist_ok=True)
        _loss_curve_figure(records, run_dir / "figures" / "loss_curve.png")
    return report


def _with_labels(bundle: DatasetBundle):
    """Unlabeled training samples with their hidden labels, when the container has them."""
    return bundle.hidden_unlabeled if bundle.hidden_unlabeled else []


# --- ablation plans -------------------------------------------------------------

@dataclass
class ExperimentPlan:
    name: str
    grid: list  # list of override dicts, each may carry a "label"
    seeds: list
    outputs: str = "runs"
    base: dict = field(default_factory=dict)
    title: str = ""

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError(f"plan {self.name!r} has no seeds")
        if not self.grid:
            raise ConfigError(f"plan {self.name!r} has an empty grid")
        labels = [cell_label(c, i) for i, c in enumerate(self.grid)]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"plan {self.name!r} has duplicate grid labels: {labels}")
        for cell in self.grid:
            TrainConfig.from_dict(merge_overrides(merge_overrides(TrainConfig().to_dict(), self.base), cell))

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        if not path.exists() and (PLAN_DIR / f"{path}.yaml").exists():
            path = PLAN_DIR / f"{path}.yaml"
        if not path.exists():
            raise ConfigError(f"no plan file {path} (built-in plans: {', '.join(builtin_plans())})")
        d = yaml.safe_load(path.read_text())
        plan = cls(name=d["name"], grid=d["grid"], seeds=list(d.get("seeds", [0, 1, 2])),
                   outputs=d.get("outputs", "runs"), base=d.get("base", {}) or {}, title=d.get("title", ""))
        plan.validate()
        return plan


def builtin_plans() -> list:
    return sorted(p.stem for p in PLAN_DIR.glob("*.yaml"))


def cell_label(cell: dict, index: int) -> str:
    if "label" in cell:
        return str(cell["label"])
    return ",".join(f"{k}={v}" for k, v in cell.items()) or f"cell{index}"


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def _run_one(args):
    cfg_dict, dataset_root, run_dir = args
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
        torch.set_num_threads(1)
        bundle = load_bundle(dataset_root, labeled_ratio=cfg.labeled_ratio)
        report = run_experiment(cfg, bundle, run_dir, dataset_path=str(dataset_root))
        return {"run_dir": str(run_dir), "ok": True, "report": report}
    except Exception as exc:  # a failed run must not stop the grid
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "error.txt").write_text(traceback.format_exc())
        return {"run_dir": str(run_dir), "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def run_plan(plan: ExperimentPlan, dataset_root, out_dir=None, workers: int = 1, base_overrides=None) -> dict:
    plan.validate()
    out_dir = Path(out_dir or plan.outputs)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = merge_overrides(TrainConfig().to_dict(), plan.base)
    if base_overrides:
        base = merge_overrides(base, base_overrides)
    jobs, index = [], []
    for i, cell in enumerate(plan.grid):
        label = cell_label(cell, i)
        for seed in plan.seeds:
            cfg = merge_overrides(base, cell)
            cfg["seed"] = seed
            run_dir = out_dir / _slug(label) / f"seed{seed}"
            jobs.append((cfg, str(dataset_root), str(run_dir)))
            index.append((label, seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    runs = []
    for (label, seed), res in zip(index, results):
        runs.append({"cell": label, "seed": seed, **{k: v for k, v in res.items() if k != "report"}})
        if not res["ok"]:
            log.error("run %s seed %s failed: %s", label, seed, res["error"])
    report = aggregate_plan(plan, out_dir)
    report["runs"] = runs
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    (out_dir / "report.md").write_text(format_table(report))
    return report


def _mean_std(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    if not xs:
        return None, None
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=0))


def aggregate_plan(plan: ExperimentPlan, out_dir) -> dict:
    """Mean and std per grid cell, re-read from each run's report.json."""
    out_dir = Path(out_dir)
    cells = []
    for i, cell in enumerate(plan.grid):
        label = cell_label(cell, i)
        per_seed = {}
        for seed in plan.seeds:
            rp = out_dir / _slug(label) / f"seed{seed}" / "report.json"
            if rp.exists():
                rep = json.loads(rp.read_text())
                if rep.get("test"):
                    per_seed[seed] = rep["test"]["mean"]
        stats = {}
        for name in METRIC_NAMES:
            m, s = _mean_std([per_seed[k][name] for k in per_seed])
            stats[name] = {"mean": m, "std": s}
        cells.append({"label": label, "overrides": {k: v for k, v in cell.items() if k != "label"},
                      "n_runs": len(per_seed), "per_seed": {str(k): v for k, v in per_seed.items()},
                      "metrics": stats})
    return {"plan": plan.name, "title": plan.title, "seeds": plan.seeds, "cells": cells}


def format_table(report: dict) -> str:
    head = f"| {'Setting':<24} | {'Dice↑':>13} | {'Jaccard↑':>13} | {'95HD↓':>11} | {'ASD↓':>11} |"
    sep = "|" + "-" * 26 + "|" + "-" * 15 + "|" + "-" * 15 + "|" + "-" * 13 + "|" + "-" * 13 + "|"
    lines = [f"### {report.get('title') or report['plan']}", "", head, sep]
    for c in report["cells"]:
        cols = []
        for name, width in (("dice", 13), ("jaccard", 13), ("hd95", 11), ("asd", 11)):
            m = c["metrics"][name]
            cols.append(f"{m['mean']:.2f}±{m['std']:.2f}".rjust(width) if m["mean"] is not None else "n/a".rjust(width))
        lines.append(f"| {c['label']:<24} | " + " | ".join(cols) + " |")
    return "\n".join(lines) + "\n"
