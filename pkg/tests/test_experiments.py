import json

import numpy as np
import pytest

from biregion.datasets import load_bundle
from biregion.errors import ConfigError
from biregion.experiments import (
    ExperimentPlan,
    aggregate_plan,
    builtin_plans,
    cell_label,
    merge_overrides,
    run_experiment,
    run_plan,
)
from biregion.training import TrainConfig

from conftest import TINY_TRAIN


def test_merge_overrides_flat_and_nested():
    base = TrainConfig().to_dict()
    out = merge_overrides(base, {"alpha": 0.2, "ablation_flags.url_on": False, "label": "x"})
    assert out["alpha"] == 0.2 and out["ablation_flags"]["url_on"] is False
    assert "label" not in out
    out = merge_overrides(base, {"ablation_flags": {"crl_on": False}})
    assert out["ablation_flags"]["crl_on"] is False and out["ablation_flags"]["url_on"] is True
    assert base["alpha"] == 0.5


@pytest.mark.parametrize("name,labels", [
    ("modules", ["Base", "+URL", "+CRL", "+URL+CRL"]),
    ("thresholds", ["95/95", "95/99", "99/99"]),
    ("alpha", ["0.2", "0.5", "0.7"]),
    ("strategies", ["URL/URL", "CRL/CRL", "CRL/URL", "URL/CRL"]),
    ("remove", ["remove", "weight alpha=0.5"]),
])
def test_builtin_plan_rows(name, labels):
    plan = ExperimentPlan.load(name)
    assert [cell_label(c, i) for i, c in enumerate(plan.grid)] == labels
    assert plan.seeds == [0, 1, 2]


def test_builtin_plans_listed():
    assert set(builtin_plans()) >= {"modules", "thresholds", "alpha", "strategies", "remove"}


def test_module_plan_flags():
    plan = ExperimentPlan.load("modules")
    flags = [c["ablation_flags"] for c in plan.grid]
    assert flags[0] == {"url_on": False, "crl_on": False}
    assert flags[3] == {"url_on": True, "crl_on": True}


def test_plan_validation(tmp_path):
    with pytest.raises(ConfigError, match="no seeds"):
        ExperimentPlan("p", [{"alpha": 0.2}], []).validate()
    with pytest.raises(ConfigError, match="empty grid"):
        ExperimentPlan("p", [], [0]).validate()
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentPlan("p", [{"label": "a"}, {"label": "a", "alpha": 0.1}], [0]).validate()
    with pytest.raises(ConfigError):
        ExperimentPlan("p", [{"alpha": 3.0}], [0]).validate()
    with pytest.raises(ConfigError, match="no plan file"):
        ExperimentPlan.load(tmp_path / "missing.yaml")


@pytest.fixture(scope="module")
def grid_report(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    # depth 6 does not divide 32x32 inputs, so that cell fails at runtime
    plan = ExperimentPlan("g", [{"label": "ok", "alpha": 0.3}, {"label": "bad", "depth": 6}], [0, 1], base=TINY_TRAIN)
    return plan, out, run_plan(plan, tiny_dataset, out)


def test_failed_run_recorded_and_others_continue(grid_report):
    plan, out, report = grid_report
    by_cell = {}
    for r in report["runs"]:
        by_cell.setdefault(r["cell"], []).append(r["ok"])
    assert by_cell == {"ok": [True, True], "bad": [False, False]}
    assert (out / "bad" / "seed0" / "error.txt").exists()
    assert "ShapeError" in [r for r in report["runs"] if r["cell"] == "bad"][0]["error"]


def test_report_equals_reaggregation(grid_report):
    plan, out, report = grid_report
    again = aggregate_plan(plan, out)
    assert again["cells"] == report["cells"]
    cell = report["cells"][0]
    dice = [json.loads((out / "ok" / f"seed{s}" / "report.json").read_text())["test"]["mean"]["dice"] for s in (0, 1)]
    assert cell["metrics"]["dice"]["mean"] == pytest.approx(np.mean(dice), abs=1e-12)
    assert cell["metrics"]["dice"]["std"] == pytest.approx(np.std(dice), abs=1e-12)
    assert report["cells"][1]["n_runs"] == 0


def test_report_files(grid_report):
    _, out, _ = grid_report
    md = (out / "report.md").read_text()
    assert "| ok" in md and "n/a" in md
    assert json.loads((out / "report.json").read_text())["plan"] == "g"


def test_logged_config_reproduces_run(tiny_dataset, tmp_path):
    cfg = TrainConfig.from_dict(merge_overrides(TrainConfig().to_dict(), TINY_TRAIN))
    bundle = load_bundle(tiny_dataset, labeled_ratio=cfg.labeled_ratio)
    a = run_experiment(cfg, bundle, tmp_path / "a", figures=False)
    logged = json.loads((tmp_path / "a" / "config.json").read_text())
    cfg2 = TrainConfig.from_dict(logged["train_config"])
    bundle2 = load_bundle(tiny_dataset, labeled_ratio=cfg2.labeled_ratio)
    assert [s.id for s in bundle2.labeled] == logged["labeled_ids"]
    b = run_experiment(cfg2, bundle2, tmp_path / "b", figures=False)
    assert a["test"] == b["test"]
    for name in ("teacher0.ckpt", "final.ckpt"):
        assert (tmp_path / "a" / "checkpoints" / name).read_bytes() == (tmp_path / "b" / "checkpoints" / name).read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()


def test_run_writes_figure(tiny_dataset, tmp_path):
    cfg = TrainConfig.from_dict(merge_overrides(TrainConfig().to_dict(), TINY_TRAIN))
    run_experiment(cfg, load_bundle(tiny_dataset, labeled_ratio=0.2), tmp_path / "r")
    assert (tmp_path / "r" / "figures" / "loss_curve.png").stat().st_size > 0
