import hashlib
import json
import logging

import numpy as np
import pytest
import yaml

from biregion.cli import effective_config, main
from biregion.training import load_network

from conftest import TINY_TRAIN


def _flags(d):
    out = []
    for k, v in d.items():
        out += [f"--{k.replace('_', '-')}", str(v)]
    return out


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _one_error_line(capsys, kind):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith(f"error: {kind}:")
    return err[0]


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "r"
    assert main(["train", "--dataset", str(tiny_dataset), "--out", str(run), "--no-figures"] + _flags(TINY_TRAIN)) == 0
    return run


def test_generate_data_defaults(tmp_path, capsys):
    assert main(["generate-data", str(tmp_path / "d")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["num_samples"] == 200
    assert len(summary["class_fraction"]) == 4
    spec = json.loads((tmp_path / "d" / "synthetic_spec.json").read_text())
    assert spec["image_size"] == 128 and spec["num_classes"] == 4


def test_generate_data_same_seed_identical(tmp_path):
    args = ["--image-size", "16", "--num-samples", "10", "--seed", "7", "--labeled-ratio", "0.3"]
    assert main(["generate-data", str(tmp_path / "a")] + args) == 0
    assert main(["generate-data", str(tmp_path / "b")] + args) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_generate_data_rejects_one_class(tmp_path, capsys):
    assert main(["generate-data", str(tmp_path / "d"), "--num-classes", "1"]) != 0
    assert "num_classes" in _one_error_line(capsys, "config")


def test_generate_data_needs_force_for_non_empty(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / "junk").write_text("x")
    assert main(["generate-data", str(out), "--image-size", "16", "--num-samples", "4", "--labeled-ratio", "0.5"]) != 0
    _one_error_line(capsys, "config")
    assert main(["generate-data", str(out), "--image-size", "16", "--num-samples", "4", "--labeled-ratio", "0.5", "--force"]) == 0


def test_train_missing_dataset_fails_early(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "run")]) != 0
    _one_error_line(capsys, "format")
    assert not (tmp_path / "run").exists()


def test_train_writes_run_layout(tiny_run):
    for name in ("config.json", "metrics.jsonl", "report.json", "checkpoints/teacher0.ckpt", "checkpoints/final.ckpt"):
        assert (tiny_run / name).exists(), name
    cfg = json.loads((tiny_run / "config.json").read_text())["train_config"]
    assert cfg["pretrain_iters"] == 4 and cfg["labeled_ratio"] == 0.2
    lines = (tiny_run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 8


def test_shipped_defaults():
    cfg = effective_config(None, {})
    assert (cfg.q_sup, cfg.q_unsup, cfg.alpha, cfg.labeled_ratio) == (95.0, 99.0, 0.5, 0.05)


def test_flag_beats_config_file(tmp_path, tiny_dataset, caplog):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text(yaml.safe_dump({**TINY_TRAIN, "alpha": 0.2, "q_unsup": 97,
                                        "ablation_flags": {"crl_on": False}}))
    run = tmp_path / "run"
    with caplog.at_level(logging.INFO, logger="biregion"):
        rc = main(["train", "--dataset", str(tiny_dataset), "--config", str(cfg_file), "--out", str(run),
                   "--no-figures", "--alpha", "0.7"])
    assert rc == 0
    cfg = json.loads((run / "config.json").read_text())["train_config"]
    assert cfg["alpha"] == 0.7
    assert cfg["q_unsup"] == 97
    assert cfg["ablation_flags"]["crl_on"] is False
    logged = [r.getMessage() for r in caplog.records if "effective config" in r.getMessage()]
    assert logged and '"alpha": 0.7' in logged[0]


def test_config_file_unknown_key(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"alpah": 0.3}))
    with pytest.raises(Exception, match="unknown config keys"):
        effective_config(f, {})


def test_boolean_flag_override(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("ablation_flags:\n  url_on: false\n")
    assert effective_config(f, {}).ablation_flags.url_on is False
    assert effective_config(f, {"flag__url_on": True}).ablation_flags.url_on is True


def test_eval_prints_table_and_json(tiny_run, tiny_dataset, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["eval", str(tiny_run / "checkpoints" / "final.ckpt"), "--dataset", str(tiny_dataset),
                 "--json-out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "Dice" in text and "95HD" in text and "mean" in text
    rec = json.loads(out.read_text())
    assert set(rec["mean"]) == {"dice", "jaccard", "hd95", "asd"}


def test_eval_class_mismatch(tiny_run, tmp_path, capsys):
    other = tmp_path / "three"
    assert main(["generate-data", str(other), "--image-size", "32", "--num-samples", "10", "--num-classes", "3", "--labeled-ratio", "0.3"]) == 0
    capsys.readouterr()
    assert main(["eval", str(tiny_run / "checkpoints" / "final.ckpt"), "--dataset", str(other)]) != 0
    assert "classes" in _one_error_line(capsys, "config")


def test_visualize_three_overlays_per_sample(tiny_run, tiny_dataset, tmp_path, capsys):
    out = tmp_path / "viz"
    assert main(["visualize", str(tiny_run / "checkpoints" / "teacher0.ckpt"), "--dataset", str(tiny_dataset),
                 "--percentiles", "95,97,99", "--num-samples", "2", "--out", str(out)]) == 0
    notes = json.loads((out / "annotations.json").read_text())
    assert len(notes["samples"]) == 2
    for sid in notes["samples"]:
        assert len(list(out.glob(f"{sid}_entropy_q*.png"))) == 3
        assert (out / f"{sid}_pseudo.png").exists()
        assert (out / f"{sid}_error.png").exists()


def test_visualize_bad_percentiles(tiny_run, tiny_dataset, tmp_path, capsys):
    rc = main(["visualize", str(tiny_run / "checkpoints" / "teacher0.ckpt"), "--dataset", str(tiny_dataset),
               "--percentiles", "95,abc", "--out", str(tmp_path / "v")])
    assert rc != 0
    _one_error_line(capsys, "config")


def test_ablate_small_plan(tiny_dataset, tmp_path, capsys):
    plan = tmp_path / "p.yaml"
    plan.write_text(yaml.safe_dump({
        "name": "tiny", "seeds": [0],
        "base": TINY_TRAIN,
        "grid": [{"label": "a0.2", "alpha": 0.2}, {"label": "a0.7", "alpha": 0.7}],
    }))
    out = tmp_path / "abl"
    assert main(["ablate", str(plan), "--dataset", str(tiny_dataset), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "a0.2" in text and "a0.7" in text
    report = json.loads((out / "report.json").read_text())
    assert [c["label"] for c in report["cells"]] == ["a0.2", "a0.7"]
    assert (out / "report.md").exists()


def test_loaded_checkpoint_predicts(tiny_run):
    net = load_network(tiny_run / "checkpoints" / "final.ckpt")
    assert net.config.num_classes == 4
    assert np.isfinite(sum(float(p.detach().sum()) for p in net.parameters()))
