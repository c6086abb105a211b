"""Command-line entry points: generate-data, train, eval, ablate, visualize.

Errors are reported as a single ``error: <kind>: <message>`` line on stderr
with a nonzero exit code.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import click
import yaml

from .datasets import SyntheticSpec, load_bundle, write_dataset
from .errors import BiregionError, ConfigError, FormatError
from .training import AblationFlags, TrainConfig, load_network

log = logging.getLogger("biregion")

EXIT_ERROR = 2

_TYPES = {"bool": bool, "int": int, "float": float, "str": str}


def _field_options(cls, prefix: str = ""):
    """click options for every scalar field of a config dataclass; defaults are None so
    only flags given explicitly override the config file."""
    opts = []
    for f in fields(cls):
        if f.name == "ablation_flags":
            continue
        dest = prefix + f.name
        flag = f.name.replace("_", "-")
        ftype = f.type if isinstance(f.type, type) else _TYPES.get(f.type, str)
        if ftype is bool:
            opts.append(click.option(f"--{flag}/--no-{flag}", dest, default=None))
        else:
            opts.append(click.option(f"--{flag}", dest, type=ftype, default=None,
                                     help=f"default: {f.default}"))
    return opts


def train_options(fn):
    for opt in reversed(_field_options(TrainConfig) + _field_options(AblationFlags, "flag__")):
        fn = opt(fn)
    return fn


def _read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return d.get("train_config", d)


def effective_config(config_file, flag_values: dict) -> TrainConfig:
    """Defaults, then the config file, then explicitly given flags."""
    d = TrainConfig().to_dict()
    if config_file:
        file_d = _read_config_file(config_file)
        flags = file_d.pop("ablation_flags", None) or {}
        d.update(file_d)
        d["ablation_flags"].update(flags)
    for key, value in flag_values.items():
        if value is None:
            continue
        if key.startswith("flag__"):
            d["ablation_flags"][key[len("flag__"):]] = value
        else:
            d[key] = value
    return TrainConfig.from_dict(d)


def _split_kwargs(kwargs: dict):
    names = {f.name for f in fields(TrainConfig)} | {"flag__" + f.name for f in fields(AblationFlags)}
    cfg = {k: kwargs.pop(k) for k in list(kwargs) if k in names}
    return cfg, kwargs


def _require_dataset(path) -> Path:
    p = Path(path)
    if not (p / "train" / "manifest.json").exists():
        raise FormatError(f"dataset not found at {p} (expected {p}/train/manifest.json)")
    return p


@click.group()
@click.option("--log-level", default="INFO", show_default=True)
def cli(log_level):
    """Bidirectional uncertainty-aware region learning for semi-supervised segmentation."""
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("generate-data")
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--image-size", default=128, show_default=True)
@click.option("--num-classes", default=4, show_default=True)
@click.option("--num-samples", default=200, show_default=True)
@click.option("--blur", "boundary_blur_sigma", default=1.5, show_default=True)
@click.option("--noise", "intensity_noise_std", default=0.1, show_default=True)
@click.option("--jitter", "intensity_jitter", default=0.03, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--labeled-ratio", default=0.05, show_default=True)
@click.option("--split-seed", type=int, default=None)
@click.option("--force", is_flag=True, help="overwrite a non-empty output directory")
def generate_data(out, labeled_ratio, split_seed, force, **spec_kwargs):
    """Write a synthetic ambiguous-boundary dataset to OUT."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty (use --force)")
    spec = SyntheticSpec(**spec_kwargs)
    spec.validate()
    if not 0 < labeled_ratio < 1:
        raise ConfigError(f"labeled ratio must lie in (0, 1), got {labeled_ratio}")
    summary = write_dataset(out, spec, labeled_ratio, split_seed)
    click.echo(json.dumps(summary, indent=2))


@cli.command()
@click.option("--dataset", required=True, type=click.Path())
@click.option("--config", "config_file", type=click.Path(), default=None, help="YAML or JSON TrainConfig")
@click.option("--out", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--no-figures", is_flag=True)
@train_options
def train(dataset, config_file, run_dir, no_figures, **kwargs):
    """Pretrain the teacher with URL, then run teacher-student training."""
    from .experiments import run_experiment

    root = _require_dataset(dataset)
    cfg_values, _ = _split_kwargs(kwargs)
    cfg = effective_config(config_file, cfg_values)
    log.info("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    bundle = load_bundle(root, labeled_ratio=cfg.labeled_ratio)
    report = run_experiment(cfg, bundle, run_dir, dataset_path=str(root), figures=not no_figures)
    click.echo(json.dumps({"run_dir": str(run_dir), "test_mean": report["test"]["mean"] if report["test"] else None},
                          indent=2))


def _load_checkpoint_net(checkpoint, num_classes: int, which: str):
    net = load_network(checkpoint, which=which)
    if net.config.num_classes != num_classes:
        raise ConfigError(f"checkpoint predicts {net.config.num_classes} classes "
                          f"but the dataset has {num_classes}")
    return net


def _split_samples(bundle, split: str):
    if split == "unlabeled":
        return bundle.hidden_unlabeled or bundle.unlabeled
    return getattr(bundle, split)


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["test", "val", "labeled"]), default="test", show_default=True)
@click.option("--which", type=click.Choice(["auto", "student", "teacher", "net"]), default="auto", show_default=True)
@click.option("--json-out", type=click.Path(dir_okay=False), default=None)
def eval_cmd(checkpoint, dataset, split, which, json_out):
    """Score a checkpoint on a dataset split (Dice, Jaccard, 95HD, ASD)."""
    from .metrics import evaluate

    bundle = load_bundle(_require_dataset(dataset))
    net = _load_checkpoint_net(checkpoint, bundle.num_classes, which)
    record = evaluate(net, _split_samples(bundle, split), bundle.num_classes)
    click.echo(record.table())
    click.echo(record.to_json())
    if json_out:
        Path(json_out).write_text(record.to_json())


def _parse_set(values) -> dict:
    out = {}
    for item in values:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


@cli.command()
@click.argument("plan")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--workers", default=1, show_default=True)
@click.option("--set", "sets", multiple=True, help="base override for every run, e.g. semi_iters=500")
def ablate(plan, dataset, out_dir, workers, sets):
    """Run an ablation plan (a YAML file or a built-in name) and print its table."""
    from .experiments import ExperimentPlan, format_table, run_plan

    root = _require_dataset(dataset)
    p = ExperimentPlan.load(plan)
    report = run_plan(p, root, out_dir, workers=workers, base_overrides=_parse_set(sets))
    click.echo(format_table(report))
    failed = [r for r in report["runs"] if not r["ok"]]
    if failed:
        click.echo(f"{len(failed)} run(s) failed; see error.txt in their run directories", err=True)


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["test", "val", "labeled", "unlabeled"]), default="unlabeled",
              show_default=True)
@click.option("--percentiles", default="95,97,99", show_default=True)
@click.option("--num-samples", "max_samples", default=4, show_default=True)
@click.option("--which", type=click.Choice(["auto", "student", "teacher", "net"]), default="auto", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def visualize(checkpoint, dataset, split, percentiles, max_samples, which, out_dir):
    """Entropy heatmaps with percentile masks, pseudo-labels and error overlays."""
    from .viz import visualize as render

    try:
        qs = [float(x) for x in percentiles.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--percentiles must be comma-separated numbers, got {percentiles!r}") from None
    bundle = load_bundle(_require_dataset(dataset))
    net = load_network(checkpoint, which=which)
    samples = _split_samples(bundle, split)[:max_samples]
    notes = render(net, samples, out_dir, bundle.num_classes, qs)
    click.echo(json.dumps({k: {t: round(m["density"], 5) for t, m in v["masks"].items()}
                           for k, v in notes["samples"].items()}, indent=2))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="biregion", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return EXIT_ERROR
    except click.ClickException as exc:
        click.echo(f"error: usage: {exc.format_message()}", err=True)
        return EXIT_ERROR
    except BiregionError as exc:
        click.echo(f"error: {exc.kind}: {exc}", err=True)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
