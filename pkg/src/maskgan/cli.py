"""Command-line surface.

All parameters come from a single JSON config file with ``--set`` overrides
(``--set train.epochs=10``); unknown config keys are hard errors so a typo in
a hyperparameter name cannot silently invalidate a run.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 external
metric unavailable, 1 anything else.
"""

from __future__ import annotations

import json
import sys
from dataclasses import fields

import click

from .data import SynthConfig, load_manifest, synthesize_corpus
from .enhance import enhance_file, evaluate_testset, export_spectrograms
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DataError,
    MetricUnavailableError,
    TrainingDivergedError,
)
from .metrics import ExternalEvaluator
from .signal import FrameParams
from .training import TrainConfig, train

_DATA_KEYS = {"manifest", "layout", "channel"}
_EVAL_KEYS = {"metrics", "external_commands", "timeout"}
_SECTIONS = {"train", "synth", "frames", "data", "eval", "out_dir"}


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {section!r}: {sorted(unknown)}; allowed: {sorted(allowed)}"
        )


def load_config(path) -> dict:
    """Read and structurally validate a config file."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    _check_keys("config", cfg, _SECTIONS)
    if "train" in cfg:
        _check_keys("train", cfg["train"], [f.name for f in fields(TrainConfig)])
    if "synth" in cfg:
        _check_keys("synth", cfg["synth"], [f.name for f in fields(SynthConfig)])
    if "frames" in cfg:
        _check_keys("frames", cfg["frames"], [f.name for f in fields(FrameParams)])
    if "data" in cfg:
        _check_keys("data", cfg["data"], _DATA_KEYS)
    if "eval" in cfg:
        _check_keys("eval", cfg["eval"], _EVAL_KEYS)


def apply_overrides(cfg: dict, sets) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when
    possible, else taken as strings)."""
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object {p!r}")
        node[parts[-1]] = value
    validate_config(cfg)
    return cfg


def _coerce(dc_cls, section: dict):
    kwargs = dict(section)
    for f in fields(dc_cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return dc_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {dc_cls.__name__} values: {exc}") from None


def _build_external(cfg: dict) -> dict:
    eval_cfg = cfg.get("eval", {})
    timeout = float(eval_cfg.get("timeout", 120.0))
    return {
        name.lower(): ExternalEvaluator(cmd, timeout)
        for name, cmd in eval_cfg.get("external_commands", {}).items()
    }


def _manifest_from(cfg: dict, manifest, layout):
    data_cfg = cfg.get("data", {})
    path = manifest or data_cfg.get("manifest")
    if path is None:
        raise ConfigError("no manifest given (flag --manifest or config data.manifest)")
    return load_manifest(
        path,
        layout or data_cfg.get("layout", "generic_csv"),
        channel=int(data_cfg.get("channel", 5)),
    )


def _base_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="JSON config file")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE",
                      help="Override a config value")(fn)
    return fn


def _load(config_path, sets) -> dict:
    cfg = load_config(config_path) if config_path else {}
    return apply_overrides(cfg, sets)


@click.group()
def cli():
    """Adversarial mask-based speech enhancement toolkit."""


@cli.command("train")
@_base_options
@click.option("--manifest", type=click.Path(), default=None, help="Corpus manifest path")
@click.option("--layout", default=None, help="Manifest layout (generic_csv/voicebank_dirs/chime3)")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Run directory")
def cmd_train(config_path, sets, manifest, layout, out_dir):
    """Train from a config file; writes history.jsonl and checkpoints."""
    cfg = _load(config_path, sets)
    train_cfg = _coerce(TrainConfig, cfg.get("train", {}))
    frame_params = _coerce(FrameParams, cfg["frames"]) if "frames" in cfg else None
    out = out_dir or cfg.get("out_dir")
    if out is None:
        raise ConfigError("no output directory (flag --out or config out_dir)")
    man = _manifest_from(cfg, manifest, layout)
    external = _build_external(cfg).get(train_cfg.objective)
    paths, _ = train(train_cfg, man, out_dir=out, frame_params=frame_params,
                     external_evaluator=external)
    click.echo(f"trained {train_cfg.epochs} epochs; final checkpoint: {paths[-1]}")


@cli.command("enhance")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--in", "in_wav", type=click.Path(), required=True)
@click.option("--out", "out_wav", type=click.Path(), required=True)
def cmd_enhance(checkpoint, in_wav, out_wav):
    """Enhance one WAV file with the stored generator."""
    path = enhance_file(checkpoint, in_wav, out_wav, role="generator")
    click.echo(f"wrote {path}")


@cli.command("degrade")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--in", "in_wav", type=click.Path(), required=True)
@click.option("--out", "out_wav", type=click.Path(), required=True)
def cmd_degrade(checkpoint, in_wav, out_wav):
    """Run one WAV through the stored degenerator."""
    path = enhance_file(checkpoint, in_wav, out_wav, role="de_generator")
    click.echo(f"wrote {path}")


@cli.command("evaluate")
@_base_options
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--passthrough", is_flag=True, help="Score the unprocessed noisy signal")
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--layout", default=None)
@click.option("--metrics", "metric_csv", default=None, help="Comma-separated metric names")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Report directory")
def cmd_evaluate(config_path, sets, checkpoint, passthrough, manifest, layout,
                 metric_csv, out_dir):
    """Score the test split; prints the table and optionally saves reports."""
    cfg = _load(config_path, sets)
    if passthrough == (checkpoint is not None):
        raise ConfigError("give exactly one of --checkpoint or --passthrough")
    names = (
        tuple(m.strip() for m in metric_csv.split(",") if m.strip())
        if metric_csv
        else tuple(cfg.get("eval", {}).get("metrics", ["stoi"]))
    )
    man = _manifest_from(cfg, manifest, layout)
    report = evaluate_testset(checkpoint, man, names, external=_build_external(cfg))
    click.echo(report.to_table_text())
    if out_dir or cfg.get("out_dir"):
        report.save(out_dir or cfg.get("out_dir"))


@cli.command("synth-data")
@_base_options
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_synth_data(config_path, sets, out_dir):
    """Generate the deterministic synthetic corpus."""
    cfg = _load(config_path, sets)
    synth_cfg = _coerce(SynthConfig, cfg.get("synth", {}))
    man = synthesize_corpus(synth_cfg, out_dir)
    click.echo(
        f"wrote {len(man)} pairs ({len(man.train_entries)} train / "
        f"{len(man.test_entries)} test) to {out_dir}"
    )


@cli.command("export-spectrograms")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--clean", "clean_wav", type=click.Path(), required=True)
@click.option("--noisy", "noisy_wav", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_export_spectrograms(checkpoint, clean_wav, noisy_wav, out_dir):
    """Export pipeline matrices and rendered spectrograms for one pair."""
    paths = export_spectrograms(checkpoint, clean_wav, noisy_wav, out_dir)
    click.echo(f"wrote {len(paths)} matrices to {out_dir}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 3
    except MetricUnavailableError as exc:
        click.echo(f"metric unavailable: {exc}", err=True)
        return 4
    except (CheckpointMismatchError, TrainingDivergedError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
