"""Command-line entry point: gen-data, train, eval, predict, ablate, selftest.

Exit codes: 0 success, 1 config/validation error, 2 runtime or numeric
failure, 3 selftest failure.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import ablation, diffcore, scenegen, verify
from .config import RunConfig, load_config
from .detector import binarize, to_tensor
from .errors import ConfigError, IngestionError, PhenoCDError, ValidationError
from .orchestrator import Run, predict_probs

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3


def _parse_sets(pairs: tuple[str, ...]) -> dict:
    """``key.sub=value`` pairs; values are read as JSON when they parse, else as strings."""
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config(path: str | None, sets: tuple[str, ...], **extra) -> RunConfig:
    overrides = _parse_sets(sets)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(path, overrides)


def _run_config(run_dir: Path) -> RunConfig:
    path = run_dir / "config.json"
    if not path.is_file():
        raise ValidationError(f"{run_dir} is not a run directory (no config.json)")
    return load_config(path)


def _read_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return scenegen.dequantize(np.array(im.convert("RGB")))
    except OSError as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from None


set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override a config field, e.g. --set schedule.lr=0.05")


@click.group()
def cli():
    """Phenology-aware bi-temporal change detection."""
    diffcore.set_deterministic()


@cli.command("gen-data")
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--count", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=None, help="Dataset seed (defaults to the config seed).")
@set_option
def gen_data(config, out, count, seed, sets):
    """Write a synthetic dataset with an 8:1:1 train/val/test split."""
    cfg = _config(config, sets, seed=seed)
    if count < 3:
        raise ValidationError(f"--count must be at least 3, got {count}")
    palette = scenegen.default_palette(cfg.scene.num_classes, cfg.scene.num_stages)
    samples = scenegen.generate_dataset(cfg.scene, palette, count, seed=cfg.seed)
    train, val, test = scenegen.split_dataset(samples, seed=cfg.seed)
    scenegen.write_dataset(samples, out, palette)
    scenegen.write_splits(out, {"train": [s.sample_id for s in train],
                                "val": [s.sample_id for s in val],
                                "test": [s.sample_id for s in test]})
    (Path(out) / "config.json").write_text(cfg.dump())
    click.echo(json.dumps({"out": str(out), "train": len(train), "val": len(val), "test": len(test)}))


@cli.command()
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--stage", type=click.Choice(["1", "2", "3", "all"]), default="all", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--seed", type=int, default=None)
@set_option
def train(config, data, stage, out, seed, sets):
    """Run a training stage, or all three; completed stages are skipped under ``all``."""
    cfg = _config(config, sets, seed=seed)
    previous = Path(out) / "config.json"
    if previous.is_file() and load_config(previous) != cfg:
        raise ConfigError(f"{out} holds a run with a different config; use a fresh --out")
    ran = Run(cfg, out, data).train(stage)
    click.echo(json.dumps({"run": str(out), "stages": ran}))


@cli.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--split", default="test", show_default=True)
def eval_cmd(run_dir, data, split):
    """Score the latest checkpoint of a run; writes metrics-<split>.json."""
    run_dir = Path(run_dir)
    report = Run(_run_config(run_dir), run_dir, data).evaluate(split)
    click.echo(report.to_json(), nl=False)


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--t1", required=True, type=click.Path(dir_okay=False))
@click.option("--t2", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def predict(run_dir, t1, t2, out):
    """Write change.png (0/255) and prob.png (0-255) for one image pair."""
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    img1, img2 = _read_rgb(t1), _read_rgb(t2)
    if img1.shape != img2.shape:
        raise ValidationError(f"t1 and t2 differ in size: {img1.shape[:2]} vs {img2.shape[:2]}")
    system = Run(cfg, run_dir).load_system()
    prob = predict_probs(system, to_tensor(img1), to_tensor(img2))
    change = binarize(prob, cfg.schedule.threshold)[0, 0].numpy().astype(np.uint8) * 255
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(change).save(out / "change.png")
    Image.fromarray(scenegen.quantize(prob[0, 0].numpy())).save(out / "prob.png")
    click.echo(json.dumps({"change_fraction": round(float((change > 0).mean()), 6)}))


@cli.command()
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--variants", default=None,
              help="Comma list of fusion:constraint, e.g. dam:plm,concat:scm (default: full grid).")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@set_option
def ablate(config, data, variants, seeds, split, out, sets):
    """Train and score fusion x constraint variants; writes ablation.json."""
    cfg = _config(config, sets)
    chosen = ablation.parse_variants(variants)
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma list of integers, got {seeds!r}") from None
    if not seed_list:
        raise ConfigError("--seeds is empty")
    table = ablation.run_ablation(cfg, data, out, chosen, seed_list, split)
    click.echo(json.dumps(table, indent=2))


@cli.command()
@click.option("--trials", type=int, default=100, show_default=True)
def selftest(trials):
    """Oracle equivalence and gradient checks as JSON lines."""
    ok = verify.selftest(click.echo, trials)
    return EXIT_OK if ok else EXIT_SELFTEST


def main(argv: list[str] | None = None) -> int:
    try:
        code = cli.main(args=argv, prog_name="phenocd", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except PhenoCDError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except (RuntimeError, ArithmeticError, OSError, MemoryError) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return code if isinstance(code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
