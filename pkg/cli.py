#cli.py
import logging
import sys
from functools import wraps
from pathlib import Path

import click
from dotenv import load_dotenv

# Load environment variables; thread caps must be in place before numpy loads
load_dotenv()
from utils.config import default_config_path, log_level, pin_threads, read_config_file, resolve  # noqa: E402

pin_threads()

from joblib import Parallel, delayed  # noqa: E402
from rich.console import Console  # noqa: E402

from components.compare_table import build_frame, render_table, write_csv  # noqa: E402
from components.score_view import render_score  # noqa: E402
from utils.baselines import mertens_fuse  # noqa: E402
from utils.errors import CheckpointError, ConfigurationError, InputError, NumericError, UsageError  # noqa: E402
from utils.fusion import ExposurePair, fuse_pair, luminance_of, synthesize_exposure_pair, write_report  # noqa: E402
from utils.image_io import read_image, write_image  # noqa: E402
from utils.manifest import ManifestEntry, append_entry, read_manifest  # noqa: E402
from utils.mefssim import MefSsimConfig, MefSsimResult, mef_ssim  # noqa: E402
from utils.network import ArchConfig, load_checkpoint, save_checkpoint  # noqa: E402
from utils.training import (  # noqa: E402
    LossKind,
    TrainConfig,
    build_patch_dataset,
    load_exposure_pairs,
    train,
    train_supervised,
    write_training_log,
)

# Configure logging
logging.basicConfig(level=log_level(), format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_INPUT = 2
EXIT_NUMERIC = 3


def handle_errors(func):
    """Map library exceptions onto the CLI exit codes"""

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except NumericError as e:
            logger.error(f"Numeric failure: {e} {e.context}", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (ConfigurationError, InputError, CheckpointError, UsageError) as e:
            logger.error(f"{type(e).__name__}: {e}", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_INPUT)

    return wrapper


def _run_config(ctx: click.Context, command: str, **flags):
    return resolve(command, flags, ctx.obj["config"])


def _int_tuple(text: str, what: str):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"{what} must be comma-separated integers, got {text!r}")


def score_triple(under, over, fused, cfg: MefSsimConfig = None) -> MefSsimResult:
    """Score a fused image file against its two exposure files"""
    planes = [luminance_of(read_image(p)) for p in (under, over, fused)]
    if len({p.shape for p in planes}) != 1:
        raise InputError(f"Images differ in size: {[p.shape for p in planes]}")
    return mef_ssim(planes[:2], planes[2], cfg)


def compare_entry(params, entry: ManifestEntry) -> dict:
    """Mertens and DeepFuse MEF-SSIM for one manifest pair, both on the luminance of the final RGB"""
    pair = ExposurePair(read_image(entry.under), read_image(entry.over))
    inputs = [luminance_of(pair.under), luminance_of(pair.over)]
    mertens = mertens_fuse([pair.under, pair.over])
    deepfuse, _ = fuse_pair(params, pair, image_id=entry.tag)
    return {
        "sequence": entry.tag,
        "Mertens": mef_ssim(inputs, luminance_of(mertens)).score,
        "DeepFuse": mef_ssim(inputs, luminance_of(deepfuse)).score,
    }


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="key=value run configuration file")
@click.option("--verbose", is_flag=True, help="Debug logging")
@click.option("--no-progress", is_flag=True, help="Hide progress bars")
@click.pass_context
@handle_errors
def cli(ctx, config_path, verbose, no_progress):
    """DeepFuse: CNN fusion of under/over-exposed image pairs"""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    ctx.ensure_object(dict)
    ctx.obj["config"] = read_config_file(config_path or default_config_path())
    ctx.obj["progress"] = not no_progress


@cli.command()
@click.option("--input", "input_", type=click.Path(dir_okay=False), help="Base image")
@click.option("--ev-low", type=float)
@click.option("--ev-high", type=float)
@click.option("--gamma", type=float)
@click.option("--out-dir", type=click.Path(file_okay=False))
@click.option("--tag", help="Sequence name (default: input file stem)")
@click.option("--manifest", type=click.Path(dir_okay=False), help="Manifest to append to (default: OUT_DIR/manifest.txt)")
@click.pass_context
@handle_errors
def synth(ctx, input_, ev_low, ev_high, gamma, out_dir, tag, manifest):
    """Simulate an exposure pair from one image"""
    run = _run_config(ctx, "synth", input=input_, ev_low=ev_low, ev_high=ev_high, gamma=gamma,
                      out_dir=out_dir, tag=tag, manifest=manifest)
    source = Path(run.require("input"))
    base = read_image(source)
    pair = synthesize_exposure_pair(base, run["ev_low"], run["ev_high"], run["gamma"])

    out = Path(run["out_dir"])
    name = run["tag"] or source.stem
    under = write_image(out / f"{name}_under.png", pair.under)
    over = write_image(out / f"{name}_over.png", pair.over)
    manifest_path = Path(run["manifest"]) if run["manifest"] else out / "manifest.txt"
    attributes = {"ev_low": run["ev_low"], "ev_high": run["ev_high"], "gamma": run["gamma"]}
    append_entry(manifest_path, ManifestEntry(under.resolve(), over.resolve(), name, attributes=attributes))
    click.echo(f"Wrote {under} and {over}; manifest {manifest_path}")


@cli.command(name="train")
@click.option("--data", type=click.Path(dir_okay=False), help="Pair manifest")
@click.option("--preset", type=click.Choice(["desk", "paper"]))
@click.option("--loss", type=click.Choice([k.value for k in LossKind]))
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(dir_okay=False), help="Checkpoint path")
@click.option("--merge", type=click.Choice(["add", "mean", "max", "product", "concat"]))
@click.option("--kernels", help="Five comma-separated kernel sizes")
@click.option("--channels", help="Five comma-separated channel counts")
@click.option("--patch-size", type=int)
@click.option("--patches", type=int, help="Override the preset patch count")
@click.option("--epochs", type=int, help="Override the preset epoch count")
@click.option("--lr", type=float)
@click.option("--batch-size", type=int)
@click.option("--checkpoint-every", type=int)
@click.option("--checkpoint-dir", type=click.Path(file_okay=False), help="Training state and best.dfck (default: OUT stem + _state)")
@click.option("--resume", type=click.Path(file_okay=False), help="Training-state directory to continue from")
@click.option("--log", type=click.Path(dir_okay=False), help="Epoch log (JSON lines)")
@click.pass_context
@handle_errors
def train_command(ctx, **flags):
    """Train the fusion network on a manifest of pairs"""
    run = _run_config(ctx, "train", **flags)
    if run["preset"] not in ("desk", "paper"):
        raise ConfigurationError(f"Unknown preset '{run['preset']}'; choose desk or paper")
    desk = run["preset"] == "desk"
    overrides = {
        name: run[name]
        for name in ("loss", "seed", "patch_size", "patches", "epochs", "lr", "batch_size", "checkpoint_every")
        if run[name] is not None
    }
    overrides["progress"] = ctx.obj["progress"]
    cfg = TrainConfig.desk(**overrides) if desk else TrainConfig.paper(**overrides)

    base = ArchConfig.desk() if desk else ArchConfig()
    arch = ArchConfig(
        kernels=_int_tuple(run["kernels"], "kernels") if run["kernels"] else base.kernels,
        channels=_int_tuple(run["channels"], "channels") if run["channels"] else base.channels,
        merge=run["merge"],
        seed=run["seed"],
    )

    supervised = cfg.loss is not LossKind.MEFSSIM
    pairs = load_exposure_pairs(read_manifest(run.require("data")), with_targets=supervised)
    dataset = build_patch_dataset(pairs, cfg)
    fit = train_supervised if supervised else train
    out_path = Path(run["out"])
    checkpoint_dir = run["checkpoint_dir"] or out_path.with_name(out_path.stem + "_state")
    params, log = fit(cfg, dataset, arch, resume_from=run["resume"], checkpoint_dir=checkpoint_dir)

    out = save_checkpoint(params, out_path)
    log_path = write_training_log(log, run["log"] or out.with_name(out.stem + ".log.jsonl"))
    final = f"{log[-1].mean_loss:.6f}" if log else "n/a"
    click.echo(f"Trained {len(log)} epochs, final loss {final}; checkpoint {out}, log {log_path}")


@cli.command()
@click.option("--ckpt", type=click.Path(dir_okay=False))
@click.option("--under", type=click.Path(dir_okay=False))
@click.option("--over", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--merge", type=click.Choice(["add", "mean", "max", "product", "concat"]))
@click.option("--report", type=click.Path(dir_okay=False), help="JSON-lines fusion report")
@click.pass_context
@handle_errors
def fuse(ctx, ckpt, under, over, out, merge, report):
    """Fuse an exposure pair with a trained checkpoint"""
    run = _run_config(ctx, "fuse", ckpt=ckpt, under=under, over=over, out=out, merge=merge, report=report)
    params = load_checkpoint(run.require("ckpt"))
    if run["merge"] is not None and run["merge"] != params.arch.merge.value:
        raise ConfigurationError(
            f"Checkpoint was built with merge '{params.arch.merge.value}', not '{run['merge']}'"
        )

    under_path, over_path = run.require("under"), run.require("over")
    pair = ExposurePair(read_image(under_path), read_image(over_path))
    rgb, fusion_report = fuse_pair(params, pair, image_id=Path(under_path).stem)
    out_path = write_image(run.require("out"), rgb)

    result = score_triple(under_path, over_path, out_path)
    fusion_report.score, fusion_report.scale_scores = result.score, result.scale_scores
    if run["report"]:
        write_report([fusion_report], run["report"])
    render_score(result, title=out_path.name)


@cli.command()
@click.option("--under", type=click.Path(dir_okay=False))
@click.option("--over", type=click.Path(dir_okay=False))
@click.option("--fused", type=click.Path(dir_okay=False))
@click.option("--score-map", type=click.Path(dir_okay=False), help="16-bit PNG of the per-pixel score")
@click.option("--window", type=int)
@click.option("--stride", type=int)
@click.option("--scales", type=int)
@click.pass_context
@handle_errors
def score(ctx, under, over, fused, score_map, window, stride, scales):
    """MEF-SSIM of a fused image against its exposures"""
    run = _run_config(ctx, "score", under=under, over=over, fused=fused, score_map=score_map,
                      window=window, stride=stride, scales=scales)
    cfg = MefSsimConfig(window=run["window"], stride=run["stride"], scales=run["scales"])
    fused_path = Path(run.require("fused"))
    result = score_triple(run.require("under"), run.require("over"), fused_path, cfg)
    render_score(result, title=fused_path.name)
    if run["score_map"]:
        # [-1, 1] mapped onto the full 16-bit range
        path = write_image(run["score_map"], (result.score_map + 1.0) / 2.0, bit_depth=16)
        click.echo(f"Score map written to {path}")


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), help="Manifest of test pairs")
@click.option("--ckpt", type=click.Path(dir_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
@click.option("--jobs", type=int, help="Sequences fused in parallel")
@click.pass_context
@handle_errors
def compare(ctx, data, ckpt, csv_path, jobs):
    """Mertens vs DeepFuse MEF-SSIM table"""
    run = _run_config(ctx, "compare", data=data, ckpt=ckpt, csv=csv_path, jobs=jobs)
    entries = read_manifest(run.require("data"))
    rows = []
    if entries:
        params = load_checkpoint(run.require("ckpt"))
        rows = Parallel(n_jobs=run["jobs"])(delayed(compare_entry)(params, entry) for entry in entries)

    frame = build_frame(rows)
    render_table(frame, Console())
    path = write_csv(frame, run["csv"])
    click.echo(f"Wrote {len(rows)} rows to {path}")


if __name__ == "__main__":
    cli()
