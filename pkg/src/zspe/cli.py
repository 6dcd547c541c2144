"""Command-line entry point (``zspe``)."""
from __future__ import annotations

import functools
import json
import logging
import sys
import time
from pathlib import Path

import click

from . import io as zio
from . import pipeline as pl
from .geometry import GeometryError
from .metrics import ArConfig

EXIT_VALIDATION = 2


def _guard(fn):
    """Map validation and missing-input errors to exit code 2."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (GeometryError, zio.FormatError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
    return wrapper


def _config(path, **overrides) -> pl.PipelineConfig:
    base = zio.load_json(path) if path else {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return pl.PipelineConfig.from_dict(base)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("demo-models")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--count", type=click.IntRange(1, 16), default=4, show_default=True)
@_guard
def demo_models_cmd(out, count):
    """Write procedural demo meshes in the models directory layout."""
    meshes = pl.demo_meshes(count)
    zio.write_models(out, meshes, pl.models_info(meshes))
    click.echo(f"wrote {len(meshes)} models to {out}")


@main.command("render-templates")
@click.option("--models", "models_dir", type=click.Path(), required=True)
@click.option("--views", type=int, default=72, show_default=True)
@click.option("--size", type=int, default=128, show_default=True, help="Template image side (px).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_guard
def render_templates_cmd(models_dir, views, size, out):
    """Render depth templates of every model from sampled viewpoints."""
    if views < 1 or size < 8:
        raise GeometryError("views must be >= 1 and size >= 8")
    meshes, _ = zio.read_models(models_dir)
    summary = pl.render_templates(meshes, views, out, size)
    click.echo(f"rendered {sum(summary.values())} templates for {len(summary)} objects")


@main.command()
@click.option("--dataset", type=click.Path(), required=True)
@click.option("--masks", type=click.Path(), required=True)
@click.option("--embeddings", type=click.Path(), required=True)
@click.option("--models", "models_dir", type=click.Path(), required=True)
@click.option("--threshold", type=float, default=None, help="Similarity threshold [default: 0.5].")
@click.option("--config", "config_path", type=click.Path(), default=None, help="PipelineConfig JSON.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--seg-out", type=click.Path(file_okay=False), default=None,
              help="Also write labelled masks for eval-seg.")
@click.option("--timing/--no-timing", default=True, show_default=True,
              help="Record per-object wall time; --no-timing writes 0 for reproducible files.")
@_guard
def estimate(dataset, masks, embeddings, models_dir, threshold, config_path, out, seg_out, timing):
    """Estimate 6D poses for every labelled mask in a dataset."""
    cfg = _config(config_path, threshold=threshold)
    meshes, info = zio.read_models(models_dir)
    t0 = time.perf_counter()
    prepared = pl.prepare_models(meshes, cfg, info)
    t_prep = time.perf_counter() - t0
    t0 = time.perf_counter()
    results = pl.estimate_dataset(dataset, masks, embeddings, prepared, cfg, timing=timing)
    t_run = time.perf_counter() - t0
    zio.write_results(out, results)
    if seg_out:
        pl.write_predicted_masks(masks, seg_out, results, dataset, embeddings, cfg)
    per_obj = t_run / len(results) if results else 0.0
    click.echo(f"{len(results)} estimates; model preparation {t_prep:.2f} s; "
               f"{per_obj:.3f} s per object; threads {pl.thread_count()}")


@main.command("eval-pose")
@click.option("--results", type=click.Path(), required=True)
@click.option("--dataset", type=click.Path(), required=True)
@click.option("--models", "models_dir", type=click.Path(), default=None,
              help="Defaults to <dataset>/models.")
@click.option("--ar-config", type=click.Path(), default=None, help="Threshold-grid override JSON.")
@click.option("--report", type=click.Path(dir_okay=False), required=True)
@_guard
def eval_pose(results, dataset, models_dir, ar_config, report):
    """Average Recall of a results CSV against dataset ground truth."""
    meshes, info = zio.read_models(models_dir or Path(dataset) / "models")
    cfg = ArConfig.from_dict(zio.load_json(ar_config)) if ar_config else ArConfig()
    rep = pl.evaluate_poses(zio.read_results(results), dataset, meshes, info, cfg)
    zio.dump_json(report, rep)
    click.echo(f"AR {rep['AR']:.4f} (VSD {rep['AR_VSD']:.4f}, MSSD {rep['AR_MSSD']:.4f}, "
               f"MSPD {rep['AR_MSPD']:.4f}) over {rep['n_gt']} instances")


@main.command("eval-seg")
@click.option("--pred", type=click.Path(), required=True)
@click.option("--gt", type=click.Path(), required=True)
@click.option("--report", type=click.Path(dir_okay=False), required=True)
@_guard
def eval_seg(pred, gt, report):
    """COCO-style mask AP/AR of labelled predicted masks."""
    rep = pl.evaluate_segmentation(pred, gt)
    zio.dump_json(report, rep)
    click.echo(f"AP {rep['AP']:.4f} AR {rep['AR']:.4f}")


@main.command()
@click.option("--models", "models_dir", type=click.Path(), required=True)
@click.option("--scenes", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--objects", type=int, default=None, help="Objects per scene (default: random 1-4).")
@click.option("--views", type=int, default=72, show_default=True, help="Template rows per object.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_guard
def synth(models_dir, scenes, seed, objects, views, out):
    """Generate a synthetic dataset with exact masks and embeddings."""
    if views < 1:
        raise GeometryError("views must be >= 1")
    meshes, info = zio.read_models(models_dir)
    pl.synth_scenes(meshes, scenes, seed, out, objects, views, info)
    click.echo(f"wrote {scenes} scenes to {out}")


if __name__ == "__main__":
    main()
