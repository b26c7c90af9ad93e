"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 dependency error,
4 stage/operation failure, 5 storage error.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import ingest as ingest_mod
from . import pipeline as pipeline_mod
from . import qc_stats, sampler
from .label_store import LabelStore, StoreError, export_finetune_dataset
from .records import CameraSource, Detection, FrameRecord, VideoSegment

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_STAGE = 4
EXIT_STORAGE = 5


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    """Build object-detection training sets from camera streams."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# Harvest / sample / split


@main.command()
@click.option("--camera", "camera_id", required=True)
@click.option("--url", default=None, help="Stream locator; defaults to the config entry.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--duration", type=float, required=True, help="Seconds to harvest.")
@click.option("--retries", type=int, default=5)
@click.option("--segment-target", type=float, default=10.0)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--store", "store_path", type=click.Path(), default=None)
def harvest(camera_id, url, config_path, duration, retries, segment_target,
            out_dir, store_path):
    """Harvest segmented video from one camera into local storage."""
    if url is None:
        if config_path is None:
            _fail(EXIT_CONFIG, "give --url or --config to resolve the camera")
        config = pipeline_mod.PipelineConfig.load(config_path)
        matches = [c for c in config.cameras if c.camera_id == camera_id]
        if not matches:
            _fail(EXIT_CONFIG, f"camera {camera_id!r} not in config")
        source = matches[0]
    else:
        source = CameraSource(camera_id=camera_id, url=url)
    policy = ingest_mod.HarvestPolicy(max_retries=retries,
                                      segment_target=segment_target)
    store = LabelStore(store_path) if store_path else None
    if store is not None and not store.query(CameraSource, camera_id=camera_id):
        store.put_records([source])
    result = ingest_mod.harvest(source, duration, policy, Path(out_dir), store=store)
    click.echo(f"harvested {len(result.segments)} segments, "
               f"{len(result.failures)} transient failures")
    if result.terminal_error:
        _fail(EXIT_STAGE, result.terminal_error)


@main.command()
@click.option("--rate", type=int, default=20, help="Keep one frame in N.")
@click.option("--offset", type=int, default=0)
@click.option("--store", "store_path", type=click.Path(exists=True), required=True)
def sample(rate, offset, store_path):
    """Systematically subsample frames from harvested segments."""
    store = LabelStore(store_path)
    segments = sorted(store.query(VideoSegment),
                      key=lambda s: (s.camera_id, s.started_at, s.segment_id))
    try:
        frames = sampler.sample_frames(segments, rate, offset)
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if frames:
        store.put_records(frames)
    click.echo(f"sampled {len(frames)} frames from {len(segments)} segments")


@main.command()
@click.option("--test-fraction", type=float, default=None)
@click.option("--test-count", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--stratify-by-camera", is_flag=True)
@click.option("--store", "store_path", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
def split(test_fraction, test_count, seed, stratify_by_camera, store_path,
          manifest_path):
    """Split sampled frames into train and test partitions."""
    store = LabelStore(store_path)
    frames = store.query(FrameRecord, sampled=1)
    try:
        train, test = sampler.split(frames, test_fraction=test_fraction,
                                    seed=seed, test_count=test_count,
                                    stratify_by_camera=stratify_by_camera)
    except sampler.SplitError as exc:
        _fail(EXIT_CONFIG, str(exc))
    store.put_records(sampler.assignments(frames, train, test, seed,
                                          test_fraction or 0.0))
    if manifest_path:
        sampler.write_manifest(Path(manifest_path), frames, test)
    click.echo(f"train {len(train)} / test {len(test)}")


# ---------------------------------------------------------------------------
# QC


@main.group()
def qc():
    """Quality-control planning and reporting."""


@qc.command()
@click.option("--pilot-p", type=float, required=True, help="Pilot proportion estimate.")
@click.option("--epsilon", type=float, required=True, help="CI margin of error.")
@click.option("--confidence", type=float, default=0.95)
@click.option("--no-ceil", is_flag=True,
              help="Also print the raw formula value before the ceiling.")
def plan(pilot_p, epsilon, confidence, no_ceil):
    """Compute the minimum QC sample size."""
    try:
        p = qc_stats.required_sample_size(pilot_p, epsilon, confidence)
    except qc_stats.QcError as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(f"n = {p.required_n} (z = {p.z_value:.6f})")
    if no_ceil:
        click.echo(f"raw formula value = {p.raw_n:.4f}")


@qc.command()
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--ids-file", type=click.Path(exists=True), default=None,
              help="Population ids, one per line; defaults to store detections.")
@click.option("--store", "store_path", type=click.Path(exists=True), default=None)
@click.option("--detector", "detector_id", default=None)
def draw(n, seed, ids_file, store_path, detector_id):
    """Draw the QC sample of detection ids."""
    if ids_file:
        population = [ln.strip() for ln in Path(ids_file).read_text().splitlines()
                      if ln.strip()]
    elif store_path and detector_id:
        store = LabelStore(store_path)
        population = [d.detection_id
                      for d in store.query(Detection, detector_id=detector_id)]
    else:
        _fail(EXIT_CONFIG, "give --ids-file, or --store with --detector")
    try:
        for det_id in qc_stats.draw_qc_sample(population, n, seed):
            click.echo(det_id)
    except qc_stats.QcError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _load_counts(path: str) -> qc_stats.QcCounts:
    doc = json.loads(Path(path).read_text())
    return qc_stats.QcCounts(detector_id=doc.get("detector_id", Path(path).stem),
                             tp=doc["tp"], fp=doc["fp"], fn=doc.get("fn"))


@qc.command()
@click.option("--wc", "wc_path", type=click.Path(exists=True), required=True,
              help="Weak-detector counts file (JSON: tp, fp, optional fn).")
@click.option("--sc", "sc_path", type=click.Path(exists=True), required=True)
@click.option("--confidence", type=float, default=0.95)
def report(wc_path, sc_path, confidence):
    """Comparative QC report for weak vs strong detector counts."""
    try:
        rep = qc_stats.build_report(_load_counts(wc_path), _load_counts(sc_path),
                                    confidence)
    except (qc_stats.QcError, KeyError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo(qc_stats.render_report(rep), nl=False)


# ---------------------------------------------------------------------------
# Export


@main.command()
@click.option("--store", "store_path", type=click.Path(exists=True), required=True)
@click.option("--partition", type=click.Choice(["train", "test"]), default="train")
@click.option("--detector", "detector_id", required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--format", "format_id", default="frame-boxes-v1")
def export(store_path, partition, detector_id, out_dir, format_id):
    """Export a pseudo-label dataset for external fine-tuning."""
    store = LabelStore(store_path)
    try:
        manifest = export_finetune_dataset(store, partition, detector_id,
                                           Path(out_dir), format=format_id)
    except StoreError as exc:
        _fail(EXIT_STORAGE, str(exc))
    if manifest.box_count == 0:
        click.echo("warning: export contains zero boxes", err=True)
    click.echo(f"exported {manifest.frame_count} frames / {manifest.box_count} boxes "
               f"to {manifest.output_path}")


# ---------------------------------------------------------------------------
# Pipeline


@main.group()
def pipeline():
    """Run the staged end-to-end pipeline."""


def _open_pipeline(config_path: str) -> pipeline_mod.Pipeline:
    try:
        config = pipeline_mod.PipelineConfig.load(config_path)
        return pipeline_mod.Pipeline(config)
    except pipeline_mod.ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


@pipeline.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
def run(config_path):
    """Run all stages in dependency order."""
    p = _open_pipeline(config_path)
    try:
        with p:
            manifest = p.run_all()
    except pipeline_mod.StorageLockedError as exc:
        _fail(EXIT_STORAGE, str(exc))
    except pipeline_mod.DependencyError as exc:
        _fail(EXIT_DEPENDENCY, str(exc))
    except pipeline_mod.StageError as exc:
        _fail(EXIT_STAGE, str(exc))
    for name in pipeline_mod.STAGES:
        click.echo(f"{name:<14} {manifest.status(name)}")


@pipeline.command()
@click.argument("name")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--force", is_flag=True)
def stage(name, config_path, force):
    """Run one named stage."""
    p = _open_pipeline(config_path)
    try:
        with p:
            entry = p.run_stage(name, force=force)
    except pipeline_mod.StorageLockedError as exc:
        _fail(EXIT_STORAGE, str(exc))
    except pipeline_mod.ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except pipeline_mod.DependencyError as exc:
        _fail(EXIT_DEPENDENCY, str(exc))
    except pipeline_mod.StageError as exc:
        _fail(EXIT_STAGE, str(exc))
    click.echo(f"{name}: {entry['status']}")


@pipeline.command()
@click.option("--store", "store_dir", type=click.Path(exists=True), required=True,
              help="The pipeline workdir holding run_manifest.json.")
def status(store_dir):
    """Show stage statuses for an existing run."""
    manifest_path = Path(store_dir) / "run_manifest.json"
    if not manifest_path.exists():
        _fail(EXIT_STORAGE, f"no run manifest under {store_dir}")
    doc = json.loads(manifest_path.read_text())
    click.echo(f"run {doc['run_id']}")
    for name in pipeline_mod.STAGES:
        entry = doc["stages"].get(name, {})
        click.echo(f"{name:<14} {entry.get('status', 'pending')}")


# ---------------------------------------------------------------------------
# Review service


@main.command()
@click.option("--store", "store_path", type=click.Path(exists=True), required=True)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8700)
@click.option("--frontend", "frontend_dir", type=click.Path(exists=True), default=None,
              help="Static review-UI bundle to serve at /.")
def serve(store_path, host, port, frontend_dir):
    """Serve the human QC review API (and optionally the UI bundle)."""
    import uvicorn

    from .review_service import create_app

    app = create_app(LabelStore(store_path))
    if frontend_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
