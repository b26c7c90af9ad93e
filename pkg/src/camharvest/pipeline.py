"""Staged, resumable pipeline orchestration.

Stages: ingest -> sample -> split -> weak_detect -> export -> strong_detect
-> qc_wc / qc_sc -> report.  Each stage commits its outputs to the label
store and updates the run manifest atomically; a completed stage is a
no-op on re-invocation unless forced, so a run killed between stages
resumes where it stopped.

The strong-classifier fine-tuning itself happens outside this toolkit:
the export stage writes the training dataset, the operator trains a model,
and ``strong_detect`` then runs it (or the built-in noisy oracle stand-in)
through the external detector protocol.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import yaml

from . import detector_io, ingest, parts_model, qc_stats, sampler
from .label_store import LabelStore, export_finetune_dataset
from .records import (CameraSource, Detection, FnMark, FrameRecord,
                      SplitAssignment, VideoSegment)
from .review_service import ReviewManager

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
STAGES = ("ingest", "sample", "split", "weak_detect", "export",
          "strong_detect", "qc_wc", "qc_sc", "report")
DEPENDENCIES: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "sample": ("ingest",),
    "split": ("sample",),
    "weak_detect": ("split",),
    "export": ("weak_detect",),
    "strong_detect": ("export",),
    "qc_wc": ("weak_detect",),
    "qc_sc": ("strong_detect",),
    "report": ("qc_wc", "qc_sc"),
}


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


class StorageLockedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration


class PipelineConfig:
    """Validated view over the versioned YAML configuration document.

    Environment variables may override paths only, as
    ``CAMHARVEST_PATH_<NAME>`` (e.g. CAMHARVEST_PATH_WORKDIR).
    """

    def __init__(self, doc: dict, base_dir: Path):
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version: {doc.get('version')!r}")
        self.doc = doc
        self.base_dir = base_dir
        if not doc.get("cameras"):
            raise ConfigError("config must list at least one camera")
        for cam in doc["cameras"]:
            if "camera_id" not in cam or "url" not in cam:
                raise ConfigError(f"camera entry needs camera_id and url: {cam}")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} is not a mapping")
        return cls(doc, path.parent.resolve())

    def _path(self, name: str, default: str) -> Path:
        env = os.environ.get(f"CAMHARVEST_PATH_{name.upper()}")
        if env:
            return Path(env)
        raw = self.doc.get("paths", {}).get(name, default)
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def workdir(self) -> Path:
        return self._path("workdir", "run")

    @property
    def store_path(self) -> Path:
        return self._path("store", str(self.workdir / "store.db"))

    @property
    def exports_dir(self) -> Path:
        return self._path("exports", str(self.workdir / "exports"))

    def section(self, name: str, default: Optional[dict] = None) -> dict:
        value = self.doc.get(name, default if default is not None else {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        return value

    @property
    def cameras(self) -> list[CameraSource]:
        out = []
        for cam in self.doc["cameras"]:
            loc = cam.get("location")
            out.append(CameraSource(camera_id=cam["camera_id"], url=cam["url"],
                                    label=cam.get("label", ""),
                                    location=tuple(loc) if loc else None))
        return out

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.doc, sort_keys=True).encode()).hexdigest()[:16]


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Run manifest


class RunManifest:
    """Per-run stage ledger, written atomically next to the store."""

    def __init__(self, path: Path, run_id: str, config_hash: str,
                 stages: Optional[dict] = None):
        self.path = path
        self.run_id = run_id
        self.config_hash = config_hash
        self.stages = stages if stages is not None else {
            name: {"status": "pending"} for name in STAGES}

    @classmethod
    def load_or_create(cls, path: Path, config_hash: str) -> "RunManifest":
        if path.exists():
            doc = json.loads(path.read_text())
            if doc.get("config_hash") != config_hash:
                raise ConfigError(
                    "existing run manifest was produced by a different config; "
                    "use a fresh workdir or restore the original config")
            return cls(path, doc["run_id"], doc["config_hash"], doc["stages"])
        run_id = hashlib.sha256(f"{config_hash}".encode()).hexdigest()[:12]
        manifest = cls(path, run_id, config_hash)
        manifest.save()
        return manifest

    def save(self) -> None:
        doc = {"format": "run-manifest/v1", "run_id": self.run_id,
               "config_hash": self.config_hash, "stages": self.stages}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        tmp.replace(self.path)

    def status(self, stage: str) -> str:
        return self.stages[stage]["status"]

    def mark(self, stage: str, status: str, **extra) -> None:
        entry = self.stages[stage]
        entry["status"] = status
        entry.update(extra)
        self.save()


# ---------------------------------------------------------------------------
# Pipeline


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.config.workdir.mkdir(parents=True, exist_ok=True)
        self.store = LabelStore(self.config.store_path)
        self.manifest = RunManifest.load_or_create(
            self.config.workdir / "run_manifest.json", config.fingerprint())
        self._lock_path = self.config.workdir / ".pipeline.lock"

    def close(self) -> None:
        self.store.close()

    # -- locking ------------------------------------------------------------

    def __enter__(self) -> "Pipeline":
        if self._lock_path.exists():
            raise StorageLockedError(
                f"another run holds {self._lock_path}; remove it if stale")
        self._lock_path.write_text(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self._lock_path.unlink(missing_ok=True)
        self.close()

    # -- stage driver -------------------------------------------------------

    def run_stage(self, stage: str, force: bool = False) -> dict:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; stages are {', '.join(STAGES)}")
        for dep in DEPENDENCIES[stage]:
            if self.manifest.status(dep) != "done":
                raise DependencyError(
                    f"stage {stage!r} requires {dep!r} to be done "
                    f"(currently {self.manifest.status(dep)!r})")
        if self.manifest.status(stage) == "done" and not force:
            log.info("stage %s already done; skipping (use --force to redo)", stage)
            return self.manifest.stages[stage]
        self.manifest.mark(stage, "running", started_at=time.time())
        try:
            outputs = getattr(self, f"_stage_{stage}")()
        except (DependencyError, ConfigError):
            self.manifest.mark(stage, "failed", finished_at=time.time())
            raise
        except Exception as exc:
            self.manifest.mark(stage, "failed", finished_at=time.time(),
                               error=str(exc))
            raise StageError(f"stage {stage!r} failed: {exc}") from exc
        self.manifest.mark(stage, "done", finished_at=time.time(),
                           outputs=outputs, store_revision=self.store.revision)
        return self.manifest.stages[stage]

    def run_all(self) -> RunManifest:
        for stage in STAGES:
            self.run_stage(stage)
        return self.manifest

    # -- stages -------------------------------------------------------------

    def _stage_ingest(self) -> dict:
        cfg = self.config.section("harvest", {})
        policy = ingest.HarvestPolicy(
            max_retries=cfg.get("max_retries", 5),
            backoff_base=cfg.get("backoff_base", 0.5),
            backoff_cap=cfg.get("backoff_cap", 8.0),
            segment_target=cfg.get("segment_target", 10.0))
        duration = cfg.get("duration", 60.0)
        registry = ingest.CameraRegistry(store=self.store)
        total_segments = 0
        failures = 0
        for source in self.config.cameras:
            if source.camera_id not in [c.camera_id for c in
                                        self.store.query(CameraSource)]:
                registry.register(source)
            seg_dir = self.config.workdir / "segments" / source.camera_id
            if source.url.startswith("synthetic://"):
                total_segments += self._synthesize_camera(source, duration, policy, seg_dir)
            else:
                result = ingest.harvest(source, duration, policy, seg_dir,
                                        store=self.store, run_id=self.manifest.run_id)
                if result.terminal_error:
                    raise StageError(
                        f"harvest of {source.camera_id} failed: {result.terminal_error}")
                total_segments += len(result.segments)
                failures += len(result.failures)
        return {"segments": total_segments, "transient_failures": failures}

    def _synthesize_camera(self, source: CameraSource, duration: float,
                           policy: ingest.HarvestPolicy, seg_dir: Path) -> int:
        """Generate deterministic synthetic segments: a directory of frames
        per segment, each frame with its ground truth and feature map."""
        syn = self.config.section("synthetic", {})
        frames_per_segment = syn.get("frames_per_segment", 20)
        frame_size = tuple(syn.get("frame_size", [64, 64]))
        n_objects = syn.get("objects_per_frame", 4)
        min_size, max_size = syn.get("min_size", 24), syn.get("max_size", 32)
        base_seed = syn.get("seed", 0)
        n_segments = max(1, int(-(-duration // policy.segment_target)))
        segments = []
        for seq in range(n_segments):
            segment_id = f"{source.camera_id}-seg{seq:04d}"
            seg_path = seg_dir / segment_id
            seg_path.mkdir(parents=True, exist_ok=True)
            for idx in range(frames_per_segment):
                frame_id = f"{segment_id}:{idx:05d}"
                detector_io.synthesize_scene(
                    seed=_stable_seed(base_seed, source.camera_id, seq, idx),
                    frame_size=frame_size, n_objects=n_objects,
                    min_size=min_size, max_size=max_size,
                    frame_id=frame_id.replace(":", "_"),
                    out_dir=seg_path, segment_id=segment_id,
                    camera_id=source.camera_id, index_in_segment=idx)
            segments.append(VideoSegment(
                segment_id=segment_id, camera_id=source.camera_id,
                started_at=seq * policy.segment_target,
                duration=policy.segment_target, path=str(seg_path),
                frame_count=frames_per_segment,
                byte_size=sum(p.stat().st_size for p in seg_path.iterdir())))
        self.store.put_records(segments)
        return len(segments)

    def _stage_sample(self) -> dict:
        cfg = self.config.section("sampling", {})
        segments = sorted(self.store.query(VideoSegment),
                          key=lambda s: (s.camera_id, s.started_at, s.segment_id))
        frames = sampler.sample_frames(segments, cfg.get("rate", 20),
                                       cfg.get("offset", 0))
        frames = [self._attach_size(fr) for fr in frames]
        if frames:
            self.store.put_records(frames)
        return {"frames": len(frames)}

    def _attach_size(self, frame: FrameRecord) -> FrameRecord:
        syn = self.config.section("synthetic", {})
        w, h = syn.get("frame_size", [64, 64])
        if Path(frame.image_path).suffix.lower() in sampler.IMAGE_EXTENSIONS:
            return replace(frame, width=int(w), height=int(h))
        return frame

    def _stage_split(self) -> dict:
        cfg = self.config.section("split", {})
        frames = self.store.query(FrameRecord, sampled=1)
        seed = cfg.get("seed", 0)
        fraction = cfg.get("test_fraction")
        count = cfg.get("test_count")
        if fraction is None and count is None:
            fraction = 0.2
        train, test = sampler.split(frames, test_fraction=fraction, seed=seed,
                                    test_count=count,
                                    stratify_by_camera=cfg.get("stratify_by_camera", False))
        self.store.put_records(sampler.assignments(
            frames, train, test, seed, fraction if fraction is not None else 0.0))
        sampler.write_manifest(self.config.workdir / "frame_manifest.tsv",
                               frames, test)
        return {"train": len(train), "test": len(test), "seed": seed}

    # -- detectors ----------------------------------------------------------

    def _weak_detector_id(self) -> str:
        return self.config.section("weak_detector", {}).get("id", "dpm-toy")

    def _strong_detector_id(self) -> str:
        return self.config.section("strong_detector", {}).get("id", "oracle-sc")

    def _stage_weak_detect(self) -> dict:
        cfg = self.config.section("weak_detector", {})
        detector_id = self._weak_detector_id()
        frames = self.store.query(FrameRecord, sampled=1)
        if "command" in cfg:
            detections = detector_io.run_external_detector(
                cfg["command"], frames, detector_id=detector_id)
        elif cfg.get("builtin", True):
            model = parts_model.toy_model(threshold=cfg.get("threshold", 1.0))
            (self.config.workdir / "weak_model.json").write_text(
                parts_model.model_to_json(model))
            detections = []
            for frame in frames:
                fmap_path = Path(frame.image_path).with_suffix(".fmap.json")
                if not fmap_path.exists():
                    continue
                fmap = parts_model.feature_map_from_json(fmap_path.read_text())
                detections.extend(parts_model.detect(
                    model, fmap, frame_id=frame.frame_id, detector_id=detector_id))
        else:
            raise ConfigError("weak_detector needs either 'command' or 'builtin'")
        if detections:
            self.store.put_records(detections)
        return {"detector_id": detector_id, "detections": len(detections)}

    def _stage_export(self) -> dict:
        cfg = self.config.section("export", {})
        out_dir = self.config.exports_dir / "finetune"
        extra = None
        supplement = cfg.get("fn_supplement_session")
        if supplement:
            extra = self.store.query(FnMark, session_id=supplement)
        manifest = export_finetune_dataset(
            self.store, "train", self._weak_detector_id(), out_dir,
            format=cfg.get("format", "frame-boxes-v1"), extra_boxes=extra)
        return {"frames": manifest.frame_count, "boxes": manifest.box_count,
                "output": str(out_dir)}

    def _stage_strong_detect(self) -> dict:
        cfg = self.config.section("strong_detector", {})
        if not cfg:
            raise StageError(
                "no strong_detector configured: the exported dataset under "
                f"{self.config.exports_dir / 'finetune'} is ready for external "
                "fine-tuning; add a strong_detector command (or the built-in "
                "noisy_oracle stand-in) to the config and re-run this stage")
        detector_id = self._strong_detector_id()
        frames = self.store.frames_in_partition("test")
        if "command" in cfg:
            detections = detector_io.run_external_detector(
                cfg["command"], frames, detector_id=detector_id)
        elif "noisy_oracle" in cfg:
            oracle = cfg["noisy_oracle"]
            gts = []
            for frame in frames:
                gts.extend(self._load_gt(frame))
            if not gts:
                raise StageError("noisy_oracle strong detector needs ground-truth "
                                 "sidecars (synthetic sources only)")
            syn = self.config.section("synthetic", {})
            oracle_cfg = detector_io.NoisyOracleConfig(
                miss_rate=oracle.get("miss_rate", 0.05),
                fp_per_frame=oracle.get("fp_per_frame", 0.3),
                jitter=oracle.get("jitter", 0.0),
                seed=oracle.get("seed", 0),
                frame_size=tuple(syn.get("frame_size", [64, 64])),
                fp_size=tuple(oracle.get("fp_size", [8, 16])),
                detector_id=detector_id)
            detections = detector_io.noisy_oracle_detect(gts, oracle_cfg)
        else:
            raise ConfigError("strong_detector needs 'command' or 'noisy_oracle'")
        if detections:
            self.store.put_records(detections)
        return {"detector_id": detector_id, "detections": len(detections)}

    def _load_gt(self, frame: FrameRecord):
        # Sidecars carry the frame's filesystem name; rekey to the store id.
        return [replace(g, frame_id=frame.frame_id)
                for g in detector_io.load_ground_truth(frame.image_path)]

    # -- quality control ----------------------------------------------------

    def _stage_qc_wc(self) -> dict:
        return self._qc_stage(self._weak_detector_id(), which="wc")

    def _stage_qc_sc(self) -> dict:
        return self._qc_stage(self._strong_detector_id(), which="sc")

    def _qc_stage(self, detector_id: str, which: str) -> dict:
        cfg = self.config.section("qc", {})
        plan = qc_stats.required_sample_size(
            cfg.get("pilot_p_hat", 0.8), cfg.get("epsilon", 0.05),
            cfg.get("confidence", 0.95))
        manager = ReviewManager(self.store, partition="test")
        population = self.store.detections_in_partition("test", detector_id)
        if not population:
            raise StageError(f"no detections by {detector_id!r} on the test partition")
        if len(population) < plan.required_n:
            log.warning("QC population for %s is %d < planned n=%d; sampling all",
                        detector_id, len(population), plan.required_n)
            plan = replace(plan, required_n=len(population))
        seed = _stable_seed(cfg.get("seed", 0), which)
        session = manager.open_session(plan, detector_id, seed,
                                       annotator=f"auto-judge-{which}")
        judged = self._auto_judge(manager, session.session_id, detector_id,
                                  cfg.get("iou_threshold", 0.5))
        counts = manager.counts(session.session_id)
        return {"session_id": session.session_id, "detector_id": detector_id,
                "planned_n": plan.required_n, "judged": judged,
                "tp": counts.tp, "fp": counts.fp, "fn": counts.fn}

    def _auto_judge(self, manager: ReviewManager, session_id: str,
                    detector_id: str, iou_threshold: float) -> int:
        """Judge the whole sample against ground-truth sidecars and count
        misses on every sampled frame.  Raises when no ground truth exists;
        a human session via the review service is the fallback."""
        session = manager.get_session(session_id)
        tp_ids: set[str] = set()
        fn_by_frame: dict[str, list] = {}
        for frame_id in session.frame_sample:
            frame = self.store.query(FrameRecord, frame_id=frame_id)[0]
            gts = self._load_gt(frame)
            if not gts:
                raise StageError(
                    f"no ground truth for frame {frame_id}; run a human review "
                    "session via the review service instead")
            dets = self.store.query(Detection, frame_id=frame_id,
                                    detector_id=detector_id)
            result = detector_io.match_detections(dets, gts, iou_threshold)
            tp_ids.update(det_id for det_id, _ in result.pairs)
            matched_gt = {j for _, j in result.pairs}
            fn_by_frame[frame_id] = [gts[j].bbox for j in range(len(gts))
                                     if j not in matched_gt]
        judged = 0
        while True:
            item = manager.next_item(session_id)
            if item is None:
                break
            judgement = "TP" if item["detection_id"] in tp_ids else "FP"
            manager.submit_verdict(session_id, item["detection_id"], judgement)
            judged += 1
        for frame_id in session.frame_sample:
            manager.submit_fn_marks(session_id, frame_id, fn_by_frame[frame_id])
        return judged

    def _stage_report(self) -> dict:
        manager = ReviewManager(self.store, partition="test")
        wc_session = self.manifest.stages["qc_wc"]["outputs"]["session_id"]
        sc_session = self.manifest.stages["qc_sc"]["outputs"]["session_id"]
        wc = manager.counts(wc_session)
        sc = manager.counts(sc_session)
        confidence = self.config.section("qc", {}).get("confidence", 0.95)
        report = qc_stats.build_report(wc, sc, confidence)
        self.config.exports_dir.mkdir(parents=True, exist_ok=True)
        text_path = self.config.exports_dir / "qc_report.txt"
        text_path.write_text(qc_stats.render_report(report))
        json_path = self.config.exports_dir / "qc_report.json"
        json_path.write_text(json.dumps({
            "wc": {"detector_id": wc.detector_id, "tp": wc.tp, "fp": wc.fp, "fn": wc.fn},
            "sc": {"detector_id": sc.detector_id, "tp": sc.tp, "fp": sc.fp, "fn": sc.fn},
            "precision_wc": report.precision_wc.value,
            "precision_sc": report.precision_sc.value,
            "recall_wc": report.recall_wc.value if report.recall_wc else None,
            "recall_sc": report.recall_sc.value if report.recall_sc else None,
            "rc_recall": report.rc_recall,
            "rc_precision": report.rc_precision,
            "population_mismatch": report.population_mismatch,
            "confidence": confidence,
        }, indent=1, sort_keys=True))
        return {"report_text": str(text_path), "report_json": str(json_path),
                "rc_recall": report.rc_recall, "rc_precision": report.rc_precision}
