"""Embedded, file-backed metadata store plus fine-tuning dataset export.

SQLite provides the transactional core (atomic batches, crash safety,
referential integrity); this module maps the pipeline's record dataclasses
onto a fixed relational schema.  Single-writer, multi-reader: one writer
owns commits, readers see consistent snapshots.  Detections and verdicts
are append-only; corrections are new records superseding by revision.
"""
from __future__ import annotations

import json
import sqlite3
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, Type

from .records import (CameraSource, Detection, FnMark, FrameRecord,
                      SplitAssignment, Verdict, VideoSegment)

SCHEMA_VERSION = 1

_SCHEMA = """
PRAGMA foreign_keys = ON;
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT);
CREATE TABLE IF NOT EXISTS cameras (
    camera_id TEXT PRIMARY KEY, url TEXT NOT NULL, label TEXT,
    lat REAL, lon REAL, created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS segments (
    segment_id TEXT PRIMARY KEY,
    camera_id TEXT NOT NULL REFERENCES cameras(camera_id),
    started_at REAL, duration REAL, path TEXT, frame_count INTEGER,
    byte_size INTEGER, created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS frames (
    frame_id TEXT PRIMARY KEY,
    segment_id TEXT NOT NULL REFERENCES segments(segment_id),
    camera_id TEXT NOT NULL REFERENCES cameras(camera_id),
    index_in_segment INTEGER, global_index INTEGER, sampled INTEGER,
    image_path TEXT, width INTEGER, height INTEGER,
    created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS splits (
    frame_id TEXT PRIMARY KEY REFERENCES frames(frame_id),
    partition TEXT NOT NULL CHECK (partition IN ('train','test')),
    split_seed INTEGER, test_fraction REAL, created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS detections (
    detection_id TEXT PRIMARY KEY,
    frame_id TEXT NOT NULL REFERENCES frames(frame_id),
    class_label TEXT, x REAL, y REAL, w REAL, h REAL,
    score REAL, detector_id TEXT, created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS verdicts (
    verdict_id TEXT PRIMARY KEY,
    detection_id TEXT NOT NULL REFERENCES detections(detection_id),
    session_id TEXT NOT NULL,
    judgement TEXT CHECK (judgement IN ('TP','FP')),
    annotator TEXT, created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS fn_marks (
    mark_id TEXT PRIMARY KEY,
    frame_id TEXT NOT NULL REFERENCES frames(frame_id),
    session_id TEXT NOT NULL,
    x REAL, y REAL, w REAL, h REAL,
    annotator TEXT, created_at REAL, revision INTEGER);
CREATE TABLE IF NOT EXISTS qc_sessions (
    session_id TEXT PRIMARY KEY, detector_id TEXT, plan TEXT, sample TEXT,
    frame_sample TEXT, visited TEXT, cursor INTEGER, state TEXT, annotator TEXT,
    created_at REAL, revision INTEGER);
CREATE INDEX IF NOT EXISTS idx_detections_detector ON detections(detector_id);
CREATE INDEX IF NOT EXISTS idx_detections_frame ON detections(frame_id);
CREATE INDEX IF NOT EXISTS idx_verdicts_session ON verdicts(session_id);
"""


class StoreError(RuntimeError):
    pass


class IntegrityError(StoreError):
    """Dangling reference or duplicate primary key in a batch."""


@dataclass(frozen=True)
class ExportManifest:
    export_id: str
    partition: str
    detector_id: str
    frame_count: int
    box_count: int
    format: str
    output_path: str


@dataclass(frozen=True)
class QcSessionRow:
    """Persisted QC review session state (see review_service)."""

    session_id: str
    detector_id: str
    plan: dict
    sample: tuple[str, ...]
    frame_sample: tuple[str, ...]
    cursor: int
    state: str  # open | complete
    annotator: str
    visited: tuple[str, ...] = ()  # frames checked in FN-marking mode
    created_at: float = 0.0


# table name, column list, dataclass <-> row converters
def _loc(cam: CameraSource):
    return (cam.location or (None, None))


_TABLES: dict[type, dict] = {
    CameraSource: dict(
        table="cameras", pk="camera_id",
        to_row=lambda r: (r.camera_id, r.url, r.label, _loc(r)[0], _loc(r)[1]),
        cols=("camera_id", "url", "label", "lat", "lon"),
        from_row=lambda row: CameraSource(
            camera_id=row["camera_id"], url=row["url"], label=row["label"] or "",
            location=(row["lat"], row["lon"]) if row["lat"] is not None else None),
        refs=(),
    ),
    VideoSegment: dict(
        table="segments", pk="segment_id",
        to_row=lambda r: (r.segment_id, r.camera_id, r.started_at, r.duration,
                          r.path, r.frame_count, r.byte_size),
        cols=("segment_id", "camera_id", "started_at", "duration", "path",
              "frame_count", "byte_size"),
        from_row=lambda row: VideoSegment(
            segment_id=row["segment_id"], camera_id=row["camera_id"],
            started_at=row["started_at"], duration=row["duration"],
            path=row["path"], frame_count=row["frame_count"],
            byte_size=row["byte_size"]),
        refs=(("camera_id", "cameras", "camera_id"),),
    ),
    FrameRecord: dict(
        table="frames", pk="frame_id",
        to_row=lambda r: (r.frame_id, r.segment_id, r.camera_id,
                          r.index_in_segment, r.global_index, int(r.sampled),
                          r.image_path, r.width, r.height),
        cols=("frame_id", "segment_id", "camera_id", "index_in_segment",
              "global_index", "sampled", "image_path", "width", "height"),
        from_row=lambda row: FrameRecord(
            frame_id=row["frame_id"], segment_id=row["segment_id"],
            camera_id=row["camera_id"], index_in_segment=row["index_in_segment"],
            global_index=row["global_index"], sampled=bool(row["sampled"]),
            image_path=row["image_path"], width=row["width"], height=row["height"]),
        refs=(("segment_id", "segments", "segment_id"),
              ("camera_id", "cameras", "camera_id")),
    ),
    SplitAssignment: dict(
        table="splits", pk="frame_id",
        to_row=lambda r: (r.frame_id, r.partition, r.split_seed, r.test_fraction),
        cols=("frame_id", "partition", "split_seed", "test_fraction"),
        from_row=lambda row: SplitAssignment(
            frame_id=row["frame_id"], partition=row["partition"],
            split_seed=row["split_seed"], test_fraction=row["test_fraction"]),
        refs=(("frame_id", "frames", "frame_id"),),
    ),
    Detection: dict(
        table="detections", pk="detection_id",
        to_row=lambda r: (r.detection_id, r.frame_id, r.class_label,
                          r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3],
                          r.score, r.detector_id),
        cols=("detection_id", "frame_id", "class_label", "x", "y", "w", "h",
              "score", "detector_id"),
        from_row=lambda row: Detection(
            detection_id=row["detection_id"], frame_id=row["frame_id"],
            class_label=row["class_label"],
            bbox=(row["x"], row["y"], row["w"], row["h"]),
            score=row["score"], detector_id=row["detector_id"],
            created_at=row["created_at"]),
        refs=(("frame_id", "frames", "frame_id"),),
    ),
    Verdict: dict(
        table="verdicts", pk="verdict_id",
        to_row=lambda r: (r.verdict_id, r.detection_id, r.session_id,
                          r.judgement, r.annotator),
        cols=("verdict_id", "detection_id", "session_id", "judgement", "annotator"),
        from_row=lambda row: Verdict(
            verdict_id=row["verdict_id"], detection_id=row["detection_id"],
            session_id=row["session_id"], judgement=row["judgement"],
            annotator=row["annotator"], created_at=row["created_at"]),
        refs=(("detection_id", "detections", "detection_id"),),
    ),
    FnMark: dict(
        table="fn_marks", pk="mark_id",
        to_row=lambda r: (r.mark_id, r.frame_id, r.session_id,
                          r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3], r.annotator),
        cols=("mark_id", "frame_id", "session_id", "x", "y", "w", "h", "annotator"),
        from_row=lambda row: FnMark(
            mark_id=row["mark_id"], frame_id=row["frame_id"],
            session_id=row["session_id"],
            bbox=(row["x"], row["y"], row["w"], row["h"]),
            annotator=row["annotator"], created_at=row["created_at"]),
        refs=(("frame_id", "frames", "frame_id"),),
    ),
    QcSessionRow: dict(
        table="qc_sessions", pk="session_id",
        to_row=lambda r: (r.session_id, r.detector_id, json.dumps(r.plan),
                          json.dumps(list(r.sample)), json.dumps(list(r.frame_sample)),
                          json.dumps(list(r.visited)),
                          r.cursor, r.state, r.annotator),
        cols=("session_id", "detector_id", "plan", "sample", "frame_sample",
              "visited", "cursor", "state", "annotator"),
        from_row=lambda row: QcSessionRow(
            session_id=row["session_id"], detector_id=row["detector_id"],
            plan=json.loads(row["plan"]), sample=tuple(json.loads(row["sample"])),
            frame_sample=tuple(json.loads(row["frame_sample"])),
            visited=tuple(json.loads(row["visited"])),
            cursor=row["cursor"], state=row["state"], annotator=row["annotator"],
            created_at=row["created_at"]),
        refs=(),
    ),
}

_APPEND_ONLY_TABLES = {"detections", "verdicts", "fn_marks"}
_UPSERT_TABLES = {"qc_sessions"}  # session state advances in place


class LabelStore:
    """The durable metadata store; one instance per database file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA journal_mode = WAL")
        self._conn.execute("PRAGMA synchronous = NORMAL")
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)
            self._conn.execute(
                "INSERT OR IGNORE INTO meta (key, value) VALUES ('schema_version', ?)",
                (str(SCHEMA_VERSION),))
            self._conn.execute(
                "INSERT OR IGNORE INTO meta (key, value) VALUES ('revision', '0')")

    def close(self) -> None:
        self._conn.close()

    @property
    def revision(self) -> int:
        row = self._conn.execute(
            "SELECT value FROM meta WHERE key = 'revision'").fetchone()
        return int(row["value"])

    # -- writes -------------------------------------------------------------

    def put_records(self, batch: Sequence[Any]) -> int:
        """Commit a heterogeneous batch atomically; returns the new revision.

        The whole batch is rejected (nothing visible) on a dangling
        reference or a duplicate primary key, with offenders listed.
        """
        order = list(_TABLES)
        batch = sorted(batch, key=lambda r: order.index(type(r)))
        with self._lock:
            self._check_integrity(batch)
            try:
                with self._conn:
                    revision = self.revision + 1
                    now = time.time()
                    for record in batch:
                        spec = _TABLES[type(record)]
                        cols = spec["cols"] + ("created_at", "revision")
                        verb = ("INSERT OR REPLACE" if spec["table"] in _UPSERT_TABLES
                                else "INSERT")
                        sql = (f"{verb} INTO {spec['table']} ({', '.join(cols)}) "
                               f"VALUES ({', '.join('?' * len(cols))})")
                        self._conn.execute(sql, spec["to_row"](record) + (now, revision))
                    self._conn.execute(
                        "UPDATE meta SET value = ? WHERE key = 'revision'",
                        (str(revision),))
            except sqlite3.IntegrityError as exc:
                raise IntegrityError(str(exc)) from exc
            except sqlite3.OperationalError as exc:
                raise StoreError(str(exc)) from exc
        return revision

    def _check_integrity(self, batch: Sequence[Any]) -> None:
        seen_pks: dict[str, set] = {}
        offenders = []
        for record in batch:
            spec = _TABLES[type(record)]
            table, pk_col = spec["table"], spec["pk"]
            pk = getattr(record, pk_col)
            pks = seen_pks.setdefault(table, set())
            if pk in pks or (table not in _UPSERT_TABLES and self._exists(table, pk_col, pk)):
                offenders.append(f"duplicate {table}.{pk_col} = {pk!r}")
            pks.add(pk)
            for col, ref_table, ref_col in spec["refs"]:
                value = getattr(record, col)
                if value in seen_pks.get(ref_table, set()):
                    continue
                if not self._exists(ref_table, ref_col, value):
                    offenders.append(
                        f"{table}.{col} -> {ref_table}.{ref_col} = {value!r} missing")
        if offenders:
            raise IntegrityError("batch rejected: " + "; ".join(sorted(set(offenders))))

    def _exists(self, table: str, col: str, value) -> bool:
        row = self._conn.execute(
            f"SELECT 1 FROM {table} WHERE {col} = ? LIMIT 1", (value,)).fetchone()
        return row is not None

    # -- reads --------------------------------------------------------------

    def query(self, record_type: type, predicate: Optional[Callable[[Any], bool]] = None,
              **field_equals) -> list[Any]:
        """Snapshot query for one record type.

        Keyword arguments constrain columns by equality; ``predicate``
        filters the materialized records.  Results are ordered by primary
        key for determinism.
        """
        spec = _TABLES[record_type]
        where, params = [], []
        for key, value in field_equals.items():
            if key not in spec["cols"]:
                raise StoreError(f"{record_type.__name__} has no column {key!r}")
            where.append(f"{key} = ?")
            params.append(value)
        sql = f"SELECT * FROM {spec['table']}"
        if where:
            sql += " WHERE " + " AND ".join(where)
        sql += f" ORDER BY {spec['pk']}"
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        records = [spec["from_row"](row) for row in rows]
        if predicate is not None:
            records = [r for r in records if predicate(r)]
        return records

    def count(self, record_type: type, **field_equals) -> int:
        return len(self.query(record_type, **field_equals))

    def frames_in_partition(self, partition: str) -> list[FrameRecord]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT f.* FROM frames f JOIN splits s ON s.frame_id = f.frame_id "
                "WHERE s.partition = ? ORDER BY f.frame_id", (partition,)).fetchall()
        return [_TABLES[FrameRecord]["from_row"](row) for row in rows]

    def detections_in_partition(self, partition: str, detector_id: str) -> list[Detection]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT d.* FROM detections d JOIN splits s ON s.frame_id = d.frame_id "
                "WHERE s.partition = ? AND d.detector_id = ? ORDER BY d.detection_id",
                (partition, detector_id)).fetchall()
        return [_TABLES[Detection]["from_row"](row) for row in rows]

    def effective_verdicts(self, session_id: str) -> dict[str, Verdict]:
        """Latest (highest-revision) verdict per detection for a session."""
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM verdicts WHERE session_id = ? "
                "ORDER BY revision, verdict_id", (session_id,)).fetchall()
        latest: dict[str, Verdict] = {}
        for row in rows:
            latest[row["detection_id"]] = _TABLES[Verdict]["from_row"](row)
        return latest

    def integrity_check(self) -> list[str]:
        """Referential integrity audit; returns a list of violations."""
        problems = []
        with self._lock:
            for spec in _TABLES.values():
                for col, ref_table, ref_col in spec["refs"]:
                    rows = self._conn.execute(
                        f"SELECT t.{spec['pk']} FROM {spec['table']} t "
                        f"LEFT JOIN {ref_table} r ON t.{col} = r.{ref_col} "
                        f"WHERE r.{ref_col} IS NULL").fetchall()
                    problems.extend(
                        f"{spec['table']}.{row[0]} dangling {col}" for row in rows)
        return problems


# ---------------------------------------------------------------------------
# Fine-tuning dataset export

EXPORT_FORMAT = "frame-boxes-v1"
ANNOTATION_FORMAT = "annotation/v1"
_SCORE_DIGITS = 9  # significant digits guaranteed to round-trip


def export_finetune_dataset(store: LabelStore, partition: str, detector_id: str,
                            out_dir: str | Path,
                            format: str = EXPORT_FORMAT,
                            extra_boxes: Optional[Sequence[FnMark]] = None) -> ExportManifest:
    """Write one annotation document per frame plus an index file.

    The document lists the frame size and (class, xmin, ymin, xmax, ymax,
    score) per box, the interchange shape detection fine-tuning tools
    consume.  Field order is fixed so the round-trip is bit-exact.
    ``extra_boxes`` appends verdict-derived miss marks as plain extra
    annotations (class taken from the detector's boxes).
    """
    if format != EXPORT_FORMAT:
        raise StoreError(f"unknown export format: {format!r}")
    frames = store.frames_in_partition(partition)
    if not frames:
        raise StoreError(f"partition {partition!r} has no frames")
    detections = store.detections_in_partition(partition, detector_id)
    by_frame: dict[str, list[Detection]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_id, []).append(det)
    extra_by_frame: dict[str, list[FnMark]] = {}
    for mark in (extra_boxes or []):
        extra_by_frame.setdefault(mark.frame_id, []).append(mark)

    out_dir = Path(out_dir)
    ann_dir = out_dir / "annotations"
    ann_dir.mkdir(parents=True, exist_ok=True)
    index_lines = []
    box_count = 0
    default_class = detections[0].class_label if detections else "object"
    for frame in frames:
        objects = []
        for det in sorted(by_frame.get(frame.frame_id, []),
                          key=lambda d: d.detection_id):
            x, y, w, h = det.bbox
            objects.append({
                "class": det.class_label,
                "xmin": x, "ymin": y, "xmax": x + w, "ymax": y + h,
                "score": float(f"%.{_SCORE_DIGITS}g" % det.score),
            })
        for mark in sorted(extra_by_frame.get(frame.frame_id, []),
                           key=lambda m: m.mark_id):
            x, y, w, h = mark.bbox
            objects.append({
                "class": default_class,
                "xmin": x, "ymin": y, "xmax": x + w, "ymax": y + h,
                "score": 1.0,
            })
        box_count += len(objects)
        doc = {
            "format": ANNOTATION_FORMAT,
            "frame_id": frame.frame_id,
            "image_path": frame.image_path,
            "width": frame.width,
            "height": frame.height,
            "objects": objects,
        }
        safe_name = frame.frame_id.replace("/", "_").replace(":", "_")
        ann_path = ann_dir / f"{safe_name}.json"
        ann_path.write_text(json.dumps(doc, indent=1))
        index_lines.append(f"{frame.frame_id}\t{ann_path.relative_to(out_dir)}\t{len(objects)}")
    (out_dir / "index.tsv").write_text("\n".join(index_lines) + "\n")

    manifest = ExportManifest(
        export_id=f"{partition}-{detector_id}",
        partition=partition, detector_id=detector_id,
        frame_count=len(frames), box_count=box_count,
        format=format, output_path=str(out_dir))
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.__dict__, indent=1, sort_keys=True))
    return manifest


def parse_annotation(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != ANNOTATION_FORMAT:
        raise StoreError(f"unknown annotation format: {doc.get('format')!r}")
    return doc
