"""Human QC loop: queued detection review sessions and the HTTP service
that feeds an annotator UI.

The review never mutates detections or frames; verdicts and miss marks are
strictly additive records persisted through the label store.  Verdict
submission is serialized per session: a submission must name the current
cursor item (or a previously judged item being corrected), otherwise the
caller is told to refetch.
"""
from __future__ import annotations

import dataclasses
import time
import uuid
from typing import Optional, Sequence

from . import qc_stats
from .label_store import LabelStore, QcSessionRow
from .records import Box, Detection, FnMark, FrameRecord, Verdict


class ReviewError(RuntimeError):
    pass


class NotFound(ReviewError):
    pass


class Conflict(ReviewError):
    """Cursor/ordering conflict; the client should refetch the next item."""


class ReviewManager:
    """Session lifecycle and verdict bookkeeping over a label store."""

    def __init__(self, store: LabelStore, partition: str = "test"):
        self.store = store
        self.partition = partition

    # -- sessions -----------------------------------------------------------

    def open_session(self, plan: qc_stats.QcPlan, detector_id: str, seed: int,
                     annotator: str = "anonymous") -> QcSessionRow:
        """Draw the QC sample for one detector and persist a fresh session."""
        population = self.store.detections_in_partition(self.partition, detector_id)
        if len(population) < plan.required_n:
            raise ReviewError(
                f"detector {detector_id!r} has only {len(population)} detections "
                f"on the {self.partition} partition; plan requires {plan.required_n}")
        sample = qc_stats.draw_qc_sample(
            [d.detection_id for d in population], plan.required_n, seed)
        by_id = {d.detection_id: d for d in population}
        frame_sample = tuple(sorted({by_id[i].frame_id for i in sample}))
        session = QcSessionRow(
            session_id=uuid.uuid4().hex[:12],
            detector_id=detector_id,
            plan={"pilot_p_hat": plan.pilot_p_hat, "epsilon": plan.epsilon,
                  "confidence": plan.confidence, "z_value": plan.z_value,
                  "required_n": plan.required_n, "seed": seed},
            sample=tuple(sample),
            frame_sample=frame_sample,
            cursor=0,
            state="open",
            annotator=annotator,
            created_at=time.time())
        self.store.put_records([session])
        return session

    def get_session(self, session_id: str) -> QcSessionRow:
        rows = self.store.query(QcSessionRow, session_id=session_id)
        if not rows:
            raise NotFound(f"unknown session: {session_id}")
        return rows[0]

    # -- review loop --------------------------------------------------------

    def next_item(self, session_id: str) -> Optional[dict]:
        """The detection at the cursor with its crop descriptor, or None when
        the session is complete.  Idempotent: the cursor only advances on a
        verdict."""
        session = self.get_session(session_id)
        if session.state == "complete" or session.cursor >= len(session.sample):
            return None
        detection_id = session.sample[session.cursor]
        det = self.store.query(Detection, detection_id=detection_id)[0]
        frame = self.store.query(FrameRecord, frame_id=det.frame_id)[0]
        return {
            "detection_id": det.detection_id,
            "frame_id": det.frame_id,
            "class_label": det.class_label,
            "bbox": list(det.bbox),
            "score": det.score,
            "image_path": frame.image_path,
            "frame_width": frame.width,
            "frame_height": frame.height,
            "index": session.cursor,
            "total": len(session.sample),
        }

    def submit_verdict(self, session_id: str, detection_id: str,
                       judgement: str) -> dict:
        """Record one TP/FP call; advances the cursor for the current item,
        or supersedes an earlier verdict when correcting a prior item."""
        if judgement not in ("TP", "FP"):
            raise ReviewError(f"judgement must be TP or FP, got {judgement!r}")
        session = self.get_session(session_id)
        if detection_id not in session.sample:
            raise ReviewError(f"detection {detection_id} is not in the QC sample")
        judged = self.store.effective_verdicts(session_id)
        is_correction = detection_id in judged
        at_cursor = (session.cursor < len(session.sample)
                     and session.sample[session.cursor] == detection_id)
        if not is_correction and not at_cursor:
            raise Conflict(
                f"expected a verdict for the cursor item "
                f"{session.sample[session.cursor] if session.cursor < len(session.sample) else '<done>'}")
        if session.state == "complete" and not is_correction:
            raise ReviewError("session is complete; only corrections are accepted")

        verdict = Verdict(verdict_id=uuid.uuid4().hex[:12],
                          detection_id=detection_id, session_id=session_id,
                          judgement=judgement, annotator=session.annotator,
                          created_at=time.time())
        cursor = session.cursor + (0 if is_correction else 1)
        state = "complete" if cursor >= len(session.sample) else session.state
        updated = dataclasses.replace(session, cursor=cursor, state=state)
        self.store.put_records([verdict, updated])
        return self.progress(session_id)

    def submit_fn_marks(self, session_id: str, frame_id: str,
                        boxes: Sequence[Box]) -> int:
        """Record annotator-drawn boxes over missed objects on one sampled
        frame; an empty list still counts the frame as visited."""
        session = self.get_session(session_id)
        if frame_id not in session.frame_sample:
            raise ReviewError(f"frame {frame_id} is not in the QC frame sample")
        frame = self.store.query(FrameRecord, frame_id=frame_id)[0]
        marks = []
        for box in boxes:
            x, y, w, h = box
            if w <= 0 or h <= 0:
                raise ReviewError(f"degenerate box: {box}")
            if frame.width is not None and (x < 0 or y < 0 or x + w > frame.width
                                            or y + h > frame.height):
                raise ReviewError(f"box {box} outside frame bounds "
                                  f"{frame.width}x{frame.height}")
            marks.append(FnMark(mark_id=uuid.uuid4().hex[:12], frame_id=frame_id,
                                session_id=session_id, bbox=tuple(box),
                                annotator=session.annotator,
                                created_at=time.time()))
        visited = tuple(sorted(set(session.visited) | {frame_id}))
        updated = dataclasses.replace(session, visited=visited)
        self.store.put_records(list(marks) + [updated])
        return len(marks)

    # -- reporting ----------------------------------------------------------

    def counts(self, session_id: str) -> qc_stats.QcCounts:
        """TP/FP from effective verdicts; FN only once the optional marking
        pass has visited at least one sampled frame (misses are counted on
        the sampled frames only, coverage is reported alongside)."""
        session = self.get_session(session_id)
        judged = self.store.effective_verdicts(session_id)
        tp = sum(1 for v in judged.values() if v.judgement == "TP")
        fp = len(judged) - tp
        fn = (self.store.count(FnMark, session_id=session_id)
              if session.visited else None)
        return qc_stats.QcCounts(detector_id=session.detector_id,
                                 tp=tp, fp=fp, fn=fn)

    def fn_frame_coverage(self, session_id: str) -> float:
        session = self.get_session(session_id)
        if not session.frame_sample:
            return 0.0
        return len(session.visited) / len(session.frame_sample)

    def progress(self, session_id: str) -> dict:
        session = self.get_session(session_id)
        counts = self.counts(session_id)
        judged = counts.tp + counts.fp
        result = {
            "session_id": session_id,
            "state": session.state,
            "judged": judged,
            "required_n": session.plan["required_n"],
            "tp": counts.tp,
            "fp": counts.fp,
            "fn": counts.fn,
            "precision": None,
        }
        if judged > 0:
            est = qc_stats.precision_estimate(counts, session.plan["confidence"])
            result["precision"] = {"value": est.value, "ci_low": est.ci_low,
                                   "ci_high": est.ci_high, "n": est.n}
        return result

    def report(self, session_id: str) -> dict:
        counts = self.counts(session_id)
        out = dict(self.progress(session_id))
        out["fn_frame_coverage"] = self.fn_frame_coverage(session_id)
        if counts.fn is not None and counts.tp + counts.fn > 0:
            session = self.get_session(session_id)
            est = qc_stats.recall_estimate(counts, session.plan["confidence"])
            out["recall"] = {"value": est.value, "ci_low": est.ci_low,
                             "ci_high": est.ci_high, "n": est.n}
        return out


# ---------------------------------------------------------------------------
# HTTP service

from pydantic import BaseModel


class SessionRequest(BaseModel):
    detector_id: str
    pilot_p_hat: float = 0.8
    epsilon: float = 0.05
    confidence: float = 0.95
    seed: int = 0
    annotator: str = "anonymous"


class VerdictRequest(BaseModel):
    detection_id: str
    judgement: str


class FnMarksRequest(BaseModel):
    frame_id: str
    boxes: list[list[float]]


def create_app(store: LabelStore, partition: str = "test"):
    """FastAPI application over a ReviewManager.

    Endpoints (JSON bodies, UTF-8): POST /sessions, GET /sessions/{id}/next,
    POST /sessions/{id}/verdicts, POST /sessions/{id}/fn-marks,
    GET /sessions/{id}/progress, GET /sessions/{id}/report,
    GET /frames/{id}/image.  400 malformed, 404 unknown id, 409 conflict.
    """
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse

    manager = ReviewManager(store, partition=partition)
    app = FastAPI(title="camharvest review service")

    def _guard(fn, *args):
        try:
            return fn(*args)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except Conflict as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (ReviewError, qc_stats.QcError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/sessions")
    def open_session(req: SessionRequest):
        def run():
            plan = qc_stats.required_sample_size(
                req.pilot_p_hat, req.epsilon, req.confidence)
            session = manager.open_session(plan, req.detector_id, req.seed,
                                           annotator=req.annotator)
            return {"session_id": session.session_id,
                    "required_n": session.plan["required_n"],
                    "sample_size": len(session.sample)}
        return _guard(run)

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        item = _guard(manager.next_item, session_id)
        return item if item is not None else {"done": True}

    @app.post("/sessions/{session_id}/verdicts")
    def submit_verdict(session_id: str, req: VerdictRequest):
        return _guard(manager.submit_verdict, session_id,
                      req.detection_id, req.judgement)

    @app.post("/sessions/{session_id}/fn-marks")
    def submit_fn_marks(session_id: str, req: FnMarksRequest):
        count = _guard(manager.submit_fn_marks, session_id, req.frame_id,
                       [tuple(b) for b in req.boxes])
        return {"accepted": count}

    @app.get("/sessions/{session_id}/progress")
    def progress(session_id: str):
        return _guard(manager.progress, session_id)

    @app.get("/sessions/{session_id}/report")
    def report(session_id: str):
        return _guard(manager.report, session_id)

    @app.get("/frames/{frame_id}/image")
    def frame_image(frame_id: str):
        frames = store.query(FrameRecord, frame_id=frame_id)
        if not frames:
            raise HTTPException(status_code=404, detail=f"unknown frame: {frame_id}")
        from pathlib import Path
        path = Path(frames[0].image_path)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"image missing: {path}")
        return FileResponse(path)

    return app
