"""Domain record types shared across the pipeline modules.

Boxes are (x, y, w, h) in pixels throughout, with w > 0 and h > 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class CameraSource:
    """A registered camera: an id plus a stream locator.

    The url may be an HTTP playlist, a local directory of pre-cut segment
    files, or a ``synthetic://`` locator for generated scenes.
    """

    camera_id: str
    url: str
    label: str = ""
    location: Optional[tuple[float, float]] = None  # (lat, lon) degrees


@dataclass(frozen=True)
class VideoSegment:
    """One harvested media unit with full provenance."""

    segment_id: str
    camera_id: str
    started_at: float  # UTC seconds
    duration: float
    path: str
    frame_count: int = 0
    byte_size: int = 0


@dataclass(frozen=True)
class FrameRecord:
    """A frame extracted from a segment; ``sampled`` marks the 1/N keepers."""

    frame_id: str
    segment_id: str
    camera_id: str
    index_in_segment: int
    global_index: int
    sampled: bool
    image_path: str
    width: Optional[int] = None
    height: Optional[int] = None


@dataclass(frozen=True)
class SplitAssignment:
    frame_id: str
    partition: str  # "train" | "test"
    split_seed: int
    test_fraction: float


@dataclass(frozen=True)
class Detection:
    """One detector hit on one frame."""

    detection_id: str
    frame_id: str
    class_label: str
    bbox: Box
    score: float
    detector_id: str
    created_at: float = 0.0


@dataclass(frozen=True)
class GroundTruthObject:
    frame_id: str
    class_label: str
    bbox: Box


@dataclass(frozen=True)
class Verdict:
    """One human (or auto-judge) TP/FP call on one detection; append-only,
    corrections supersede by revision."""

    verdict_id: str
    detection_id: str
    session_id: str
    judgement: str  # "TP" | "FP"
    annotator: str
    created_at: float = 0.0


@dataclass(frozen=True)
class FnMark:
    """An annotator-drawn box over an object the detector missed."""

    mark_id: str
    frame_id: str
    session_id: str
    bbox: Box
    annotator: str
    created_at: float = 0.0
