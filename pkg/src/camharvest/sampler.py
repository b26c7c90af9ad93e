"""Frame extraction, systematic 1/N subsampling, and train/test splitting.

Pure functions over immutable inputs; persistence is the caller's concern.
"""
from __future__ import annotations

import logging
import math
import random
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .records import FrameRecord, SplitAssignment, VideoSegment

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"}


class SplitError(ValueError):
    pass


def _frame_paths(segment: VideoSegment) -> list[str]:
    """Enumerate a segment's frames in order.

    A segment that is a directory holds one image file per frame (sidecar
    .json/.npz files are ignored).  A single-file segment contributes
    ``frame_count`` virtual frames addressed as ``path#<index>``; pixel
    decoding of real video is behind an optional adapter and not needed at
    desk scale.
    """
    path = Path(segment.path)
    if path.is_dir():
        return [str(p) for p in sorted(path.iterdir())
                if p.suffix.lower() in IMAGE_EXTENSIONS]
    return [f"{segment.path}#{i:05d}" for i in range(segment.frame_count)]


def sample_frames(segments: Sequence[VideoSegment], rate_denominator: int,
                  offset: int = 0) -> list[FrameRecord]:
    """Keep every N-th frame of each camera's concatenated frame sequence.

    Segments must be supplied in time order per camera; the global index
    runs over the camera's full sequence and a frame is kept exactly when
    ``global_index % N == offset``.  Unreadable segments are skipped with a
    logged error so a long harvest never dies on one bad file.
    """
    if rate_denominator < 1:
        raise ValueError(f"rate denominator must be >= 1, got {rate_denominator}")
    if not 0 <= offset < rate_denominator:
        raise ValueError(f"offset must be in [0,{rate_denominator}), got {offset}")

    out: list[FrameRecord] = []
    global_index: dict[str, int] = {}
    for segment in segments:
        try:
            paths = _frame_paths(segment)
        except OSError as exc:
            log.error("skipping unreadable segment %s: %s", segment.segment_id, exc)
            continue
        for idx, image_path in enumerate(paths):
            gi = global_index.get(segment.camera_id, 0)
            global_index[segment.camera_id] = gi + 1
            if gi % rate_denominator != offset:
                continue
            out.append(FrameRecord(
                frame_id=f"{segment.segment_id}:{idx:05d}",
                segment_id=segment.segment_id,
                camera_id=segment.camera_id,
                index_in_segment=idx,
                global_index=gi,
                sampled=True,
                image_path=image_path))
    return out


def split(frames: Sequence[FrameRecord], test_fraction: Optional[float] = None,
          seed: int = 0, test_count: Optional[int] = None,
          stratify_by_camera: bool = False) -> tuple[set[str], set[str]]:
    """Partition frame ids into (train, test) sets.

    Uniform random per frame, deterministic for a fixed seed regardless of
    input order (frames are canonically ordered by id before shuffling).
    |test| is round-half-up of fraction * |frames| unless an explicit
    ``test_count`` reproduces an exact published split.
    """
    if not frames:
        raise SplitError("cannot split an empty frame list")
    if test_count is None:
        if test_fraction is None or not 0.0 < test_fraction < 1.0:
            raise SplitError(f"test fraction must be in (0,1), got {test_fraction}")
    elif not 0 <= test_count <= len(frames):
        raise SplitError(f"test count {test_count} out of range for {len(frames)} frames")

    if stratify_by_camera:
        test: set[str] = set()
        by_camera: dict[str, list[FrameRecord]] = {}
        for fr in frames:
            by_camera.setdefault(fr.camera_id, []).append(fr)
        for camera_id in sorted(by_camera):
            group = by_camera[camera_id]
            k = (_round_half_up(test_fraction * len(group)) if test_count is None
                 else _round_half_up(test_count * len(group) / len(frames)))
            test |= _draw(group, k, seed)
    else:
        k = test_count if test_count is not None \
            else _round_half_up(test_fraction * len(frames))
        test = _draw(frames, k, seed)
    train = {fr.frame_id for fr in frames} - test
    return train, test


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _draw(frames: Sequence[FrameRecord], k: int, seed: int) -> set[str]:
    ids = sorted(fr.frame_id for fr in frames)
    rng = random.Random(seed)
    rng.shuffle(ids)
    return set(ids[:k])


def assignments(frames: Sequence[FrameRecord], train: set[str], test: set[str],
                seed: int, test_fraction: float) -> list[SplitAssignment]:
    return [SplitAssignment(frame_id=fr.frame_id,
                            partition="test" if fr.frame_id in test else "train",
                            split_seed=seed, test_fraction=test_fraction)
            for fr in frames]


def write_manifest(path: Path, frames: Sequence[FrameRecord],
                   test: set[str]) -> None:
    """Frame manifest: one line per frame, tab-separated
    frame_id, camera_id, global_index, partition."""
    lines = []
    for fr in sorted(frames, key=lambda f: f.frame_id):
        partition = "test" if fr.frame_id in test else "train"
        lines.append(f"{fr.frame_id}\t{fr.camera_id}\t{fr.global_index}\t{partition}")
    Path(path).write_text("\n".join(lines) + "\n")
