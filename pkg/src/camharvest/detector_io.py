"""Detector plumbing: external-detector protocol, synthetic scenes with
ground truth, a configurable noisy oracle detector, and IoU matching of
detections against ground truth.

External detector wire protocol (UTF-8, newline-delimited JSON):
  request line  : {"frame_id": "...", "image_path": "..."}
  response line : {"frame_id": "...", "class": "car", "bbox": [x, y, w, h], "score": s}
The request stream is terminated by end-of-input; responses may arrive in
any order, zero or more per frame.
"""
from __future__ import annotations

import json
import logging
import math
import random
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .records import Box, Detection, FrameRecord, GroundTruthObject

log = logging.getLogger(__name__)


class DetectorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# IoU and matching


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    for box in (a, b):
        if box[2] <= 0 or box[3] <= 0:
            raise ValueError(f"degenerate box: {box}")
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (aw * ah + bw * bh - inter)


def _iou_matrix(dets: Sequence[Box], gts: Sequence[Box]) -> np.ndarray:
    d = np.asarray(dets, dtype=float).reshape(-1, 4)
    g = np.asarray(gts, dtype=float).reshape(-1, 4)
    dx1, dy1 = d[:, 0:1], d[:, 1:2]
    dx2, dy2 = dx1 + d[:, 2:3], dy1 + d[:, 3:4]
    gx1, gy1 = g[:, 0], g[:, 1]
    gx2, gy2 = gx1 + g[:, 2], gy1 + g[:, 3]
    iw = np.clip(np.minimum(dx2, gx2) - np.maximum(dx1, gx1), 0.0, None)
    ih = np.clip(np.minimum(dy2, gy2) - np.maximum(dy1, gy1), 0.0, None)
    inter = iw * ih
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore"):
        return np.where(inter > 0.0, inter / union, 0.0)


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[str, int], ...]  # (detection_id, gt index)


def match_detections(dets: Sequence[Detection], gt: Sequence[GroundTruthObject],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order (ties by detection_id).

    A detection is a TP if its best-IoU unmatched ground-truth object
    reaches the threshold; each ground-truth object matches at most once.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0,1], got {iou_threshold}")
    frame_ids = {d.frame_id for d in dets} | {g.frame_id for g in gt}
    if len(frame_ids) > 1:
        raise ValueError(f"detections and ground truth span multiple frames: {sorted(frame_ids)}")

    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].detection_id))
    matrix = _iou_matrix([d.bbox for d in dets], [g.bbox for g in gt]) \
        if dets and gt else np.zeros((len(dets), len(gt)))
    matched_gt = [False] * len(gt)
    pairs = []
    fp = 0
    for i in order:
        best_j, best_iou = -1, 0.0
        for j in range(len(gt)):
            if not matched_gt[j] and matrix[i, j] > best_iou:
                best_j, best_iou = j, matrix[i, j]
        if best_j >= 0 and best_iou >= iou_threshold:
            matched_gt[best_j] = True
            pairs.append((dets[i].detection_id, best_j))
        else:
            fp += 1
    tp = len(pairs)
    return MatchResult(tp=tp, fp=fp, fn=len(gt) - tp, pairs=tuple(pairs))


# ---------------------------------------------------------------------------
# Noisy oracle


@dataclass(frozen=True)
class NoisyOracleConfig:
    """Simulates a detector with a known error profile over ground truth."""

    miss_rate: float = 0.0       # per-object FN probability
    fp_per_frame: float = 0.0    # expected spurious detections per frame
    jitter: float = 0.0          # pixel stddev applied to matched boxes
    seed: int = 0
    frame_size: tuple[int, int] = (640, 480)
    fp_size: tuple[int, int] = (16, 64)
    detector_id: str = "noisy-oracle"
    class_label: str = "car"

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError(f"miss_rate must be in [0,1], got {self.miss_rate}")
        if self.fp_per_frame < 0.0:
            raise ValueError(f"fp_per_frame must be >= 0, got {self.fp_per_frame}")


def noisy_oracle_detect(gt: Sequence[GroundTruthObject],
                        cfg: NoisyOracleConfig) -> list[Detection]:
    """Emit each ground-truth object with probability 1 - miss_rate (box
    jittered by a Gaussian), plus Poisson(fp_per_frame) spurious boxes per
    frame.  Deterministic for a fixed seed and input."""
    rng = random.Random(cfg.seed)
    w_max, h_max = cfg.frame_size
    by_frame: dict[str, list[GroundTruthObject]] = {}
    for obj in gt:
        by_frame.setdefault(obj.frame_id, []).append(obj)

    out: list[Detection] = []
    serial = 0
    for frame_id in sorted(by_frame):
        for obj in sorted(by_frame[frame_id], key=lambda o: (o.bbox, o.class_label)):
            if rng.random() < cfg.miss_rate:
                continue
            x, y, w, h = obj.bbox
            if cfg.jitter > 0.0:
                x += rng.gauss(0.0, cfg.jitter)
                y += rng.gauss(0.0, cfg.jitter)
            x = min(max(0.0, x), max(0.0, w_max - w))
            y = min(max(0.0, y), max(0.0, h_max - h))
            out.append(Detection(
                detection_id=f"{cfg.detector_id}:{frame_id}:{serial:06d}",
                frame_id=frame_id, class_label=obj.class_label,
                bbox=(x, y, w, h),
                score=round(0.5 + 0.5 * rng.random(), 6),
                detector_id=cfg.detector_id))
            serial += 1
        n_fp = _poisson(rng, cfg.fp_per_frame)
        for _ in range(n_fp):
            fw = rng.randint(cfg.fp_size[0], cfg.fp_size[1])
            fh = rng.randint(cfg.fp_size[0], cfg.fp_size[1])
            fx = rng.uniform(0, max(1, w_max - fw))
            fy = rng.uniform(0, max(1, h_max - fh))
            out.append(Detection(
                detection_id=f"{cfg.detector_id}:{frame_id}:{serial:06d}",
                frame_id=frame_id, class_label=cfg.class_label,
                bbox=(fx, fy, float(fw), float(fh)),
                score=round(0.5 * rng.random(), 6),
                detector_id=cfg.detector_id))
            serial += 1
    return out


def _poisson(rng: random.Random, lam: float) -> int:
    if lam <= 0.0:
        return 0
    # Knuth's method; lambdas here are small (a few FPs per frame).
    limit = math.exp(-lam)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SyntheticScene:
    frame: FrameRecord
    ground_truth: tuple[GroundTruthObject, ...]
    feature_map: "object"  # parts_model.FeatureMap
    strengths: tuple[float, ...] = ()


def synthesize_scene(seed: int, frame_size: tuple[int, int] = (64, 64),
                     n_objects: int = 5, min_size: int = 24, max_size: int = 32,
                     cell_size: int = 8, frame_id: Optional[str] = None,
                     out_dir: Optional[Path] = None,
                     segment_id: str = "", camera_id: str = "",
                     index_in_segment: int = 0,
                     global_index: int = 0) -> SyntheticScene:
    """Deterministically generate one frame: planted objects aligned to the
    feature-cell grid, a ground-truth box per object, and a feature map with
    the toy root/part patterns planted at each object so the built-in
    detector responds there.

    When ``out_dir`` is given, writes the frame image (PNG), a ground-truth
    sidecar (.gt.json) and the feature map (.fmap.json) next to each other.
    """
    from . import parts_model  # deferred: parts_model imports records only

    w_px, h_px = frame_size
    gw, gh = w_px // cell_size, h_px // cell_size
    root_cells = 3  # toy root filter extent
    if gw < root_cells or gh < root_cells:
        raise ValueError(f"frame {frame_size} too small for {root_cells}-cell objects")
    if min_size < root_cells * cell_size:
        raise ValueError(f"min_size must be >= {root_cells * cell_size}")

    rng = random.Random(seed)
    frame_id = frame_id or f"synthetic-{seed:08d}"

    # Non-overlapping root cells on a coarse lattice so boxes never collide.
    slots = [(cx, cy)
             for cy in range(0, gh - root_cells + 1, root_cells + 1)
             for cx in range(0, gw - root_cells + 1, root_cells + 1)]
    if n_objects > len(slots):
        raise ValueError(f"cannot fit {n_objects} objects; at most {len(slots)}")
    chosen = sorted(rng.sample(slots, n_objects))

    dim = parts_model.TOY_DIM
    noise = np.random.default_rng(seed).normal(0.0, 0.01, size=(gh, gw, dim))
    fmap_data = noise.copy()
    gts = []
    strengths = []
    for cx, cy in chosen:
        strength = rng.uniform(0.6, 1.6)
        strengths.append(strength)
        fmap_data[cy:cy + 3, cx:cx + 3, :] += strength * parts_model.toy_root_pattern()
        for which, (ax, ay) in ((0, (0, 0)), (1, (2, 2))):
            fmap_data[cy + ay, cx + ax, :] += strength * parts_model.toy_part_pattern(which)[0, 0, :]
        x, y = cx * cell_size, cy * cell_size
        size = rng.randint(min_size, min(max_size, w_px - x, h_px - y))
        gts.append(GroundTruthObject(frame_id=frame_id, class_label="car",
                                     bbox=(float(x), float(y), float(size), float(size))))
    fmap = parts_model.FeatureMap(width=gw, height=gh, dim=dim, data=fmap_data)

    image_path = f"{frame_id}.png"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        image_path = str(out_dir / f"{frame_id}.png")
        _write_frame_png(Path(image_path), frame_size, [g.bbox for g in gts], seed)
        save_ground_truth(Path(image_path), gts)
        (out_dir / f"{frame_id}.fmap.json").write_text(
            parts_model.feature_map_to_json(fmap))

    frame = FrameRecord(frame_id=frame_id, segment_id=segment_id,
                        camera_id=camera_id, index_in_segment=index_in_segment,
                        global_index=global_index, sampled=True,
                        image_path=image_path, width=w_px, height=h_px)
    return SyntheticScene(frame=frame, ground_truth=tuple(gts),
                          feature_map=fmap, strengths=tuple(strengths))


def _write_frame_png(path: Path, size: tuple[int, int],
                     boxes: Sequence[Box], seed: int) -> None:
    from PIL import Image, ImageDraw

    img = Image.new("RGB", size, (96, 96, 96))
    draw = ImageDraw.Draw(img)
    rng = random.Random(seed ^ 0x5EED)
    for x, y, w, h in boxes:
        color = tuple(rng.randint(80, 255) for _ in range(3))
        draw.rectangle([x, y, x + w - 1, y + h - 1], fill=color, outline=(0, 0, 0))
    img.save(path, format="PNG")


def save_ground_truth(image_path: Path, gts: Sequence[GroundTruthObject]) -> Path:
    """Write the ground-truth sidecar next to a frame image."""
    sidecar = image_path.with_suffix(".gt.json")
    doc = {"format": "ground-truth/v1",
           "objects": [{"frame_id": g.frame_id, "class": g.class_label,
                        "bbox": list(g.bbox)} for g in gts]}
    sidecar.write_text(json.dumps(doc, indent=1))
    return sidecar


def load_ground_truth(image_path: Path) -> list[GroundTruthObject]:
    sidecar = Path(image_path).with_suffix(".gt.json")
    if not sidecar.exists():
        return []
    doc = json.loads(sidecar.read_text())
    return [GroundTruthObject(frame_id=o["frame_id"], class_label=o["class"],
                              bbox=tuple(o["bbox"]))
            for o in doc["objects"]]


# ---------------------------------------------------------------------------
# External detectors


def run_external_detector(command_spec: Sequence[str],
                          frames: Sequence[FrameRecord],
                          detector_id: str = "external",
                          timeout_per_frame: float = 30.0) -> list[Detection]:
    """Run a detector plugin as a child process over the wire protocol.

    One request line per frame goes to the child's stdin; detections are
    read from stdout until end of stream.  Malformed lines are logged and
    skipped; a nonzero exit raises with the captured stderr.  The overall
    deadline is ``timeout_per_frame`` times the number of frames.
    """
    proc = subprocess.Popen(list(command_spec), stdin=subprocess.PIPE,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            text=True, encoding="utf-8")

    stdin = proc.stdin
    proc.stdin = None  # the writer thread owns this stream from here on

    def feed():
        try:
            for fr in frames:
                stdin.write(json.dumps(
                    {"frame_id": fr.frame_id, "image_path": fr.image_path}) + "\n")
            stdin.close()
        except (BrokenPipeError, OSError, ValueError):
            pass

    writer = threading.Thread(target=feed, daemon=True)
    writer.start()
    deadline = timeout_per_frame * max(1, len(frames))
    try:
        stdout, stderr = proc.communicate(timeout=deadline)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()
        raise DetectorError(f"detector {command_spec!r} timed out after {deadline:.0f}s")
    if proc.returncode != 0:
        raise DetectorError(
            f"detector {command_spec!r} exited {proc.returncode}: {stderr.strip()}")

    out: list[Detection] = []
    serial = 0
    for lineno, line in enumerate(stdout.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            bbox = tuple(float(v) for v in doc["bbox"])
            if len(bbox) != 4:
                raise ValueError("bbox must have 4 elements")
            det = Detection(
                detection_id=f"{detector_id}:{doc['frame_id']}:{serial:06d}",
                frame_id=doc["frame_id"], class_label=doc["class"],
                bbox=bbox, score=float(doc["score"]), detector_id=detector_id)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("malformed detector output line %d: %r (%s)", lineno, line, exc)
            continue
        out.append(det)
        serial += 1
    return out
