"""Toy-scale deformable-parts detector over synthetic feature maps.

A model is a root filter plus n part filters; a hypothesis places every
filter on the feature map and scores the sum of filter responses minus a
quadratic deformation penalty per part, plus a bias.  Detection evaluates
the best part placement at every valid root position.

The score decomposes per part, so the best placement optimizes each part
independently; the brute-force oracle in the test suite enumerates all
part-position tuples instead and must agree.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .records import Detection

MODEL_FORMAT = "parts-model/v1"
FEATURE_MAP_FORMAT = "feature-map/v1"


class PlacementError(ValueError):
    """A filter window does not fit inside the feature map."""


@dataclass
class FeatureMap:
    """Dense per-cell feature grid, shape (height, width, dim)."""

    width: int
    height: int
    dim: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).reshape(
            self.height, self.width, self.dim)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite entries")


@dataclass
class Filter:
    """Linear filter over a fw x fh window of feature cells."""

    fw: int
    fh: int
    dim: int
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(
            self.fh, self.fw, self.dim)


@dataclass
class PartSpec:
    filter: Filter
    anchor: tuple[int, int]  # (ax, ay) cells relative to the root position
    deform: tuple[float, float, float, float]  # (d1, d2, d3, d4)

    def __post_init__(self):
        d1, d2, d3, d4 = self.deform
        # Quadratic terms must penalize, or the per-part max is unbounded.
        if d3 < 0 or d4 < 0:
            raise ValueError(f"quadratic deformation weights must be >= 0, got {self.deform}")


@dataclass
class PartsModel:
    root: Filter
    parts: list[PartSpec] = field(default_factory=list)
    bias: float = 0.0
    threshold: float = 0.0
    cell_size: int = 8  # pixels per feature cell, used to emit pixel boxes


@dataclass(frozen=True)
class Placement:
    """Positions of the root (index 0) and each part, with the total score."""

    positions: tuple[tuple[int, int], ...]
    score: float


def _check_inside(f: Filter, fmap: FeatureMap, at: tuple[int, int]) -> None:
    x, y = at
    if x < 0 or y < 0 or x + f.fw > fmap.width or y + f.fh > fmap.height:
        raise PlacementError(
            f"{f.fw}x{f.fh} filter at ({x},{y}) outside {fmap.width}x{fmap.height} map")
    if f.dim != fmap.dim:
        raise PlacementError(f"filter dim {f.dim} != map dim {fmap.dim}")


def filter_response(f: Filter, fmap: FeatureMap, at: tuple[int, int]) -> float:
    """Dot product of the filter weights with the map subwindow at (x, y)."""
    _check_inside(f, fmap, at)
    x, y = at
    window = fmap.data[y:y + f.fh, x:x + f.fw, :]
    return float(np.sum(window * f.weights))


def deformation_cost(part: PartSpec, root_at: tuple[int, int],
                     part_at: tuple[int, int]) -> float:
    """d1*dx + d2*dy + d3*dx^2 + d4*dy^2 for the part's displacement from
    its anchor (anchor is relative to the root position)."""
    dx = part_at[0] - (root_at[0] + part.anchor[0])
    dy = part_at[1] - (root_at[1] + part.anchor[1])
    d1, d2, d3, d4 = part.deform
    return d1 * dx + d2 * dy + d3 * dx * dx + d4 * dy * dy


def score_hypothesis(model: PartsModel, fmap: FeatureMap,
                     placement: Placement) -> float:
    """Total hypothesis score: filter responses minus deformation plus bias."""
    positions = placement.positions
    if len(positions) != len(model.parts) + 1:
        raise ValueError(
            f"placement has {len(positions)} positions for {len(model.parts)} parts")
    total = filter_response(model.root, fmap, positions[0])
    for part, pos in zip(model.parts, positions[1:]):
        total += filter_response(part.filter, fmap, pos)
        total -= deformation_cost(part, positions[0], pos)
    return total + model.bias


def _best_part_position(part: PartSpec, fmap: FeatureMap,
                        root_at: tuple[int, int]) -> tuple[tuple[int, int], float]:
    best_pos = None
    best_score = -np.inf
    best_key = None
    for py in range(fmap.height - part.filter.fh + 1):
        for px in range(fmap.width - part.filter.fw + 1):
            s = (filter_response(part.filter, fmap, (px, py))
                 - deformation_cost(part, root_at, (px, py)))
            # Ties break toward the smallest displacement, (dy, dx) order.
            dx = px - (root_at[0] + part.anchor[0])
            dy = py - (root_at[1] + part.anchor[1])
            key = (dy, dx)
            if s > best_score or (s == best_score and key < best_key):
                best_score = s
                best_pos = (px, py)
                best_key = key
    if best_pos is None:
        raise PlacementError("no valid position for part filter")
    return best_pos, best_score


def best_placement(model: PartsModel, fmap: FeatureMap,
                   root_at: tuple[int, int]) -> Placement:
    """Best-scoring placement for a fixed root position.

    Each part is optimized independently over all in-bounds positions;
    the returned score equals ``score_hypothesis`` of the positions.
    """
    _check_inside(model.root, fmap, root_at)
    total = filter_response(model.root, fmap, root_at) + model.bias
    positions = [root_at]
    for part in model.parts:
        pos, part_score = _best_part_position(part, fmap, root_at)
        positions.append(pos)
        total += part_score
    return Placement(positions=tuple(positions), score=total)


def detect(model: PartsModel, fmap: FeatureMap, frame_id: str = "",
           detector_id: str = "dpm-toy",
           class_label: str = "car") -> list[Detection]:
    """Evaluate the best placement at every valid root position and emit a
    detection wherever the score reaches the model threshold.

    The detection box is the root window converted to pixels by the model's
    cell size.  Results are sorted by descending score, ties by (y, x) of
    the root.  No suppression of overlapping detections is applied here.
    """
    if fmap.width < model.root.fw or fmap.height < model.root.fh:
        raise PlacementError("feature map smaller than the root filter")
    hits = []
    for ry in range(fmap.height - model.root.fh + 1):
        for rx in range(fmap.width - model.root.fw + 1):
            placement = best_placement(model, fmap, (rx, ry))
            if placement.score >= model.threshold:
                hits.append((rx, ry, placement.score))
    hits.sort(key=lambda h: (-h[2], h[1], h[0]))
    cs = model.cell_size
    return [
        Detection(
            detection_id=f"{detector_id}:{frame_id}:{rx}:{ry}",
            frame_id=frame_id,
            class_label=class_label,
            bbox=(rx * cs, ry * cs, model.root.fw * cs, model.root.fh * cs),
            score=score,
            detector_id=detector_id,
        )
        for rx, ry, score in hits
    ]


# ---------------------------------------------------------------------------
# Serialization (versioned JSON documents; filters stored row-major)


def _filter_to_doc(f: Filter) -> dict:
    return {"fw": f.fw, "fh": f.fh, "dim": f.dim,
            "weights": f.weights.reshape(-1).tolist()}


def _filter_from_doc(doc: dict) -> Filter:
    return Filter(fw=doc["fw"], fh=doc["fh"], dim=doc["dim"],
                  weights=np.array(doc["weights"], dtype=float))


def model_to_json(model: PartsModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "root": _filter_to_doc(model.root),
        "parts": [
            {"filter": _filter_to_doc(p.filter),
             "anchor": list(p.anchor),
             "deform": list(p.deform)}
            for p in model.parts
        ],
        "bias": model.bias,
        "threshold": model.threshold,
        "cell_size": model.cell_size,
    }
    return json.dumps(doc, indent=2)


def model_from_json(text: str) -> PartsModel:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format: {doc.get('format')!r}")
    return PartsModel(
        root=_filter_from_doc(doc["root"]),
        parts=[
            PartSpec(filter=_filter_from_doc(p["filter"]),
                     anchor=tuple(p["anchor"]),
                     deform=tuple(p["deform"]))
            for p in doc["parts"]
        ],
        bias=doc["bias"],
        threshold=doc["threshold"],
        cell_size=doc["cell_size"],
    )


def feature_map_to_json(fmap: FeatureMap) -> str:
    doc = {
        "format": FEATURE_MAP_FORMAT,
        "width": fmap.width,
        "height": fmap.height,
        "dim": fmap.dim,
        "data": fmap.data.reshape(-1).tolist(),
    }
    return json.dumps(doc)


def feature_map_from_json(text: str) -> FeatureMap:
    doc = json.loads(text)
    if doc.get("format") != FEATURE_MAP_FORMAT:
        raise ValueError(f"unsupported feature map format: {doc.get('format')!r}")
    return FeatureMap(width=doc["width"], height=doc["height"], dim=doc["dim"],
                      data=np.array(doc["data"], dtype=float))


# ---------------------------------------------------------------------------
# Built-in toy model used as the default weak detector


TOY_DIM = 4


def toy_root_pattern(dim: int = TOY_DIM) -> np.ndarray:
    """Distinctive 3x3 root pattern; scene synthesis plants the same pattern
    at object locations so the toy detector responds there.  Fixed
    pseudo-random values give the pattern a sharp autocorrelation, so
    windows shifted off an object score near zero."""
    rng = np.random.default_rng(0xC0FFEE)
    return rng.normal(0.0, 1.0, size=(3, 3, dim))


def toy_part_pattern(which: int, dim: int = TOY_DIM) -> np.ndarray:
    rng = np.random.default_rng(0xBEEF00 + which)
    return rng.normal(0.0, 1.0, size=(1, 1, dim))


def toy_model(threshold: float = 1.0, cell_size: int = 8) -> PartsModel:
    """Small two-part car model matched to ``detector_io.synthesize_scene``.

    Weights are normalized against the composite planted pattern (root plus
    the two corner part patterns) so that an object planted with strength s
    scores s at its exact placement: s/2 from the root and s/4 from each
    part.  A threshold t therefore keeps exactly the objects stronger
    than t (up to the scene's small additive noise).
    """
    root_pat = toy_root_pattern()
    composite = root_pat.copy()
    corner_cells = []
    for which, (ax, ay) in ((0, (0, 0)), (1, (2, 2))):
        composite[ay, ax, :] += toy_part_pattern(which)[0, 0, :]
        corner_cells.append(composite[ay, ax, :].copy())
    root = Filter(fw=3, fh=3, dim=TOY_DIM,
                  weights=composite / (2.0 * np.sum(composite ** 2)))
    parts = []
    for which, anchor in ((0, (0, 0)), (1, (2, 2))):
        cell = corner_cells[which]
        parts.append(PartSpec(
            filter=Filter(fw=1, fh=1, dim=TOY_DIM,
                          weights=cell / (4.0 * np.sum(cell ** 2))),
            anchor=anchor,
            deform=(0.0, 0.0, 1.0, 1.0),
        ))
    return PartsModel(root=root, parts=parts, bias=0.0,
                      threshold=threshold, cell_size=cell_size)
