"""SSD post-processing: anchors, box decoding, and non-maximum suppression.

Boxes are normalized corner tuples (ymin, xmin, ymax, xmax) in [0, 1].
Anchors live in center form (cy, cx, h, w), generated row-major over each
feature-map grid in the order the config lists the maps.  All functions are
pure and deterministic; ties in NMS break toward the lower input index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Background is class 0 and never appears in outputs; detection heads emit
# real classes only.
BACKGROUND_CLASS_ID = 0
_MIN_BOX_EXTENT = 1e-6


@dataclass(frozen=True)
class Detection:
    """One decoded detection: corner box, class label id, score."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float

    def __post_init__(self):
        ymin, xmin, ymax, xmax = self.box
        if not (ymin < ymax and xmin < xmax):
            raise ValueError(f"degenerate detection box {self.box}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class FeatureMapSpec:
    """Anchor layout for one feature map: grid size, scales, aspect ratios."""

    grid: tuple[int, int]
    scales: tuple[float, ...]
    ratios: tuple[float, ...]

    def __post_init__(self):
        gh, gw = self.grid
        if gh < 1 or gw < 1:
            raise ValueError(f"grid {self.grid} must be positive")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("anchor scales must be positive")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError("aspect ratios must be positive")
        object.__setattr__(self, "grid", (int(gh), int(gw)))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grids for every feature map plus the box-coder scale factors."""

    maps: tuple[FeatureMapSpec, ...]
    box_coder: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)

    def __post_init__(self):
        if not self.maps:
            raise ValueError("anchor config needs at least one feature map")
        if any(f <= 0 for f in self.box_coder):
            raise ValueError("box-coder scale factors must be positive")
        object.__setattr__(self, "maps", tuple(self.maps))
        object.__setattr__(self, "box_coder", tuple(float(f) for f in self.box_coder))

    @property
    def total_anchors(self) -> int:
        return sum(m.grid[0] * m.grid[1] * m.anchors_per_location for m in self.maps)

    def to_json(self) -> str:
        return json.dumps(
            {
                "maps": [
                    {"grid": list(m.grid), "scales": list(m.scales), "ratios": list(m.ratios)}
                    for m in self.maps
                ],
                "box_coder": list(self.box_coder),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "AnchorConfig":
        raw = json.loads(text)
        maps = tuple(
            FeatureMapSpec(grid=tuple(m["grid"]), scales=tuple(m["scales"]), ratios=tuple(m["ratios"]))
            for m in raw["maps"]
        )
        return cls(maps=maps, box_coder=tuple(raw["box_coder"]))


def generate_anchors(cfg: AnchorConfig) -> np.ndarray:
    """All anchors as an (N, 4) array of (cy, cx, h, w).

    Grid cells are emitted row-major; per cell, scales vary slowest and
    ratios fastest.  Order is stable and deterministic, and downstream head
    tensors must be laid out to match it.
    """
    rows = []
    for fmap in cfg.maps:
        gh, gw = fmap.grid
        for r in range(gh):
            cy = (r + 0.5) / gh
            for c in range(gw):
                cx = (c + 0.5) / gw
                for scale in fmap.scales:
                    for ratio in fmap.ratios:
                        root = math.sqrt(ratio)
                        rows.append((cy, cx, scale / root, scale * root))
    return np.array(rows, dtype=np.float64)


def decode_boxes(raw, anchors: np.ndarray, cfg: AnchorConfig) -> np.ndarray:
    """Decode SSD regression outputs against anchors into clipped corner boxes.

    raw holds (ty, tx, th, tw) per anchor, flat or (N, 4).  Decoding:
    cy = ty/fy * h_a + cy_a, cx = tx/fx * w_a + cx_a, h = h_a * exp(th/fh),
    w = w_a * exp(tw/fw); the result is converted to corners and clipped to
    [0, 1].  Boxes that collapse under clipping are nudged to a minimal
    positive extent so every output satisfies min < max.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        if raw.size != 4 * len(anchors):
            raise ValueError(f"raw length {raw.size} does not match {len(anchors)} anchors")
        raw = raw.reshape(-1, 4)
    elif raw.shape != (len(anchors), 4):
        raise ValueError(f"raw shape {raw.shape} does not match {len(anchors)} anchors")
    fy, fx, fh, fw = cfg.box_coder
    cya, cxa, ha, wa = anchors[:, 0], anchors[:, 1], anchors[:, 2], anchors[:, 3]
    cy = raw[:, 0] / fy * ha + cya
    cx = raw[:, 1] / fx * wa + cxa
    with np.errstate(over="ignore"):
        h = ha * np.exp(raw[:, 2] / fh)
        w = wa * np.exp(raw[:, 3] / fw)
    ymin = np.clip(cy - h / 2.0, 0.0, 1.0)
    ymax = np.clip(cy + h / 2.0, 0.0, 1.0)
    xmin = np.clip(cx - w / 2.0, 0.0, 1.0)
    xmax = np.clip(cx + w / 2.0, 0.0, 1.0)
    ymin, ymax = _ensure_extent(ymin, ymax)
    xmin, xmax = _ensure_extent(xmin, xmax)
    return np.stack([ymin, xmin, ymax, xmax], axis=1)


def _ensure_extent(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    collapsed = hi - lo < _MIN_BOX_EXTENT
    if collapsed.any():
        center = np.clip((lo + hi) / 2.0, _MIN_BOX_EXTENT / 2, 1.0 - _MIN_BOX_EXTENT / 2)
        lo = np.where(collapsed, center - _MIN_BOX_EXTENT / 2, lo)
        hi = np.where(collapsed, center + _MIN_BOX_EXTENT / 2, hi)
    return lo, hi


def iou(a, b) -> float:
    """Intersection-over-union of two corner boxes; 0 when disjoint."""
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    ih = min(ay1, by1) - max(ay0, by0)
    iw = min(ax1, bx1) - max(ax0, bx0)
    if ih <= 0.0 or iw <= 0.0:
        return 0.0
    inter = ih * iw
    union = (ay1 - ay0) * (ax1 - ax0) + (by1 - by0) * (bx1 - bx0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) corner-box arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    y0 = np.maximum(a[:, None, 0], b[None, :, 0])
    x0 = np.maximum(a[:, None, 1], b[None, :, 1])
    y1 = np.minimum(a[:, None, 2], b[None, :, 2])
    x1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(y1 - y0, 0.0, None) * np.clip(x1 - x0, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


def nms(dets: list[Detection], iou_threshold: float, max_out: int) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Candidates are visited by descending score, ties broken by lower input
    index (the anchor index when called from the pipeline).  A detection is
    kept iff its IoU with every kept detection of the same class stays at or
    below the threshold.  The merged result keeps that order and is truncated
    to max_out.  Overlaps come from one vectorized pairwise IoU pass; the
    greedy selection itself is inherently sequential.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    overlaps = iou_matrix(boxes, boxes)
    kept: list[Detection] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        cand = dets[i]
        same_class = kept_by_class.setdefault(cand.class_id, [])
        if not same_class or np.all(overlaps[i, same_class] <= iou_threshold):
            same_class.append(i)
            kept.append(cand)
            if len(kept) >= max_out:
                break
    return kept
