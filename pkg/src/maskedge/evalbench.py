"""COCO-style mAP at IoU=.50:.05:.95 plus the latency measurement protocol.

Evaluation matches predictions to ground truth greedily by descending score;
each ground-truth box is consumed at most once, a match needs IoU >= t, and
among eligible boxes the higher IoU wins (ties to the lower ground-truth
index).  AP uses the 101-point interpolated precision-recall convention, and
the final number is the mean over classes of the mean over the ten IoU
thresholds.  Classes that never occur in the ground truth are excluded from
the mean rather than counted as zero.

Benchmarking is strictly sequential and single-threaded: images are decoded
up front, one untimed warm-up inference absorbs JIT compilation, and each run
times preprocessing + inference + post-processing for the whole image list on
the monotonic clock.  The 2NN cascade executes both stages inside one timed
call, so its per-image time is by construction the detection and
classification times summed.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import Image
from .postproc import Detection, iou

logger = logging.getLogger(__name__)

LABEL_TO_CLASS = {"mask": 1, "nomask": 2}
CLASS_TO_LABEL = {v: k for k, v in LABEL_TO_CLASS.items()}
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
_SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    class_id: int


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    boxes: tuple[GroundTruth, ...]


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    entries: tuple[ManifestEntry, ...]
    base_dir: Path

    def image_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.image)
        return p if p.is_absolute() else self.base_dir / p


def load_manifest(path) -> DatasetManifest:
    """Parse and validate the JSON dataset manifest.

    Schema: {"split": "test", "entries": [{"image": path, "boxes":
    [{"label": "mask"|"nomask", "ymin":..., "xmin":..., "ymax":..., "xmax":...}]}]}
    with normalized coordinates.  Image paths are resolved relative to the
    manifest's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: manifest root must be an object")
    split = raw.get("split")
    if split not in _SPLITS:
        raise ManifestError(f"{path}: split must be one of {_SPLITS}, got {split!r}")
    entries_raw = raw.get("entries")
    if not isinstance(entries_raw, list):
        raise ManifestError(f"{path}: 'entries' must be a list")

    entries = []
    seen: set[str] = set()
    for i, e in enumerate(entries_raw):
        where = f"{path}: entry {i}"
        if not isinstance(e, dict) or not isinstance(e.get("image"), str):
            raise ManifestError(f"{where}: needs an 'image' path string")
        image = e["image"]
        if image in seen:
            raise ManifestError(f"{where}: duplicate image path {image!r}")
        seen.add(image)
        boxes = []
        for j, b in enumerate(e.get("boxes", [])):
            label = b.get("label")
            if label not in LABEL_TO_CLASS:
                raise ManifestError(f"{where} box {j}: unknown label {label!r}")
            try:
                ymin, xmin = float(b["ymin"]), float(b["xmin"])
                ymax, xmax = float(b["ymax"]), float(b["xmax"])
            except (KeyError, TypeError, ValueError):
                raise ManifestError(f"{where} box {j}: needs numeric ymin/xmin/ymax/xmax") from None
            if not (0.0 <= ymin < ymax <= 1.0 and 0.0 <= xmin < xmax <= 1.0):
                raise ManifestError(
                    f"{where} box {j}: invalid normalized corners "
                    f"({ymin}, {xmin}, {ymax}, {xmax})"
                )
            boxes.append(GroundTruth(box=(ymin, xmin, ymax, xmax), class_id=LABEL_TO_CLASS[label]))
        entries.append(ManifestEntry(image=image, boxes=tuple(boxes)))
    return DatasetManifest(split=split, entries=tuple(entries), base_dir=path.parent.resolve())


# -- mAP ----------------------------------------------------------------------

_RECALL_POINTS = np.arange(101) / 100.0


def _average_precision(preds, gts_per_image, ngt: int, thr: float) -> float:
    """AP for one (class, IoU threshold) pair via 101-point interpolation.

    preds: (score, image_idx, order_idx, box) tuples for this class only.
    gts_per_image: per image, the list of this class's ground-truth boxes.
    """
    if ngt == 0:
        raise ValueError("AP undefined without ground truth")
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][0], preds[k][1], preds[k][2]))
    matched = [np.zeros(len(g), dtype=bool) for g in gts_per_image]
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        _, img, _, box = preds[k]
        best_iou, best_j = -1.0, -1
        for j, gt_box in enumerate(gts_per_image[img]):
            if matched[img][j]:
                continue
            v = iou(box, gt_box)
            if v >= thr and v > best_iou:  # strict > keeps the lower GT index on ties
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[img][best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / ngt
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right, then sample the 101 recall points
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, _RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(sampled))


@dataclass
class EvalReport:
    """mAP breakdown: overall, per class, per IoU threshold, plus counts."""

    map: float
    per_class: dict[str, float | None]
    per_threshold: dict[str, float]
    per_class_threshold: dict[str, dict[str, float]]
    num_images: int
    num_gt: dict[str, int]
    num_predictions: int
    skipped: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "map": self.map,
            "per_class": self.per_class,
            "per_threshold": self.per_threshold,
            "per_class_threshold": self.per_class_threshold,
            "counts": {
                "images": self.num_images,
                "ground_truth": self.num_gt,
                "predictions": self.num_predictions,
            },
            "skipped": self.skipped,
        }, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'Class':<12} {'AP@.50:.05:.95':>16}"]
        for label, ap in sorted(self.per_class.items()):
            shown = "n/a (no GT)" if ap is None else f"{100 * ap:.1f}%"
            lines.append(f"{label:<12} {shown:>16}")
        lines.append(f"{'mAP':<12} {100 * self.map:>15.1f}%")
        lines.append(f"images={self.num_images} predictions={self.num_predictions} "
                     f"skipped={len(self.skipped)}")
        return "\n".join(lines)


def compute_map(predictions, ground_truths, class_ids=None) -> EvalReport:
    """Score per-image prediction lists against per-image ground-truth lists."""
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground_truths must align per image")
    if class_ids is None:
        class_ids = tuple(sorted(CLASS_TO_LABEL))
    per_class: dict[str, float | None] = {}
    per_class_threshold: dict[str, dict[str, float]] = {}
    num_gt: dict[str, int] = {}
    class_aps: list[list[float]] = []
    for cid in class_ids:
        label = CLASS_TO_LABEL.get(cid, f"class{cid}")
        gts = [[g.box for g in img_gts if g.class_id == cid] for img_gts in ground_truths]
        ngt = sum(len(g) for g in gts)
        num_gt[label] = ngt
        if ngt == 0:
            per_class[label] = None
            continue
        preds = []
        for img, dets in enumerate(predictions):
            for k, det in enumerate(dets):
                if det.class_id == cid:
                    preds.append((det.score, img, k, det.box))
        aps = [_average_precision(preds, gts, ngt, thr) for thr in IOU_THRESHOLDS]
        per_class[label] = float(np.mean(aps))
        per_class_threshold[label] = {f"{t:.2f}": ap for t, ap in zip(IOU_THRESHOLDS, aps)}
        class_aps.append(aps)

    if class_aps:
        matrix = np.array(class_aps)
        overall = float(np.mean([np.mean(row) for row in matrix]))
        per_threshold = {f"{t:.2f}": float(np.mean(matrix[:, i]))
                         for i, t in enumerate(IOU_THRESHOLDS)}
    else:
        logger.warning("no ground truth for any class; mAP reported as 0.0")
        overall = 0.0
        per_threshold = {f"{t:.2f}": 0.0 for t in IOU_THRESHOLDS}

    return EvalReport(
        map=overall,
        per_class=per_class,
        per_threshold=per_threshold,
        per_class_threshold=per_class_threshold,
        num_images=len(predictions),
        num_gt=num_gt,
        num_predictions=sum(len(p) for p in predictions),
    )


def evaluate(pipeline, manifest: DatasetManifest, jobs: int = 1) -> EvalReport:
    """Run the pipeline over a manifest and score it.

    pipeline is anything with run(Image) -> list[Detection] (or a bare
    callable).  Unreadable images are recorded in the report and skipped.
    Images may be processed in parallel (jobs > 1); accumulation is
    order-independent because results are slotted by index.
    """
    if not manifest.entries:
        raise ManifestError("empty manifest: nothing to evaluate")
    run = pipeline.run if hasattr(pipeline, "run") else pipeline

    loaded: list[tuple[ManifestEntry, Image]] = []
    skipped: list[str] = []
    for entry in manifest.entries:
        try:
            loaded.append((entry, Image.load(manifest.image_path(entry))))
        except OSError as exc:
            logger.warning("skipping unreadable image %s: %s", entry.image, exc)
            skipped.append(entry.image)

    predictions: list[list[Detection]] = [[] for _ in loaded]
    if jobs > 1 and len(loaded) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, dets in enumerate(pool.map(lambda pair: run(pair[1]), loaded)):
                predictions[i] = dets
    else:
        for i, (_, img) in enumerate(loaded):
            predictions[i] = run(img)

    ground_truths = [list(entry.boxes) for entry, _ in loaded]
    report = compute_map(predictions, ground_truths)
    report.skipped = skipped
    return report


# -- latency -------------------------------------------------------------------


@dataclass
class BenchReport:
    """Latency protocol result: per-run means and their arithmetic mean."""

    per_run_ms: list[float]
    overall_ms: float
    runs: int
    image_count: int

    def to_json(self) -> str:
        return json.dumps({
            "per_run_ms": self.per_run_ms,
            "overall_ms": self.overall_ms,
            "runs": self.runs,
            "image_count": self.image_count,
        }, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'Run':<8} {'ms/image':>12}"]
        for i, ms in enumerate(self.per_run_ms, 1):
            lines.append(f"{i:<8} {ms:>12.3f}")
        lines.append(f"{'overall':<8} {self.overall_ms:>12.3f}")
        lines.append(f"images={self.image_count} runs={self.runs}")
        return "\n".join(lines)


def benchmark(pipeline, manifest: DatasetManifest, runs: int = 3) -> BenchReport:
    """Time inference over the manifest: per-run mean ms/image, then the mean
    of the per-run means.

    Timing covers preprocessing, inference and post-processing on the
    monotonic clock; image decode happens before timing starts, and one
    untimed warm-up inference precedes the first run.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if not manifest.entries:
        raise ManifestError("empty manifest: nothing to benchmark")
    run = pipeline.run if hasattr(pipeline, "run") else pipeline
    images = [Image.load(manifest.image_path(e)) for e in manifest.entries]

    run(images[0])  # warm-up: JIT compilation stays out of the timings

    per_run_ms = []
    for _ in range(runs):
        t0 = time.perf_counter()
        for img in images:
            run(img)
        elapsed = time.perf_counter() - t0
        per_run_ms.append(elapsed * 1000.0 / len(images))
    overall = sum(per_run_ms) / len(per_run_ms)
    return BenchReport(per_run_ms=per_run_ms, overall_ms=overall,
                       runs=runs, image_count=len(images))
