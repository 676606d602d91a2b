"""End-to-end inference: the single-detector (1NN) and cascaded (2NN) flows.

1NN runs one detector whose class head scores {mask, nomask} directly.
2NN runs a single-class face detector, crops each face from the original
image, classifies the crop with a second network, and fuses scores by
multiplying the face score with the classifier probability.  Both flows
produce the same Detection schema, so one evaluation path serves both.

Preprocessing is a plain bilinear stretch to the model's input resolution
(no aspect-ratio preservation) followed by x/127.5 - 1 normalization; the
quantized path pushes the normalized values through the input tensor's
quantization parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .graphexec import GraphRunner
from .model import ModelGraph
from .nnops import sigmoid_scores, softmax_scores
from .postproc import Detection, decode_boxes, generate_anchors, nms
from .qtensor import FTensor, QTensor, QuantParams, quantize, round_half_away

logger = logging.getLogger(__name__)

# Detection class ids; 0 is background and never emitted.
MASK_CLASS_ID = 1
NOMASK_CLASS_ID = 2


@dataclass(frozen=True)
class Image:
    """8-bit RGB image, row-major (height, width, 3)."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image must be uint8 (h, w, 3), got {arr.dtype} {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("empty image")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @classmethod
    def load(cls, path) -> "Image":
        with PILImage.open(path) as img:
            return cls(np.asarray(img.convert("RGB"), dtype=np.uint8))

    def save(self, path) -> None:
        PILImage.fromarray(self.array, mode="RGB").save(path, format="PNG")


def bilinear_resize(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers; float64 output."""
    h, w = arr.shape[:2]
    if (h, w) == (th, tw):
        return arr.astype(np.float64, copy=True)

    def coords(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos)
        frac = pos - lo
        lo0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
        hi = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
        return lo0, hi, frac

    y0, y1, fy = coords(h, th)
    x0, x1, fx = coords(w, tw)
    src = arr.astype(np.float64)
    rows = src[y0] * (1.0 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    return rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel magnitudes onto [-1, 1] via x / 127.5 - 1 (float64)."""
    return pixels.astype(np.float64) / 127.5 - 1.0


def preprocess(image: Image, target: tuple[int, int], qparams: QuantParams | None = None):
    """Resize + normalize one image into a batch-of-one model input tensor.

    Returns an FTensor when qparams is None, otherwise a QTensor whose values
    are the normalized pixels quantized through the input tensor's qparams.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size {target} must be positive")
    resized = bilinear_resize(image.array, th, tw)
    normalized = normalize_pixels(resized)[None, ...]
    if qparams is None:
        return FTensor(normalized.astype(np.float32))
    return QTensor(quantize(normalized, qparams), qparams)


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs: mode, models, and thresholds."""

    mode: str
    detector: ModelGraph
    classifier: ModelGraph | None = None
    score_threshold: float = 0.5
    nms_iou_threshold: float = 0.6
    max_detections: int = 100
    face_threshold: float = 0.5
    crop_margin: float = 0.0
    detector_input_size: tuple[int, int] | None = None
    classifier_input_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in ("1nn", "2nn"):
            raise ValueError(f"mode must be '1nn' or '2nn', got {self.mode!r}")
        if self.mode == "2nn" and self.classifier is None:
            raise ValueError("2nn mode requires a classifier model")
        det_size = self.detector.input_size
        if self.detector_input_size is None:
            self.detector_input_size = det_size
        elif tuple(self.detector_input_size) != det_size:
            raise ValueError(
                f"configured detector input {self.detector_input_size} does not match model {det_size}"
            )
        if self.classifier is not None:
            cls_size = self.classifier.input_size
            if self.classifier_input_size is None:
                self.classifier_input_size = cls_size
            elif tuple(self.classifier_input_size) != cls_size:
                raise ValueError(
                    f"configured classifier input {self.classifier_input_size} does not match model {cls_size}"
                )


@dataclass(frozen=True)
class TwoStageDetail:
    """Score factors behind one fused 2NN detection."""

    face_score: float
    class_probs: tuple[float, float]


def _input_qparams(graph: ModelGraph) -> QuantParams | None:
    t = graph.tensors[graph.input_index()]
    return t.qparams if t.dtype == "u8" else None


def _head_arrays(graph: ModelGraph, outputs: dict[str, np.ndarray]):
    """Gather per-map head tensors into (N, 4) raw boxes and (N, ncls) logits."""
    ncls = graph.num_classes
    raw_boxes, logits = [], []
    for name in graph.box_output_names():
        t = graph.tensor(name)
        arr = outputs[name]
        vals = t.qparams.scale * (arr.astype(np.float64) - t.zero_point) if t.dtype == "u8" else arr
        raw_boxes.append(np.asarray(vals, dtype=np.float64).reshape(-1, 4))
    for name in graph.class_output_names():
        t = graph.tensor(name)
        arr = outputs[name]
        vals = t.qparams.scale * (arr.astype(np.float64) - t.zero_point) if t.dtype == "u8" else arr
        logits.append(np.asarray(vals, dtype=np.float64).reshape(-1, ncls))
    return np.concatenate(raw_boxes, axis=0), np.concatenate(logits, axis=0)


def run_detector(graph: ModelGraph, image: Image, score_threshold: float,
                 nms_iou_threshold: float, max_detections: int,
                 runner: GraphRunner | None = None,
                 anchor_cfg=None, anchors: np.ndarray | None = None) -> list[Detection]:
    """Shared detection flow: preprocess, execute, decode, score, suppress.

    A caller holding a prepared GraphRunner and pre-generated anchors (the
    Pipeline does) passes them in; one-shot callers get transient ones.
    """
    runner = runner if runner is not None else GraphRunner(graph)
    x = preprocess(image, graph.input_size, _input_qparams(graph))
    outputs = runner.run(x.array)
    raw_boxes, logits = _head_arrays(graph, outputs)
    if anchor_cfg is None:
        anchor_cfg = graph.anchor_config()
    if anchors is None:
        anchors = generate_anchors(anchor_cfg)
    if len(anchors) != len(raw_boxes):
        raise ValueError(f"model emits {len(raw_boxes)} anchors but config defines {len(anchors)}")
    boxes = decode_boxes(raw_boxes, anchors, anchor_cfg)
    probs = sigmoid_scores(FTensor(logits.astype(np.float32))).array.astype(np.float64)
    candidates = []
    for c in range(graph.num_classes):
        for i in range(len(anchors)):
            score = float(probs[i, c])
            if score >= score_threshold:
                candidates.append(Detection(box=tuple(boxes[i]), class_id=c + 1, score=score))
    return nms(candidates, nms_iou_threshold, max_detections)


def run_1nn(cfg: PipelineConfig, image: Image) -> list[Detection]:
    """Single-network flow: one detector scoring mask and nomask directly."""
    if cfg.mode != "1nn":
        raise ValueError("run_1nn requires a 1nn pipeline config")
    return run_detector(cfg.detector, image, cfg.score_threshold,
                        cfg.nms_iou_threshold, cfg.max_detections)


def crop_face(image: Image, box, margin: float = 0.0) -> Image | None:
    """Crop the pixel region under a normalized box, clamped inside the image.

    Pixel bounds use half-away-from-zero rounding.  A box that rounds to an
    empty region is degenerate: the caller gets None plus a logged warning
    instead of an exception.
    """
    ymin, xmin, ymax, xmax = box
    if margin:
        bh, bw = ymax - ymin, xmax - xmin
        ymin, ymax = ymin - margin * bh, ymax + margin * bh
        xmin, xmax = xmin - margin * bw, xmax + margin * bw
    h, w = image.height, image.width
    y0 = int(round_half_away(ymin * h))
    y1 = int(round_half_away(ymax * h))
    x0 = int(round_half_away(xmin * w))
    x1 = int(round_half_away(xmax * w))
    y0, y1 = max(0, y0), min(h, y1)
    x0, x1 = max(0, x0), min(w, x1)
    if y1 - y0 < 1 or x1 - x0 < 1:
        logger.warning("skipping degenerate face box %s (rounds to %dx%d pixels)",
                       tuple(box), max(0, y1 - y0), max(0, x1 - x0))
        return None
    return Image(image.array[y0:y1, x0:x1])


def run_2nn(cfg: PipelineConfig, image: Image, return_details: bool = False,
            detector_runner: GraphRunner | None = None,
            classifier_runner: GraphRunner | None = None):
    """Cascade flow: detect faces, classify each crop, multiply the scores.

    The fused detection keeps the face box; its class is the classifier
    argmax (ties resolve to mask, the lower class id) and its score is
    face_score * class_prob, which can never exceed either factor.
    """
    if cfg.mode != "2nn":
        raise ValueError("run_2nn requires a 2nn pipeline config")
    faces = run_detector(cfg.detector, image, cfg.face_threshold,
                         cfg.nms_iou_threshold, cfg.max_detections,
                         runner=detector_runner)
    classifier = cfg.classifier
    cls_runner = classifier_runner if classifier_runner is not None else GraphRunner(classifier)
    cls_qp = _input_qparams(classifier)
    logit_name = classifier.metadata["logit_output"]
    detections: list[Detection] = []
    details: list[TwoStageDetail] = []
    for face in faces:
        crop = crop_face(image, face.box, cfg.crop_margin)
        if crop is None:
            continue
        x = preprocess(crop, classifier.input_size, cls_qp)
        outputs = cls_runner.run(x.array)
        t = classifier.tensor(logit_name)
        logits = outputs[logit_name]
        if t.dtype == "u8":
            logits = t.qparams.scale * (logits.astype(np.float64) - t.zero_point)
        probs = softmax_scores(FTensor(np.asarray(logits, dtype=np.float32))).array.reshape(-1)
        cls_idx = int(np.argmax(probs))  # argmax takes the first index on ties
        score = face.score * float(probs[cls_idx])
        detections.append(Detection(box=face.box, class_id=cls_idx + 1, score=score))
        details.append(TwoStageDetail(face_score=face.score,
                                      class_probs=(float(probs[0]), float(probs[1]))))
    if return_details:
        return detections, details
    return detections


class Pipeline:
    """A configured pipeline exposing run(image) -> list[Detection].

    Holds prepared graph runners and pre-generated anchors, so repeated runs
    pay only the per-image cost.
    """

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self._detector_runner = GraphRunner(cfg.detector)
        self._anchor_cfg = cfg.detector.anchor_config()
        self._anchors = generate_anchors(self._anchor_cfg)
        self._classifier_runner = GraphRunner(cfg.classifier) if cfg.classifier is not None else None

    def run(self, image: Image) -> list[Detection]:
        if self.cfg.mode == "1nn":
            return run_detector(self.cfg.detector, image, self.cfg.score_threshold,
                                self.cfg.nms_iou_threshold, self.cfg.max_detections,
                                runner=self._detector_runner,
                                anchor_cfg=self._anchor_cfg, anchors=self._anchors)
        return run_2nn(self.cfg, image,
                       detector_runner=self._detector_runner,
                       classifier_runner=self._classifier_runner)

    def label_for(self, class_id: int) -> str:
        names = ("mask", "nomask") if self.cfg.mode == "2nn" else self.cfg.detector.class_names
        if 1 <= class_id <= len(names):
            return names[class_id - 1]
        return f"class{class_id}"


_BOX_COLORS = {1: (46, 204, 113), 2: (231, 76, 60)}


def draw_detections(image: Image, detections: list[Detection], labels=None) -> Image:
    """Burn boxes and score labels into a copy of the image (for PNG output)."""
    pil = PILImage.fromarray(image.array, mode="RGB")
    draw = ImageDraw.Draw(pil)
    h, w = image.height, image.width
    for det in detections:
        ymin, xmin, ymax, xmax = det.box
        rect = (xmin * w, ymin * h, xmax * w, ymax * h)
        color = _BOX_COLORS.get(det.class_id, (241, 196, 15))
        draw.rectangle(rect, outline=color, width=2)
        name = labels[det.class_id - 1] if labels and det.class_id - 1 < len(labels) else str(det.class_id)
        draw.text((rect[0] + 2, max(0.0, rect[1] - 12)), f"{name} {det.score:.2f}", fill=color)
    return Image(np.asarray(pil, dtype=np.uint8))


def detections_to_jsonl(image_id: str, detections: list[Detection], labels=None) -> str:
    """One JSON object per detection: image id, box, class, score."""
    lines = []
    for det in detections:
        ymin, xmin, ymax, xmax = det.box
        name = labels[det.class_id - 1] if labels and det.class_id - 1 < len(labels) else str(det.class_id)
        lines.append(json.dumps({
            "image": image_id,
            "ymin": ymin, "xmin": xmin, "ymax": ymax, "xmax": xmax,
            "class": name,
            "score": det.score,
        }, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
