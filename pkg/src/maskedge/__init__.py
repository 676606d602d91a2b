"""maskedge: integer-only quantized SSD inference with eval and bench harnesses."""

from .qtensor import (
    FixedPointMultiplier,
    FTensor,
    QTensor,
    QuantParams,
    QuantizationError,
    compute_multiplier,
    dequantize,
    quantize,
    requantize,
)
from .postproc import AnchorConfig, Detection, FeatureMapSpec, decode_boxes, generate_anchors, iou, nms
from .model import ModelGraph, extend_class_head, load_model, load_model_file, save_model, save_model_file
from .fixture import build_fixture_classifier, build_fixture_model, synthetic_image
from .pipeline import Image, Pipeline, PipelineConfig, crop_face, preprocess, run_1nn, run_2nn
from .evalbench import (
    BenchReport,
    DatasetManifest,
    EvalReport,
    benchmark,
    compute_map,
    evaluate,
    load_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "BenchReport",
    "DatasetManifest",
    "Detection",
    "EvalReport",
    "FeatureMapSpec",
    "FixedPointMultiplier",
    "FTensor",
    "Image",
    "ModelGraph",
    "Pipeline",
    "PipelineConfig",
    "QTensor",
    "QuantParams",
    "QuantizationError",
    "benchmark",
    "build_fixture_classifier",
    "build_fixture_model",
    "compute_map",
    "compute_multiplier",
    "crop_face",
    "decode_boxes",
    "dequantize",
    "evaluate",
    "extend_class_head",
    "generate_anchors",
    "iou",
    "load_manifest",
    "load_model",
    "load_model_file",
    "nms",
    "preprocess",
    "quantize",
    "requantize",
    "run_1nn",
    "run_2nn",
    "save_model",
    "save_model_file",
    "synthetic_image",
]
