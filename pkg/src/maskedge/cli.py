"""Command-line entry point: infer, eval, bench, surgery, make-fixture.

Flags are long-form only and every subcommand accepts --config pointing at a
JSON file whose keys mirror the flag names (dashes as underscores); explicit
flags win over config values.  Exit codes: 0 success, 1 validation error,
2 I/O error.  Every error prints one machine-parsable line of the form
"error[kind]: message".  MASKEDGE_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evalbench, fixture, pipeline
from .evalbench import ManifestError, benchmark, evaluate, load_manifest
from .model import ModelFormatError, SurgeryError, extend_class_head, load_model_file, save_model_file
from .pipeline import Image, Pipeline, PipelineConfig, detections_to_jsonl, draw_detections
from .qtensor import QuantizationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="maskedge", description="Integer-only quantized mask-detection engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON file with defaults for these flags")

    p = sub.add_parser("infer", help="run one image through a pipeline")
    common(p)
    p.add_argument("--mode", choices=["1nn", "2nn"], default=None)
    p.add_argument("--model", default=None, help="detector QMDL path")
    p.add_argument("--classifier", default=None, help="classifier QMDL path (2nn)")
    p.add_argument("--image", default=None, help="input image (PNG/JPEG)")
    p.add_argument("--output", default=None, help="write JSON-lines detections here (default stdout)")
    p.add_argument("--annotate", default=None, help="write annotated PNG here")
    p.add_argument("--dump-logits", default=None,
                   help="write raw detector head tensors as JSON here")
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--nms-threshold", type=float, default=None)
    p.add_argument("--face-threshold", type=float, default=None)
    p.add_argument("--max-detections", type=int, default=None)
    p.add_argument("--crop-margin", type=float, default=None)

    p = sub.add_parser("eval", help="COCO-style mAP over a dataset manifest")
    common(p)
    p.add_argument("--mode", choices=["1nn", "2nn"], default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--output", default=None, help="also write the report JSON here")
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--nms-threshold", type=float, default=None)
    p.add_argument("--face-threshold", type=float, default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel image workers")

    p = sub.add_parser("bench", help="latency protocol over a dataset manifest")
    common(p)
    p.add_argument("--mode", choices=["1nn", "2nn"], default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--nms-threshold", type=float, default=None)
    p.add_argument("--face-threshold", type=float, default=None)

    p = sub.add_parser("surgery", help="extend a 1-class face head to mask/nomask")
    common(p)
    p.add_argument("--in", dest="input_path", default=None, help="face detector QMDL")
    p.add_argument("--out", dest="output_path", default=None, help="extended QMDL to write")
    p.add_argument("--epsilon", type=float, default=None)

    p = sub.add_parser("make-fixture", help="write the seeded fixture models")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--kind", choices=["detector", "face", "classifier", "all"], default=None)
    p.add_argument("--classifier-size", type=int, default=None)
    return parser


class _Options:
    """Flag values with config-file fallback: flag > config > default."""

    def __init__(self, args):
        self._args = vars(args)
        self._config = {}
        cfg_path = self._args.get("config")
        if cfg_path:
            try:
                raw = json.loads(Path(cfg_path).read_text())
            except json.JSONDecodeError as exc:
                raise ValueError(f"config {cfg_path}: invalid JSON: {exc}") from None
            if not isinstance(raw, dict):
                raise ValueError(f"config {cfg_path}: root must be an object")
            self._config = raw

    def get(self, name, default=None, required=False):
        value = self._args.get(name)
        if value is None:
            value = self._config.get(name, default)
        if required and value is None:
            raise ValueError(f"missing required option --{name.replace('_', '-')}")
        return value


def _build_pipeline(opts: _Options, default_score: float) -> Pipeline:
    mode = opts.get("mode", "1nn")
    detector = load_model_file(opts.get("model", required=True))
    classifier_path = opts.get("classifier")
    classifier = load_model_file(classifier_path) if classifier_path else None
    cfg = PipelineConfig(
        mode=mode,
        detector=detector,
        classifier=classifier,
        score_threshold=float(opts.get("score_threshold", default_score)),
        nms_iou_threshold=float(opts.get("nms_threshold", 0.6)),
        max_detections=int(opts.get("max_detections", 100)),
        face_threshold=float(opts.get("face_threshold", 0.5)),
        crop_margin=float(opts.get("crop_margin", 0.0)),
    )
    return Pipeline(cfg)


def _dump_logits(pipe: Pipeline, image: Image, path: str) -> None:
    """Raw detector head tensors (quantized values or float logits) as JSON."""
    from .graphexec import execute_graph
    from .pipeline import preprocess, _input_qparams

    graph = pipe.cfg.detector
    x = preprocess(image, graph.input_size, _input_qparams(graph))
    outputs = execute_graph(graph, x.array)
    payload = {}
    for name in graph.box_output_names() + graph.class_output_names():
        t = graph.tensor(name)
        arr = outputs[name]
        payload[name] = {
            "dtype": t.dtype,
            "shape": list(arr.shape),
            "scale": t.scale,
            "zero_point": t.zero_point,
            "values": [int(v) for v in arr.reshape(-1)] if t.dtype == "u8"
                      else [float(v) for v in arr.reshape(-1)],
        }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_infer(opts: _Options) -> int:
    pipe = _build_pipeline(opts, default_score=0.5)
    image_path = opts.get("image", required=True)
    image = Image.load(image_path)
    detections = pipe.run(image)
    labels = ("mask", "nomask") if pipe.cfg.mode == "2nn" else pipe.cfg.detector.class_names
    text = detections_to_jsonl(str(image_path), detections, labels)
    output = opts.get("output")
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)
    annotate = opts.get("annotate")
    if annotate:
        draw_detections(image, detections, labels).save(annotate)
    dump = opts.get("dump_logits")
    if dump:
        _dump_logits(pipe, image, dump)
    logger.info("%d detections from %s", len(detections), image_path)
    return EXIT_OK


def _cmd_eval(opts: _Options) -> int:
    pipe = _build_pipeline(opts, default_score=0.01)
    manifest = load_manifest(opts.get("manifest", required=True))
    report = evaluate(pipe, manifest, jobs=int(opts.get("jobs", 1)))
    sys.stdout.write(report.to_json() + "\n")
    sys.stderr.write(report.table() + "\n")
    output = opts.get("output")
    if output:
        Path(output).write_text(report.to_json())
    if report.skipped:
        sys.stderr.write(f"warning: skipped {len(report.skipped)} unreadable image(s)\n")
        return EXIT_IO
    return EXIT_OK


def _cmd_bench(opts: _Options) -> int:
    pipe = _build_pipeline(opts, default_score=0.5)
    manifest = load_manifest(opts.get("manifest", required=True))
    report = benchmark(pipe, manifest, runs=int(opts.get("runs", 3)))
    sys.stdout.write(report.to_json() + "\n")
    sys.stderr.write(report.table() + "\n")
    output = opts.get("output")
    if output:
        Path(output).write_text(report.to_json())
    return EXIT_OK


def _cmd_surgery(opts: _Options) -> int:
    src = opts.get("input_path", required=True)
    dst = opts.get("output_path", required=True)
    epsilon = float(opts.get("epsilon", 1e-7))
    graph = load_model_file(src)
    extended = extend_class_head(graph, epsilon=epsilon)
    save_model_file(extended, dst)
    logger.info("wrote 2-class model to %s", dst)
    return EXIT_OK


def _cmd_make_fixture(opts: _Options) -> int:
    seed = int(opts.get("seed", 1))
    out_dir = Path(opts.get("out_dir", required=True))
    kind = opts.get("kind", "detector")
    cls_size = int(opts.get("classifier_size", 64))
    out_dir.mkdir(parents=True, exist_ok=True)

    def emit(name, float_graph, quant_graph):
        save_model_file(float_graph, out_dir / f"{name}_float.qmdl")
        save_model_file(quant_graph, out_dir / f"{name}_quant.qmdl")
        sys.stdout.write(f"{name}: {name}_float.qmdl, {name}_quant.qmdl\n")

    if kind in ("detector", "all"):
        emit("detector",
             fixture.build_fixture_model(seed, quantized=False),
             fixture.build_fixture_model(seed, quantized=True))
    if kind in ("face", "all"):
        emit("face",
             fixture.build_fixture_model(seed, quantized=False, num_classes=1),
             fixture.build_fixture_model(seed, quantized=True, num_classes=1))
    if kind in ("classifier", "all"):
        emit("classifier",
             fixture.build_fixture_classifier(seed, quantized=False, input_size=cls_size),
             fixture.build_fixture_classifier(seed, quantized=True, input_size=cls_size))
    return EXIT_OK


_COMMANDS = {
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "surgery": _cmd_surgery,
    "make-fixture": _cmd_make_fixture,
}


def main(argv=None) -> int:
    level = os.environ.get("MASKEDGE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error[usage]: {exc}\n")
        return EXIT_VALIDATION
    try:
        opts = _Options(args)
        return _COMMANDS[args.command](opts)
    except (ManifestError, ModelFormatError, SurgeryError, QuantizationError, ValueError) as exc:
        sys.stderr.write(f"error[validation]: {exc}\n")
        return EXIT_VALIDATION
    except OSError as exc:
        sys.stderr.write(f"error[io]: {exc}\n")
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
