"""Acceptance suite: one test per exit criterion, each printing PASS/FAIL.

The order mirrors the criteria list; tolerances are pinned here, not
calibrated later.  Run with -s (or look at captured output) for the
per-criterion lines.
"""

import hashlib
import time

import numpy as np
import pytest

from maskedge import fixture, kernels
from maskedge.evalbench import GroundTruth, benchmark, compute_map, load_manifest
from maskedge.model import extend_class_head, save_model
from maskedge.pipeline import Image, Pipeline, PipelineConfig, run_1nn, run_2nn
from maskedge.postproc import Detection, iou, nms
from maskedge.qtensor import QuantParams, compute_multiplier, dequantize, quantize, requantize

from oracles import brute_force_nms, ref_map


def _report(name: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {name}" + (f"  ({detail})" if detail else ""))
    assert passed, f"{name}: {detail}"


class TestAcceptance:
    def test_01_quantization_round_trip(self):
        t0 = time.perf_counter()
        qparam_sets = [QuantParams(0.5, 128), QuantParams(2 / 255, 0),
                       QuantParams(0.031, 255), QuantParams(1e-3, 17)]
        ok = True
        for qp in qparam_sets:
            q = np.arange(256, dtype=np.uint8)
            ok &= bool(np.array_equal(quantize(dequantize(q, qp), qp), q))
            rng = np.random.default_rng(1234)
            lo, hi = dequantize(0, qp), dequantize(255, qp)
            xs = rng.uniform(lo, hi, 1000)
            err = np.abs(dequantize(quantize(xs, qp), qp) - xs)
            ok &= bool(np.all(err <= qp.scale / 2 + 1e-12))
        elapsed = time.perf_counter() - t0
        _report("quantization round-trip + half-quantum error bound", ok and elapsed < 1.0,
                f"{elapsed * 1000:.0f} ms")

    def test_02_integer_only_equivalence_50_images(self, det_float, det_quant):
        t0 = time.perf_counter()
        pipe_f = Pipeline(PipelineConfig(mode="1nn", detector=det_float, score_threshold=0.01))
        pipe_q = Pipeline(PipelineConfig(mode="1nn", detector=det_quant, score_threshold=0.01))
        worst_iou, worst_delta, ok = 1.0, 0.0, True
        for seed in range(1, 51):
            img = Image(fixture.synthetic_image(seed)[0])
            top_f = pipe_f.run(img)[0]
            top_q = pipe_q.run(img)[0]
            v = iou(top_f.box, top_q.box)
            d = abs(top_f.score - top_q.score)
            worst_iou, worst_delta = min(worst_iou, v), max(worst_delta, d)
            ok &= top_f.class_id == top_q.class_id and v >= 0.9 and d <= 0.05
        elapsed = time.perf_counter() - t0
        _report("integer-only equivalence on 50 seeded images", ok and elapsed < 30.0,
                f"min IoU {worst_iou:.3f}, max score delta {worst_delta:.4f}, {elapsed:.1f} s")

    def test_03_bit_exact_determinism(self, det_quant):
        img = Image(fixture.synthetic_image(13)[0])
        cfg = PipelineConfig(mode="1nn", detector=det_quant, score_threshold=0.01)

        def digest():
            dets = run_1nn(cfg, img)
            blob = b"".join(
                np.array([*d.box, d.class_id, d.score], dtype=np.float64).tobytes() for d in dets
            )
            return hashlib.sha256(blob).hexdigest()

        runs = {digest() for _ in range(3)}
        prev = kernels.set_backend("numpy")
        try:
            runs.add(digest())
        finally:
            kernels.set_backend(prev)
        # Byte-identical across 3 runs and across both kernel backends; the
        # integer-only path is what makes this hold across host platforms too
        # (a CI matrix re-runs this same test per platform).
        _report("bit-exact determinism (3 runs + both backends)", len(runs) == 1)

    def test_04_nms_oracle_200_instances(self):
        rng = np.random.default_rng(2026)
        ok = True
        for _ in range(200):
            n = int(rng.integers(1, 101))
            dets = []
            for _ in range(n):
                y0, x0 = rng.uniform(0, 0.8, 2)
                dets.append(Detection(
                    box=(y0, x0, min(y0 + rng.uniform(0.05, 0.4), 1.0),
                         min(x0 + rng.uniform(0.05, 0.4), 1.0)),
                    class_id=int(rng.integers(1, 3)),
                    score=float(np.round(rng.uniform(0.01, 1.0), 3)),
                ))
            thr = float(rng.uniform(0.2, 0.8))
            ok &= nms(dets, thr, 100) == brute_force_nms(dets, thr, 100)
        _report("NMS equals brute-force suppressor on 200 seeded instances", ok)

    def test_05_map_oracle(self):
        box = (0.2, 0.2, 0.6, 0.6)
        perfect = compute_map([[Detection(box=box, class_id=1, score=0.9)]],
                              [[GroundTruth(box=box, class_id=1)]]).map
        h = 0.5
        d = h * (1 - 0.58) / (1 + 0.58)  # vertical shift giving IoU = 0.58
        shifted = (0.0 + d, 0.0, 0.5 + d, 0.4)
        partial = compute_map([[Detection(box=shifted, class_id=1, score=0.9)]],
                              [[GroundTruth(box=(0.0, 0.0, 0.5, 0.4), class_id=1)]]).map
        wrong = compute_map([[Detection(box=box, class_id=2, score=0.9)]],
                            [[GroundTruth(box=box, class_id=1)]]).map
        ok = perfect == 1.0 and partial == 0.2 and wrong == 0.0

        rng = np.random.default_rng(77)
        for _ in range(40):
            preds, gts = _small_instance(rng)
            got = compute_map(preds, gts).map
            ok &= abs(got - ref_map(preds, gts)) <= 1e-12
        _report("mAP oracle: crafted cases exact + brute-force agreement", ok,
                f"perfect={perfect} partial={partial} wrong={wrong}")

    def test_06_model_size_ratio(self, det_float, det_quant):
        ratio = len(save_model(det_float)) / len(save_model(det_quant))
        _report("float/quantized model size ratio in [3.5, 4.5]", 3.5 <= ratio <= 4.5,
                f"ratio {ratio:.3f}")

    def test_07_weight_surgery(self, face_float):
        extended_zero = extend_class_head(face_float, epsilon=0.0)
        extended = extend_class_head(face_float, epsilon=1e-7)

        head_tensors = set()
        for op in face_float.ops:
            if face_float.tensors[op.outputs[0]].name in face_float.class_output_names():
                head_tensors.update(face_float.tensors[i].name for i in op.inputs[1:])
                head_tensors.add(face_float.tensors[op.outputs[0]].name)
        untouched = all(
            t.same_as(extended.tensor(t.name))
            for t in face_float.tensors if t.name not in head_tensors
        )

        scores_equal = True
        cfg = PipelineConfig(mode="1nn", detector=extended_zero, score_threshold=0.0,
                             nms_iou_threshold=1.1, max_detections=10**6)
        pipe = Pipeline(cfg)
        for seed in range(20):
            by_box = {}
            for det in pipe.run(Image(fixture.synthetic_image(seed)[0])):
                by_box.setdefault(det.box, {})[det.class_id] = det.score
            scores_equal &= bool(by_box) and all(s[1] == s[2] for s in by_box.values())

        delta_ok = True
        max_delta = None
        for op in face_float.ops:
            if face_float.tensors[op.outputs[0]].name not in face_float.class_output_names():
                continue
            w_old = face_float.tensors[op.inputs[1]].data.astype(np.float64)
            w_new = extended.tensors[op.inputs[1]].data.astype(np.float64)
            deltas = w_new[..., 0::2] - w_old
            # epsilon is exact up to one float32 ulp at the weight magnitude;
            # 1e-7 itself is not representable in binary floating point
            bound = float(np.spacing(np.float32(np.abs(w_old).max())))
            delta_ok &= bool(np.all(deltas > 0)) and float(np.abs(deltas - 1e-7).max()) <= bound
            max_delta = float(np.abs(deltas).max())
        _report("weight surgery: untouched tensors, eps=0 symmetry, eps=1e-7 delta",
                untouched and scores_equal and delta_ok,
                f"max |delta| {max_delta:.3e}")

    def test_08_2nn_fusion(self, face_float, cls_float):
        cfg = PipelineConfig(mode="2nn", detector=face_float, classifier=cls_float,
                             face_threshold=0.3)
        ok = True
        fused_count = 0
        for seed in range(1, 21):
            dets, details = run_2nn(cfg, Image(fixture.synthetic_image(seed)[0]),
                                    return_details=True)
            for det, info in zip(dets, details):
                fused_count += 1
                cls_prob = info.class_probs[det.class_id - 1]
                ok &= det.score == info.face_score * cls_prob
                ok &= det.score <= min(info.face_score, cls_prob)
        _report("2NN fusion: score is the exact product and never exceeds a factor",
                ok and fused_count > 0, f"{fused_count} fused detections")

    def test_09_latency_protocol(self, det_float, det_quant, tmp_path):
        manifest_path = fixture.write_synthetic_dataset(tmp_path / "bench", count=12, seed=21)
        manifest = load_manifest(manifest_path)
        pipe_q = Pipeline(PipelineConfig(mode="1nn", detector=det_quant, score_threshold=0.5))
        pipe_f = Pipeline(PipelineConfig(mode="1nn", detector=det_float, score_threshold=0.5))
        # The speed claim is about the production kernels; the numpy fallback
        # trades speed for zero compiled dependencies and is exempt.
        if "numba" in kernels.available_backends():
            prev = kernels.set_backend("numba")
        else:
            pytest.skip("latency criterion applies to the compiled backend")
        try:
            report_q = benchmark(pipe_q, manifest, runs=3)
            report_f = benchmark(pipe_f, manifest, runs=3)
        finally:
            kernels.set_backend(prev)
        structure = (
            report_q.runs == 3
            and len(report_q.per_run_ms) == 3
            and report_q.overall_ms == sum(report_q.per_run_ms) / 3
            and report_f.overall_ms == sum(report_f.per_run_ms) / 3
        )
        faster = report_q.overall_ms < report_f.overall_ms
        _report("latency protocol: exact mean-of-means, run count, quantized < float",
                structure and faster,
                f"quant {report_q.overall_ms:.2f} ms/img vs float {report_f.overall_ms:.2f} ms/img")


def _small_instance(rng):
    preds, gts = [], []
    for _ in range(int(rng.integers(1, 4))):
        img_gts, img_preds = [], []
        for _ in range(int(rng.integers(0, 6))):
            y0, x0 = rng.uniform(0, 0.6, 2)
            img_gts.append(GroundTruth(box=(y0, x0, y0 + rng.uniform(0.1, 0.35),
                                            x0 + rng.uniform(0.1, 0.35)),
                                       class_id=int(rng.integers(1, 3))))
        for _ in range(int(rng.integers(0, 6))):
            y0, x0 = rng.uniform(0, 0.6, 2)
            img_preds.append(Detection(box=(y0, x0, y0 + rng.uniform(0.1, 0.35),
                                            x0 + rng.uniform(0.1, 0.35)),
                                       class_id=int(rng.integers(1, 3)),
                                       score=float(np.round(rng.uniform(0.05, 1.0), 2))))
        gts.append(img_gts)
        preds.append(img_preds)
    return preds, gts
