#!/usr/bin/env python3
"""Compare the numba kernels against the pure-numpy fallback.

Runs the fixture detector end to end on both backends and both numeric
paths, after a warm-up pass so JIT compilation stays out of the numbers.

    python3 benchmarks/compare_backends.py [--images 32] [--repeats 5]
"""

import argparse
import time

from maskedge import fixture, kernels
from maskedge.pipeline import Image, Pipeline, PipelineConfig


def time_pipeline(pipe, images, repeats):
    pipe.run(images[0])  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for img in images:
            pipe.run(img)
        best = min(best, (time.perf_counter() - t0) / len(images))
    return best * 1000.0


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    kernels.warmup()
    images = [Image(fixture.synthetic_image(s)[0]) for s in range(args.images)]
    models = {
        "quantized": fixture.build_fixture_model(seed=args.seed, quantized=True),
        "float": fixture.build_fixture_model(seed=args.seed, quantized=False),
    }

    results = {}
    for backend in kernels.available_backends():
        prev = kernels.set_backend(backend)
        try:
            for path, graph in models.items():
                pipe = Pipeline(PipelineConfig(mode="1nn", detector=graph, score_threshold=0.5))
                results[(backend, path)] = time_pipeline(pipe, images, args.repeats)
        finally:
            kernels.set_backend(prev)

    print(f"{'backend':<10} {'path':<12} {'ms/image':>10}")
    for (backend, path), ms in results.items():
        print(f"{backend:<10} {path:<12} {ms:>10.3f}")
    if ("numba", "quantized") in results and ("numpy", "quantized") in results:
        speedup = results[("numpy", "quantized")] / results[("numba", "quantized")]
        print(f"\nnumba speedup on the quantized path: {speedup:.2f}x")
    if ("numba", "quantized") in results and ("numba", "float") in results:
        ratio = results[("numba", "quantized")] / results[("numba", "float")]
        print(f"quantized/float latency ratio (numba): {ratio:.2f}")


if __name__ == "__main__":
    main()
