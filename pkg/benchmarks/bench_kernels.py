"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time of each kernel per backend and the speed-up.
"""

import argparse
import timeit

import numpy as np

from ctxvote import _fallback, kernels

try:
    from ctxvote import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    pts = rng.uniform(0, 6, (2048, 3))
    boxes = np.concatenate([rng.uniform(0, 6, (256, 3)), rng.uniform(0.3, 2, (256, 3))], axis=1)
    scores = rng.random(256)
    classes = rng.integers(0, 4, 256)
    seeds = pts[:256]
    return {
        "farthest_point_sample 2048->256": lambda impl: kernels.farthest_point_sample(pts, 256, impl=impl),
        "ball_query 256 x 2048, r=0.8, 32": lambda impl: kernels.ball_query(pts, seeds, 0.8, 32, impl=impl),
        "iou_matrix 256 x 256": lambda impl: kernels.iou_matrix(boxes, boxes, impl=impl),
        "nms 256 boxes": lambda impl: kernels.nms(boxes, scores, classes, 0.25, impl=impl),
        "points_in_boxes 256 x 2048, 48": lambda impl: kernels.points_in_boxes(pts, boxes, 1.4, 48, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
