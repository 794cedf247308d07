"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel runs once per backend to warm up (numba compiles on first call),
then the best of ``--repeat`` timings is reported. Outputs of the two
backends are compared so a speedup never hides a disagreement.
"""
import argparse
import math
import timeit

import numpy as np

from hbox2rbox import _kernels, synth, trainer
from hbox2rbox.geom import RBox


def iou_case(n):
    rng = np.random.default_rng(0)
    boxes = np.column_stack([
        rng.uniform(0, 200, (n, 2)), rng.uniform(5, 60, (n, 2)), rng.uniform(-math.pi / 2, math.pi / 2, n),
    ])
    return lambda: _kernels.rotated_iou_matrix(boxes, boxes)


def coverage_case(size):
    poly = synth.make_shape(synth.ShapeSpec("airplane_polygon", RBox(size / 2, size / 2, 0.7 * size, 0.5 * size, 0.4)))
    return lambda: _kernels.polygon_coverage(poly, 0, 0, size, size, 4)


def bilinear_case(n):
    rng = np.random.default_rng(1)
    img = rng.random((256, 256))
    xs, ys = rng.uniform(-2, 258, (2, n))
    return lambda: _kernels.bilinear_sample(img, xs, ys)


def training_case(iters):
    data = trainer.prepare(synth.generate_dataset(2, seed=0), "t_hbox")
    cfg = trainer.TrainConfig(iters=iters)
    return lambda: trainer.run(cfg, data).params.ori


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)), initial=0.0)) for x, y in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = parser.parse_args(argv)
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    q = args.quick
    cases = [
        (f"rotated IoU matrix {100 if q else 400}^2", iou_case(100 if q else 400)),
        (f"polygon coverage {128 if q else 512}^2 x16", coverage_case(128 if q else 512)),
        (f"bilinear sample {10**5 if q else 10**6} pts", bilinear_case(10**5 if q else 10**6)),
        (f"train 2 scenes, {5 if q else 30} iters", training_case(5 if q else 30)),
    ]
    previous = _kernels.backend()
    print(f"{'kernel':<34}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}{'max |diff|':>12}")
    try:
        for name, fn in cases:
            best, outs = {}, {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                outs[backend] = fn()
                best[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            diff = _same(outs["numpy"], outs["numba"])
            print(f"{name:<34}{1e3 * best['numpy']:>12.2f}{1e3 * best['numba']:>12.2f}"
                  f"{best['numpy'] / best['numba']:>9.1f}x{diff:>12.1e}")
    finally:
        _kernels.set_backend(previous)


if __name__ == "__main__":
    main()
