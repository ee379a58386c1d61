"""Compare the numba and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py --repeat 20 --batch 32

Times conv2d and maxpool forward/backward at the image-bottom shapes, plus one
full training step of the local reference model, under each backend.  The
first numba call (JIT compile) is excluded by a warm-up run.
"""

import argparse
import statistics
import time

import numpy as np

from splitvfl import _backend
from splitvfl.models import SplitModelConfig, build_split_model, to_local
from splitvfl.nn import OptimizerConfig, kernels


def timeit(fn, repeat):
    fn()  # warm-up, also triggers compilation
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(batch, rng):
    x = rng.standard_normal((batch, 8, 32, 32)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    y = kernels.conv2d_forward(x, w, 1, 1)
    g = rng.standard_normal(y.shape).astype(np.float32)
    pooled, arg = kernels.maxpool_forward(x)
    gp = rng.standard_normal(pooled.shape).astype(np.float32)

    model = to_local(build_split_model(SplitModelConfig(), 0))
    images = rng.random((batch, 1, 32, 32), dtype=np.float32)
    tab = rng.random((batch, 12), dtype=np.float32)
    labels = np.arange(batch) % 3
    opt = OptimizerConfig(0.0, 0.0)  # lr 0 keeps every repetition identical

    return {
        "conv2d_forward": lambda: kernels.conv2d_forward(x, w, 1, 1),
        "conv2d_backward": lambda: kernels.conv2d_backward(x, w, g, 1, 1),
        "maxpool_forward": lambda: kernels.maxpool_forward(x),
        "maxpool_backward": lambda: kernels.maxpool_backward(gp, arg, x.shape),
        "train_step": lambda: model.train_step(images, tab, labels, opt),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = ["numba", "numpy"] if _backend.HAVE_NUMBA else ["numpy"]
    before = _backend.backend_name()
    results = {}
    try:
        for name in backends:
            _backend.set_backend(name)
            for case, fn in cases(args.batch, np.random.default_rng(args.seed)).items():
                results[case, name] = timeit(fn, args.repeat)
    finally:
        _backend.set_backend(before)

    print(f"batch {args.batch}, median of {args.repeat} runs (ms)")
    print(f"{'case':<18}" + "".join(f"{b:>10}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for case in dict.fromkeys(c for c, _ in results):
        row = [results[case, b] * 1e3 for b in backends]
        line = f"{case:<18}" + "".join(f"{t:>10.2f}" for t in row)
        if len(row) == 2:
            line += f"{row[1] / row[0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
