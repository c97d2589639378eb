"""Time every hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat N] [--json]

Shapes match the desk-scale models (batch 32, horizon 16-32, 32-64 channels).
The numba column excludes compilation: each kernel is called once first.
"""
import argparse
import json
import timeit

import numpy as np

from tdplan.kernels import KERNEL_NAMES, numba_impl, numpy_impl


def cases(rng):
    x = rng.standard_normal((32, 16, 64))
    w = rng.standard_normal((5, 64, 64)) / 16
    b = np.zeros(64)
    y, cols = numpy_impl.conv1d_forward(x, w, b)
    x2 = rng.standard_normal((1024, 64))
    xhat, rstd = numpy_impl.layer_norm_forward(x2, 1e-5)
    ghat, grstd = numpy_impl.group_norm_forward(x, 8, 1e-5)
    s = rng.standard_normal((64, 32, 32))
    mask = np.tril(np.ones((32, 32), dtype=bool))[None].repeat(64, axis=0)
    p = numpy_impl.masked_softmax_forward(s, mask)
    walls = (np.array([2.5]), np.array([0.0]), np.array([3.5]))
    return {
        "conv1d_forward": (x, w, b),
        "conv1d_backward": (y, cols, w, x.shape),
        "layer_norm_forward": (x2, 1e-5),
        "layer_norm_backward": (x2, xhat, rstd),
        "group_norm_forward": (x, 8, 1e-5),
        "group_norm_backward": (x, ghat, grstd, 8),
        "mish_forward": (x,),
        "mish_backward": (x, x),
        "masked_softmax_forward": (s, mask),
        "masked_softmax_backward": (s, p),
        "move_axis": (1.0, 2.0, 0.0, 5.0, *walls, 1.0, 1e-6),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json", action="store_true", help="emit one JSON record per kernel")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    for name, call_args in cases(rng).items():
        assert name in KERNEL_NAMES
        timings = {}
        for label, mod in (("numpy", numpy_impl), ("numba", numba_impl)):
            fn = getattr(mod, name)
            fn(*call_args)
            timings[label] = timeit.timeit(lambda: fn(*call_args), number=args.repeat) / args.repeat
        rows.append({"kernel": name, "numpy_us": 1e6 * timings["numpy"], "numba_us": 1e6 * timings["numba"],
                     "speedup": timings["numpy"] / timings["numba"]})
    if args.json:
        for r in rows:
            print(json.dumps(r))
        return
    print(f"{'kernel':26s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:26s} {r['numpy_us']:10.1f} {r['numba_us']:10.1f} {r['speedup']:8.2f}")


if __name__ == "__main__":
    main()
