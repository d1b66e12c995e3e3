"""Time the numba kernels against their numpy twins at LeNet-5 shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Also times one forward/backward pass of LeNet-5 on a 64-image batch with
each backend selected, and checks that both backends agree bitwise.
"""
from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from admmq import _kernels as K
from admmq import nn


def cases(rng):
    x1 = rng.standard_normal((64, 1, 28, 28))
    x2 = rng.standard_normal((64, 6, 12, 12))
    c1 = K.im2col_numpy(x1, 5, 5, 1, 0)
    c2 = K.im2col_numpy(x2, 5, 5, 1, 0)
    p1 = rng.standard_normal((64, 6, 24, 24))
    _, arg = K.maxpool_forward_numpy(p1, 2, 2)
    d1 = rng.standard_normal((64, 6, 12, 12))
    w = rng.standard_normal(256 * 120)
    return {
        "im2col conv1": lambda nb: K.im2col(x1, 5, 5, 1, 0, use_numba=nb),
        "im2col conv2": lambda nb: K.im2col(x2, 5, 5, 1, 0, use_numba=nb),
        "col2im conv1": lambda nb: K.col2im(c1, x1.shape, 5, 5, 1, 0, use_numba=nb),
        "col2im conv2": lambda nb: K.col2im(c2, x2.shape, 5, 5, 1, 0, use_numba=nb),
        "maxpool fwd": lambda nb: K.maxpool_forward(p1, 2, 2, use_numba=nb),
        "maxpool bwd": lambda nb: K.maxpool_backward(d1, arg, p1.shape, 2, 2, use_numba=nb),
        "project binary": lambda nb: K.project_levels(w, 0.5, False, use_numba=nb),
        "project ternary": lambda nb: K.project_levels(w, 0.5, True, use_numba=nb),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def _time(fn, repeat):
    fn()  # warm-up (includes JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(repeat=20, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for name, fn in cases(rng).items():
        row = {"kernel": name, "numpy_s": _time(lambda: fn(False), repeat)}
        if K.HAVE_NUMBA:
            row["numba_s"] = _time(lambda: fn(True), repeat)
            row["speedup"] = row["numpy_s"] / row["numba_s"]
            row["identical"] = bool(_same(fn(False), fn(True)))
        rows.append(row)

    model = nn.lenet5(seed=seed)
    x = rng.random((64, 1, 28, 28))
    y = rng.integers(0, 10, 64)
    step = {}
    results = {}
    saved = K.USE_NUMBA
    try:
        for label, flag in (("numpy", False), ("numba", True)):
            if flag and not K.HAVE_NUMBA:
                continue
            K.USE_NUMBA = flag
            step[label] = _time(lambda: model.loss_and_grad(x, y), max(repeat // 4, 3))
            results[label] = model.loss_and_grad(x, y)
    finally:
        K.USE_NUMBA = saved
    model_row = {"kernel": "lenet5 fwd+bwd (batch 64)", "numpy_s": step["numpy"]}
    if "numba" in step:
        model_row["numba_s"] = step["numba"]
        model_row["speedup"] = step["numpy"] / step["numba"]
        a, b = results["numpy"], results["numba"]
        model_row["identical"] = a[0] == b[0] and all(np.array_equal(a[1][k], b[1][k]) for k in a[1])
    rows.append(model_row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write the rows here")
    args = ap.parse_args(argv)
    rows = bench(args.repeat)
    print(f"# {platform.python_implementation()} {platform.python_version()}, numpy {np.__version__}, {K.backend()}")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} identical")
    for r in rows:
        nb = f"{1e3 * r['numba_s']:10.3f}" if "numba_s" in r else f"{'-':>10s}"
        sp = f"{r['speedup']:8.2f}" if "speedup" in r else f"{'-':>8s}"
        print(f"{r['kernel']:28s} {1e3 * r['numpy_s']:10.3f} {nb} {sp} {r.get('identical', '-')}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
