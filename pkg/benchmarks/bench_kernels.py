"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is first checked for agreement between the two backends, then
timed with ``timeit`` (best of ``--repeat``), followed by one conv forward and
backward pass through the tape under each backend.
"""
import argparse
import timeit

import numpy as np

from triplenet import _pykernels, kernels, tensor as T

try:
    from triplenet import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((8, 56, 32, 32))
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    g = rng.standard_normal(cols.shape)
    c = rng.uniform(0, 1, (400, 2))
    wh = rng.uniform(0.02, 0.3, (400, 2))
    corners = np.ascontiguousarray(np.hstack([c - wh / 2, c + wh / 2]))
    order = np.argsort(-rng.random(400), kind="stable").astype(np.int64)
    return {
        "im2col 8x56x32x32 k3": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im 8x56x32x32 k3": lambda m: m.col2im(g, 8, 56, 32, 32, 3, 3, 1, 1),
        "nms 400 boxes": lambda m: m.nms(corners, order, 0.45),
    }


def conv_pass(mod):
    # swap the dispatch table temporarily so the tape uses one backend
    saved = kernels.im2col, kernels.col2im
    kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
    try:
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.standard_normal((8, 32, 32, 32)), requires_grad=True)
        p = T.ConvParams(T.Tensor(rng.standard_normal((32, 32, 3, 3)) * 0.1, requires_grad=True),
                         T.Tensor(np.zeros(32), requires_grad=True), 1, 1)
        with T.Tape() as tape:
            loss = T.sum_all(T.conv2d(x, p))
        T.backward(loss, tape)
    finally:
        kernels.im2col, kernels.col2im = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n, _ in backends) + ("     speedup" if _ckernels else ""))
    for name, fn in cases(rng).items():
        if _ckernels is not None:
            a, b = fn(_pykernels), fn(_ckernels)
            assert np.array_equal(np.asarray(a), np.asarray(b)) if name.startswith("nms") else \
                np.allclose(a, b, rtol=0, atol=1e-12), name
        times = [min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for _, m in backends]
        line = f"{name:<24}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>11.2f}x"
        print(line)
    times = [min(timeit.repeat(lambda: conv_pass(m), number=1, repeat=args.repeat)) for _, m in backends]
    line = f"{'conv fwd+bwd 8x32x32x32':<24}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times)
    if len(times) == 2:
        line += f"{times[0] / times[1]:>11.2f}x"
    print(line)


if __name__ == "__main__":
    main()
