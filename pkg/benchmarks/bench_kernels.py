"""Time each kernel on the compiled and numpy backends.

Usage: python3 benchmarks/bench_kernels.py [--rays 4096] [--samples 32] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from uavsynth import kernels


def cases(rays, samples, rng):
    n = rays * samples
    plane = rng.normal(size=(64, 64, 9)).astype(np.float32)
    u, v = rng.uniform(size=n), rng.uniform(size=n)
    grad = rng.normal(size=(n, 9)).astype(np.float32)
    vecs = rng.normal(size=(3, n, 8))
    sigma = rng.uniform(0, 2, size=(rays, samples))
    delta = np.full((rays, samples), 0.05)
    t = np.cumsum(delta, axis=1)
    rgb = rng.uniform(size=(rays, samples, 3))
    mask = rng.uniform(size=(rays, samples))
    bg = np.zeros(3)
    fwd = kernels.composite_forward(sigma, delta, t, rgb, mask, bg)
    _, _, _, _, w, tr, tf = fwd
    g3, g1 = rng.normal(size=(rays, 3)), rng.normal(size=rays)

    def interp_backward(impl):
        kernels.interp_backward(grad, u, v, np.zeros_like(plane), impl=impl)

    return {
        "interp_forward": lambda impl: kernels.interp_forward(plane, u, v, impl=impl),
        "interp_backward": interp_backward,
        "product_forward": lambda impl: kernels.product_forward(vecs, impl=impl),
        "product_backward": lambda impl: kernels.product_backward(vecs, vecs[0], impl=impl),
        "composite_forward": lambda impl: kernels.composite_forward(sigma, delta, t, rgb, mask, bg,
                                                                    impl=impl),
        "composite_backward": lambda impl: kernels.composite_backward(
            sigma, delta, rgb, mask, w, tr, tf, bg, g3, g1, g1, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--samples", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    table = cases(args.rays, args.samples, np.random.default_rng(0))
    names = list(backends)
    print(f"{args.rays} rays x {args.samples} samples, best of {args.repeat} (ms)")
    print(f"{'kernel':20s}" + "".join(f"{n:>10s}" for n in names) +
          ("   speedup" if "cython" in backends else ""))
    for kname, fn in table.items():
        ms = {n: 1e3 * min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
              for n, b in backends.items()}
        row = f"{kname:20s}" + "".join(f"{ms[n]:10.2f}" for n in names)
        if "cython" in ms:
            row += f"{ms['python'] / ms['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
