#!/usr/bin/env python3
"""Time the jitted kernels against the pure-numpy fallback.

Runs every hot primitive on identically seeded inputs through both
implementations, checks they agree, and prints per-op timings plus the
speedup.  Useful when deciding whether MIRRORDECONV_BACKEND=numpy is
acceptable on a machine without a working numba install.

    python3 benchmarks/bench_kernels.py [--height 256] [--width 320]
                                        [--repeats 5]
"""

import argparse
import time

import numpy as np

from mirrordeconv import _kernels_numba as knb
from mirrordeconv import _kernels_numpy as knp


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def as_arrays(out):
    """Some ops return a tuple of arrays; normalize for comparison."""
    if isinstance(out, tuple):
        return [np.asarray(o) for o in out]
    return [np.asarray(out)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--height", type=int, default=256)
    ap.add_argument("--width", type=int, default=320)
    ap.add_argument("--kernel", type=int, default=11)
    ap.add_argument("--rad", type=int, default=6)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    h, w, k, rad = args.height, args.width, args.kernel, args.rad
    rng = np.random.default_rng(0)
    img = rng.random((h, w))
    res = rng.random((h, w))
    kern = rng.random((k, k))
    kern /= kern.sum()
    mat = np.eye(2) + 0.02 * rng.standard_normal((2, 2))
    off = np.array([0.7, -1.3])
    small = rng.random((-(-h // 8), -(-w // 8)))
    # moderately anisotropic inverse-covariance maps for the blur kernels
    sig = 1.0 + 2.0 * rng.random((h, w))
    pxx = 1.0 / sig**2
    pyy = 1.0 / (0.5 + sig) ** 2
    pxy = 0.1 * pxx
    znorm = knp.gauss_norm(pxx, pxy, pyy, rad)

    cases = [
        ("warp_bilinear", lambda m: m.warp_bilinear(img, mat, off)),
        ("warp_bilinear_adjoint", lambda m: m.warp_bilinear_adjoint(res, mat, off)),
        ("warp_affine_grad", lambda m: m.warp_affine_grad(img, mat, off, res)),
        ("conv2d_rep", lambda m: m.conv2d_rep(img, kern)),
        ("conv2d_rep_adjoint", lambda m: m.conv2d_rep_adjoint(res, kern)),
        ("conv2d_kernel_grad", lambda m: m.conv2d_kernel_grad(img, res, k)),
        ("upsample_bilinear", lambda m: m.upsample_bilinear(small, h, w)),
        ("upsample_bilinear_adjoint",
         lambda m: m.upsample_bilinear_adjoint(res, *small.shape)),
        ("gauss_norm", lambda m: m.gauss_norm(pxx, pxy, pyy, rad)),
        ("sv_blur_gather",
         lambda m: m.sv_blur_gather(img, pxx, pxy, pyy, znorm, rad)),
    ]

    print(f"frame {h}x{w}, kernel {k}x{k}, blur radius {rad}, "
          f"best of {args.repeats}")
    print(f"{'op':26s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}  agree")
    for name, call in cases:
        got_nb = as_arrays(call(knb))          # first call also JIT-compiles
        got_np = as_arrays(call(knp))
        agree = all(np.allclose(a, b, rtol=1e-12, atol=1e-12)
                    for a, b in zip(got_np, got_nb))
        t_np = best_of(lambda: call(knp), args.repeats)
        t_nb = best_of(lambda: call(knb), args.repeats)
        print(f"{name:26s} {t_np * 1e3:8.2f}ms {t_nb * 1e3:8.2f}ms "
              f"{t_np / t_nb:7.1f}x  {'ok' if agree else 'MISMATCH'}")
        if not agree:
            diff = max(float(np.abs(a - b).max())
                       for a, b in zip(got_np, got_nb))
            raise SystemExit(f"backends disagree on {name}: max diff {diff:g}")


if __name__ == "__main__":
    main()
