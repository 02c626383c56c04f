"""Side-by-side timing of the compiled and reference kernel backends.

Each hot kernel (convolution, bilinear/trilinear sampling, scatter-add) is
run on a training-sized workload with both implementations.  Outputs are
compared before timing so a speedup never hides a wrong answer.  Wall times
are best-of-N to damp scheduler noise.

    python3 benchmarks/bench_kernels.py [--repeats N] [--seed S]
"""

import argparse
import sys
import time

import numpy as np

from mv4d._kernels import _ref

try:
    from mv4d._kernels import _fast
except ImportError:
    _fast = None


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(rng):
    """Return (name, kwargs-free callables per backend, parity extractor)."""
    # backbone stage 1: 64x48 RGB frame, 16 output channels, stride 2
    x = rng.standard_normal((3, 48, 64))
    w = rng.standard_normal((16, 3, 3, 3))
    y = _ref.conv2d_forward(x, w, 2, 1)
    gy = rng.standard_normal(y.shape)

    # deformable attention: 16-channel BEV value map, 8k sample points
    bgrid = rng.standard_normal((16, 32, 32))
    bcoords = np.stack(
        [rng.uniform(-1.5, 33.0, 8192), rng.uniform(-1.5, 33.0, 8192)], axis=1
    )
    bgy = rng.standard_normal((8192, 16))

    # feature interpolation: 32x32x4 voxel grid, 8k ray samples
    tgrid = rng.standard_normal((16, 4, 32, 32))
    tcoords = np.stack(
        [
            rng.uniform(-1.0, 32.5, 8192),
            rng.uniform(-1.0, 32.5, 8192),
            rng.uniform(-1.0, 4.5, 8192),
        ],
        axis=1,
    )
    tgy = rng.standard_normal((8192, 16))

    # lift-splat accumulation: one frame of per-pixel-per-bin contributions
    svals = rng.standard_normal(16 * 24 * 32 * 16)
    sidx = rng.integers(0, 16 * 32 * 32 * 4 + 1, svals.shape[0])
    ssize = 16 * 32 * 32 * 4 + 1

    def pair(name, call):
        return name, (lambda: call(_ref)), (lambda: call(_fast))

    return [
        pair("conv2d_forward", lambda m: m.conv2d_forward(x, w, 2, 1)),
        pair("conv2d_grad_input", lambda m: m.conv2d_grad_input(gy, w, 2, 1, 48, 64)),
        pair("conv2d_grad_weight", lambda m: m.conv2d_grad_weight(gy, x, 2, 1, 3, 3)),
        pair("bilinear2d_forward", lambda m: m.bilinear2d_forward(bgrid, bcoords)),
        pair(
            "bilinear2d_backward",
            lambda m: m.bilinear2d_backward(bgrid, bcoords, bgy),
        ),
        pair(
            "trilinear3d_forward",
            lambda m: m.trilinear3d_forward(tgrid, tcoords, True),
        ),
        pair(
            "trilinear3d_backward",
            lambda m: m.trilinear3d_backward(tgrid, tcoords, tgy, True),
        ),
        pair("scatter_add", lambda m: m.scatter_add(svals, sidx, ssize)),
    ]


def check_parity(ref_out, fast_out):
    ref_flat = ref_out if isinstance(ref_out, tuple) else (ref_out,)
    fast_flat = fast_out if isinstance(fast_out, tuple) else (fast_out,)
    for r, f in zip(ref_flat, fast_flat):
        np.testing.assert_allclose(f, r, atol=1e-12)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20, help="best-of-N timing")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if _fast is None:
        print(
            "compiled backend not importable; reinstall with a C toolchain "
            "to benchmark it",
            file=sys.stderr,
        )
        return 1

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'ref ms':>10}{'fast ms':>10}{'speedup':>10}")
    total_ref = total_fast = 0.0
    for name, run_ref, run_fast in build_cases(rng):
        check_parity(run_ref(), run_fast())
        t_ref = best_of(run_ref, args.repeats)
        t_fast = best_of(run_fast, args.repeats)
        total_ref += t_ref
        total_fast += t_fast
        print(
            f"{name:<24}{t_ref * 1e3:>10.3f}{t_fast * 1e3:>10.3f}"
            f"{t_ref / t_fast:>9.1f}x"
        )
    print(
        f"{'total':<24}{total_ref * 1e3:>10.3f}{total_fast * 1e3:>10.3f}"
        f"{total_ref / total_fast:>9.1f}x"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
