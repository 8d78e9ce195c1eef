"""Benchmark the numba kernels against their pure-numpy fallbacks.

Each hot kernel ships in two interchangeable versions (see
``tricodec.backend``).  This script times both on identical inputs, checks
that they agree, and prints a comparison table.

    python3 benchmarks/bench_kernels.py          # full sizes
    python3 benchmarks/bench_kernels.py --quick  # small sizes, fast
"""

import argparse
import time

import numpy as np

from tricodec.backend import NUMBA_AVAILABLE
from tricodec.tensor import kernels as K


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def flatten(out):
    if isinstance(out, tuple):
        return np.concatenate([np.asarray(o, np.float64).ravel() for o in out])
    return np.asarray(out, np.float64).ravel()


def cases(quick):
    g = np.random.default_rng(7)

    def conv2d(b, ci, co, hw, k, pad):
        x = g.normal(size=(b, ci, hw, hw))
        w = g.normal(size=(co, ci, k, k))
        y = K.conv2d_fwd_np(x, w, 1, 1, pad, pad)
        gy = g.normal(size=y.shape)
        label = f"{b}x{ci}x{hw}^2 k{k}"
        yield (f"conv2d_fwd {label}",
               lambda: K.conv2d_fwd_nb(x, w, 1, 1, pad, pad),
               lambda: K.conv2d_fwd_np(x, w, 1, 1, pad, pad))
        yield (f"conv2d_bwd_in {label}",
               lambda: K.conv2d_bwd_input_nb(gy, w, 1, 1, pad, pad, hw, hw),
               lambda: K.conv2d_bwd_input_np(gy, w, 1, 1, pad, pad, hw, hw))
        yield (f"conv2d_bwd_w {label}",
               lambda: K.conv2d_bwd_weight_nb(gy, x, 1, 1, pad, pad, k, k),
               lambda: K.conv2d_bwd_weight_np(gy, x, 1, 1, pad, pad, k, k))

    def conv3d(ci, co, r):
        # axis-collapsing kernel, the shape the triplane projector uses
        x = g.normal(size=(1, ci, r, r, r))
        w = g.normal(size=(co, ci, r, 1, 1))
        y = K.conv3d_fwd_np(x, w, 1, 1, 1)
        gy = g.normal(size=y.shape)
        label = f"{ci}x{r}^3 k{r}x1x1"
        yield (f"conv3d_fwd {label}",
               lambda: K.conv3d_fwd_nb(x, w, 1, 1, 1),
               lambda: K.conv3d_fwd_np(x, w, 1, 1, 1))
        yield (f"conv3d_bwd_in {label}",
               lambda: K.conv3d_bwd_input_nb(gy, w, 1, 1, 1, r, r, r),
               lambda: K.conv3d_bwd_input_np(gy, w, 1, 1, 1, r, r, r))
        yield (f"conv3d_bwd_w {label}",
               lambda: K.conv3d_bwd_weight_nb(gy, x, 1, 1, 1, r, 1, 1),
               lambda: K.conv3d_bwd_weight_np(gy, x, 1, 1, 1, r, 1, 1))

    def splat(n, r, c):
        m = r ** 3
        idx = g.integers(0, m, size=(n, 8))
        wts = g.uniform(0.0, 1.0, (n, 8))
        feats = g.normal(size=(n, c))
        gout = g.normal(size=(m, c))
        label = f"{n}pts -> {r}^3"
        yield (f"splat_fwd {label}",
               lambda: K.splat_fwd_nb(idx, wts, feats, m),
               lambda: K.splat_fwd_np(idx, wts, feats, m))
        yield (f"splat_bwd {label}",
               lambda: K.splat_bwd_feats_nb(idx, wts, gout),
               lambda: K.splat_bwd_feats_np(idx, wts, gout))

    def raster(n_faces, size):
        verts = n_faces * 3
        xy = g.uniform(0, size, (verts, 2))
        z = g.uniform(1.0, 4.0, verts)
        faces = np.arange(verts, dtype=np.int64).reshape(n_faces, 3)
        label = f"{n_faces}tri {size}^2"
        yield (f"raster_assign {label}",
               lambda: K.raster_assign_nb(xy, z, faces, size, size, 0.1, 10.0),
               lambda: K.raster_assign_np(xy, z, faces, size, size, 0.1, 10.0))

    if quick:
        yield from conv2d(3, 8, 8, 16, 3, 1)
        yield from conv3d(4, 4, 8)
        yield from splat(2048, 16, 8)
        yield from raster(200, 64)
    else:
        yield from conv2d(3, 16, 16, 32, 3, 1)
        yield from conv3d(8, 8, 16)
        yield from splat(100_000, 32, 8)
        yield from raster(2000, 256)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="small sizes")
    ap.add_argument("--repeats", type=int, default=None,
                    help="timing repeats per kernel (best-of)")
    args = ap.parse_args(argv)
    repeats = args.repeats or (3 if args.quick else 5)

    if not NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare")
        return 1

    rows = []
    for name, nb_fn, np_fn in cases(args.quick):
        nb_fn()  # compile outside the clock
        t_nb, out_nb = best_of(nb_fn, repeats)
        t_np, out_np = best_of(np_fn, repeats)
        err = np.abs(flatten(out_nb) - flatten(out_np)).max()
        rows.append((name, 1e3 * t_np, 1e3 * t_nb, t_np / t_nb, err))

    header = f"{'kernel':<28} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for name, ms_np, ms_nb, speed, err in rows:
        print(f"{name:<28} {ms_np:>9.3f} {ms_nb:>9.3f} {speed:>7.1f}x {err:>10.2e}")
    worst = max(r[4] for r in rows)
    print(f"\nbackends agree to {worst:.2e} max abs difference")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
