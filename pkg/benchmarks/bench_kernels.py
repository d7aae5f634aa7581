"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Each kernel is warmed up once (numba compiles on first call) and then timed
as the best of ``--repeat`` runs.  Outputs of the two flavours are checked
for agreement before timing.
"""
import argparse
import time

import numpy as np

from kpdnn import _kernels


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return min(times)


def cases(scale):
    rng = np.random.default_rng(0)
    n = max(1, int(256 * scale))
    x = rng.standard_normal((n, 11, 40))
    w = rng.standard_normal((64, 11, 5))
    b = rng.standard_normal(64)
    dz = rng.standard_normal((n, 64, 36))
    z = rng.standard_normal((n, 3 * 1024))
    dout = rng.standard_normal((n, 1024))
    _, arg = _kernels.NUMPY_KERNELS["group_max"](z, 3)
    m = max(2, int(200_000 * scale))
    perm = np.arange(m, dtype=np.int64)
    u = rng.random(m)
    return [
        ("fisher_yates", (perm, u), f"n={m}"),
        ("conv1d_forward", (x, w, b), f"{n}x11x40 * 64x5"),
        ("conv1d_backward", (x, w, dz), f"{n}x11x40 * 64x5"),
        ("group_max", (z, 3), f"{n}x3072 g=3"),
        ("group_max_backward", (dout, arg, 3), f"{n}x1024 g=3"),
    ]


def outputs_agree(name, args):
    fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
    a = _kernels.NUMPY_KERNELS[name](*fresh)
    fresh = [a_.copy() if isinstance(a_, np.ndarray) else a_ for a_ in args]
    b = _kernels.NUMBA_KERNELS[name](*fresh)
    if name == "fisher_yates":
        return True  # in-place; agreement is covered by the test suite
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-10, atol=1e-10) for x, y in zip(a, b))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    args = p.parse_args(argv)
    if _kernels.NUMBA_KERNELS is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"active backend: {_kernels.BACKEND}")
    print(f"{'kernel':<20} {'size':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn_args, size in cases(args.scale):
        if not outputs_agree(name, fn_args):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = best_of(_kernels.NUMPY_KERNELS[name], fn_args, args.repeat)
        t_nb = best_of(_kernels.NUMBA_KERNELS[name], fn_args, args.repeat)
        print(f"{name:<20} {size:<18} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
