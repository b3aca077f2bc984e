"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--size BYTES] [--repeat N]

Prints one line per kernel with the best-of-N time of each path and checks
that both paths produce identical output.
"""

import argparse
import time

import numpy as np

from poolforge import _kernels


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _sparse(rng, n):
    # half-sparse data: runs of zeros interleaved with literals
    buf = rng.integers(0, 256, n, dtype=np.uint8)
    mask = rng.random(n // 64) < 0.5
    buf.reshape(-1, 64)[mask] = 0
    return buf


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1 << 20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba unavailable (or POOLFORGE_NO_NUMBA set); numpy path only")

    rng = np.random.default_rng(0)
    src = _sparse(rng, args.size - args.size % 64)
    grid = rng.integers(0, 256, (args.size // (8 * 512), 8, 512), dtype=np.uint8)
    enc = _kernels.zle_encode_numpy(src)

    cases = [
        ("zle_encode", lambda k: k.zle_encode_numpy(src), lambda k: k.zle_encode_numba(src)),
        ("zle_decode", lambda k: k.zle_decode_numpy(enc, len(src))[0],
         lambda k: k.zle_decode_numba(enc, len(src))[0]),
        ("xor_parity", lambda k: k.xor_parity_numpy(grid), lambda k: k.xor_parity_numba(grid)),
    ]
    for name, np_fn, nb_fn in cases:
        t_np = _best(lambda: np_fn(_kernels), args.repeat)
        line = f"{name:<11} numpy {t_np * 1e3:9.3f} ms"
        if _kernels.HAVE_NUMBA:
            same = np.array_equal(np_fn(_kernels), nb_fn(_kernels))  # also warms the JIT
            t_nb = _best(lambda: nb_fn(_kernels), args.repeat)
            line += f"  numba {t_nb * 1e3:9.3f} ms  speedup {t_np / t_nb:6.1f}x  equal={same}"
        print(line)


if __name__ == "__main__":
    main()
