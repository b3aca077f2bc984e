"""Hot byte-level kernels: zero-length encoding and row parity.

Each kernel has a numba implementation and a pure-numpy one. The numba path
is used when numba imports cleanly and ``POOLFORGE_NO_NUMBA`` is unset (or
"0"); the numpy path is always importable under ``*_numpy`` names so tests
and the benchmark can compare the two.
"""

import os

import numpy as np

ZLE_MAX_RUN = 128

# decoder status codes (numba cannot raise rich exceptions cheaply)
DECODE_OK = 0
DECODE_TRUNCATED = 1
DECODE_OVERFLOW = 2


def _numba_requested() -> bool:
    return os.environ.get("POOLFORGE_NO_NUMBA", "").strip().lower() in ("", "0", "false", "no")


# ---------------------------------------------------------------- numpy path


def zle_encode_numpy(src: np.ndarray) -> np.ndarray:
    n = src.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.uint8)
    is_zero = src == 0
    edges = np.flatnonzero(is_zero[1:] != is_zero[:-1]) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [n]))
    pieces = []
    for start, end in zip(starts.tolist(), ends.tolist()):
        if is_zero[start]:
            run = end - start
            full, rest = divmod(run, ZLE_MAX_RUN)
            tokens = [0xFF] * full
            if rest:
                tokens.append(0x80 + rest - 1)
            pieces.append(np.array(tokens, dtype=np.uint8))
        else:
            for lo in range(start, end, ZLE_MAX_RUN):
                hi = min(lo + ZLE_MAX_RUN, end)
                pieces.append(np.array([hi - lo - 1], dtype=np.uint8))
                pieces.append(src[lo:hi])
    return np.concatenate(pieces)


def zle_decode_numpy(src: np.ndarray, out_len: int):
    out = np.zeros(out_len, dtype=np.uint8)
    i = 0
    o = 0
    n = src.shape[0]
    data = src.tobytes()
    while i < n and o < out_len:
        t = data[i]
        i += 1
        if t < 0x80:
            run = t + 1
            if i + run > n:
                return out, DECODE_TRUNCATED, i
            if o + run > out_len:
                return out, DECODE_OVERFLOW, i
            out[o:o + run] = src[i:i + run]
            i += run
        else:
            run = t - 0x80 + 1
            if o + run > out_len:
                return out, DECODE_OVERFLOW, i
        o += run
    if o != out_len:
        return out, DECODE_TRUNCATED, i
    return out, DECODE_OK, i


def xor_parity_numpy(grid: np.ndarray) -> np.ndarray:
    """XOR-reduce a (rows, cols, sector) grid over its column axis."""
    return np.bitwise_xor.reduce(grid, axis=1)


# ---------------------------------------------------------------- numba path

try:
    if not _numba_requested():
        raise ImportError("numba disabled by POOLFORGE_NO_NUMBA")
    from numba import njit
except ImportError:
    HAVE_NUMBA = False
else:
    HAVE_NUMBA = True

    @njit(cache=True)
    def _zle_encode_jit(src):
        n = src.shape[0]
        out = np.empty(2 * n + 2, dtype=np.uint8)  # alternating runs cost up to 2 bytes each
        i = 0
        o = 0
        while i < n:
            j = i
            if src[i] == 0:
                while j < n and j - i < ZLE_MAX_RUN and src[j] == 0:
                    j += 1
                out[o] = 0x80 + (j - i) - 1
                o += 1
            else:
                while j < n and j - i < ZLE_MAX_RUN and src[j] != 0:
                    j += 1
                out[o] = (j - i) - 1
                o += 1
                for k in range(i, j):
                    out[o] = src[k]
                    o += 1
            i = j
        return out[:o]

    @njit(cache=True)
    def _zle_decode_jit(src, out_len):
        out = np.zeros(out_len, dtype=np.uint8)
        i = 0
        o = 0
        n = src.shape[0]
        while i < n and o < out_len:
            t = src[i]
            i += 1
            if t < 0x80:
                run = t + 1
                if i + run > n:
                    return out, DECODE_TRUNCATED, i
                if o + run > out_len:
                    return out, DECODE_OVERFLOW, i
                for k in range(run):
                    out[o + k] = src[i + k]
                i += run
            else:
                run = t - 0x80 + 1
                if o + run > out_len:
                    return out, DECODE_OVERFLOW, i
            o += run
        if o != out_len:
            return out, DECODE_TRUNCATED, i
        return out, DECODE_OK, i

    @njit(cache=True)
    def _xor_parity_jit(grid):
        rows, cols, width = grid.shape
        out = np.zeros((rows, width), dtype=np.uint8)
        for r in range(rows):
            for c in range(cols):
                for b in range(width):
                    out[r, b] ^= grid[r, c, b]
        return out


def zle_encode_numba(src: np.ndarray) -> np.ndarray:
    if not HAVE_NUMBA:
        raise RuntimeError("numba path unavailable")
    if src.shape[0] == 0:
        return np.empty(0, dtype=np.uint8)
    return _zle_encode_jit(src)


def zle_decode_numba(src: np.ndarray, out_len: int):
    if not HAVE_NUMBA:
        raise RuntimeError("numba path unavailable")
    out, status, used = _zle_decode_jit(src, out_len)
    return out, int(status), int(used)


def xor_parity_numba(grid: np.ndarray) -> np.ndarray:
    if not HAVE_NUMBA:
        raise RuntimeError("numba path unavailable")
    return _xor_parity_jit(np.ascontiguousarray(grid))


if HAVE_NUMBA:
    zle_encode = zle_encode_numba
    zle_decode = zle_decode_numba
    xor_parity = xor_parity_numba
else:
    zle_encode = zle_encode_numpy
    zle_decode = zle_decode_numpy
    xor_parity = xor_parity_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
