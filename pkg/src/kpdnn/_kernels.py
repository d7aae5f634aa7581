"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba versions are used when numba imports cleanly and neither
``KPDNN_DISABLE_NUMBA`` nor ``NUMBA_DISABLE_JIT`` is set to a non-empty,
non-zero value.  Both flavours are always importable as ``NUMPY_KERNELS`` /
``NUMBA_KERNELS`` so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.

Array conventions
-----------------
conv input   ``x[n, maps, band]``
conv filters ``w[filters, maps, taps]``
conv output  ``z[n, filters, band - taps + 1]``
group max    columns are split into contiguous groups of ``g``; ``arg``
             holds the winning offset inside each group (lowest on ties)
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _flag(name):
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------

def _np_fisher_yates(perm, u):
    for i in range(perm.shape[0] - 1, 0, -1):
        j = int(u[i] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]


def _np_conv1d_forward(x, w, b):
    taps = w.shape[2]
    win = sliding_window_view(x, taps, axis=2)  # n, maps, L, taps
    z = np.einsum("nmlk,fmk->nfl", win, w, optimize=True)
    z += b[None, :, None]
    return z


def _np_conv1d_backward(x, w, dz):
    taps = w.shape[2]
    length = dz.shape[2]
    win = sliding_window_view(x, taps, axis=2)
    dw = np.einsum("nfl,nmlk->fmk", dz, win, optimize=True)
    db = dz.sum(axis=(0, 2))
    dx = np.zeros_like(x)
    for k in range(taps):
        dx[:, :, k:k + length] += np.einsum("nfl,fm->nml", dz, w[:, :, k], optimize=True)
    return dx, dw, db


def _np_group_max(z, g):
    n, cols = z.shape
    grouped = z.reshape(n, cols // g, g)
    arg = grouped.argmax(axis=2)  # argmax returns the first maximum
    out = np.take_along_axis(grouped, arg[:, :, None], axis=2)[:, :, 0]
    return out, arg


def _np_group_max_backward(dout, arg, g):
    n, groups = dout.shape
    dz = np.zeros((n, groups, g), dtype=dout.dtype)
    np.put_along_axis(dz, arg[:, :, None], dout[:, :, None], axis=2)
    return dz.reshape(n, groups * g)


NUMPY_KERNELS = {
    "fisher_yates": _np_fisher_yates,
    "conv1d_forward": _np_conv1d_forward,
    "conv1d_backward": _np_conv1d_backward,
    "group_max": _np_group_max,
    "group_max_backward": _np_group_max_backward,
}


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

NUMBA_KERNELS = None
try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _nb_fisher_yates(perm, u):
        for i in range(perm.shape[0] - 1, 0, -1):
            j = int(u[i] * (i + 1))
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp

    @njit
    def _nb_fill_cols(cols, x, i, taps):
        # cols[(map, tap), position] for sample i
        maps = x.shape[1]
        length = cols.shape[1]
        for m in range(maps):
            for k in range(taps):
                for t in range(length):
                    cols[m * taps + k, t] = x[i, m, t + k]

    # One small BLAS product per sample: the batched im2col variant allocates
    # several large temporaries and ends up slower than the numpy path.
    @njit
    def _nb_conv1d_forward(x, w, b):
        n, maps, band = x.shape
        filters, _, taps = w.shape
        length = band - taps + 1
        w2 = np.ascontiguousarray(w.reshape(filters, maps * taps))
        cols = np.empty((maps * taps, length))
        z = np.empty((n, filters, length))
        for i in range(n):
            _nb_fill_cols(cols, x, i, taps)
            out = np.dot(w2, cols)
            for f in range(filters):
                for t in range(length):
                    z[i, f, t] = out[f, t] + b[f]
        return z

    @njit
    def _nb_conv1d_backward(x, w, dz):
        n, maps, band = x.shape
        filters, _, taps = w.shape
        length = dz.shape[2]
        w2t = np.ascontiguousarray(w.reshape(filters, maps * taps).T)
        cols = np.empty((maps * taps, length))
        dw2 = np.zeros((filters, maps * taps))
        db = np.zeros(filters)
        dx = np.zeros_like(x)
        for i in range(n):
            g = np.ascontiguousarray(dz[i])
            _nb_fill_cols(cols, x, i, taps)
            dw2 += np.dot(g, cols.T)
            dcols = np.dot(w2t, g)
            for f in range(filters):
                for t in range(length):
                    db[f] += g[f, t]
            for m in range(maps):
                for k in range(taps):
                    for t in range(length):
                        dx[i, m, t + k] += dcols[m * taps + k, t]
        return dx, dw2.reshape(filters, maps, taps), db

    @njit
    def _nb_group_max(z, g):
        n, cols = z.shape
        groups = cols // g
        out = np.empty((n, groups))
        arg = np.empty((n, groups), dtype=np.int64)
        for i in range(n):
            for j in range(groups):
                base = j * g
                best = z[i, base]
                bi = 0
                for k in range(1, g):
                    v = z[i, base + k]
                    if v > best:
                        best = v
                        bi = k
                out[i, j] = best
                arg[i, j] = bi
        return out, arg

    @njit
    def _nb_group_max_backward(dout, arg, g):
        n, groups = dout.shape
        dz = np.zeros((n, groups * g))
        for i in range(n):
            for j in range(groups):
                dz[i, j * g + arg[i, j]] = dout[i, j]
        return dz

    NUMBA_KERNELS = {
        "fisher_yates": _nb_fisher_yates,
        "conv1d_forward": _nb_conv1d_forward,
        "conv1d_backward": _nb_conv1d_backward,
        "group_max": _nb_group_max,
        "group_max_backward": _nb_group_max_backward,
    }


if NUMBA_KERNELS is None or _flag("KPDNN_DISABLE_NUMBA") or _flag("NUMBA_DISABLE_JIT"):
    BACKEND = "numpy"
    _active = NUMPY_KERNELS
else:
    BACKEND = "numba"
    _active = NUMBA_KERNELS


def fisher_yates(perm, u):
    """Shuffle ``perm`` in place using one uniform per position."""
    _active["fisher_yates"](perm, np.ascontiguousarray(u, dtype=np.float64))


def conv1d_forward(x, w, b):
    return _active["conv1d_forward"](
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )


def conv1d_backward(x, w, dz):
    """Return ``(dx, dw, db)`` for the pre-activation gradient ``dz``."""
    return _active["conv1d_backward"](
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(dz, dtype=np.float64),
    )


def group_max(z, g):
    return _active["group_max"](np.ascontiguousarray(z, dtype=np.float64), int(g))


def group_max_backward(dout, arg, g):
    return _active["group_max_backward"](
        np.ascontiguousarray(dout, dtype=np.float64),
        np.ascontiguousarray(arg, dtype=np.int64),
        int(g),
    )
