"""Hot loops behind the tensor ops, in two interchangeable flavours.

Every kernel here exists twice: a numba ``@njit`` version and a pure-numpy
version. The active set is picked at import time from the
``MOTIONENERGY_BACKEND`` environment variable (``numba`` or ``numpy``) and
can be switched at runtime with :func:`set_backend`. Both produce the same
results up to floating-point summation order.

``MOTIONENERGY_THREADS`` caps the numba thread pool; tests pin it to 1 so
training runs are bit-reproducible.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# prefer OpenMP over TBB: avoids a noisy TBB version warning, still falls back
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

try:
    import numba
    from numba import njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    NUMBA_AVAILABLE = False

_requested = os.environ.get("MOTIONENERGY_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"MOTIONENERGY_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = _requested if NUMBA_AVAILABLE else "numpy"

if NUMBA_AVAILABLE and os.environ.get("MOTIONENERGY_THREADS"):
    numba.set_num_threads(int(os.environ["MOTIONENERGY_THREADS"]))


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    previous, BACKEND = BACKEND, name
    return previous


def get_backend() -> str:
    return BACKEND


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _conv_fwd_np(xp, w):
    ky, kx, ci, co = w.shape
    b, hp, wp, _ = xp.shape
    h, wd = hp - ky + 1, wp - kx + 1
    cols = sliding_window_view(xp, (ky, kx), axis=(1, 2))  # (b, h, w, ci, ky, kx)
    out = np.tensordot(cols, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out.reshape(b, h, wd, co)


def _conv_wgrad_np(xp, g, ky, kx):
    cols = sliding_window_view(xp, (ky, kx), axis=(1, 2))  # (b, h, w, ci, ky, kx)
    dw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))  # (ci, ky, kx, co)
    return np.ascontiguousarray(dw.transpose(1, 2, 0, 3))


def _conv_xgrad_np(g, w, hp, wp):
    ky, kx, ci, co = w.shape
    b, h, wd, _ = g.shape
    dxp = np.zeros((b, hp, wp, ci))
    for dy in range(ky):
        for dx in range(kx):
            dxp[:, dy : dy + h, dx : dx + wd, :] += g @ w[dy, dx].T
    return dxp


def _maxpool_np(xp, k, oh, ow):
    # xp is replicate-padded so window (dy, dx) of output (i, j) is xp[2i+dy, 2j+dx]
    b, _, _, c = xp.shape
    best = np.full((b, oh, ow, c), -np.inf)
    arg = np.zeros((b, oh, ow, c), dtype=np.int64)
    for dy in range(k):
        for dx in range(k):
            cand = xp[:, dy : dy + 2 * oh : 2, dx : dx + 2 * ow : 2, :]
            better = cand > best
            best = np.where(better, cand, best)
            arg = np.where(better, dy * k + dx, arg)
    return best, arg


def _bilinear_gather_np(img, ys, xs):
    # img (h, w); ys, xs float arrays already clamped to the image
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.clip(y0, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bot - top)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_WGRAD_CHUNK = 8

if NUMBA_AVAILABLE:

    # Convolutions gather one output row into an im2col block and hand the
    # product to BLAS through np.dot; rows are independent so they run in prange.

    @njit(cache=True)
    def _im2col_row(xp, n, i, ky, kx, cols):
        wd, _ = cols.shape
        ci = xp.shape[3]
        for j in range(wd):
            t = 0
            for dy in range(ky):
                for dx in range(kx):
                    for c in range(ci):
                        cols[j, t] = xp[n, i + dy, j + dx, c]
                        t += 1

    @njit(parallel=True, cache=True)
    def _conv_fwd_nb(xp, w):
        ky, kx, ci, co = w.shape
        b, hp, wp, _ = xp.shape
        h, wd = hp - ky + 1, wp - kx + 1
        w2 = np.ascontiguousarray(w).reshape(ky * kx * ci, co)
        out = np.empty((b, h, wd, co))
        for r in prange(b * h):
            n = r // h
            i = r % h
            cols = np.empty((wd, ky * kx * ci))
            _im2col_row(xp, n, i, ky, kx, cols)
            out[n, i] = np.dot(cols, w2)
        return out

    @njit(parallel=True, cache=True)
    def _conv_wgrad_nb(xp, g, ky, kx):
        b, h, wd, co = g.shape
        ci = xp.shape[3]
        k = ky * kx * ci
        rows = b * h
        # fixed-size row chunks summed in order: same result for any thread count
        nchunk = (rows + _WGRAD_CHUNK - 1) // _WGRAD_CHUNK
        part = np.zeros((nchunk, k, co))
        for ch in prange(nchunk):
            cols = np.empty((wd, k))
            for r in range(ch * _WGRAD_CHUNK, min(rows, (ch + 1) * _WGRAD_CHUNK)):
                n = r // h
                i = r % h
                _im2col_row(xp, n, i, ky, kx, cols)
                part[ch] += np.dot(cols.T, np.ascontiguousarray(g[n, i]))
        dw = np.zeros((k, co))
        for ch in range(nchunk):
            dw += part[ch]
        return dw.reshape(ky, kx, ci, co)

    @njit(parallel=True, cache=True)
    def _conv_xgrad_nb(g, w, hp, wp):
        ky, kx, ci, co = w.shape
        b, h, wd, _ = g.shape
        wt = np.empty((ky, co, kx * ci))
        for dy in range(ky):
            for dx in range(kx):
                for c in range(ci):
                    for o in range(co):
                        wt[dy, o, dx * ci + c] = w[dy, dx, c, o]
        dxp = np.zeros((b, hp, wp, ci))
        # each padded row p only receives from output rows p - dy
        for r in prange(b * hp):
            n = r // hp
            p = r % hp
            for dy in range(ky):
                i = p - dy
                if i < 0 or i >= h:
                    continue
                d = np.dot(np.ascontiguousarray(g[n, i]), wt[dy])
                for j in range(wd):
                    for dx in range(kx):
                        for c in range(ci):
                            dxp[n, p, j + dx, c] += d[j, dx * ci + c]
        return dxp

    @njit(parallel=True, cache=True)
    def _maxpool_nb(xp, k, oh, ow):
        b = xp.shape[0]
        c = xp.shape[3]
        best = np.empty((b, oh, ow, c))
        arg = np.zeros((b, oh, ow, c), dtype=np.int64)
        for bi in prange(b * oh):
            n = bi // oh
            i = bi % oh
            for j in range(ow):
                for ch in range(c):
                    m = -np.inf
                    a = 0
                    for dy in range(k):
                        for dx in range(k):
                            v = xp[n, 2 * i + dy, 2 * j + dx, ch]
                            if v > m:
                                m = v
                                a = dy * k + dx
                    best[n, i, j, ch] = m
                    arg[n, i, j, ch] = a
        return best, arg

    @njit(cache=True)
    def _bilinear_gather_nb(img, ys, xs):
        h, w = img.shape
        fy_flat = ys.ravel()
        fx_flat = xs.ravel()
        out = np.empty(fy_flat.size)
        for t in range(fy_flat.size):
            y = fy_flat[t]
            x = fx_flat[t]
            y0 = min(max(int(np.floor(y)), 0), h - 1)
            x0 = min(max(int(np.floor(x)), 0), w - 1)
            fy = y - y0
            fx = x - x0
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
            bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
            out[t] = top + fy * (bot - top)
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv_forward(xp, w):
    """Correlate padded ``xp`` (B, Hp, Wp, Ci) with bank ``w`` (ky, kx, Ci, Co)."""
    if BACKEND == "numba":
        return _conv_fwd_nb(xp, w)
    return _conv_fwd_np(xp, w)


def conv_weight_grad(xp, g, ky, kx):
    if BACKEND == "numba":
        return _conv_wgrad_nb(xp, g, ky, kx)
    return _conv_wgrad_np(xp, g, ky, kx)


def conv_input_grad(g, w, hp, wp):
    """Gradient with respect to the *padded* input."""
    if BACKEND == "numba":
        return _conv_xgrad_nb(g, w, hp, wp)
    return _conv_xgrad_np(g, w, hp, wp)


def maxpool_forward(xp, k, oh, ow):
    if BACKEND == "numba":
        return _maxpool_nb(xp, k, oh, ow)
    return _maxpool_np(xp, k, oh, ow)


def bilinear_gather(img, ys, xs):
    if BACKEND == "numba":
        ys = np.ascontiguousarray(ys, dtype=np.float64)
        xs = np.ascontiguousarray(xs, dtype=np.float64)
        return _bilinear_gather_nb(np.ascontiguousarray(img), ys, xs).reshape(ys.shape)
    return _bilinear_gather_np(img, ys, xs)
