"""Hot numeric kernels for the convolutional score network.

Activations inside the conv net are stored channel-major, ``(C, N, H, W)``,
so a 3x3 convolution is one GEMM against an im2col matrix of shape
``(C*9, N*H*W)``.  The kernels here are the memory-bound pieces around that
GEMM: im2col / col2im with implicit zero padding, the fused SiLU forward and
backward, and corner-aligned bilinear resizing.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one.  The
numba path is used when numba imports and ``SCOREDD_DISABLE_NUMBA`` is unset
(or ``0``); set it to ``1`` to force numpy.  Both paths stay importable as
``numpy_impl`` / ``numba_impl`` for benchmarking and cross-checking.

No reduction is split across threads, so results do not depend on the numba
thread count.
"""

from __future__ import annotations

import os
import threading
import warnings
from types import SimpleNamespace

import numpy as np
from scipy.special import expit

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    # an old system TBB only disables that layer; numba falls back silently otherwise
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SCOREDD_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


# ----------------------------------------------------------------------------
# numpy path


def _np_im2col(x):
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w]
    return cols.reshape(c * 9, n * h * w)


def _np_col2im(cols, c, n, h, w):
    g = cols.reshape(c, 3, 3, n, h, w)
    gp = np.zeros((c, n, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            gp[:, :, ky : ky + h, kx : kx + w] += g[:, ky, kx]
    return np.ascontiguousarray(gp[:, :, 1:-1, 1:-1])


def _np_silu(x):
    s = expit(x)
    return x * s, s


def _np_silu_backward(gy, x, s):
    return gy * (s * (1.0 + x * (1.0 - s)))


def _np_bilinear(m, out_h, out_w):
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = m[np.ix_(y0, x0)] * (1 - wx) + m[np.ix_(y0, x1)] * wx
    bot = m[np.ix_(y1, x0)] * (1 - wx) + m[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


numpy_impl = SimpleNamespace(
    name="numpy",
    im2col=_np_im2col,
    col2im=_np_col2im,
    silu=_np_silu,
    silu_backward=_np_silu_backward,
    bilinear_resize=_np_bilinear,
)


# ----------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _nb_im2col(x):
        c, n, h, w = x.shape
        cols = np.zeros((c * 9, n * h * w), dtype=x.dtype)
        for row in prange(c * 9):
            ch = row // 9
            ky = (row % 9) // 3
            kx = row % 3
            for s in range(n):
                base = s * h * w
                for i in range(h):
                    src = i + ky - 1
                    if src < 0 or src >= h:
                        continue
                    j_lo = max(0, 1 - kx)
                    j_hi = min(w, w + 1 - kx)
                    off = base + i * w
                    for j in range(j_lo, j_hi):
                        cols[row, off + j] = x[ch, s, src, j + kx - 1]
        return cols

    @njit(parallel=True, cache=True)
    def _nb_col2im(cols, c, n, h, w):
        out = np.zeros((c, n, h, w), dtype=cols.dtype)
        # one channel per job; the 9 taps of that channel are summed serially
        for ch in prange(c):
            for k in range(9):
                ky = k // 3
                kx = k % 3
                row = ch * 9 + k
                for s in range(n):
                    base = s * h * w
                    for i in range(h):
                        dst = i + ky - 1
                        if dst < 0 or dst >= h:
                            continue
                        j_lo = max(0, 1 - kx)
                        j_hi = min(w, w + 1 - kx)
                        off = base + i * w
                        for j in range(j_lo, j_hi):
                            out[ch, s, dst, j + kx - 1] += cols[row, off + j]
        return out

    @njit(parallel=True, cache=True)
    def _nb_silu(x):
        flat = x.ravel()
        y = np.empty_like(flat)
        s = np.empty_like(flat)
        for k in prange(flat.size):
            v = flat[k]
            if v >= 0:
                sg = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                sg = e / (1.0 + e)
            s[k] = sg
            y[k] = v * sg
        return y.reshape(x.shape), s.reshape(x.shape)

    @njit(parallel=True, cache=True)
    def _nb_silu_backward(gy, x, s):
        g = gy.ravel()
        xf = x.ravel()
        sf = s.ravel()
        out = np.empty_like(g)
        for k in prange(g.size):
            sg = sf[k]
            out[k] = g[k] * (sg * (1.0 + xf[k] * (1.0 - sg)))
        return out.reshape(gy.shape)

    @njit(cache=True)
    def _nb_bilinear(m, out_h, out_w):
        h, w = m.shape
        out = np.empty((out_h, out_w))
        for i in range(out_h):
            y = i * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
            y0 = min(int(np.floor(y)), h - 1)
            y1 = min(y0 + 1, h - 1)
            wy = y - y0
            for j in range(out_w):
                xx = j * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
                x0 = min(int(np.floor(xx)), w - 1)
                x1 = min(x0 + 1, w - 1)
                wx = xx - x0
                top = m[y0, x0] * (1 - wx) + m[y0, x1] * wx
                bot = m[y1, x0] * (1 - wx) + m[y1, x1] * wx
                out[i, j] = top * (1 - wy) + bot * wy
        return out

    def _c(a):
        return np.ascontiguousarray(a)

    # the default numba threading layer is not safe to enter from several
    # Python threads at once, so parallel kernels are serialised
    _lock = threading.Lock()

    def _locked(fn):
        def call(*args):
            with _lock:
                return fn(*args)

        return call

    numba_impl = SimpleNamespace(
        name="numba",
        im2col=_locked(lambda x: _nb_im2col(_c(x))),
        col2im=_locked(lambda cols, c, n, h, w: _nb_col2im(_c(cols), c, n, h, w)),
        silu=_locked(lambda x: _nb_silu(_c(x))),
        silu_backward=_locked(lambda gy, x, s: _nb_silu_backward(_c(gy), _c(x), _c(s))),
        bilinear_resize=lambda m, h, w: _nb_bilinear(np.ascontiguousarray(m, dtype=np.float64), int(h), int(w)),
    )
else:  # pragma: no cover
    numba_impl = None


def set_threads(n: int) -> None:
    """Cap the numba worker count (no-op on the numpy path)."""
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def active_backend() -> str:
    return _active.name


_active = numba_impl if USE_NUMBA else numpy_impl


def im2col(x):
    """``(C, N, H, W)`` -> ``(C*9, N*H*W)`` patch matrix with zero padding 1."""
    return _active.im2col(x)


def col2im(cols, c, n, h, w):
    """Adjoint of :func:`im2col`: scatter-add patches back to ``(C, N, H, W)``."""
    return _active.col2im(cols, c, n, h, w)


def silu(x):
    """Return ``(x * sigmoid(x), sigmoid(x))``."""
    return _active.silu(x)


def silu_backward(gy, x, s):
    return _active.silu_backward(gy, x, s)


def bilinear_resize(m, out_h, out_w):
    """Corner-aligned bilinear interpolation of a 2-D map."""
    return _active.bilinear_resize(m, out_h, out_w)
