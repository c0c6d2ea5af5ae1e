"""Hot numeric loops: patch gather/scatter, 2x2 max pooling, bilinear resize.

Every kernel exists twice, once as a numba ``@njit`` loop and once as plain
numpy.  The active set is picked at import time from ``ACDL_KERNELS``
(``numba`` or ``numpy``; numba is the default when it imports cleanly) and
can be swapped later with :func:`use`.
Both sets are always reachable as ``NUMPY`` / ``NUMBA`` for tests and the
benchmark.
"""

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba ships in the default install
    numba = None


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _im2col_np(x, kh, kw, stride, ho, wo):
    # x [n,h,w,c] -> [n,ho,wo,kh,kw,c]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im_np(cols, h, w, stride):
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    for p in range(kh):
        for q in range(kw):
            out[:, p : p + stride * (ho - 1) + 1 : stride,
                q : q + stride * (wo - 1) + 1 : stride, :] += cols[:, :, :, p, q, :]
    return out


def _maxpool_fwd_np(x):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = (x[:, : 2 * ho, : 2 * wo]
           .reshape(n, ho, 2, wo, 2, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, ho, wo, c, 4))
    # argmax returns the first maximum in window scan order
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def _maxpool_bwd_np(g, idx, h, w):
    n, ho, wo, c = g.shape
    routed = (idx[..., None] == np.arange(4)) * g[..., None]
    dx = np.zeros((n, h, w, c), dtype=g.dtype)
    dx[:, : 2 * ho, : 2 * wo] = (routed.reshape(n, ho, wo, c, 2, 2)
                                 .transpose(0, 1, 4, 2, 5, 3)
                                 .reshape(n, 2 * ho, 2 * wo, c))
    return dx


def _bilinear_axis(n_in, n_out):
    # half-pixel centres: src = (i + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _resize_np(img, oh, ow):
    h, w, _ = img.shape
    y0, y1, fy = _bilinear_axis(h, oh)
    x0, x1, fx = _bilinear_axis(w, ow)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


NUMPY = SimpleNamespace(
    name="numpy",
    im2col=_im2col_np,
    col2im=_col2im_np,
    maxpool_fwd=_maxpool_fwd_np,
    maxpool_bwd=_maxpool_bwd_np,
    resize=_resize_np,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True)

    @njit
    def _im2col_flat(x, kh, kw, stride, ho, wo):
        # each window row is kw*c contiguous values of the flattened image row
        n, h, w, c = x.shape
        xf = x.reshape(n, h, w * c)
        run = kw * c
        out = np.empty((n, ho, wo, kh, run), dtype=x.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    start = j * stride * c
                    for p in range(kh):
                        row = i * stride + p
                        for t in range(run):
                            out[b, i, j, p, t] = xf[b, row, start + t]
        return out

    def _im2col_nb(x, kh, kw, stride, ho, wo):
        n, _, _, c = x.shape
        return _im2col_flat(np.ascontiguousarray(x), kh, kw, stride, ho, wo).reshape(n, ho, wo, kh, kw, c)

    @njit
    def _col2im_nb(cols, h, w, stride):
        n, ho, wo, kh, kw, c = cols.shape
        out = np.zeros((n, h, w, c), dtype=cols.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for p in range(kh):
                        for q in range(kw):
                            for ch in range(c):
                                out[b, i * stride + p, j * stride + q, ch] += cols[b, i, j, p, q, ch]
        return out

    @njit
    def _maxpool_fwd_nb(x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        out = np.empty((n, ho, wo, c), dtype=x.dtype)
        idx = np.empty((n, ho, wo, c), dtype=np.int8)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        arg = 0
                        for k in range(1, 4):
                            v = x[b, 2 * i + k // 2, 2 * j + k % 2, ch]
                            if v > best:
                                best = v
                                arg = k
                        out[b, i, j, ch] = best
                        idx[b, i, j, ch] = arg
        return out, idx

    @njit
    def _maxpool_bwd_nb(g, idx, h, w):
        n, ho, wo, c = g.shape
        dx = np.zeros((n, h, w, c), dtype=g.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        k = idx[b, i, j, ch]
                        dx[b, 2 * i + k // 2, 2 * j + k % 2, ch] = g[b, i, j, ch]
        return dx

    @njit
    def _resize_nb(img, oh, ow):
        h, w, c = img.shape
        out = np.empty((oh, ow, c), dtype=np.float64)
        sy = h / oh
        sx = w / ow
        for i in range(oh):
            fy = min(max((i + 0.5) * sy - 0.5, 0.0), h - 1.0)
            y0 = int(np.floor(fy))
            y1 = min(y0 + 1, h - 1)
            wy = fy - y0
            for j in range(ow):
                fx = min(max((j + 0.5) * sx - 0.5, 0.0), w - 1.0)
                x0 = int(np.floor(fx))
                x1 = min(x0 + 1, w - 1)
                wx = fx - x0
                for ch in range(c):
                    top = img[y0, x0, ch] * (1 - wx) + img[y0, x1, ch] * wx
                    bot = img[y1, x0, ch] * (1 - wx) + img[y1, x1, ch] * wx
                    out[i, j, ch] = top * (1 - wy) + bot * wy
        return out

    NUMBA = SimpleNamespace(
        name="numba",
        im2col=_im2col_nb,
        col2im=_col2im_nb,
        maxpool_fwd=_maxpool_fwd_nb,
        maxpool_bwd=_maxpool_bwd_nb,
        resize=lambda img, oh, ow: _resize_nb(np.asarray(img, dtype=np.float64), oh, ow),
    )
else:  # pragma: no cover
    NUMBA = None


def _pick(choice):
    choice = str(choice).strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"ACDL_KERNELS must be 'numba' or 'numpy', got {choice!r}")
    return NUMBA if choice == "numba" and NUMBA is not None else NUMPY


def use(choice):
    """Switch the active kernel set at runtime; returns the previous backend name."""
    global ACTIVE, BACKEND, im2col, col2im, maxpool_fwd, maxpool_bwd, resize
    previous = BACKEND
    ACTIVE = _pick(choice)
    BACKEND = ACTIVE.name
    im2col, col2im = ACTIVE.im2col, ACTIVE.col2im
    maxpool_fwd, maxpool_bwd = ACTIVE.maxpool_fwd, ACTIVE.maxpool_bwd
    resize = ACTIVE.resize
    return previous


BACKEND = None
use(os.environ.get("ACDL_KERNELS", "numba"))
