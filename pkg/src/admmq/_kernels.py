"""Hot inner loops: im2col/col2im, max pooling and level projection.

Every kernel has a pure-numpy implementation and, when numba is importable,
an ``@njit`` twin.  ``ADMMQ_NUMBA=0`` forces the numpy path.  Both paths
produce bit-identical results: accumulation order in ``col2im`` and the
max-pool scatter is fixed by the loop nest, not by the backend.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is installed in CI
    HAVE_NUMBA = False


def _flag_enabled() -> bool:
    value = os.environ.get("ADMMQ_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col_numpy(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B*OH*OW, C*kh*kw), columns ordered (c, i, j)."""
    x = _pad(x, pad)
    b, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    d = cols.reshape(b, oh, ow, c, kh, kw)
    out = np.zeros((b, c, hp, wp))
    # descending offsets reproduce the accumulation order of the numba loop nest
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def maxpool_forward_numpy(x, k, stride):
    """Returns pooled output and flat within-window argmax (first max wins)."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    flat = win.reshape(b, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward_numpy(dout, arg, x_shape, k, stride):
    b, c, oh, ow = dout.shape
    dx = np.zeros(x_shape)
    rows = (np.arange(oh) * stride)[None, None, :, None] + arg // k
    cols = (np.arange(ow) * stride)[None, None, None, :] + arg % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    if stride >= k:
        dx[bi, ci, rows, cols] = dout
    else:
        np.add.at(dx, (bi, ci, rows, cols), dout)
    return dx


def project_levels_numpy(w, alpha, ternary):
    """Nearest level in {-a, a} or {-a, 0, a}; ties go to +a (binary) or 0 (ternary)."""
    if not ternary:
        return np.where(w >= 0.0, alpha, -alpha)
    mag = np.abs(w)
    far = np.abs(mag - alpha) < mag
    return np.where(far, np.where(w > 0.0, alpha, -alpha), 0.0)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad):
        b, c, h, w = x.shape
        hp, wp = h + 2 * pad, w + 2 * pad
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        out = np.zeros((b * oh * ow, c * kh * kw))
        for n in range(b):
            for p in range(oh):
                for q in range(ow):
                    row = (n * oh + p) * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            r = p * stride + i - pad
                            for j in range(kw):
                                s = q * stride + j - pad
                                if 0 <= r < h and 0 <= s < w:
                                    out[row, col] = x[n, ch, r, s]
                                col += 1
        return out

    @njit(cache=True)
    def _col2im_nb(cols, b, c, h, w, kh, kw, stride, pad):
        hp, wp = h + 2 * pad, w + 2 * pad
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        out = np.zeros((b, c, hp, wp))
        for n in range(b):
            for p in range(oh):
                for q in range(ow):
                    row = (n * oh + p) * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[n, ch, p * stride + i, q * stride + j] += cols[row, col]
                                col += 1
        return out

    @njit(cache=True)
    def _maxpool_forward_nb(x, k, stride):
        b, c, h, w = x.shape
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        out = np.empty((b, c, oh, ow))
        arg = np.empty((b, c, oh, ow), dtype=np.int64)
        for n in range(b):
            for ch in range(c):
                for p in range(oh):
                    for q in range(ow):
                        best = x[n, ch, p * stride, q * stride]
                        besti = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[n, ch, p * stride + i, q * stride + j]
                                if v > best:
                                    best = v
                                    besti = i * k + j
                        out[n, ch, p, q] = best
                        arg[n, ch, p, q] = besti
        return out, arg

    @njit(cache=True)
    def _maxpool_backward_nb(dout, arg, b, c, h, w, k, stride):
        dx = np.zeros((b, c, h, w))
        oh, ow = dout.shape[2], dout.shape[3]
        for n in range(b):
            for ch in range(c):
                for p in range(oh):
                    for q in range(ow):
                        a = arg[n, ch, p, q]
                        dx[n, ch, p * stride + a // k, q * stride + a % k] += dout[n, ch, p, q]
        return dx

    @njit(cache=True)
    def _project_levels_nb(w, alpha, ternary):
        flat = w.ravel()
        out = np.empty(flat.size)
        for e in range(flat.size):
            v = flat[e]
            if not ternary:
                out[e] = alpha if v >= 0.0 else -alpha
            else:
                mag = abs(v)
                if abs(mag - alpha) < mag:
                    out[e] = alpha if v > 0.0 else -alpha
                else:
                    out[e] = 0.0
        return out.reshape(w.shape)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def im2col(x, kh, kw, stride=1, pad=0, use_numba=None):
    if _use(use_numba):
        return _im2col_nb(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)
    return im2col_numpy(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride=1, pad=0, use_numba=None):
    if _use(use_numba):
        b, c, h, w = x_shape
        out = _col2im_nb(np.ascontiguousarray(cols), b, c, h, w, kh, kw, stride, pad)
        if pad:
            out = np.ascontiguousarray(out[:, :, pad:-pad, pad:-pad])
        return out
    return col2im_numpy(cols, x_shape, kh, kw, stride, pad)


def maxpool_forward(x, k, stride, use_numba=None):
    if _use(use_numba):
        return _maxpool_forward_nb(np.ascontiguousarray(x), k, stride)
    return maxpool_forward_numpy(x, k, stride)


def maxpool_backward(dout, arg, x_shape, k, stride, use_numba=None):
    if _use(use_numba):
        b, c, h, w = x_shape
        return _maxpool_backward_nb(np.ascontiguousarray(dout), arg, b, c, h, w, k, stride)
    return maxpool_backward_numpy(dout, arg, x_shape, k, stride)


def project_levels(w, alpha, ternary, use_numba=None):
    w = np.asarray(w, dtype=np.float64)
    if _use(use_numba):
        return _project_levels_nb(np.ascontiguousarray(w), float(alpha), bool(ternary))
    return project_levels_numpy(w, float(alpha), bool(ternary))


def _use(use_numba):
    if use_numba is None:
        return USE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba requested but not importable")
    return bool(use_numba)


def backend() -> str:
    return f"numba {numba.__version__}" if USE_NUMBA else "numpy"
