"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``FLAME_NUMBA`` is not set to
``0``. Both implementations are always importable under the ``*_numpy`` and
``*_numba`` names so the benchmark and the tests can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("FLAME_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _cols_buffer(out, shape, dtype):
    if out is not None and out.shape == shape and out.dtype == dtype:
        return out
    return np.empty(shape, dtype=dtype)


def im2col_numpy(xp, kh, kw, stride, out=None):
    """Unfold a padded NHWC tensor into rows of (kh, kw, C) patches.

    ``out`` is reused as the destination when its shape and dtype fit.
    """
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    buf = _cols_buffer(out, (n * ho * wo, kh * kw * c), xp.dtype)
    np.copyto(buf.reshape(n, ho, wo, kh, kw, c), win.transpose(0, 1, 2, 4, 5, 3))
    return buf


def col2im_numpy(cols, shape, kh, kw, stride):
    n, hp, wp, c = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dc = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dc[
                :, :, :, i, j, :
            ]
    return out


def batchnorm_train_numpy(x2, gamma, beta, eps):
    """Training-mode batch norm on a (M, C) view.

    Returns ``(out, xhat, mean, var, inv)`` with the biased batch variance.
    """
    mean = x2.mean(axis=0)
    xc = x2 - mean
    var = (xc * xc).mean(axis=0)
    inv = (1.0 / np.sqrt(var + eps)).astype(x2.dtype)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, mean, var, inv


def batchnorm_backward_numpy(d2, xhat, gamma, inv):
    """Training-mode input gradient plus ``(dgamma, dbeta)`` on (M, C) views."""
    m = d2.shape[0]
    dbeta = d2.sum(axis=0)
    dgamma = (d2 * xhat).sum(axis=0)
    dx = (gamma * inv / m) * (m * d2 - dbeta - xhat * dgamma)
    return dx.astype(d2.dtype, copy=False), dgamma, dbeta


def maxpool2_forward_numpy(x):
    """2x2/2 max pooling; returns output and the flat (0..3) argmax per window."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    v = x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    v = v.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = np.argmax(v, axis=-1).astype(np.int8)
    out = np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2_backward_numpy(dout, idx, in_shape):
    n, h, w, c = in_shape
    ho, wo = h // 2, w // 2
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    dv = (onehot * dout[..., None]).astype(dout.dtype)
    dv = dv.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, : 2 * ho, : 2 * wo, :] = dv
    return dx


def gaussian_heatmap_numpy(points, width, height, scale):
    """Evaluate an isotropic unit-covariance 2D Gaussian at pixel centres.

    ``points`` is (K, 2) of (x, y); output is (height, width, K).
    """
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    dx = px[None, :, None] - points[None, None, :, 0]
    dy = py[:, None, None] - points[None, None, :, 1]
    return (scale / (2.0 * np.pi)) * np.exp(-0.5 * (dx * dx + dy * dy))


def _bilinear_taps(src, dst):
    s = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    s = np.clip(s, 0.0, src - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, s - i0


def bilinear_resize_numpy(t, out_h, out_w):
    y0, y1, fy = _bilinear_taps(t.shape[0], out_h)
    x0, x1, fx = _bilinear_taps(t.shape[1], out_w)
    t = t.astype(np.float64, copy=False)
    fy = fy[:, None, None]
    rows = t[y0] * (1.0 - fy) + t[y1] * fy
    fx = fx[None, :, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, out):
        # One padded input row feeds kw * c contiguous values of each patch row.
        n, hp, wp, c = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        run = kw * c
        for b in range(n):
            for oy in range(ho):
                base = (b * ho + oy) * wo
                for i in range(kh):
                    row = xp[b, oy * stride + i].reshape(-1)
                    dst = i * run
                    for ox in range(wo):
                        src = ox * stride * c
                        o = out[base + ox]
                        for t in range(run):
                            o[dst + t] = row[src + t]
        return out

    @njit(cache=True)
    def _col2im_nb(cols, out, kh, kw, stride):
        n, hp, wp, c = out.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        run = kw * c
        for b in range(n):
            for oy in range(ho):
                base = (b * ho + oy) * wo
                for i in range(kh):
                    row = out[b, oy * stride + i].reshape(-1)
                    src = i * run
                    for ox in range(wo):
                        dst = ox * stride * c
                        col = cols[base + ox]
                        for t in range(run):
                            row[dst + t] += col[src + t]
        return out

    @njit(cache=True)
    def _bn_train_nb(x, gamma, beta, eps, out, xhat):
        m, c = x.shape
        mean = np.zeros(c)
        var = np.zeros(c)
        for r in range(m):
            for ch in range(c):
                mean[ch] += x[r, ch]
        mean /= m
        for r in range(m):
            for ch in range(c):
                d = x[r, ch] - mean[ch]
                var[ch] += d * d
        var /= m
        inv = 1.0 / np.sqrt(var + eps)
        for r in range(m):
            for ch in range(c):
                xh = (x[r, ch] - mean[ch]) * inv[ch]
                xhat[r, ch] = xh
                out[r, ch] = xh * gamma[ch] + beta[ch]
        return mean, var, inv

    @njit(cache=True)
    def _bn_bwd_nb(d, xhat, gamma, inv, dx):
        m, c = d.shape
        dbeta = np.zeros(c)
        dgamma = np.zeros(c)
        for r in range(m):
            for ch in range(c):
                dbeta[ch] += d[r, ch]
                dgamma[ch] += d[r, ch] * xhat[r, ch]
        scale = gamma * inv / m
        for r in range(m):
            for ch in range(c):
                dx[r, ch] = scale[ch] * (m * d[r, ch] - dbeta[ch] - xhat[r, ch] * dgamma[ch])
        return dgamma, dbeta

    @njit(cache=True)
    def _maxpool2_fwd_nb(x, out, idx):
        n, h, w, c = x.shape
        ho = h // 2
        wo = w // 2
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * oy, 2 * ox, ch]
                        k = 0
                        v = x[b, 2 * oy, 2 * ox + 1, ch]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, 2 * oy + 1, 2 * ox, ch]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, 2 * oy + 1, 2 * ox + 1, ch]
                        if v > best:
                            best = v
                            k = 3
                        out[b, oy, ox, ch] = best
                        idx[b, oy, ox, ch] = k
        return out, idx

    @njit(cache=True)
    def _maxpool2_bwd_nb(dout, idx, dx):
        n, ho, wo, c = dout.shape
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        k = idx[b, oy, ox, ch]
                        dx[b, 2 * oy + k // 2, 2 * ox + k % 2, ch] = dout[b, oy, ox, ch]
        return dx

    @njit(cache=True)
    def _gaussian_heatmap_nb(points, width, height, scale, out):
        k = points.shape[0]
        amp = scale / (2.0 * np.pi)
        for y in range(height):
            cy = y + 0.5
            for x in range(width):
                cx = x + 0.5
                for ch in range(k):
                    dx = cx - points[ch, 0]
                    dy = cy - points[ch, 1]
                    out[y, x, ch] = amp * np.exp(-0.5 * (dx * dx + dy * dy))
        return out

    @njit(cache=True)
    def _bilinear_nb(t, out):
        h, w, c = t.shape
        oh, ow, _ = out.shape
        for i in range(oh):
            sy = (i + 0.5) * (h / oh) - 0.5
            sy = min(max(sy, 0.0), h - 1.0)
            y0 = int(np.floor(sy))
            y1 = min(y0 + 1, h - 1)
            fy = sy - y0
            for j in range(ow):
                sx = (j + 0.5) * (w / ow) - 0.5
                sx = min(max(sx, 0.0), w - 1.0)
                x0 = int(np.floor(sx))
                x1 = min(x0 + 1, w - 1)
                fx = sx - x0
                for ch in range(c):
                    top = t[y0, x0, ch] * (1.0 - fy) + t[y1, x0, ch] * fy
                    bot = t[y0, x1, ch] * (1.0 - fy) + t[y1, x1, ch] * fy
                    out[i, j, ch] = top * (1.0 - fx) + bot * fx
        return out

    def im2col_numba(xp, kh, kw, stride, out=None):
        n, hp, wp, c = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        buf = _cols_buffer(out, (n * ho * wo, kh * kw * c), xp.dtype)
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, buf)

    def batchnorm_train_numba(x2, gamma, beta, eps):
        x2 = np.ascontiguousarray(x2)
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        g = np.asarray(gamma, dtype=np.float64)
        b = np.asarray(beta, dtype=np.float64)
        mean, var, inv = _bn_train_nb(x2, g, b, float(eps), out, xhat)
        return out, xhat, mean, var, inv.astype(x2.dtype)

    def batchnorm_backward_numba(d2, xhat, gamma, inv):
        d2 = np.ascontiguousarray(d2)
        dx = np.empty_like(d2)
        dgamma, dbeta = _bn_bwd_nb(
            d2, np.ascontiguousarray(xhat), np.asarray(gamma, np.float64), np.asarray(inv, np.float64), dx
        )
        return dx, dgamma, dbeta

    def col2im_numba(cols, shape, kh, kw, stride):
        out = np.zeros(shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride)

    def maxpool2_forward_numba(x):
        n, h, w, c = x.shape
        out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
        idx = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
        return _maxpool2_fwd_nb(np.ascontiguousarray(x), out, idx)

    def maxpool2_backward_numba(dout, idx, in_shape):
        dx = np.zeros(in_shape, dtype=dout.dtype)
        return _maxpool2_bwd_nb(np.ascontiguousarray(dout), idx, dx)

    def gaussian_heatmap_numba(points, width, height, scale):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        out = np.empty((height, width, pts.shape[0]), dtype=np.float64)
        return _gaussian_heatmap_nb(pts, int(width), int(height), float(scale), out)

    def bilinear_resize_numba(t, out_h, out_w):
        t = np.ascontiguousarray(t, dtype=np.float64)
        out = np.empty((out_h, out_w, t.shape[2]), dtype=np.float64)
        return _bilinear_nb(t, out)


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    maxpool2_forward = maxpool2_forward_numba
    batchnorm_train = batchnorm_train_numba
    batchnorm_backward = batchnorm_backward_numba
    maxpool2_backward = maxpool2_backward_numba
    gaussian_heatmap_kernel = gaussian_heatmap_numba
    bilinear_resize_kernel = bilinear_resize_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2_forward = maxpool2_forward_numpy
    batchnorm_train = batchnorm_train_numpy
    batchnorm_backward = batchnorm_backward_numpy
    maxpool2_backward = maxpool2_backward_numpy
    gaussian_heatmap_kernel = gaussian_heatmap_numpy
    bilinear_resize_kernel = bilinear_resize_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
