"""Patch extraction, scatter-add and window kernels for the NHWC layers.

All arrays are NHWC and already padded by the caller. Loop kernels accumulate
each output element in the same (ki, kj) order as their numpy twins.
"""
import numpy as np

from ._backend import kernel, prange


# --------------------------------------------------------------------------
# im2col: (N, Hp, Wp, C) -> (N, oh, ow, kh, kw, C)

def _im2col_numpy(xp, kh, kw, stride, oh, ow):
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + hs:stride, j:j + ws:stride, :]
    return cols


@kernel(_im2col_numpy)
def im2col(xp, kh, kw, stride, oh, ow):
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for ny in prange(n * oh):
        b = ny // oh
        y = ny % oh
        for x in range(ow):
            for i in range(kh):
                for j in range(kw):
                    for ch in range(c):
                        cols[b, y, x, i, j, ch] = xp[b, y * stride + i, x * stride + j, ch]
    return cols


# --------------------------------------------------------------------------
# col2im: scatter-add of patches back onto the padded grid

def _col2im_numpy(cols, hp, wp, stride):
    n, oh, ow, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + hs:stride, j:j + ws:stride, :] += cols[:, :, :, i, j, :]
    return out


@kernel(_col2im_numpy)
def col2im(cols, hp, wp, stride):
    n, oh, ow, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    # one batch item per task; scatter targets never cross items
    for b in prange(n):
        for i in range(kh):
            for j in range(kw):
                for y in range(oh):
                    for x in range(ow):
                        for ch in range(c):
                            out[b, y * stride + i, x * stride + j, ch] += cols[b, y, x, i, j, ch]
    return out


# --------------------------------------------------------------------------
# depthwise (per-channel) correlation, stride 1

def _depthwise_numpy(xp, k, oh, ow):
    kh, kw, _ = k.shape
    out = np.zeros((xp.shape[0], oh, ow, xp.shape[3]), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + oh, j:j + ow, :] * k[i, j]
    return out


@kernel(_depthwise_numpy)
def depthwise(xp, k, oh, ow):
    kh, kw, c = k.shape
    n = xp.shape[0]
    out = np.zeros((n, oh, ow, c), dtype=xp.dtype)
    for ny in prange(n * oh):
        b = ny // oh
        y = ny % oh
        for i in range(kh):
            for j in range(kw):
                for x in range(ow):
                    for ch in range(c):
                        out[b, y, x, ch] += xp[b, y + i, x + j, ch] * k[i, j, ch]
    return out


def _depthwise_grad_input_numpy(g, k, hp, wp):
    kh, kw, _ = k.shape
    _, oh, ow, _ = g.shape
    out = np.zeros((g.shape[0], hp, wp, g.shape[3]), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + oh, j:j + ow, :] += g * k[i, j]
    return out


@kernel(_depthwise_grad_input_numpy)
def depthwise_grad_input(g, k, hp, wp):
    kh, kw, c = k.shape
    n, oh, ow, _ = g.shape
    out = np.zeros((n, hp, wp, c), dtype=g.dtype)
    for b in prange(n):
        for i in range(kh):
            for j in range(kw):
                for y in range(oh):
                    for x in range(ow):
                        for ch in range(c):
                            out[b, y + i, x + j, ch] += g[b, y, x, ch] * k[i, j, ch]
    return out


def _depthwise_grad_kernel_numpy(xp, g, kh, kw):
    _, oh, ow, c = g.shape
    gk = np.empty((kh, kw, c), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gk[i, j] = np.einsum("nhwc,nhwc->c", xp[:, i:i + oh, j:j + ow, :], g)
    return gk


@kernel(_depthwise_grad_kernel_numpy)
def depthwise_grad_kernel(xp, g, kh, kw):
    n, oh, ow, c = g.shape
    gk = np.zeros((kh, kw, c), dtype=g.dtype)
    for t in prange(kh * kw):
        i = t // kw
        j = t % kw
        acc = np.zeros(c, dtype=g.dtype)
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for ch in range(c):
                        acc[ch] += xp[b, y + i, x + j, ch] * g[b, y, x, ch]
        gk[i, j, :] = acc
    return gk


# --------------------------------------------------------------------------
# 2x2 / stride-2 max pooling; argmax is the window slot 0..3 in row-major order

def _maxpool_numpy(x):
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    win = x[:, :2 * oh, :2 * ow, :].reshape(n, oh, 2, ow, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    y = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


@kernel(_maxpool_numpy)
def maxpool(x):
    n, h, w, c = x.shape
    oh = h // 2
    ow = w // 2
    y = np.empty((n, oh, ow, c), dtype=x.dtype)
    arg = np.empty((n, oh, ow, c), dtype=np.int8)
    for ny in prange(n * oh):
        b = ny // oh
        r = ny % oh
        for q in range(ow):
            for ch in range(c):
                best = x[b, 2 * r, 2 * q, ch]
                slot = 0
                for s in range(1, 4):
                    v = x[b, 2 * r + s // 2, 2 * q + s % 2, ch]
                    if v > best:
                        best = v
                        slot = s
                y[b, r, q, ch] = best
                arg[b, r, q, ch] = slot
    return y, arg


def _maxpool_grad_numpy(g, arg, h, w):
    n, oh, ow, c = g.shape
    slots = np.zeros((n, oh, ow, c, 4), dtype=g.dtype)
    np.put_along_axis(slots, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    slots = slots.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    out = np.zeros((n, h, w, c), dtype=g.dtype)
    out[:, :2 * oh, :2 * ow, :] = slots.reshape(n, 2 * oh, 2 * ow, c)
    return out


@kernel(_maxpool_grad_numpy)
def maxpool_grad(g, arg, h, w):
    n, oh, ow, c = g.shape
    out = np.zeros((n, h, w, c), dtype=g.dtype)
    for ny in prange(n * oh):
        b = ny // oh
        r = ny % oh
        for q in range(ow):
            for ch in range(c):
                s = arg[b, r, q, ch]
                out[b, 2 * r + s // 2, 2 * q + s % 2, ch] = g[b, r, q, ch]
    return out
