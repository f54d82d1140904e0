"""Per-pixel loops of the dense optical flow estimator and depth warping.

Images are 2-D float64 (h, w); coefficient fields are (h, w, 5) holding
[b_x, b_y, A_xx, A_yy, A_xy] of the local quadratic model.
"""
import numpy as np

from ._backend import kernel, prange


# --------------------------------------------------------------------------
# separable correlation with edge replication

def _correlate_sep_numpy(img, kx, ky):
    rx, ry = len(kx) // 2, len(ky) // 2
    h, w = img.shape
    p = np.pad(img, ((0, 0), (rx, rx)), mode="edge")
    tmp = np.zeros((h, w))
    for i in range(len(kx)):
        tmp += kx[i] * p[:, i:i + w]
    p = np.pad(tmp, ((ry, ry), (0, 0)), mode="edge")
    out = np.zeros((h, w))
    for i in range(len(ky)):
        out += ky[i] * p[i:i + h, :]
    return out


@kernel(_correlate_sep_numpy)
def correlate_sep(img, kx, ky):
    h, w = img.shape
    rx = len(kx) // 2
    ry = len(ky) // 2
    tmp = np.zeros((h, w))
    for y in prange(h):
        for i in range(len(kx)):
            for x in range(w):
                xx = min(max(x + i - rx, 0), w - 1)
                tmp[y, x] += kx[i] * img[y, xx]
    out = np.zeros((h, w))
    for y in prange(h):
        for i in range(len(ky)):
            yy = min(max(y + i - ry, 0), h - 1)
            for x in range(w):
                out[y, x] += ky[i] * tmp[yy, x]
    return out


# --------------------------------------------------------------------------
# bilinear sampling at real-valued positions (edge-clamped)

def _bilinear_numpy(img, px, py):
    h, w = img.shape[:2]
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(py).astype(np.int64), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = px - x0
    ay = py - y0
    if img.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


@kernel(_bilinear_numpy)
def bilinear(img, px, py):
    h, w = img.shape[:2]
    oh, ow = px.shape
    c = img.shape[2]
    out = np.empty((oh, ow, c))
    for y in prange(oh):
        for x in range(ow):
            fx = min(max(px[y, x], 0.0), w - 1.0)
            fy = min(max(py[y, x], 0.0), h - 1.0)
            x0 = min(int(np.floor(fx)), max(w - 2, 0))
            y0 = min(int(np.floor(fy)), max(h - 2, 0))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            ax = fx - x0
            ay = fy - y0
            for k in range(c):
                top = img[y0, x0, k] * (1 - ax) + img[y0, x1, k] * ax
                bot = img[y1, x0, k] * (1 - ax) + img[y1, x1, k] * ax
                out[y, x, k] = top * (1 - ay) + bot * ay
    return out


# --------------------------------------------------------------------------
# displacement-estimation normal equations

def _update_matrices_numpy(r0, r1, flow):
    h, w, _ = r0.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = flow[..., 0], flow[..., 1]
    fx, fy = xx + dx, yy + dy
    inside = (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)
    s = _bilinear_numpy(r1, fx, fy)
    a11 = np.where(inside, (r0[..., 2] + s[..., 2]) * 0.5, r0[..., 2])
    a22 = np.where(inside, (r0[..., 3] + s[..., 3]) * 0.5, r0[..., 3])
    a12 = np.where(inside, (r0[..., 4] + s[..., 4]) * 0.5, r0[..., 4])
    db1 = np.where(inside, (r0[..., 0] - s[..., 0]) * 0.5, 0.0) + a11 * dx + a12 * dy
    db2 = np.where(inside, (r0[..., 1] - s[..., 1]) * 0.5, 0.0) + a12 * dx + a22 * dy
    m = np.empty((h, w, 5))
    m[..., 0] = a11 * a11 + a12 * a12
    m[..., 1] = a12 * (a11 + a22)
    m[..., 2] = a12 * a12 + a22 * a22
    m[..., 3] = a11 * db1 + a12 * db2
    m[..., 4] = a12 * db1 + a22 * db2
    return m


@kernel(_update_matrices_numpy)
def update_matrices(r0, r1, flow):
    h, w, _ = r0.shape
    m = np.empty((h, w, 5))
    for y in prange(h):
        for x in range(w):
            dx = flow[y, x, 0]
            dy = flow[y, x, 1]
            fx = x + dx
            fy = y + dy
            a11 = r0[y, x, 2]
            a22 = r0[y, x, 3]
            a12 = r0[y, x, 4]
            db1 = 0.0
            db2 = 0.0
            if fx >= 0 and fx <= w - 1 and fy >= 0 and fy <= h - 1:
                x0 = min(int(np.floor(fx)), max(w - 2, 0))
                y0 = min(int(np.floor(fy)), max(h - 2, 0))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                ax = fx - x0
                ay = fy - y0
                s = np.empty(5)
                for k in range(5):
                    top = r1[y0, x0, k] * (1 - ax) + r1[y0, x1, k] * ax
                    bot = r1[y1, x0, k] * (1 - ax) + r1[y1, x1, k] * ax
                    s[k] = top * (1 - ay) + bot * ay
                a11 = (a11 + s[2]) * 0.5
                a22 = (a22 + s[3]) * 0.5
                a12 = (a12 + s[4]) * 0.5
                db1 = (r0[y, x, 0] - s[0]) * 0.5
                db2 = (r0[y, x, 1] - s[1]) * 0.5
            db1 += a11 * dx + a12 * dy
            db2 += a12 * dx + a22 * dy
            m[y, x, 0] = a11 * a11 + a12 * a12
            m[y, x, 1] = a12 * (a11 + a22)
            m[y, x, 2] = a12 * a12 + a22 * a22
            m[y, x, 3] = a11 * db1 + a12 * db2
            m[y, x, 4] = a12 * db1 + a22 * db2
    return m


# --------------------------------------------------------------------------
# nearest-neighbor backward warp of a depth map

def _warp_nearest_numpy(depth, valid, flow):
    h, w = depth.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sx = np.floor(xx + flow[..., 0] + 0.5).astype(np.int64)
    sy = np.floor(yy + flow[..., 1] + 0.5).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    ok = inside & valid[syc, sxc]
    out = np.where(ok, depth[syc, sxc], 0).astype(depth.dtype)
    return out, ok


@kernel(_warp_nearest_numpy)
def warp_nearest(depth, valid, flow):
    h, w = depth.shape
    out = np.zeros_like(depth)
    ok = np.zeros((h, w), dtype=np.bool_)
    for y in prange(h):
        for x in range(w):
            sx = int(np.floor(x + flow[y, x, 0] + 0.5))
            sy = int(np.floor(y + flow[y, x, 1] + 0.5))
            if sx >= 0 and sx < w and sy >= 0 and sy < h and valid[sy, sx]:
                out[y, x] = depth[sy, sx]
                ok[y, x] = True
    return out, ok
