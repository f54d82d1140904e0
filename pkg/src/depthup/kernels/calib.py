"""Z-buffered point splatting for reprojection."""
import numpy as np

from ._backend import kernel


def _zbuffer_numpy(u, v, z, h, w):
    buf = np.full(h * w, np.inf)
    ok = (u >= 0) & (u < w) & (v >= 0) & (v < h) & (z > 0)
    np.minimum.at(buf, v[ok] * w + u[ok], z[ok])
    return buf.reshape(h, w)


@kernel(_zbuffer_numpy)
def zbuffer(u, v, z, h, w):
    # sequential: concurrent writes to one pixel would race
    buf = np.full((h, w), np.inf)
    for i in range(u.shape[0]):
        x = u[i]
        y = v[i]
        if x >= 0 and x < w and y >= 0 and y < h and z[i] > 0 and z[i] < buf[y, x]:
            buf[y, x] = z[i]
    return buf
