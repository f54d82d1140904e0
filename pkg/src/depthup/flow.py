"""Comparison methods: pyramidal Farnebäck optical flow with nearest-neighbor
depth warping, and the previous-frame baseline.

Flow fields are float32 arrays of shape (h, w, 2) holding (dx, dy) in pixels.
The convention is ``prev(x) ≈ next(x + flow(x))``, so a depth map registered
to ``next`` is carried onto ``prev`` by sampling it at ``x + flow(x)``.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .kernels import flow as _k

# added to the 2x2 normal matrix before solving; pulls textureless pixels to zero motion
REGULARIZATION = 1e-3
_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 3
    pyr_scale: float = 0.5
    win_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def validate(self) -> "FlowConfig":
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.pyr_scale != 0.5:
            # the pyramid is built by blur + 2x decimation
            raise ConfigError(f"only pyr_scale 0.5 is supported, got {self.pyr_scale}")
        if self.win_size < 1 or self.win_size % 2 == 0:
            raise ConfigError(f"win_size must be odd and positive, got {self.win_size}")
        if self.poly_n < 1 or self.poly_n % 2 == 0:
            raise ConfigError(f"poly_n must be odd and positive, got {self.poly_n}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not self.poly_sigma > 0:
            raise ConfigError(f"poly_sigma must be positive, got {self.poly_sigma}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def to_grayscale(rgb) -> np.ndarray:
    """Luma 0.299 R + 0.587 G + 0.114 B, float64, in the input's value scale."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) image, got {rgb.shape}")
    return rgb.astype(np.float64) @ _GRAY


# --------------------------------------------------------------------------
# polynomial expansion

@dataclass
class PolyModel:
    """Per-pixel fit f(p + x) ≈ xᵀ A x + bᵀ x + c, x = (dx, dy)."""
    A: np.ndarray  # (h, w, 2, 2)
    b: np.ndarray  # (h, w, 2)
    c: np.ndarray  # (h, w)


def _poly_basis(n, sigma):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    g /= g.sum()
    # Gram matrix of basis [1, x, y, x^2, y^2, xy] under weight g(x) g(y)
    xx, yy = np.meshgrid(x, x)
    a = np.outer(g, g)
    basis = np.stack([np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy]).reshape(6, -1)
    gram = (basis * a.ravel()) @ basis.T
    return x, g, np.linalg.inv(gram)


def _poly_coeffs(gray, n, sigma) -> np.ndarray:
    """(h, w, 6) least-squares coefficients for basis [1, x, y, x^2, y^2, xy]."""
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    x, g, ginv = _poly_basis(n, sigma)
    g0, g1, g2 = g, g * x, g * x * x
    corr = np.stack([
        _k.correlate_sep(gray, g0, g0),
        _k.correlate_sep(gray, g1, g0),
        _k.correlate_sep(gray, g0, g1),
        _k.correlate_sep(gray, g2, g0),
        _k.correlate_sep(gray, g0, g2),
        _k.correlate_sep(gray, g1, g1),
    ], axis=-1)
    return corr @ ginv.T


def _coeff_field(gray, n, sigma) -> np.ndarray:
    r = _poly_coeffs(gray, n, sigma)
    # [b_x, b_y, A_xx, A_yy, A_xy]
    return np.ascontiguousarray(np.stack([r[..., 1], r[..., 2], r[..., 3], r[..., 4], r[..., 5] * 0.5], axis=-1))


def poly_expansion(gray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyModel:
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got {gray.shape}")
    if min(gray.shape) <= poly_n:
        raise ShapeError(f"image {gray.shape} too small for poly_n={poly_n}")
    r = _poly_coeffs(gray, poly_n, poly_sigma)
    A = np.empty(gray.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = r[..., 5] * 0.5
    return PolyModel(A, np.ascontiguousarray(r[..., 1:3]), r[..., 0].copy())


# --------------------------------------------------------------------------
# flow estimation

def _gaussian_window(win):
    sigma = 0.3 * ((win - 1) * 0.5 - 1) + 0.8
    x = np.arange(win, dtype=np.float64) - win // 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur_channels(m, k):
    return np.stack([_k.correlate_sep(np.ascontiguousarray(m[..., i]), k, k) for i in range(m.shape[2])], axis=-1)


def _solve(m) -> np.ndarray:
    g11 = m[..., 0] + REGULARIZATION
    g12 = m[..., 1]
    g22 = m[..., 2] + REGULARIZATION
    det = g11 * g22 - g12 * g12
    flow = np.empty(m.shape[:2] + (2,))
    flow[..., 0] = (g22 * m[..., 3] - g12 * m[..., 4]) / det
    flow[..., 1] = (g11 * m[..., 4] - g12 * m[..., 3]) / det
    return flow


def _downsample(img):
    blurred = _k.correlate_sep(np.ascontiguousarray(img), _PYR_KERNEL, _PYR_KERNEL)
    return np.ascontiguousarray(blurred[::2, ::2])


def _upsample_flow(flow, shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return 2.0 * _k.bilinear(np.ascontiguousarray(flow), xx * 0.5, yy * 0.5)


def pyramid(gray, levels: int, min_size: int = 1) -> list[np.ndarray]:
    """Finest first; stops early once a level would be ``min_size`` or smaller."""
    out = [np.ascontiguousarray(gray, dtype=np.float64)]
    while len(out) < levels:
        h, w = out[-1].shape
        if min((h + 1) // 2, (w + 1) // 2) <= min_size:
            break
        out.append(_downsample(out[-1]))
    return out


def farneback_flow(prev_gray, next_gray, config: FlowConfig | None = None) -> np.ndarray:
    """Dense flow with prev(x) ≈ next(x + flow(x)), coarse to fine."""
    cfg = (config or FlowConfig()).validate()
    prev_gray = np.asarray(prev_gray, dtype=np.float64)
    next_gray = np.asarray(next_gray, dtype=np.float64)
    if prev_gray.shape != next_gray.shape or prev_gray.ndim != 2:
        raise ShapeError(f"flow inputs must be equal 2-D images, got {prev_gray.shape} and {next_gray.shape}")
    if min(prev_gray.shape) <= 2 * cfg.poly_n:
        raise ShapeError(f"image {prev_gray.shape} too small for poly_n={cfg.poly_n}")
    p0 = pyramid(prev_gray, cfg.levels, 2 * cfg.poly_n)
    p1 = pyramid(next_gray, cfg.levels, 2 * cfg.poly_n)
    window = _gaussian_window(cfg.win_size)
    flow = None
    for a, b in zip(reversed(p0), reversed(p1)):
        if flow is None:
            flow = np.zeros(a.shape + (2,))
        else:
            flow = _upsample_flow(flow, a.shape)
        r0 = _coeff_field(a, cfg.poly_n, cfg.poly_sigma)
        r1 = _coeff_field(b, cfg.poly_n, cfg.poly_sigma)
        for _ in range(cfg.iterations):
            m = _k.update_matrices(r0, r1, np.ascontiguousarray(flow))
            flow = _solve(_blur_channels(m, window))
    return flow.astype(np.float32)


# --------------------------------------------------------------------------
# warping and baselines

def warp_depth(depth, flow, mask=None):
    """out(x) = depth(round(x + flow(x))); invalid or out-of-frame sources give 0.

    ``depth`` is (h, w) or (h, w, 1); ``mask`` defaults to ``depth != 0``.
    Returns (warped depth in the input's shape and dtype, validity mask).
    """
    depth = np.asarray(depth)
    d2 = depth[..., 0] if depth.ndim == 3 else depth
    flow = np.asarray(flow)
    if flow.shape != d2.shape + (2,):
        raise ShapeError(f"flow {flow.shape} does not match depth {depth.shape}")
    mask = d2 != 0 if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != d2.shape:
        raise ShapeError(f"mask {mask.shape} does not match depth {depth.shape}")
    out, ok = _k.warp_nearest(np.ascontiguousarray(d2), np.ascontiguousarray(mask),
                              np.ascontiguousarray(flow, dtype=np.float64))
    return out.reshape(depth.shape), ok


def naive_baseline(d_t):
    return d_t


def naive_predict(sample):
    """(prediction, mask) for an evaluation sample: the previous depth frame."""
    return naive_baseline(sample.d_t), sample.input_mask


def flow_predict(sample, config: FlowConfig | None = None):
    """Warp D_t by the flow from C_{t+delta} to C_t (inputs scaled to 0..255)."""
    f = farneback_flow(to_grayscale(sample.c_next) * 255.0, to_grayscale(sample.c_t) * 255.0, config)
    return warp_depth(sample.d_t, f, sample.input_mask)


# --------------------------------------------------------------------------
# flow dump: b"FLOW", u32 width, u32 height, (dx, dy) float32 LE interleaved

_FLOW_MAGIC = b"FLOW"


def write_flow(path, flow) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"expected (h, w, 2) flow, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(_FLOW_MAGIC + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _FLOW_MAGIC:
        raise FormatError(f"{path}: not a flow dump")
    w, h = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != w * h * 8:
        raise FormatError(f"{path}: expected {w * h * 8} payload bytes for {w}x{h}, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float32)
