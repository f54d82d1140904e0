"""Pinhole cameras with Brown–Conrady distortion: undistortion, lifting depth
to points, reprojection into a second camera, cropping and nearest resizing.

Pixel coordinates are (u, v) = (column, row); depth images are millimeters
with 0 meaning invalid; points are meters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .kernels import calib as _k

UNDISTORT_ITERATIONS = 10


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)  # k1, k2, k3, p1, p2

    def validate(self) -> "CameraIntrinsics":
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"bad image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        if len(self.dist) != 5:
            raise ConfigError("dist must hold (k1, k2, k3, p1, p2)")
        return self

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(c != 0 for c in self.dist)

    def to_dict(self) -> dict:
        k1, k2, k3, p1, p2 = self.dist
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, k1=k1, k2=k2, k3=k3,
                    p1=p1, p2=p2, width=self.width, height=self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]),
                       tuple(float(d.get(k, 0.0)) for k in ("k1", "k2", "k3", "p1", "p2"))).validate()
        except KeyError as exc:
            raise FormatError(f"intrinsics missing field {exc}") from exc


@dataclass(frozen=True)
class Extrinsics:
    """Rigid transform from the depth-camera frame to the color-camera frame."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ConfigError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def then(self, other: "Extrinsics") -> "Extrinsics":
        """``other`` applied after ``self``."""
        return Extrinsics(other.rotation @ self.rotation, other.rotation @ self.translation + other.translation)

    def inverse(self) -> "Extrinsics":
        return Extrinsics(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.ravel().tolist(), "translation_m": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Extrinsics":
        try:
            rot, t = d["rotation"], d["translation_m"]
        except KeyError as exc:
            raise FormatError(f"extrinsics missing field {exc}") from exc
        if len(rot) != 9 or len(t) != 3:
            raise FormatError("extrinsics need a 9-element rotation and 3-element translation_m")
        return cls(np.array(rot, dtype=np.float64), np.array(t, dtype=np.float64))


@dataclass(frozen=True)
class Calibration:
    depth: CameraIntrinsics
    color: CameraIntrinsics
    extrinsics: Extrinsics

    def to_dict(self) -> dict:
        return {"intrinsics_depth": self.depth.to_dict(), "intrinsics_color": self.color.to_dict(),
                "extrinsics": self.extrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        for key in ("intrinsics_depth", "intrinsics_color", "extrinsics"):
            if key not in d:
                raise FormatError(f"calibration missing {key!r}")
        return cls(CameraIntrinsics.from_dict(d["intrinsics_depth"]),
                   CameraIntrinsics.from_dict(d["intrinsics_color"]),
                   Extrinsics.from_dict(d["extrinsics"]))


def load_calibration(path) -> Calibration:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read calibration {path}: {exc}") from exc
    return Calibration.from_dict(doc)


# --------------------------------------------------------------------------
# distortion

def distort_points(x, y, dist):
    """Normalized ideal coordinates -> normalized distorted coordinates."""
    k1, k2, k3, p1, p2 = dist
    r2 = x * x + y * y
    radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return xd, yd


def undistort_points(xd, yd, dist, iterations: int = UNDISTORT_ITERATIONS):
    """Invert ``distort_points`` by fixed-point iteration."""
    k1, k2, k3, p1, p2 = dist
    x, y = np.array(xd, dtype=np.float64), np.array(yd, dtype=np.float64)
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    return x, y


def _sample(img, su, sv, interpolation):
    """Sample ``img`` at (su, sv); anything outside the source becomes 0."""
    h, w = img.shape[:2]
    out = np.zeros(su.shape + img.shape[2:], dtype=np.float64)
    if interpolation == "nearest":
        iu, iv = np.floor(su + 0.5).astype(np.int64), np.floor(sv + 0.5).astype(np.int64)
        ok = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        out[ok] = img[iv[ok], iu[ok]]
        return out
    if interpolation != "bilinear":
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    ok = (su >= 0) & (su <= w - 1) & (sv >= 0) & (sv <= h - 1)
    u, v = su[ok], sv[ok]
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    au, av = u - u0, v - v0
    if img.ndim == 3:
        au, av = au[:, None], av[:, None]
    f = img.astype(np.float64)
    out[ok] = (f[v0, u0] * (1 - au) + f[v0, u1] * au) * (1 - av) + (f[v1, u0] * (1 - au) + f[v1, u1] * au) * av
    return out


def _cast_like(values, img):
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.round(values), info.min, info.max).astype(img.dtype)
    return values.astype(img.dtype)


def _check_dims(img, intr):
    if img.shape[:2] != (intr.height, intr.width):
        raise ShapeError(f"image dims {img.shape[:2]} != intrinsics {intr.height}x{intr.width}")


def undistort_image(img, intr: CameraIntrinsics, interpolation: str = "bilinear") -> np.ndarray:
    """Ideal-camera image: each output pixel samples the input where the lens
    would have imaged it. Use ``interpolation="nearest"`` for depth maps."""
    img = np.asarray(img)
    intr.validate()
    _check_dims(img, intr)
    if not intr.has_distortion:
        return img.copy()
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    xd, yd = distort_points((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, intr.dist)
    return _cast_like(_sample(img, xd * intr.fx + intr.cx, yd * intr.fy + intr.cy, interpolation), img)


def distort_image(img, intr: CameraIntrinsics, interpolation: str = "bilinear") -> np.ndarray:
    """Inverse of ``undistort_image``: what the lens would record of an ideal image."""
    img = np.asarray(img)
    intr.validate()
    _check_dims(img, intr)
    if not intr.has_distortion:
        return img.copy()
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    x, y = undistort_points((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, intr.dist)
    return _cast_like(_sample(img, x * intr.fx + intr.cx, y * intr.fy + intr.cy, interpolation), img)


# --------------------------------------------------------------------------
# point clouds

@dataclass
class PointCloud:
    points: np.ndarray   # (n, 3) meters, Z > 0
    index: np.ndarray    # (n,) flat source-pixel index (v * width + u)
    frame: str = "depth"

    def __len__(self):
        return len(self.points)


def depth_to_pointcloud(depth_mm, intr: CameraIntrinsics) -> PointCloud:
    depth_mm = np.asarray(depth_mm)
    if depth_mm.ndim == 3 and depth_mm.shape[2] == 1:
        depth_mm = depth_mm[..., 0]
    intr.validate()
    _check_dims(depth_mm, intr)
    idx = np.flatnonzero(depth_mm > 0)
    v, u = np.divmod(idx, intr.width)
    z = depth_mm.ravel()[idx].astype(np.float64) / 1000.0
    pts = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)
    return PointCloud(pts.reshape(-1, 3), idx, "depth")


def project_to_camera(cloud: PointCloud, extr: Extrinsics, intr_dst: CameraIntrinsics,
                      out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Depth image (uint16 mm) of the cloud seen from the destination camera.

    Points land on the nearest pixel; the smallest Z' wins collisions; points
    with Z' <= 0 are dropped and uncovered pixels stay 0.
    """
    h, w = out_hw if out_hw is not None else (intr_dst.height, intr_dst.width)
    p = extr.apply(cloud.points) if len(cloud) else np.zeros((0, 3))
    z = p[:, 2]
    front = z > 0
    p, z = p[front], z[front]
    u = np.floor(intr_dst.fx * p[:, 0] / z + intr_dst.cx + 0.5).astype(np.int64)
    v = np.floor(intr_dst.fy * p[:, 1] / z + intr_dst.cy + 0.5).astype(np.int64)
    buf = _k.zbuffer(u, v, z * 1000.0, int(h), int(w))
    mm = np.round(buf)
    # depths beyond the uint16 range cannot be represented; drop them too
    ok = np.isfinite(buf) & (mm >= 1) & (mm <= 65535)
    out = np.zeros((h, w), dtype=np.uint16)
    out[ok] = mm[ok].astype(np.uint16)
    return out


def register_depth(depth_mm, calib: Calibration) -> np.ndarray:
    """Depth map re-rendered in the color camera's image plane."""
    d = undistort_image(np.asarray(depth_mm), calib.depth, interpolation="nearest")
    cloud = depth_to_pointcloud(d, calib.depth)
    return project_to_camera(cloud, calib.extrinsics, calib.color)


# --------------------------------------------------------------------------
# cropping and resizing

def center_crop(img, factor: int = 2) -> np.ndarray:
    """Central (h / factor, w / factor) region."""
    img = np.asarray(img)
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"crop factor must be a positive integer, got {factor!r}")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ConfigError(f"dims {w}x{h} not divisible by crop factor {factor}")
    ch, cw = h // factor, w // factor
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[top:top + ch, left:left + cw].copy()


def crop_intrinsics(intr: CameraIntrinsics, factor: int = 2) -> CameraIntrinsics:
    """Intrinsics of the image returned by ``center_crop``."""
    h, w = intr.height, intr.width
    if h % factor or w % factor:
        raise ConfigError(f"dims {w}x{h} not divisible by crop factor {factor}")
    ch, cw = h // factor, w // factor
    return CameraIntrinsics(intr.fx, intr.fy, intr.cx - (w - cw) // 2, intr.cy - (h - ch) // 2,
                            cw, ch, intr.dist).validate()


def resize_nearest(img, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize; output pixel (r, c) copies source
    (r * H // h, c * W // w), so a 2x upscale replicates each pixel into a 2x2 block."""
    img = np.asarray(img)
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ConfigError(f"output dims must be >= 1, got {out_hw}")
    h, w = img.shape[:2]
    rows = np.arange(oh) * h // oh
    cols = np.arange(ow) * w // ow
    return img[rows[:, None], cols[None, :]]
