"""Synthetic RGB-D sequences: textured shapes moving over a textured plane,
seen by a fast color camera and a slow depth camera that drops pixels the way
time-of-flight sensors do (object borders plus scattered dropout).

Also home to stream synchronization, sample assembly, leave-one-sequence-out
splits and the on-disk sequence format.
"""
from __future__ import annotations

import collections.abc
import dataclasses
import functools
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, SyncError
from .model import Sample

TARGET_INVALID_FRACTION = 0.2956


# --------------------------------------------------------------------------
# scene description

@dataclass
class Segment:
    """Linear motion from ``t0`` seconds on: position + velocity * (t - t0)."""
    t0: float
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0


@dataclass
class ShapeSpec:
    kind: str                      # "rectangle" | "ellipse"
    size_px: tuple[float, float]   # full width, full height
    depth_mm: int
    texture_seed: int
    color: tuple[float, float, float] = (0.8, 0.5, 0.3)
    trajectory: list[Segment] = field(default_factory=list)

    def position(self, t: float) -> tuple[float, float]:
        seg = self.trajectory[0]
        for s in self.trajectory:
            if s.t0 <= t:
                seg = s
            else:
                break
        dt = t - seg.t0
        return seg.x + seg.vx * dt, seg.y + seg.vy * dt

    def covers(self, u, v, t):
        """Boolean coverage of pixel centers (u, v) at time t."""
        cx, cy = self.position(t)
        hw, hh = self.size_px[0] / 2.0, self.size_px[1] / 2.0
        if self.kind == "rectangle":
            return (np.abs(u - cx) <= hw) & (np.abs(v - cy) <= hh)
        return ((u - cx) / hw) ** 2 + ((v - cy) / hh) ** 2 <= 1.0


@dataclass
class InvalidModel:
    edge_band_px: int = 2
    # None: pick the per-frame rate that brings the total to target_fraction
    dropout_rate: float | None = None
    target_fraction: float = TARGET_INVALID_FRACTION


@dataclass
class SceneSpec:
    width: int = 192
    height: int = 108
    rgb_fps: int = 240
    depth_fps: int = 30
    max_depth_mm: int = 5000
    background_depth_mm: int = 4000
    background_seed: int = 0
    shapes: list[ShapeSpec] = field(default_factory=list)
    invalid_model: InvalidModel = field(default_factory=InvalidModel)

    def validate(self) -> "SceneSpec":
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"bad dims {self.width}x{self.height}")
        if self.depth_fps < 1 or self.rgb_fps % self.depth_fps:
            raise ConfigError(f"rgb_fps ({self.rgb_fps}) must be a multiple of depth_fps ({self.depth_fps})")
        if not 0 < self.background_depth_mm <= self.max_depth_mm:
            raise ConfigError("background depth must lie in (0, max_depth_mm]")
        for s in self.shapes:
            if s.kind not in ("rectangle", "ellipse"):
                raise ConfigError(f"unknown shape kind {s.kind!r}")
            if not 0 < s.depth_mm < self.background_depth_mm:
                raise ConfigError(f"shape depth {s.depth_mm} must be in (0, background depth)")
            if not s.trajectory:
                raise ConfigError("shape without trajectory")
        m = self.invalid_model
        if m.edge_band_px < 0:
            raise ConfigError("edge_band_px must be >= 0")
        if m.dropout_rate is not None and not 0 <= m.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        return self

    # -- (de)serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        try:
            shapes = []
            for s in d.pop("shapes", []):
                s = dict(s)
                s["trajectory"] = [Segment(**seg) for seg in s.get("trajectory", [])]
                s["size_px"] = tuple(s["size_px"])
                if "color" in s:
                    s["color"] = tuple(s["color"])
                shapes.append(ShapeSpec(**s))
            inv = InvalidModel(**d.pop("invalid_model", {}))
            return cls(shapes=shapes, invalid_model=inv, **d).validate()
        except TypeError as exc:
            raise ConfigError(f"bad scene spec: {exc}") from exc


def bouncing_trajectory(x, y, vx, vy, w, h, half_w, half_h, duration) -> list[Segment]:
    """Piecewise-linear path reflecting off the frame borders for ``duration`` s."""
    segs = [Segment(0.0, x, y, vx, vy)]
    t = 0.0
    lo_x, hi_x, lo_y, hi_y = half_w, w - 1 - half_w, half_h, h - 1 - half_h
    while t < duration:
        hits = []
        if vx > 0:
            hits.append(((hi_x - x) / vx, "x"))
        elif vx < 0:
            hits.append(((lo_x - x) / vx, "x"))
        if vy > 0:
            hits.append(((hi_y - y) / vy, "y"))
        elif vy < 0:
            hits.append(((lo_y - y) / vy, "y"))
        if not hits:
            break
        dt, axis = min(hits)
        dt = max(dt, 1e-6)
        t += dt
        x, y = x + vx * dt, y + vy * dt
        if axis == "x":
            vx = -vx
        else:
            vy = -vy
        segs.append(Segment(t, x, y, vx, vy))
    return segs


def random_scene(seed: int, width=192, height=108, n_shapes=(2, 4), speed=(60.0, 200.0),
                 duration=10.0, static=False, invalid_model=None) -> SceneSpec:
    """A seeded scene of 2-4 textured shapes bouncing around the frame.

    Speeds are in pixels per second at the given resolution.
    """
    rng = np.random.default_rng([seed, 0x5CE7E])
    shapes = []
    for i in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
        sw = float(rng.uniform(0.12, 0.3) * width)
        sh = float(rng.uniform(0.2, 0.5) * height)
        x = float(rng.uniform(sw / 2, width - 1 - sw / 2))
        y = float(rng.uniform(sh / 2, height - 1 - sh / 2))
        ang = rng.uniform(0, 2 * np.pi)
        sp = 0.0 if static else float(rng.uniform(*speed))
        traj = bouncing_trajectory(x, y, sp * np.cos(ang), sp * np.sin(ang),
                                   width, height, sw / 2, sh / 2, duration + 1.0)
        shapes.append(ShapeSpec(
            kind=("rectangle", "ellipse")[int(rng.integers(2))],
            size_px=(sw, sh),
            depth_mm=int(rng.integers(1000, 3200)),
            texture_seed=int(rng.integers(2 ** 31)),
            color=tuple(float(c) for c in rng.uniform(0.25, 1.0, 3)),
            trajectory=traj,
        ))
    return SceneSpec(width=width, height=height, background_seed=int(rng.integers(2 ** 31)),
                     shapes=shapes, invalid_model=invalid_model or InvalidModel()).validate()


# --------------------------------------------------------------------------
# rendering

@functools.lru_cache(maxsize=256)
def _noise_table(seed, cell_key):
    return np.random.default_rng([seed, cell_key]).random((257, 257))


def value_noise(u, v, seed, cell):
    """Smooth seeded noise in [0, 1] at real coordinates (u, v)."""
    table = _noise_table(seed, int(cell * 1000))
    fu, fv = u / cell, v / cell
    iu, iv = np.floor(fu), np.floor(fv)
    tu, tv = fu - iu, fv - iv
    tu = tu * tu * (3 - 2 * tu)
    tv = tv * tv * (3 - 2 * tv)
    iu = iu.astype(np.int64) % 256
    iv = iv.astype(np.int64) % 256
    a = table[iv, iu]
    b = table[iv, iu + 1]
    c = table[iv + 1, iu]
    d = table[iv + 1, iu + 1]
    return (a * (1 - tu) + b * tu) * (1 - tv) + (c * (1 - tu) + d * tu) * tv


def texture(u, v, seed):
    return 0.55 * value_noise(u, v, seed, 9.0) + 0.3 * value_noise(u, v, seed + 1, 3.5) \
        + 0.15 * value_noise(u, v, seed + 2, 1.7)


class Renderer:
    """Renders one scene; the static background is computed once."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec.validate()
        h, w = spec.height, spec.width
        self.v, self.u = np.mgrid[0:h, 0:w].astype(np.float64)
        bg = texture(self.u, self.v, spec.background_seed)
        tint = np.array([0.55, 0.6, 0.65])
        self.bg_rgb = bg[..., None] * tint + 0.15
        # far-to-near painting gives nearest-surface visibility
        self.order = sorted(spec.shapes, key=lambda s: -s.depth_mm)

    def depth(self, t: float) -> np.ndarray:
        """Ground-truth depth (mm, uint16) at time t."""
        d = np.full((self.spec.height, self.spec.width), self.spec.background_depth_mm, dtype=np.uint16)
        for s in self.order:
            d[s.covers(self.u, self.v, t)] = s.depth_mm
        return d

    def rgb(self, t: float) -> np.ndarray:
        img = self.bg_rgb.copy()
        for s in self.order:
            m = s.covers(self.u, self.v, t)
            if not m.any():
                continue
            cx, cy = s.position(t)
            tex = texture(self.u[m] - cx, self.v[m] - cy, s.texture_seed)
            img[m] = (0.25 + 0.75 * tex)[:, None] * np.asarray(s.color)
        return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def edge_band(depth: np.ndarray, band: int) -> np.ndarray:
    """Pixels with a differing depth value within Chebyshev distance ``band``."""
    if band <= 0:
        return np.zeros(depth.shape, dtype=bool)
    size = 2 * band + 1
    hi = ndimage.maximum_filter(depth, size=size, mode="nearest")
    lo = ndimage.minimum_filter(depth, size=size, mode="nearest")
    return hi != lo


def corrupt_depth(clean: np.ndarray, model: InvalidModel, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero out edge-band and dropout pixels. Returns (depth, edge_mask, dropout_mask)."""
    edges = edge_band(clean, model.edge_band_px)
    if model.dropout_rate is None:
        ef = edges.mean()
        rate = 0.0 if ef >= model.target_fraction else (model.target_fraction - ef) / (1 - ef)
    else:
        rate = model.dropout_rate
    drop = rng.random(clean.shape) < rate
    out = clean.copy()
    out[edges | drop] = 0
    return out, edges, drop


# --------------------------------------------------------------------------
# sequences

def timestamps_us(n: int, fps: int) -> np.ndarray:
    """round(i * 1e6 / fps) in integer arithmetic."""
    i = np.arange(n, dtype=np.int64)
    return (2 * i * 1_000_000 + fps) // (2 * fps)


@dataclass(eq=False)
class Sequence:
    name: str
    width: int
    height: int
    rgb_fps: int
    depth_fps: int
    max_depth_mm: int
    rgb: np.ndarray          # (n, h, w, 3) uint8
    rgb_ts: np.ndarray       # (n,) int64 microseconds
    depth: np.ndarray        # (m, h, w) uint16 millimeters, 0 = invalid
    depth_ts: np.ndarray     # (m,) int64 microseconds
    calibration: dict | None = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        meta = [self.name, self.width, self.height, self.rgb_fps, self.depth_fps, self.max_depth_mm]
        h.update(json.dumps(meta).encode())
        for a in (self.rgb, self.rgb_ts, self.depth, self.depth_ts):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(json.dumps(self.calibration, sort_keys=True).encode())
        return h.hexdigest()

    def equals(self, other: "Sequence") -> bool:
        return self.checksum() == other.checksum()


def default_calibration(width: int, height: int) -> dict:
    """Calibration for the synthetic rig: both cameras share one pinhole model."""
    f = 0.9 * width
    intr = dict(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                k1=0.0, k2=0.0, k3=0.0, p1=0.0, p2=0.0, width=width, height=height)
    return {"intrinsics_depth": dict(intr), "intrinsics_color": dict(intr),
            "extrinsics": {"rotation": [1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0], "translation_m": [0.0, 0.0, 0.0]}}


def generate_sequence(spec: SceneSpec, seed: int, duration_s: float, name: str = "seq") -> Sequence:
    """Render ``duration_s`` seconds of the scene; a pure function of its arguments."""
    spec.validate()
    if not duration_s > 0:
        raise ConfigError(f"duration must be > 0, got {duration_s}")
    ratio = spec.rgb_fps // spec.depth_fps
    n_depth = int(round(duration_s * spec.depth_fps))
    if n_depth < 1:
        raise ConfigError(f"duration {duration_s}s yields no depth frames")
    n_rgb = n_depth * ratio
    r = Renderer(spec)
    rgb_ts = timestamps_us(n_rgb, spec.rgb_fps)
    depth_ts = timestamps_us(n_depth, spec.depth_fps)
    rgb = np.empty((n_rgb, spec.height, spec.width, 3), dtype=np.uint8)
    for i in range(n_rgb):
        rgb[i] = r.rgb(rgb_ts[i] / 1e6)
    depth = np.empty((n_depth, spec.height, spec.width), dtype=np.uint16)
    for j in range(n_depth):
        clean = r.depth(depth_ts[j] / 1e6)
        depth[j] = corrupt_depth(clean, spec.invalid_model, np.random.default_rng([seed, j, 0xD3]))[0]
    return Sequence(name, spec.width, spec.height, spec.rgb_fps, spec.depth_fps, spec.max_depth_mm,
                    rgb, rgb_ts, depth, depth_ts, default_calibration(spec.width, spec.height))


# --------------------------------------------------------------------------
# synchronization and samples

@dataclass
class SyncIndex:
    pairs: np.ndarray        # (m, 2) [depth_index, rgb_index]
    residual_us: np.ndarray  # (m,) |t_depth - t_rgb|

    def rgb_for(self, depth_index: int) -> int:
        return int(self.pairs[depth_index, 1])


def synchronize(rgb_ts, depth_ts) -> SyncIndex:
    """Pair every depth frame with the nearest-in-time rgb frame (ties: earlier)."""
    rgb_ts = np.asarray(rgb_ts, dtype=np.int64)
    depth_ts = np.asarray(depth_ts, dtype=np.int64)
    if rgb_ts.size == 0 or depth_ts.size == 0:
        raise SyncError("cannot synchronize an empty stream")
    hi = np.clip(np.searchsorted(rgb_ts, depth_ts, side="left"), 0, rgb_ts.size - 1)
    lo = np.clip(hi - 1, 0, rgb_ts.size - 1)
    d_lo = np.abs(depth_ts - rgb_ts[lo])
    d_hi = np.abs(rgb_ts[hi] - depth_ts)
    idx = np.where(d_lo <= d_hi, lo, hi)
    res = np.abs(depth_ts - rgb_ts[idx])
    pairs = np.stack([np.arange(depth_ts.size), idx], axis=1)
    return SyncIndex(pairs, res)


class SampleSet(collections.abc.Sequence):
    """Samples of one sequence for a fixed delta, normalized on access."""

    def __init__(self, seq: Sequence, sync: SyncIndex, delta_frames: int):
        self.seq, self.sync, self.delta = seq, sync, delta_frames
        self._n = max(len(seq.depth_ts) - delta_frames, 0)

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self._n))]
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(i)
        s, sync, k = self.seq, self.sync, self.delta
        scale = np.float32(1.0 / s.max_depth_mm)
        gt_mm = s.depth[i + k]
        return Sample(
            c_t=s.rgb[sync.rgb_for(i)].astype(np.float32) / 255,
            d_t=(s.depth[i].astype(np.float32) * scale)[..., None],
            c_next=s.rgb[sync.rgb_for(i + k)].astype(np.float32) / 255,
            gt=(gt_mm.astype(np.float32) * scale)[..., None],
            gt_mask=gt_mm != 0,
        )


def make_samples(seq: Sequence, sync: SyncIndex | None = None, delta_frames: int = 1) -> SampleSet:
    """Samples pairing depth frame t with depth frame t + delta_frames."""
    if delta_frames < 1:
        raise ConfigError(f"delta_frames must be >= 1, got {delta_frames}")
    sync = sync if sync is not None else synchronize(seq.rgb_ts, seq.depth_ts)
    out = SampleSet(seq, sync, delta_frames)
    if len(out) == 0:
        warnings.warn(f"sequence {seq.name!r} has {len(seq.depth_ts)} depth frames; "
                      f"delta {delta_frames} yields no samples", stacklevel=2)
    return out


def loso_split(sequences, held_out_name: str):
    """(train, test): the named sequence alone is the test set."""
    names = [s.name for s in sequences]
    if held_out_name not in names:
        raise ConfigError(f"unknown held-out sequence {held_out_name!r}; have {names}")
    train = [s for s in sequences if s.name != held_out_name]
    test = [s for s in sequences if s.name == held_out_name]
    return train, test


# --------------------------------------------------------------------------
# on-disk format

def write_sequence(seq: Sequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, ts in enumerate(seq.rgb_ts):
        fn = f"rgb_{i:06d}.rgb"
        (d / fn).write_bytes(np.ascontiguousarray(seq.rgb[i]).tobytes())
        frames.append({"file": fn, "timestamp_us": int(ts), "kind": "rgb"})
    for j, ts in enumerate(seq.depth_ts):
        fn = f"depth_{j:06d}.d16"
        (d / fn).write_bytes(np.ascontiguousarray(seq.depth[j], dtype="<u2").tobytes())
        frames.append({"file": fn, "timestamp_us": int(ts), "kind": "depth"})
    calib_ref = None
    if seq.calibration is not None:
        calib_ref = "calibration.json"
        (d / calib_ref).write_text(json.dumps(seq.calibration, indent=2))
    manifest = {"name": seq.name, "width": seq.width, "height": seq.height,
                "rgb_fps": seq.rgb_fps, "depth_fps": seq.depth_fps,
                "max_depth_mm": seq.max_depth_mm, "calibration": calib_ref, "frames": frames}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def _read_frame(path: Path, nbytes: int, dtype, shape):
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: listed in manifest but missing") from None
    if len(buf) != nbytes:
        raise FormatError(f"{path}: {len(buf)} bytes, expected {nbytes}")
    return np.frombuffer(buf, dtype=dtype).reshape(shape)


def read_sequence(directory) -> Sequence:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        man = json.loads(mpath.read_text())
        name, w, h = man["name"], int(man["width"]), int(man["height"])
        rgb_fps, depth_fps, max_mm = int(man["rgb_fps"]), int(man["depth_fps"]), int(man["max_depth_mm"])
        frames = man["frames"]
    except FileNotFoundError:
        raise FormatError(f"{mpath}: missing") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: malformed manifest ({exc})") from exc
    rgb_f = [f for f in frames if f.get("kind") == "rgb"]
    dep_f = [f for f in frames if f.get("kind") == "depth"]
    on_disk_rgb = len(list(d.glob("*.rgb")))
    on_disk_dep = len(list(d.glob("*.d16")))
    if on_disk_rgb != len(rgb_f) or on_disk_dep != len(dep_f):
        raise FormatError(f"{mpath}: manifest lists {len(rgb_f)} rgb / {len(dep_f)} depth frames, "
                          f"directory holds {on_disk_rgb} / {on_disk_dep}")
    rgb = np.empty((len(rgb_f), h, w, 3), dtype=np.uint8)
    for i, f in enumerate(rgb_f):
        rgb[i] = _read_frame(d / f["file"], w * h * 3, np.uint8, (h, w, 3))
    depth = np.empty((len(dep_f), h, w), dtype=np.uint16)
    for j, f in enumerate(dep_f):
        depth[j] = _read_frame(d / f["file"], w * h * 2, "<u2", (h, w))
    rgb_ts = np.array([f["timestamp_us"] for f in rgb_f], dtype=np.int64)
    depth_ts = np.array([f["timestamp_us"] for f in dep_f], dtype=np.int64)
    for label, ts in (("rgb", rgb_ts), ("depth", depth_ts)):
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise FormatError(f"{mpath}: {label} timestamps not strictly increasing")
    calib = None
    if man.get("calibration"):
        cpath = d / man["calibration"]
        try:
            calib = json.loads(cpath.read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"{cpath}: unreadable calibration ({exc})") from exc
    return Sequence(name, w, h, rgb_fps, depth_fps, max_mm, rgb, rgb_ts, depth, depth_ts, calib)


def list_sequences(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FormatError(f"{root}: dataset directory not found")
    dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not dirs:
        raise FormatError(f"{root}: no sequences (no */manifest.json)")
    return dirs


def read_dataset(dataset_dir) -> list[Sequence]:
    return [read_sequence(p) for p in list_sequences(dataset_dir)]
