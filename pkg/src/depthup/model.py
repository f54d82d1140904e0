"""Encoder-decoder network that predicts a future depth frame from the previous
depth frame, the matching color frame and a later color frame.

Topology for ``cascades = L`` and ``base_filters = F`` (level k works at the
input size floor-halved k times with F * 2**k filters)::

    color encoder  : [C_t, C_next] (6 ch) -> L x (conv, conv, pool)
    depth encoder  : D_t (1 ch)           -> L x (conv, conv, pool)
    bottleneck     : concat(both) -> bottleneck_convs x conv   (F * 2**L ch)
    decoder        : L x (transposed conv x2, [skip concat], conv)
    next-color tap : C_next -> conv, conv                      (full resolution)
    head           : concat(decoder, [depth tap], [next-color tap]) -> 1x1 linear

The four optional skips are ``skip_D_input`` (depth encoder level-0 features
into the head), ``skip_Cnext_input`` (the next-color tap into the head),
``skip_enc_dec_level1`` (color encoder level 0 into decoder level 0) and
``skip_enc_dec_level2`` (both encoders' level 1 into decoder level 1).
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .metrics import masked_rmse, masked_rmse_grad

SKIP_IDS = ("skip_D_input", "skip_Cnext_input", "skip_enc_dec_level1", "skip_enc_dec_level2")

WEIGHTS_MAGIC = b"ADNW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    cascades: int = 3
    base_filters: int = 8
    input_h: int = 108
    input_w: int = 192
    skip_D_input: bool = True
    skip_Cnext_input: bool = True
    skip_enc_dec_level1: bool = True
    skip_enc_dec_level2: bool = True
    separable: bool = False
    bottleneck_convs: int = 2

    def validate(self) -> "NetworkConfig":
        if self.cascades not in (2, 3, 4, 5):
            raise ConfigError(f"cascades must be in 2..5, got {self.cascades}")
        if self.base_filters < 4:
            raise ConfigError(f"base_filters must be >= 4, got {self.base_filters}")
        if self.bottleneck_convs < 1:
            raise ConfigError(f"bottleneck_convs must be >= 1, got {self.bottleneck_convs}")
        need = 2 ** self.cascades
        if self.input_h < need or self.input_w < need:
            raise ConfigError(f"input {self.input_h}x{self.input_w} too small for "
                              f"{self.cascades} cascades (needs >= {need} per axis)")
        return self

    @property
    def skip_flags(self) -> tuple[bool, bool, bool, bool]:
        return tuple(getattr(self, s) for s in SKIP_IDS)

    def level_dims(self) -> list[tuple[int, int]]:
        """(h, w) at every level 0..cascades; the last entry is the bottleneck."""
        dims = [(self.input_h, self.input_w)]
        for _ in range(self.cascades):
            h, w = dims[-1]
            dims.append((h // 2, w // 2))
        return dims

    @property
    def bottleneck_dims(self) -> tuple[int, int]:
        """(width, height) of the bottleneck feature map."""
        h, w = self.level_dims()[-1]
        return w, h

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d).validate()


def ablate(config: NetworkConfig, drop: str) -> NetworkConfig:
    """Copy of ``config`` with one skip connection removed."""
    if drop not in SKIP_IDS:
        raise ConfigError(f"unknown skip connection {drop!r}; expected one of {SKIP_IDS}")
    return dataclasses.replace(config, **{drop: False})


@dataclass
class Sample:
    """One training/evaluation example; images are (h, w, c) float32 in [0, 1]."""
    c_t: np.ndarray
    d_t: np.ndarray
    c_next: np.ndarray
    gt: np.ndarray
    gt_mask: np.ndarray

    def __post_init__(self):
        hw = self.d_t.shape[:2]
        for name in ("c_t", "c_next", "gt"):
            if getattr(self, name).shape[:2] != hw:
                raise ShapeError(f"sample field {name} has dims {getattr(self, name).shape[:2]}, expected {hw}")
        if self.gt_mask.shape != hw:
            raise ShapeError(f"gt_mask dims {self.gt_mask.shape} != {hw}")

    @property
    def input_mask(self) -> np.ndarray:
        return self.d_t[..., 0] != 0


# --------------------------------------------------------------------------
# layers

class Conv:
    """3x3 (or 1x1) "same" convolution, dense or separable, with optional ReLU."""

    kind = "conv"

    def __init__(self, name, cin, cout, k=3, separable=False, relu=True):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        self.separable = separable and k > 1
        self.relu = relu
        if self.separable:
            self.params = {f"{name}.dw": None, f"{name}.pw": None, f"{name}.b": None}
        else:
            self.params = {f"{name}.w": None, f"{name}.b": None}

    def shapes(self):
        k, cin, cout = self.k, self.cin, self.cout
        if self.separable:
            return {f"{self.name}.dw": (k, k, cin), f"{self.name}.pw": (1, 1, cin, cout),
                    f"{self.name}.b": (cout,)}
        return {f"{self.name}.w": (k, k, cin, cout), f"{self.name}.b": (cout,)}

    def init(self, rng, dtype):
        k, cin, cout = self.k, self.cin, self.cout
        gain = 6.0 if self.relu else 3.0
        for pname, shape in self.shapes().items():
            if pname.endswith(".b"):
                val = np.zeros(shape)
            elif pname.endswith(".dw"):
                val = rng.uniform(-1, 1, shape) * np.sqrt(gain / (k * k))
            elif pname.endswith(".pw"):
                val = rng.uniform(-1, 1, shape) * np.sqrt(gain / cin)
            else:
                val = rng.uniform(-1, 1, shape) * np.sqrt(gain / (k * k * cin))
            self.params[pname] = T.Param(val.astype(dtype))

    def _p(self, suffix):
        return self.params[f"{self.name}.{suffix}"].value

    def forward(self, x):
        if self.separable:
            y = T.separable_conv2d(x, self._p("dw"), self._p("pw"), self._p("b"))
        else:
            y = T.conv2d(x, self._p("w"), self._p("b"))
        return T.relu(y) if self.relu else y

    def forward_train(self, x):
        y = self.forward(x)
        return y, (x, y)

    def backward(self, ctx, gy, need_input=True):
        x, y = ctx
        if self.relu:
            gy = T.relu_backward(y, gy)
        P = self.params
        n = self.name
        if self.separable:
            gx, gdw, gpw, gb = T.separable_conv2d_backward(x, self._p("dw"), self._p("pw"), gy)
            P[f"{n}.dw"].grad += gdw
            P[f"{n}.pw"].grad += gpw
        else:
            gx, gw, gb = T.conv2d_backward(x, self._p("w"), gy, need_input=need_input)
            P[f"{n}.w"].grad += gw
        P[f"{n}.b"].grad += gb
        return gx


class UpConv:
    """2x2 stride-2 transposed convolution + ReLU, padded/cropped to a target size."""

    kind = "conv_transpose"

    def __init__(self, name, cin, cout, out_hw):
        self.name, self.cin, self.cout, self.out_hw = name, cin, cout, out_hw
        self.params = {f"{name}.w": None, f"{name}.b": None}

    def shapes(self):
        return {f"{self.name}.w": (2, 2, self.cout, self.cin), f"{self.name}.b": (self.cout,)}

    def init(self, rng, dtype):
        w = rng.uniform(-1, 1, (2, 2, self.cout, self.cin)) * np.sqrt(6.0 / self.cin)
        self.params[f"{self.name}.w"] = T.Param(w.astype(dtype))
        self.params[f"{self.name}.b"] = T.Param(np.zeros(self.cout, dtype=dtype))

    def forward(self, x):
        y = T.conv2d_transpose(x, self.params[f"{self.name}.w"].value, self.params[f"{self.name}.b"].value)
        return T.pad_to(T.relu(y), *self.out_hw)

    def forward_train(self, x):
        y = T.relu(T.conv2d_transpose(x, self.params[f"{self.name}.w"].value,
                                      self.params[f"{self.name}.b"].value))
        return T.pad_to(y, *self.out_hw), (x, y)

    def backward(self, ctx, gy, need_input=True):
        x, y = ctx
        gy = T.pad_to(gy, y.shape[1], y.shape[2])
        gy = T.relu_backward(y, np.ascontiguousarray(gy))
        gx, gw, gb = T.conv2d_transpose_backward(x, self.params[f"{self.name}.w"].value, gy)
        self.params[f"{self.name}.w"].grad += gw
        self.params[f"{self.name}.b"].grad += gb
        return gx


class Pool:
    kind = "pool"

    def __init__(self, name):
        self.name = name
        self.params = {}

    def shapes(self):
        return {}

    def init(self, rng, dtype):
        pass

    def forward(self, x):
        return T.maxpool2d(x)[0]

    def forward_train(self, x):
        y, arg = T.maxpool2d(x)
        return y, (x.shape, arg)

    def backward(self, ctx, gy, need_input=True):
        shape, arg = ctx
        return T.maxpool2d_backward(gy, arg, shape)


# --------------------------------------------------------------------------
# network

class Network:
    """Layers in topological order plus the wiring between them."""

    def __init__(self, config: NetworkConfig, layers: dict):
        self.config = config
        self.layers = layers

    # -- parameters ---------------------------------------------------------
    def named_params(self):
        for layer in self.layers.values():
            yield from layer.params.items()

    @property
    def params(self) -> list[T.Param]:
        return [p for _, p in self.named_params()]

    @property
    def dtype(self):
        return self.params[0].value.dtype

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def resized(self, input_h: int, input_w: int) -> "Network":
        """The same weights wired for another input size (parameters are shared)."""
        cfg = dataclasses.replace(self.config, input_h=input_h, input_w=input_w).validate()
        twin = _make_layers(cfg)
        for name, layer in twin.items():
            layer.params = self.layers[name].params
        return Network(cfg, twin)

    def astype(self, dtype) -> "Network":
        twin = _make_layers(self.config)
        for name, layer in twin.items():
            layer.params = {k: p.astype(dtype) for k, p in self.layers[name].params.items()}
        return Network(self.config, twin)

    # -- forward / backward -------------------------------------------------
    def _stack(self, batch):
        c_t = np.stack([s.c_t for s in batch]).astype(self.dtype, copy=False)
        d_t = np.stack([s.d_t for s in batch]).astype(self.dtype, copy=False)
        c_next = np.stack([s.c_next for s in batch]).astype(self.dtype, copy=False)
        return c_t, d_t, c_next

    def _check_dims(self, d_t):
        h, w = d_t.shape[1:3]
        if (h, w) != (self.config.input_h, self.config.input_w):
            raise ShapeError(f"input {h}x{w} does not match network input "
                             f"{self.config.input_h}x{self.config.input_w}")

    def forward(self, sample: Sample, profile: dict | None = None) -> np.ndarray:
        """Predicted depth (h, w, 1) for one sample; pure in the weights."""
        out = self.forward_batch(*self._stack([sample]), profile=profile)
        return out[0]

    def forward_batch(self, c_t, d_t, c_next, profile=None):
        out, _ = self._run(c_t, d_t, c_next, tape=None, profile=profile)
        return out

    def forward_train(self, c_t, d_t, c_next):
        tape = {}
        out, _ = self._run(c_t, d_t, c_next, tape=tape)
        return out, tape

    def _run(self, c_t, d_t, c_next, tape=None, profile=None):
        self._check_dims(d_t)
        cfg = self.config
        L = cfg.cascades

        def run(name, x):
            layer = self.layers[name]
            t0 = time.perf_counter() if profile is not None else 0.0
            if tape is None:
                y = layer.forward(x)
            else:
                y, tape[name] = layer.forward_train(x)
            if profile is not None:
                key = layer.kind
                profile[key] = profile.get(key, 0.0) + time.perf_counter() - t0
            return y

        def cat(*parts):
            t0 = time.perf_counter() if profile is not None else 0.0
            y = T.concat_channels(*parts) if len(parts) > 1 else parts[0]
            if profile is not None:
                profile["concat"] = profile.get("concat", 0.0) + time.perf_counter() - t0
            return y

        r = cat(c_t, c_next)
        d = d_t
        enc_r, enc_d = [], []
        for k in range(L):
            r = run(f"rgb{k}b", run(f"rgb{k}a", r))
            d = run(f"dep{k}b", run(f"dep{k}a", d))
            enc_r.append(r)
            enc_d.append(d)
            r = run(f"rgb{k}_pool", r)
            d = run(f"dep{k}_pool", d)
        tap = run("cnext_b", run("cnext_a", c_next)) if cfg.skip_Cnext_input else None
        z = cat(r, d)
        for j in range(cfg.bottleneck_convs):
            z = run(f"mid{j}", z)
        for k in reversed(range(L)):
            z = run(f"up{k}", z)
            if k == 1 and cfg.skip_enc_dec_level2:
                z = cat(z, enc_r[1], enc_d[1])
            elif k == 0 and cfg.skip_enc_dec_level1:
                z = cat(z, enc_r[0])
            z = run(f"dec{k}", z)
        parts = [z]
        if cfg.skip_D_input:
            parts.append(enc_d[0])
        if tap is not None:
            parts.append(tap)
        out = run("head", cat(*parts))
        return out, None

    def backward(self, tape, grad_out):
        """Accumulate parameter gradients for ``grad_out = dLoss/d(output)``."""
        cfg = self.config
        L = cfg.cascades
        F = cfg.base_filters

        def back(name, g, need_input=True):
            return self.layers[name].backward(tape[name], g, need_input)

        g = back("head", grad_out)
        widths = [F]
        if cfg.skip_D_input:
            widths.append(F)
        if cfg.skip_Cnext_input:
            widths.append(F)
        parts = T.split_channels(g, widths)
        g_z = parts[0]
        g_enc_r = [None] * L
        g_enc_d = [None] * L
        i = 1
        if cfg.skip_D_input:
            g_enc_d[0] = parts[i]
            i += 1
        if cfg.skip_Cnext_input:
            back("cnext_a", back("cnext_b", np.ascontiguousarray(parts[i])), need_input=False)

        def acc(store, k, g):
            g = np.ascontiguousarray(g)
            store[k] = g if store[k] is None else store[k] + g

        for k in range(L):
            g_z = back(f"dec{k}", np.ascontiguousarray(g_z))
            fk = F * 2 ** k
            if k == 1 and cfg.skip_enc_dec_level2:
                gz, gr, gd = T.split_channels(g_z, [fk, F * 2, F * 2])
                acc(g_enc_r, 1, gr)
                acc(g_enc_d, 1, gd)
                g_z = gz
            elif k == 0 and cfg.skip_enc_dec_level1:
                gz, gr = T.split_channels(g_z, [fk, F])
                acc(g_enc_r, 0, gr)
                g_z = gz
            g_z = back(f"up{k}", np.ascontiguousarray(g_z))
        for j in reversed(range(cfg.bottleneck_convs)):
            g_z = back(f"mid{j}", g_z)
        half = g_z.shape[3] // 2
        g_r, g_d = (np.ascontiguousarray(a) for a in T.split_channels(g_z, [half, half]))
        for k in reversed(range(L)):
            g_r = back(f"rgb{k}_pool", g_r)
            g_d = back(f"dep{k}_pool", g_d)
            if g_enc_r[k] is not None:
                g_r = g_r + g_enc_r[k]
            if g_enc_d[k] is not None:
                g_d = g_d + g_enc_d[k]
            first = k == 0
            g_r = back(f"rgb{k}a", back(f"rgb{k}b", g_r), need_input=not first)
            g_d = back(f"dep{k}a", back(f"dep{k}b", g_d), need_input=not first)


def _make_layers(cfg: NetworkConfig) -> dict:
    F, L, sep = cfg.base_filters, cfg.cascades, cfg.separable
    dims = cfg.level_dims()
    layers = {}

    def add(layer):
        layers[layer.name] = layer

    for k in range(L):
        fk = F * 2 ** k
        add(Conv(f"rgb{k}a", 6 if k == 0 else fk // 2, fk, separable=sep))
        add(Conv(f"rgb{k}b", fk, fk, separable=sep))
        add(Conv(f"dep{k}a", 1 if k == 0 else fk // 2, fk, separable=sep))
        add(Conv(f"dep{k}b", fk, fk, separable=sep))
        add(Pool(f"rgb{k}_pool"))
        add(Pool(f"dep{k}_pool"))
    if cfg.skip_Cnext_input:
        add(Conv("cnext_a", 3, F, separable=sep))
        add(Conv("cnext_b", F, F, separable=sep))
    width = F * 2 ** L
    for j in range(cfg.bottleneck_convs):
        add(Conv(f"mid{j}", width, width, separable=sep))
    cin = width
    for k in reversed(range(L)):
        fk = F * 2 ** k
        add(UpConv(f"up{k}", cin, fk, dims[k]))
        extra = 0
        if k == 1 and cfg.skip_enc_dec_level2:
            extra = 2 * fk
        elif k == 0 and cfg.skip_enc_dec_level1:
            extra = fk
        add(Conv(f"dec{k}", fk + extra, fk, separable=sep))
        cin = fk
    head_in = F + F * cfg.skip_D_input + F * cfg.skip_Cnext_input
    add(Conv("head", head_in, 1, k=1, relu=False))
    return layers


def build(config: NetworkConfig, seed: int = 0, dtype=T.FAST) -> Network:
    """Instantiate and initialize the network; deterministic in ``seed``."""
    config.validate()
    layers = _make_layers(config)
    rng = np.random.default_rng(seed)
    for layer in layers.values():
        layer.init(rng, dtype)
    return Network(config, layers)


def param_count(net: Network) -> int:
    return sum(p.size for p in net.params)


# --------------------------------------------------------------------------
# training

def stack_targets(batch, dtype):
    gt = np.stack([s.gt[..., 0] if s.gt.ndim == 3 else s.gt for s in batch]).astype(dtype, copy=False)
    mask = np.stack([s.gt_mask for s in batch])
    return gt, mask


def train_step(net: Network, batch: list[Sample], lr: float = 1e-3) -> float:
    """One Adam step on the batch's masked RMSE (union of valid pixels)."""
    if not batch:
        raise TrainingError("empty batch")
    gt, mask = stack_targets(batch, net.dtype)
    if not mask.any():
        raise TrainingError("no valid ground-truth pixels in batch; loss undefined")
    out, tape = net.forward_train(*net._stack(batch))
    pred = out[..., 0]
    loss = masked_rmse(pred, gt, mask)
    grad = masked_rmse_grad(pred, gt, mask)[..., None]
    net.zero_grad()
    net.backward(tape, grad)
    for p in net.params:
        T.adam_step(p, lr)
    net.zero_grad()
    return loss


# --------------------------------------------------------------------------
# weights file

def save_weights(net: Network, path) -> None:
    """Write ``ADNW`` | u32 version | u32 len + config JSON | u32 count |
    per parameter: u32 ndim, u32 dims..., float32 data (little-endian)."""
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION), struct.pack("<I", len(cfg)), cfg]
    params = net.params
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        v = p.value
        chunks.append(struct.pack(f"<I{v.ndim}I", v.ndim, *v.shape))
        chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".weights-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path, expect: NetworkConfig | None = None) -> Network:
    """Read a weights file; with ``expect`` the stored config must match it."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4, "magic") != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic (not a weights file)")
    version = r.u32("version")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {WEIGHTS_VERSION})")
    try:
        cfg_dict = json.loads(r.take(r.u32("config length"), "config").decode())
        config = NetworkConfig.from_dict(cfg_dict)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from exc
    if expect is not None:
        diffs = [f"{k}: file={v!r} expected={getattr(expect, k)!r}"
                 for k, v in config.to_dict().items() if getattr(expect, k) != v]
        if diffs:
            raise FormatError(f"{path}: config mismatch: " + "; ".join(diffs))
    net = build(config, seed=0)
    named = list(net.named_params())
    count = r.u32("parameter count")
    if count != len(named):
        raise FormatError(f"{path}: {count} parameters stored, config implies {len(named)}")
    values = []
    for name, p in named:
        ndim = r.u32(f"{name} rank")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} dims"))
        if dims != p.value.shape:
            raise FormatError(f"{path}: parameter {name} has dims {dims}, expected {p.value.shape}")
        n = int(np.prod(dims))
        values.append(np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(dims))
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    for (_, p), v in zip(named, values):
        p.value[...] = v
    return net
