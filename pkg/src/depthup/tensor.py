"""Dense NHWC layers with hand-written backward passes, Adam and a gradient checker.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out (n, h, w, c).
Every op preserves the dtype of its inputs: float32 is the working precision
for training and inference, float64 is used by the gradient tests. Mixing the
two is a caller bug, so conversions are always explicit (``astype``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError
from .kernels import conv as K

FAST = np.float32
PRECISE = np.float64


def as_tensor(x, dtype=FAST) -> np.ndarray:
    """Coerce ``x`` to a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected an (n, h, w, c) tensor, got shape {arr.shape}")
    return arr


def _check_input(x):
    if x.ndim != 4:
        raise ShapeError(f"expected an (n, h, w, c) tensor, got shape {x.shape}")
    if x.size == 0:
        raise ShapeError(f"zero-sized input {x.shape}")


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding so that out = ceil(size / stride).

    Odd totals put the extra pixel after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pads(x, kh, kw, stride, padding):
    if padding == "same":
        return same_padding(x.shape[1], kh, stride), same_padding(x.shape[2], kw, stride)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + pad - k) // stride + 1


def _pad(x, ph, pw):
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _geometry(x, kernel, stride, padding):
    _check_input(x)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    ph, pw = _pads(x, kh, kw, stride, padding)
    oh = conv_output_size(x.shape[1], kh, stride, sum(ph))
    ow = conv_output_size(x.shape[2], kw, stride, sum(pw))
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape[1:3]}")
    return ph, pw, oh, ow


def _shift_offsets(kh, kw, wp):
    return [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]


def _conv_s1(xp, kernel, oh, ow):
    # Stride-1 correlation as kh*kw GEMMs over contiguous shifted views of the
    # flattened padded grid; rows that wrap across a border are cropped away.
    n, hp, wp, cin = xp.shape
    kh, kw, _, cout = kernel.shape
    flat = xp.reshape(-1, cin)
    total = flat.shape[0]
    m = total - ((kh - 1) * wp + kw - 1)
    y = np.zeros((total, cout), dtype=xp.dtype)
    for i, j, off in _shift_offsets(kh, kw, wp):
        y[:m] += flat[off:off + m] @ kernel[i, j]
    return y.reshape(n, hp, wp, cout)[:, :oh, :ow, :]


def _conv_s1_backward(xp, kernel, grad_out, need_input=True):
    n, hp, wp, cin = xp.shape
    kh, kw, _, cout = kernel.shape
    _, oh, ow, _ = grad_out.shape
    flat = xp.reshape(-1, cin)
    total = flat.shape[0]
    m = total - ((kh - 1) * wp + kw - 1)
    grid = np.zeros((n, hp, wp, cout), dtype=grad_out.dtype)
    grid[:, :oh, :ow, :] = grad_out
    g = grid.reshape(-1, cout)[:m]
    gk = np.empty(kernel.shape, dtype=kernel.dtype)
    gxp = np.zeros((total, cin), dtype=xp.dtype) if need_input else None
    for i, j, off in _shift_offsets(kh, kw, wp):
        gk[i, j] = flat[off:off + m].T @ g
        if need_input:
            gxp[off:off + m] += g @ kernel[i, j].T
    if need_input:
        gxp = gxp.reshape(n, hp, wp, cin)
    return gxp, gk


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """Cross-correlation of NHWC ``x`` with a (kh, kw, cin, cout) kernel, plus bias."""
    ph, pw, oh, ow = _geometry(x, kernel, stride, padding)
    kh, kw, cin, cout = kernel.shape
    xp = _pad(x, ph, pw)
    if kh == 1 and kw == 1 and stride == 1:
        y = (xp.reshape(-1, cin) @ kernel.reshape(cin, cout)).reshape(x.shape[0], oh, ow, cout)
    elif stride == 1:
        y = np.ascontiguousarray(_conv_s1(xp, kernel, oh, ow))
    else:
        cols = K.im2col(xp, kh, kw, stride, oh, ow).reshape(-1, kh * kw * cin)
        y = (cols @ kernel.reshape(-1, cout)).reshape(x.shape[0], oh, ow, cout)
    if bias is not None:
        y += bias
    return y


def _conv_grad_input(x_shape, kernel, grad_out, stride, ph, pw):
    kh, kw, cin, cout = kernel.shape
    n, h, w, _ = x_shape
    _, oh, ow, _ = grad_out.shape
    if kh == 1 and kw == 1 and stride == 1:
        return (grad_out.reshape(-1, cout) @ kernel.reshape(cin, cout).T).reshape(n, h, w, cin)
    if kh == 2 and kw == 2 and stride == 2 and ph == (0, 0) and pw == (0, 0):
        # non-overlapping scatter: one GEMM, then interleave the 2x2 blocks
        blk = grad_out.reshape(-1, cout) @ kernel.reshape(4, cin, cout).transpose(2, 0, 1).reshape(cout, 4 * cin)
        blk = blk.reshape(n, oh, ow, 2, 2, cin).transpose(0, 1, 3, 2, 4, 5)
        out = np.zeros((n, h, w, cin), dtype=grad_out.dtype)
        out[:, :2 * oh, :2 * ow, :] = blk.reshape(n, 2 * oh, 2 * ow, cin)
        return out
    gcols = (grad_out.reshape(-1, cout) @ kernel.reshape(-1, cout).T).reshape(n, oh, ow, kh, kw, cin)
    gxp = K.col2im(gcols, h + sum(ph), w + sum(pw), stride)
    return np.ascontiguousarray(gxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :])


def conv2d_backward(x, kernel, grad_out, stride=1, padding="same", need_input=True):
    """Gradients of ``conv2d`` w.r.t. input, kernel and bias.

    ``need_input=False`` skips the input gradient (returned as None), which
    the network uses for layers fed directly by data.
    """
    ph, pw, oh, ow = _geometry(x, kernel, stride, padding)
    if grad_out.shape != (x.shape[0], oh, ow, kernel.shape[3]):
        raise ShapeError(f"grad_out {grad_out.shape} does not match conv output "
                         f"{(x.shape[0], oh, ow, kernel.shape[3])}")
    kh, kw, cin, cout = kernel.shape
    g2 = grad_out.reshape(-1, cout)
    grad_bias = g2.sum(axis=0)
    xp = _pad(x, ph, pw)
    if stride == 1 and (kh > 1 or kw > 1):
        gxp, grad_kernel = _conv_s1_backward(xp, kernel, grad_out, need_input)
        grad_input = None
        if need_input:
            h, w = x.shape[1:3]
            grad_input = np.ascontiguousarray(gxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :])
        return grad_input, grad_kernel, grad_bias
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(-1, cin)
    else:
        cols = K.im2col(xp, kh, kw, stride, oh, ow).reshape(-1, kh * kw * cin)
    grad_kernel = (cols.T @ g2).reshape(kernel.shape)
    grad_input = _conv_grad_input(x.shape, kernel, grad_out, stride, ph, pw) if need_input else None
    return grad_input, grad_kernel, grad_bias


# --------------------------------------------------------------------------
# depthwise + pointwise

def depthwise_conv2d(x, dw_kernel, padding="same"):
    _check_input(x)
    kh, kw, c = dw_kernel.shape
    if x.shape[3] != c:
        raise ShapeError(f"input has {x.shape[3]} channels, depthwise kernel expects {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise kernels must be odd-sized, got {kh}x{kw}")
    ph, pw = _pads(x, kh, kw, 1, padding)
    oh = conv_output_size(x.shape[1], kh, 1, sum(ph))
    ow = conv_output_size(x.shape[2], kw, 1, sum(pw))
    return K.depthwise(_pad(x, ph, pw), dw_kernel, oh, ow)


def depthwise_conv2d_backward(x, dw_kernel, grad_out, padding="same"):
    kh, kw, _ = dw_kernel.shape
    ph, pw = _pads(x, kh, kw, 1, padding)
    xp = _pad(x, ph, pw)
    gk = K.depthwise_grad_kernel(xp, grad_out, kh, kw)
    gxp = K.depthwise_grad_input(grad_out, dw_kernel, xp.shape[1], xp.shape[2])
    h, w = x.shape[1:3]
    return np.ascontiguousarray(gxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]), gk


def separable_conv2d(x, dw_kernel, pw_kernel, bias=None, padding="same"):
    """Depthwise (kh, kw, cin) filter per channel, then a (1, 1, cin, cout) mix."""
    if pw_kernel.shape[:2] != (1, 1) or pw_kernel.shape[2] != dw_kernel.shape[2]:
        raise ShapeError(f"pointwise kernel {pw_kernel.shape} incompatible with "
                         f"depthwise kernel {dw_kernel.shape}")
    mid = depthwise_conv2d(x, dw_kernel, padding)
    return conv2d(mid, pw_kernel, bias, 1, "same")


def separable_conv2d_backward(x, dw_kernel, pw_kernel, grad_out, padding="same"):
    """Returns (grad_input, grad_dw, grad_pw, grad_bias)."""
    mid = depthwise_conv2d(x, dw_kernel, padding)
    g_mid, g_pw, g_b = conv2d_backward(mid, pw_kernel, grad_out, 1, "same")
    g_x, g_dw = depthwise_conv2d_backward(x, dw_kernel, g_mid, padding)
    return g_x, g_dw, g_pw, g_b


def conv_macs(kh, kw, cin, cout, separable=False) -> int:
    """Multiply-accumulates per output pixel."""
    if separable:
        return kh * kw * cin + cin * cout
    return kh * kw * cin * cout


# --------------------------------------------------------------------------
# transposed convolution (adjoint of a stride-s "same" convolution)

def conv2d_transpose(x, kernel, bias=None, stride=2):
    """Upsample ``x`` by ``stride`` with a (kh, kw, cout, cin) kernel.

    Defined as the adjoint of ``conv2d(y, kernel, stride=stride, padding="same")``
    on an output ``y`` of size (h*stride, w*stride): each input pixel scatters a
    weighted copy of the kernel.
    """
    _check_input(x)
    kh, kw, cout, cin = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels, transposed kernel expects {cin}")
    n, h, w, _ = x.shape
    H, W = h * stride, w * stride
    ph, pw = same_padding(H, kh, stride), same_padding(W, kw, stride)
    y = _conv_grad_input((n, H, W, cout), kernel, x, stride, ph, pw)
    if bias is not None:
        y += bias
    return y


def conv2d_transpose_backward(x, kernel, grad_out, stride=2):
    """Returns (grad_input, grad_kernel, grad_bias) for ``conv2d_transpose``."""
    kh, kw, cout, cin = kernel.shape
    n, h, w, _ = x.shape
    H, W = h * stride, w * stride
    if grad_out.shape != (n, H, W, cout):
        raise ShapeError(f"grad_out {grad_out.shape} does not match {(n, H, W, cout)}")
    ph, pw = same_padding(H, kh, stride), same_padding(W, kw, stride)
    if kh == 2 and kw == 2 and stride == 2:
        cols = grad_out.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    else:
        gp = _pad(grad_out, ph, pw)
        cols = K.im2col(gp, kh, kw, stride, h, w).reshape(-1, kh * kw * cout)
    grad_input = (cols @ kernel.reshape(-1, cin)).reshape(n, h, w, cin)
    grad_kernel = (cols.T @ x.reshape(-1, cin)).reshape(kernel.shape)
    grad_bias = grad_out.reshape(-1, cout).sum(axis=0)
    return grad_input, grad_kernel, grad_bias


# --------------------------------------------------------------------------
# pooling, activation, concatenation, resizing glue

def maxpool2d(x):
    """2x2 max pool, stride 2. Trailing odd rows/columns are dropped."""
    _check_input(x)
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"maxpool needs h, w >= 2, got {x.shape[1:3]}")
    return K.maxpool(np.ascontiguousarray(x))


def maxpool2d_backward(grad_out, argmax, input_shape):
    return K.maxpool_grad(np.ascontiguousarray(grad_out), argmax, input_shape[1], input_shape[2])


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(*tensors):
    """Concatenate along channels; earlier arguments come first."""
    ref = tensors[0].shape[:3]
    for t in tensors[1:]:
        if t.shape[:3] != ref:
            raise ShapeError(f"cannot concat {t.shape} with leading dims {ref}")
    return np.concatenate(tensors, axis=3)


def split_channels(grad, sizes):
    """Inverse routing of ``concat_channels`` for a gradient."""
    out, start = [], 0
    for s in sizes:
        out.append(grad[..., start:start + s])
        start += s
    return out


def pad_to(x, h, w):
    """Zero-pad bottom/right (or crop) to spatial size (h, w)."""
    dh, dw = h - x.shape[1], w - x.shape[2]
    if dh == 0 and dw == 0:
        return x
    x = x[:, :min(h, x.shape[1]), :min(w, x.shape[2]), :]
    return np.pad(x, ((0, 0), (0, max(dh, 0)), (0, max(dw, 0)), (0, 0)))


# --------------------------------------------------------------------------
# parameters and Adam

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "Param":
        p = Param(self.value.astype(dtype))
        p.adam_m[...] = self.adam_m
        p.adam_v[...] = self.adam_v
        p.step_count = self.step_count
        return p


def adam_step(param: Param, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> Param:
    """One bias-corrected Adam update, in place. The gradient is left untouched."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient")
    param.step_count += 1
    t = param.step_count
    param.adam_m *= beta1
    param.adam_m += (1 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1 - beta2) * g * g
    m_hat = param.adam_m / (1 - beta1 ** t)
    v_hat = param.adam_v / (1 - beta2 ** t)
    param.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype)
    return param


# --------------------------------------------------------------------------
# finite-difference checking

def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|)``."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(f, x, step=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``indices`` restricts the check to a subset of flat positions; the result
    then holds values only at those positions.
    """
    flat = x.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def grad_check(loss_fn, arrays, analytic, step=1e-5, indices=None) -> float:
    """Worst relative error between ``analytic`` gradients and central differences.

    ``arrays`` maps names to float64 arrays that ``loss_fn()`` reads; each is
    perturbed in place. ``analytic`` maps the same names to gradient arrays.
    ``indices`` optionally maps names to flat positions to sample.
    """
    worst = 0.0
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 arrays, {name} is {arr.dtype}")
        idx = None if indices is None else indices.get(name)
        num = numeric_gradient(loss_fn, arr, step, idx)
        ana = np.asarray(analytic[name], dtype=np.float64)
        if idx is not None:
            num = num.reshape(-1)[idx]
            ana = ana.reshape(-1)[idx]
        worst = max(worst, relative_error(ana, num))
    return worst


def layer_grad_check(forward, backward, arrays, seed=0, step=1e-5) -> float:
    """Grad-check a layer through the scalar probe ``sum(forward() * R)``.

    ``forward()`` computes the layer output from ``arrays``; ``backward(R)``
    returns a dict of analytic gradients keyed like ``arrays``.
    """
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(forward().shape)

    def loss():
        return float(np.sum(forward() * probe))

    return grad_check(loss, arrays, backward(probe), step)
