"""Forward numerical kernels on rank-4 ``(n, c, h, w)`` arrays.

Tensors are plain :class:`numpy.ndarray` objects in row-major (C) order, so
element ``(n, c, y, x)`` lives at flat index ``((n*C + c)*H + y)*W + x``.
Kernels are pure functions; they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import profiling


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a kernel."""


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Validate and return ``data`` as a contiguous rank-4 tensor."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


@dataclass
class ConvWeights:
    """Kernel of shape ``(c_out, c_in, k_h, k_w)`` and a bias of length ``c_out``.

    The same layout is used for transposed convolutions: ``c_in`` is then the
    channel count of the (low resolution) input being scattered.
    """

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} != c_out {self.kernel.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


def conv_out_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           pad: int = 0, stride: int = 1) -> np.ndarray:
    """2-D cross-correlation with zero padding."""
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    oh, ow = conv_out_size(h, kh, pad, stride), conv_out_size(w, kw, pad, stride)
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive output size {(oh, ow)}")
    profiling.add_macs(n * c_out * oh * ow * c_in * kh * kw)
    if kh == 1 and kw == 1 and pad == 0 and stride == 1:
        out = np.einsum("oc,nchw->nohw", kernel[:, :, 0, 0], x, optimize=True)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = cols[:, :, : (oh - 1) * stride + 1: stride, : (ow - 1) * stride + 1: stride]
        # (n, c, oh, ow, kh, kw) x (o, c, kh, kw) -> (n, oh, ow, o)
        out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(gy: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    pad: int = 0, stride: int = 1):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    oh, ow = gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernel)
    ys, xs = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + ys:stride, j:j + xs:stride]
            gk[:, :, i, j] = np.tensordot(gy, patch, axes=([0, 2, 3], [0, 2, 3]))
            gxp[:, :, i:i + ys:stride, j:j + xs:stride] += np.einsum(
                "oc,nohw->nchw", kernel[:, :, i, j], gy, optimize=True)
    gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    gb = gy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gk, gb


def conv_transpose_out_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size - 1) * stride + k - 2 * pad


def conv_transpose2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
                     stride: int = 2, pad: int = 1) -> np.ndarray:
    """Transposed convolution: every input pixel scatters a weighted kernel.

    ``kernel`` has shape ``(c_out, c_in, k, k)``. The full scatter grid of side
    ``(h - 1)*stride + k`` is cropped by ``pad`` on every side.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    oh = conv_transpose_out_size(h, kh, pad, stride)
    ow = conv_transpose_out_size(w, kw, pad, stride)
    if oh != stride * h or ow != stride * w:
        raise ShapeError(
            f"k={kh}x{kw}, stride={stride}, pad={pad} does not give an exact "
            f"x{stride} output ({h}x{w} -> {oh}x{ow})")
    profiling.add_macs(n * h * w * c_out * c_in * kh * kw)
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    full = np.zeros((n, c_out, fh, fw), dtype=x.dtype)
    ys, xs = (h - 1) * stride + 1, (w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + ys:stride, j:j + xs:stride] += np.einsum(
                "oc,nchw->nohw", kernel[:, :, i, j], x, optimize=True)
    out = full[:, :, pad:pad + oh, pad:pad + ow]
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv_transpose2d_backward(gy: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                              stride: int = 2, pad: int = 1):
    n, c, h, w = x.shape
    kh, kw = kernel.shape[2:]
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    gfull = np.zeros((n, gy.shape[1], fh, fw), dtype=gy.dtype)
    gfull[:, :, pad:pad + gy.shape[2], pad:pad + gy.shape[3]] = gy
    gx = np.zeros_like(x)
    gk = np.empty_like(kernel)
    ys, xs = (h - 1) * stride + 1, (w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            g = gfull[:, :, i:i + ys:stride, j:j + xs:stride]
            gx += np.einsum("oc,nohw->nchw", kernel[:, :, i, j], g, optimize=True)
            gk[:, :, i, j] = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))
    return gx, gk, gy.sum(axis=(0, 2, 3))


def pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Rearrange ``(n, c*s*s, h, w)`` into ``(n, c, h*s, w*s)``."""
    n, c, h, w = x.shape
    if c % (s * s):
        raise ShapeError(f"channels {c} not divisible by {s}^2")
    out = x.reshape(n, c // (s * s), s, s, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, c // (s * s), h * s, w * s))


def pixel_unshuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, hs, ws = x.shape
    if hs % s or ws % s:
        raise ShapeError(f"spatial dims {(hs, ws)} not divisible by {s}")
    h, w = hs // s, ws // s
    out = x.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * s * s, h, w))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat_channels(parts) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ShapeError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {p.shape} with {ref}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def ew_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def ew_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a * b


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; leading axes are treated as a batch."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    profiling.add_macs(int(np.prod(out.shape)) * a.shape[-1])
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    e = m - m.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` bicubic interpolation matrix along one axis.

    Half-pixel-centre mapping ``src = (dst + 0.5) * n_in / n_out - 0.5``;
    samples outside the source are clamped to the edge.
    """
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for off in (-1, 0, 1, 2):
        idx = base + off
        wts = cubic_kernel(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wts)
    return mat


def bicubic_resize(img: np.ndarray, scale_num: int, scale_den: int) -> np.ndarray:
    """Resize the last two axes by ``scale_num / scale_den`` (floored)."""
    h, w = img.shape[-2:]
    oh, ow = h * scale_num // scale_den, w * scale_num // scale_den
    if oh < 1 or ow < 1:
        raise ShapeError(f"target size {(oh, ow)} is empty")
    my, mx = resize_matrix(h, oh), resize_matrix(w, ow)
    out = np.einsum("ph,...hw,qw->...pq", my, img.astype(np.float64), mx, optimize=True)
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
