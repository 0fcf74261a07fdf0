"""Reference NCHW float32 kernels.

Tensors are plain ``numpy.ndarray`` values of shape (batch, channels, height,
width) and dtype float32. Every kernel is a pure function. Multiply-accumulates
performed by ``conv2d`` and ``avg_pool`` are reported to an optional tally
(see :func:`count_macs`), which gives an execution-level MAdds oracle.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Optional, Tuple, Union

import numpy as np

DTYPE = np.float32

_tally: contextvars.ContextVar = contextvars.ContextVar("mac_tally", default=None)


class ShapeError(ValueError):
    pass


class MacTally:
    def __init__(self):
        self.total = 0
        self.by_kernel = {"conv2d": 0, "avg_pool": 0}

    def add(self, kernel: str, n: int) -> None:
        self.total += n
        self.by_kernel[kernel] += n


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates executed by the kernels inside the block."""
    tally = MacTally()
    token = _tally.set(tally)
    try:
        yield tally
    finally:
        _tally.reset(token)


def _record(kernel: str, n: int) -> None:
    tally = _tally.get()
    if tally is not None:
        tally.add(kernel, int(n))


def as_tensor(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 (b, c, h, w) tensor, got shape {x.shape}")
    return x


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def same_padding(size: int, k: int, stride: int, dilation: int) -> Tuple[int, int, int]:
    """(out, pad_before, pad_after); the odd pixel goes after."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + (k - 1) * dilation + 1 - size, 0)
    return out, total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    return (size - (k - 1) * dilation - 1) // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None, stride=1,
           dilation=1, groups: int = 1, padding: str = "same") -> np.ndarray:
    """Grouped 2-D convolution (cross-correlation).

    ``w`` has shape (out_ch, in_ch // groups, kh, kw). ``groups == in_ch ==
    out_ch`` is a depthwise convolution.
    """
    x = as_tensor(x)
    w = np.asarray(w, dtype=DTYPE)
    b, c, h, wd = x.shape
    if w.ndim != 4:
        raise ShapeError(f"weights must be rank 4, got {w.shape}")
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels in={c} out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weights expect {cg * groups} input channels, tensor has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel must be odd, got {kh}x{kw}")
    if bias is not None and np.shape(bias) != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {np.shape(bias)}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    if padding == "same":
        oh, pt, pb = same_padding(h, kh, sh, dh)
        ow, pl, pr = same_padding(wd, kw, sw, dw)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    elif padding == "valid":
        oh = conv_output_size(h, kh, sh, dh, "valid")
        ow = conv_output_size(wd, kw, sw, dw, "valid")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dh}x{dw}) larger than input {h}x{wd}")

    def tap(i, j):
        return x[:, :, i * dh: i * dh + sh * (oh - 1) + 1: sh,
                 j * dw: j * dw + sw * (ow - 1) + 1: sw]

    og = o // groups
    if groups == 1:
        if kh == kw == 1:
            cols = tap(0, 0).reshape(b, c, oh * ow)
        else:
            cols = np.stack([tap(i, j) for i in range(kh) for j in range(kw)], axis=2)
            cols = cols.reshape(b, c * kh * kw, oh * ow)
        out = np.matmul(w.reshape(o, c * kh * kw), cols).reshape(b, o, oh, ow)
    elif cg == 1 and og == 1:
        out = np.zeros((b, o, oh, ow), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                out += w[:, 0, i, j][None, :, None, None] * tap(i, j)
    else:
        out = np.zeros((b, groups, og, oh, ow), dtype=DTYPE)
        wg = w.reshape(groups, og, cg, kh, kw)
        for i in range(kh):
            for j in range(kw):
                patch = tap(i, j).reshape(b, groups, cg, oh, ow)
                out += np.einsum("gpc,bgchw->bgphw", wg[..., i, j], patch)
        out = out.reshape(b, o, oh, ow)
    if bias is not None:
        out = out + np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    _record("conv2d", b * o * oh * ow * cg * kh * kw)
    return np.ascontiguousarray(out, dtype=DTYPE)


def depthwise_conv2d(x, w, bias=None, stride=1, dilation=1, padding="same"):
    return conv2d(x, w, bias, stride=stride, dilation=dilation, groups=x.shape[1],
                  padding=padding)


def avg_pool(x: np.ndarray, kernel: Union[int, Tuple[int, int], None] = None,
             stride: Union[int, Tuple[int, int], None] = None) -> np.ndarray:
    """Average pooling without padding; ``kernel=None`` pools globally."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    kh, kw = (h, w) if kernel is None else _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if kh > h or kw > w:
        raise ShapeError(f"pool kernel {kh}x{kw} exceeds input {h}x{w}")
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError("pool kernel and stride must be positive")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :oh, :ow]
    out = win.mean(axis=(-2, -1), dtype=DTYPE)
    _record("avg_pool", b * c * oh * ow * kh * kw)
    return np.ascontiguousarray(out, dtype=DTYPE)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return avg_pool(x, None)


def batchnorm_inference(x, scale, bias, mean, var, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    c = x.shape[1]
    params = [np.asarray(p, dtype=DTYPE) for p in (scale, bias, mean, var)]
    for name, p in zip(("scale", "bias", "mean", "var"), params):
        if p.shape != (c,):
            raise ShapeError(f"batchnorm {name} has shape {p.shape}, expected ({c},)")
    scale, bias, mean, var = params
    mult = scale / np.sqrt(var + DTYPE(eps))
    shift = bias - mean * mult
    return (x * mult[None, :, None, None] + shift[None, :, None, None]).astype(DTYPE)


def fold_batchnorm(w, conv_bias, scale, bias, mean, var, eps: float = 1e-5):
    """Fold an inference batchnorm into the preceding convolution's weights."""
    w = np.asarray(w, dtype=DTYPE)
    mult = np.asarray(scale, DTYPE) / np.sqrt(np.asarray(var, DTYPE) + DTYPE(eps))
    b0 = np.zeros(w.shape[0], DTYPE) if conv_bias is None else np.asarray(conv_bias, DTYPE)
    new_w = w * mult[:, None, None, None]
    new_b = (b0 - np.asarray(mean, DTYPE)) * mult + np.asarray(bias, DTYPE)
    return new_w.astype(DTYPE), new_b.astype(DTYPE)


def _interp_axis(n_in: int, n_out: int):
    # half-pixel centres (align_corners=False), clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(DTYPE)
    return lo, hi, frac


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor(x)
    _, _, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    lo, hi, f = _interp_axis(h, out_h)
    rows = x[:, :, lo, :] * (1 - f)[None, None, :, None] + x[:, :, hi, :] * f[None, None, :, None]
    lo, hi, f = _interp_axis(w, out_w)
    out = rows[:, :, :, lo] * (1 - f) + rows[:, :, :, hi] * f
    return np.ascontiguousarray(out, dtype=DTYPE)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return (a + b).astype(DTYPE, copy=False)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise product; ``b`` may be (batch, channels, 1, 1) to scale channels."""
    if b.shape != a.shape and not (
        b.ndim == 4 and b.shape[:2] == a.shape[:2] and b.shape[2:] == (1, 1)
    ):
        raise ShapeError(f"cannot broadcast {b.shape} over {a.shape}")
    return (a * b).astype(DTYPE, copy=False)


def concat(tensors) -> np.ndarray:
    shapes = {(t.shape[0],) + t.shape[2:] for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}")
    return np.concatenate(tensors, axis=1)
