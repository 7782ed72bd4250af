"""Layer specifications and their forward/backward kernels.

Every parameterized layer stores its parameters as one flat vector
(weights row-major, then bias). Kernels work in whatever float dtype the
inputs carry, so the same code serves float32 training and float64
gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DENSE = "dense"
CONV2D = "conv2d"
CONV_T2D = "conv_transpose2d"
RELU = "relu"
SIGMOID = "sigmoid"
RESHAPE = "reshape"

KINDS = (DENSE, CONV2D, CONV_T2D, RELU, SIGMOID, RESHAPE)
PARAMETERIZED = (DENSE, CONV2D, CONV_T2D)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an encoder or decoder.

    dims by kind:
        dense: (in, out)
        conv2d / conv_transpose2d: (in_ch, out_ch, kh, kw, stride, padding)
        reshape: target per-sample shape
        relu / sigmoid: ()
    """

    kind: str
    dims: tuple[int, ...] = ()
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = {DENSE: 2, CONV2D: 6, CONV_T2D: 6, RELU: 0, SIGMOID: 0}.get(self.kind)
        if expected is not None and len(self.dims) != expected:
            raise ValueError(f"{self.kind} takes {expected} dims, got {self.dims}")
        positive = self.dims[:5] if self.kind in (CONV2D, CONV_T2D) else self.dims
        if any(d <= 0 for d in positive) or any(d < 0 for d in self.dims):
            raise ValueError(f"{self.kind} dims out of range: {self.dims}")
        if self.kind == RESHAPE and not self.dims:
            raise ValueError("reshape needs a target shape")
        if self.kind not in PARAMETERIZED:
            object.__setattr__(self, "has_bias", False)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == DENSE:
            d_in, d_out = self.dims
            return (d_out, d_in)
        if self.kind == CONV2D:
            cin, cout, kh, kw = self.dims[:4]
            return (cout, cin, kh, kw)
        if self.kind == CONV_T2D:
            cin, cout, kh, kw = self.dims[:4]
            return (cin, cout, kh, kw)
        return (0,)

    @property
    def n_bias(self) -> int:
        if not self.has_bias:
            return 0
        return self.dims[1]

    @property
    def param_count(self) -> int:
        if self.kind not in PARAMETERIZED:
            return 0
        return math.prod(self.weight_shape) + self.n_bias

    def fan_dims(self) -> tuple[int, int]:
        """(d_in, d_out) used for sparsity allocation."""
        if self.kind == DENSE:
            return self.dims[0], self.dims[1]
        if self.kind in (CONV2D, CONV_T2D):
            cin, cout, kh, kw = self.dims[:4]
            return cin * kh * kw, cout
        return 0, 0

    def fan_in(self) -> float:
        """Inputs feeding one output unit (for initialization)."""
        if self.kind == CONV_T2D:
            cin, _, kh, kw, stride, _ = self.dims
            return cin * kh * kw / (stride * stride)
        return self.fan_dims()[0]

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        in_shape = tuple(in_shape)
        if self.kind in (RELU, SIGMOID):
            return in_shape
        if self.kind == RESHAPE:
            if math.prod(in_shape) != math.prod(self.dims):
                raise ShapeError(f"cannot reshape {in_shape} to {self.dims}")
            return self.dims
        if self.kind == DENSE:
            if in_shape != (self.dims[0],):
                raise ShapeError(f"dense expects input ({self.dims[0]},), got {in_shape}")
            return (self.dims[1],)
        cin, cout, kh, kw, s, p = self.dims
        if len(in_shape) != 3 or in_shape[0] != cin:
            raise ShapeError(f"{self.kind} expects ({cin}, H, W) input, got {in_shape}")
        _, h, w = in_shape
        if self.kind == CONV2D:
            oh, ow = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
            if h + 2 * p < kh or w + 2 * p < kw:
                raise ShapeError(f"kernel {kh}x{kw} larger than padded input {in_shape}")
        else:
            oh, ow = (h - 1) * s - 2 * p + kh, (w - 1) * s - 2 * p + kw
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"{self.kind} on {in_shape} yields empty output")
        return (cout, oh, ow)

    def split(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Views of the weight tensor and bias vector inside ``flat``."""
        nw = flat.size - self.n_bias
        w = flat[:nw].reshape(self.weight_shape)
        b = flat[nw:] if self.has_bias else None
        return w, b


def _im2col(x, kh, kw, stride, pad, oh, ow):
    """(N, C, H, W) -> (N, oh, ow, C*kh*kw), column order (C, kh, kw)."""
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh, ow, c * kh * kw)


def _col2im(cols, shape, kh, kw, stride, pad, oh, ow):
    """Adjoint of :func:`_im2col`; overlapping windows accumulate."""
    n, c, h, w = shape
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def layer_forward(spec: LayerSpec, flat: np.ndarray, x: np.ndarray):
    """Returns (y, cache) for a batch ``x`` whose first axis is the batch."""
    kind = spec.kind
    if kind == RELU:
        return np.maximum(x, 0), x
    if kind == SIGMOID:
        with np.errstate(over="ignore"):
            y = 1 / (1 + np.exp(-x))
        return y, y
    if kind == RESHAPE:
        return x.reshape((x.shape[0],) + spec.dims), x.shape
    w, b = spec.split(flat)
    if kind == DENSE:
        y = x @ w.T
        if b is not None:
            y = y + b
        return y, x
    cin, cout, kh, kw, s, p = spec.dims
    n = x.shape[0]
    _, oh, ow = spec.output_shape(x.shape[1:])
    if kind == CONV2D:
        cols = _im2col(x, kh, kw, s, p, oh, ow)
        y = cols @ w.reshape(cout, -1).T
        if b is not None:
            y = y + b
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (x.shape, cols)
    # transposed conv = adjoint of a conv mapping cout -> cin with the same kernel
    xt = x.transpose(0, 2, 3, 1)
    h, wd = x.shape[2:]
    cols = xt @ w.reshape(cin, -1)
    y = _col2im(cols, (n, cout, oh, ow), kh, kw, s, p, h, wd)
    if b is not None:
        y = y + b[:, None, None]
    return y, x


def layer_backward(spec: LayerSpec, flat: np.ndarray, cache, gy: np.ndarray):
    """Returns (grad wrt input, flat grad wrt params or None)."""
    kind = spec.kind
    if kind == RELU:
        return gy * (cache > 0), None
    if kind == SIGMOID:
        return gy * cache * (1 - cache), None
    if kind == RESHAPE:
        return gy.reshape(cache), None
    w, b = spec.split(flat)
    if kind == DENSE:
        x = cache
        gw = gy.T @ x
        gx = gy @ w
        parts = [gw.ravel()]
        if b is not None:
            parts.append(gy.sum(axis=0))
        return gx, np.concatenate(parts)
    cin, cout, kh, kw, s, p = spec.dims
    if kind == CONV2D:
        x_shape, cols = cache
        n, oh, ow = cols.shape[:3]
        gyt = gy.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = gyt.T @ cols.reshape(-1, cols.shape[-1])
        gcols = (gyt @ w.reshape(cout, -1)).reshape(n, oh, ow, -1)
        gx = _col2im(gcols, x_shape, kh, kw, s, p, oh, ow)
        parts = [gw.ravel()]
        if b is not None:
            parts.append(gyt.sum(axis=0))
        return gx, np.concatenate(parts)
    x = cache
    n, _, h, wd = x.shape
    gcols = _im2col(gy, kh, kw, s, p, h, wd)  # (N, h, wd, cout*kh*kw)
    wm = w.reshape(cin, -1)
    gx = (gcols @ wm.T).transpose(0, 3, 1, 2)
    xt = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    gw = xt.T @ gcols.reshape(-1, gcols.shape[-1])
    parts = [gw.ravel()]
    if b is not None:
        parts.append(gy.sum(axis=(0, 2, 3)))
    return np.ascontiguousarray(gx), np.concatenate(parts)
