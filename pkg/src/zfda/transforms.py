"""Pixel-space domain transforms: rotation, perspective, contrast, hue."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NONE, VA, VP, VC, VH = "none", "VA", "VP", "VC", "VH"
DEFAULTS = {VA: 30.0, VP: 0.2, VC: 1.8, VH: 60.0}
IDENTITY = {VA: 0.0, VP: 0.0, VC: 1.0, VH: 0.0}


@dataclass(frozen=True)
class Transform:
    kind: str = NONE
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in (NONE, VA, VP, VC, VH):
            raise ValueError(f"unknown transform {self.kind!r}")
        if not math.isfinite(self.param):
            raise ValueError(f"non-finite transform parameter {self.param}")

    @classmethod
    def default(cls, kind: str) -> "Transform":
        return cls(kind, DEFAULTS[kind]) if kind != NONE else cls()

    @property
    def is_identity(self) -> bool:
        return self.kind == NONE or self.param == IDENTITY[self.kind]

    def __str__(self) -> str:
        return "none" if self.kind == NONE else f"{self.kind}({self.param:g})"


def _bilinear(images: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Samples [N, C, H, W] at float source coords (H, W); outside reads as 0."""
    n, c, h, w = images.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((n, c) + sx.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = images[:, :, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(valid, wy * wx, 0.0) * vals
    return out


def _rotate(images, degrees):
    h, w = images.shape[-2:]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    t = math.radians(degrees)
    # positive angles rotate counter-clockwise as displayed (row axis pointing down)
    sx = math.cos(t) * xx - math.sin(t) * yy + cx
    sy = math.sin(t) * xx + math.cos(t) * yy + cy
    return _bilinear(images, sx, sy)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix mapping the four (x, y) points ``src`` onto ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    return np.append(np.linalg.solve(np.array(a, float), np.array(b, float)), 1.0).reshape(3, 3)


def _perspective(images, frac):
    h, w = images.shape[-2:]
    xm, ym = w - 1, h - 1
    shift = frac * xm / 2
    square = np.array([[0, 0], [xm, 0], [xm, ym], [0, ym]], float)
    # top corners pulled toward the vertical center line
    quad = np.array([[shift, 0], [xm - shift, 0], [xm, ym], [0, ym]], float)
    inv = homography(quad, square)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    pts = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    sx = (pts[0] / pts[2]).reshape(h, w)
    sy = (pts[1] / pts[2]).reshape(h, w)
    return _bilinear(images, sx, sy)


def hue_matrix(degrees: float) -> np.ndarray:
    """RGB rotation about the gray axis."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    k = 1 / 3
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, (1 - c) * k - r * s, (1 - c) * k + r * s],
        [(1 - c) * k + r * s, c + (1 - c) * k, (1 - c) * k - r * s],
        [(1 - c) * k - r * s, (1 - c) * k + r * s, c + (1 - c) * k],
    ])


def apply_transform(images: np.ndarray, transform: Transform) -> np.ndarray:
    """Applies ``transform`` to [C, H, W] or [N, C, H, W] images in [0, 1]."""
    single = images.ndim == 3
    x = images[None] if single else images
    if x.ndim != 4:
        raise ValueError(f"expected [N, C, H, W] images, got shape {images.shape}")
    if transform.is_identity:
        out = x.copy()
    else:
        xf = x.astype(np.float64)
        if transform.kind == VA:
            out = _rotate(xf, transform.param)
        elif transform.kind == VP:
            out = _perspective(xf, transform.param)
        elif transform.kind == VC:
            out = 0.5 + transform.param * (xf - 0.5)
        else:
            if x.shape[1] != 3:
                raise ValueError("hue rotation needs 3-channel RGB images")
            out = np.einsum("ij,njhw->nihw", hue_matrix(transform.param), xf)
        out = np.clip(out, 0.0, 1.0).astype(x.dtype)
    return out[0] if single else out
