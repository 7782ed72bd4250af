"""Datasets (CIFAR binary, synthetic), .zft tensor files and CSV reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from zfda.rng import Rng

CIFAR_PIXELS = 3072
TENSOR_MAGIC = b"ZFT1"


class DataError(ValueError):
    pass


@dataclass
class DatasetHandle:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray
    source: str

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset must contain at least one image")
        if len(self.labels) != len(self.images):
            raise DataError("labels and images differ in length")

    def __len__(self) -> int:
        return len(self.images)

    def select(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.images[idx], self.labels[idx], self.source)


def read_cifar_binary(path, variant: str = "cifar10") -> DatasetHandle:
    """Reads the CIFAR-10/100 binary record format; keeps fine labels for CIFAR-100."""
    if variant not in ("cifar10", "cifar100"):
        raise DataError(f"unknown CIFAR variant {variant!r}")
    n_label = 1 if variant == "cifar10" else 2
    record = n_label + CIFAR_PIXELS
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not raw or len(raw) % record:
        raise DataError(f"{path}: size {len(raw)} is not a positive multiple of the {record}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, n_label - 1].astype(np.int64)
    images = arr[:, n_label:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return DatasetHandle(images, labels, f"{variant}:{Path(path).name}")


def downsample2x(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the spatial axes."""
    n, c, h, w = images.shape
    if h % 2 or w % 2:
        raise DataError(f"cannot 2x downsample {h}x{w} images")
    return images.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=np.float32)


def gen_synthetic(n: int, c: int = 3, h: int = 16, w: int = 16, seed: int = 0,
                  n_classes: int = 10) -> DatasetHandle:
    """Smooth gradient backgrounds plus Gaussian blobs.

    The label of an image is its blob count minus one, so class subsets
    differ in content statistics.
    """
    if n <= 0:
        raise DataError("synthetic dataset size must be positive")
    if min(c, h, w, n_classes) <= 0:
        raise DataError("synthetic dimensions must be positive")
    rng = Rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    labels = rng.integers(0, n_classes, n)
    images = np.empty((n, c, h, w), dtype=np.float32)
    for i in range(n):
        angle = rng.uniform(0, 2 * np.pi, 1)[0]
        ramp = np.cos(angle) * xs + np.sin(angle) * ys
        base = rng.uniform(0.2, 0.6, c)[:, None, None]
        slope = rng.uniform(-0.3, 0.3, c)[:, None, None]
        img = base + slope * (ramp - 0.5)
        for _ in range(int(labels[i]) + 1):
            cy, cx = rng.uniform(0.1, 0.9, 2)
            sigma = rng.uniform(0.06, 0.18, 1)[0]
            color = rng.uniform(-0.6, 0.6, c)[:, None, None]
            img = img + color * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma**2))
        images[i] = np.clip(img, 0.0, 1.0)
    return DatasetHandle(images, labels.astype(np.int64), f"synthetic:{seed}")


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0 or arr.ndim > 255:
        raise DataError(f"tensor rank {arr.ndim} not storable")
    if not np.isfinite(arr).all():
        raise DataError("refusing to write non-finite tensor values")
    head = TENSOR_MAGIC + struct.pack("<BBxx", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DataError("truncated tensor header")
    if buf[:4] != TENSOR_MAGIC:
        raise DataError("bad magic, not a .zft tensor")
    dtype, ndim, pad = struct.unpack_from("<BBH", buf, 4)
    if dtype != 0:
        raise DataError(f"unsupported dtype code {dtype}")
    if pad != 0:
        raise DataError("non-zero padding bytes in header")
    if ndim == 0:
        raise DataError("zero-rank tensor")
    if len(buf) < 8 + 4 * ndim:
        raise DataError("truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    if 0 in dims:
        raise DataError(f"zero-length dimension in {dims}")
    count = math.prod(dims)
    body = len(buf) - 8 - 4 * ndim
    if body != 4 * count:
        raise DataError(f"data length {body} bytes does not match shape {dims}")
    arr = np.frombuffer(buf, dtype="<f4", offset=8 + 4 * ndim).astype(np.float32).reshape(dims)
    if not np.isfinite(arr).all():
        raise DataError("non-finite values in tensor file")
    return arr


def write_tensor_file(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor_file(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if value == 0:
            return "0"
        return format(float(value), ".6g")
    return str(value)


def _as_dict(row) -> dict:
    if dataclasses.is_dataclass(row):
        return dataclasses.asdict(row)
    return dict(row)


def write_csv_report(rows, path, columns: list[str] | None = None) -> None:
    """Header plus one line per row, fixed column order, 6 significant digits."""
    dicts = [_as_dict(r) for r in rows]
    if columns is None:
        if not dicts:
            raise DataError("column names required for an empty report")
        columns = list(dicts[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for d in dicts:
        if set(d) != set(columns):
            raise DataError(f"row keys {sorted(d)} differ from columns {columns}")
        writer.writerow([_fmt(d[c]) for c in columns])
    Path(path).write_text(buf.getvalue())
