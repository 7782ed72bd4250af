"""Sparse parameter patches (.zfp) with digest-verified exact restoration.

A patch stores, for every touched parameter, both the adapted and the
original float32 value. Applying overwrites with adapted values and
reverting overwrites with originals, so revert(apply(p)) == p bit for bit;
subtracting the delta again would not be exact in floating point.

File layout (little-endian)::

    magic "ZFDP" | version u16 = 1 | flags u16 = 0 | model digest [32]
    | gamma f64 | layer-count u32
    per layer: layer-id u32 | entry-count u64 | entries (index u32, adapted f32, original f32)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from zfda.nn.model import Autoencoder
from zfda.sam import SparseDelta

MAGIC = b"ZFDP"
VERSION = 1
HEADER = struct.Struct("<4sHH32sdI")
LAYER_HEAD = struct.Struct("<IQ")
ENTRY = np.dtype([("index", "<u4"), ("adapted", "<f4"), ("original", "<f4")])


class PatchError(ValueError):
    pass


class DigestMismatchError(PatchError):
    pass


@dataclass
class PatchLayer:
    layer_id: int
    indices: np.ndarray
    adapted: np.ndarray
    original: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)


@dataclass
class DeltaPatch:
    model_digest: bytes
    gamma: float
    layers: list[PatchLayer]

    @property
    def count(self) -> int:
        return sum(lay.count for lay in self.layers)

    @property
    def file_size(self) -> int:
        return HEADER.size + sum(LAYER_HEAD.size + ENTRY.itemsize * lay.count for lay in self.layers)

    @property
    def value_bytes(self) -> int:
        """Bytes of the modification values alone (one float32 each)."""
        return 4 * self.count

    def to_bytes(self) -> bytes:
        parts = [HEADER.pack(MAGIC, VERSION, 0, self.model_digest, self.gamma, len(self.layers))]
        for lay in self.layers:
            rec = np.empty(lay.count, dtype=ENTRY)
            rec["index"], rec["adapted"], rec["original"] = lay.indices, lay.adapted, lay.original
            parts.append(LAYER_HEAD.pack(lay.layer_id, lay.count) + rec.tobytes())
        return b"".join(parts)


def patch_from_delta(delta: SparseDelta, pristine: Autoencoder) -> DeltaPatch:
    layers = []
    for d in delta.layers:
        order = np.argsort(d.indices, kind="stable")
        layers.append(PatchLayer(d.layer_id, d.indices[order].astype(np.uint32),
                                 d.adapted[order].astype(np.float32), d.original[order].astype(np.float32)))
    patch = DeltaPatch(pristine.digest(), float(delta.gamma), layers)
    validate_patch(patch, pristine)
    return patch


def export_patch(delta: SparseDelta, pristine: Autoencoder, path) -> DeltaPatch:
    patch = patch_from_delta(delta, pristine)
    Path(path).write_bytes(patch.to_bytes())
    return patch


def decode_patch(buf: bytes, model: Autoencoder | None = None) -> DeltaPatch:
    if len(buf) < HEADER.size:
        raise PatchError(f"truncated patch: {len(buf)} bytes, header needs {HEADER.size}")
    magic, version, flags, digest, gamma, n_layers = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise PatchError("bad magic, not a .zfp patch")
    if version != VERSION:
        raise PatchError(f"unsupported patch version {version}")
    if flags != 0:
        raise PatchError(f"unknown flags {flags:#x}")
    if not (math.isfinite(gamma) and 0 < gamma <= 1):
        raise PatchError(f"sparsity ratio {gamma} outside (0, 1]")
    pos = HEADER.size
    layers = []
    for i in range(n_layers):
        if pos + LAYER_HEAD.size > len(buf):
            raise PatchError(f"truncated patch in layer header {i}")
        lid, count = LAYER_HEAD.unpack_from(buf, pos)
        pos += LAYER_HEAD.size
        end = pos + count * ENTRY.itemsize
        if end > len(buf):
            raise PatchError(f"truncated patch: layer {lid} declares {count} entries")
        rec = np.frombuffer(buf, dtype=ENTRY, count=count, offset=pos)
        pos = end
        layers.append(PatchLayer(lid, rec["index"].astype(np.uint32), rec["adapted"].astype(np.float32),
                                 rec["original"].astype(np.float32)))
    if pos != len(buf):
        raise PatchError(f"{len(buf) - pos} trailing bytes after last layer")
    patch = DeltaPatch(digest, gamma, layers)
    validate_patch(patch, model)
    return patch


def validate_patch(patch: DeltaPatch, model: Autoencoder | None = None) -> None:
    """Structural checks; bounds and budget need the target ``model``."""
    ids = [lay.layer_id for lay in patch.layers]
    if len(set(ids)) != len(ids):
        raise PatchError("duplicate layer ids")
    for lay in patch.layers:
        if lay.count and np.any(np.diff(lay.indices.astype(np.int64)) <= 0):
            raise PatchError(f"layer {lay.layer_id}: indices not strictly ascending")
        if not (np.isfinite(lay.adapted).all() and np.isfinite(lay.original).all()):
            raise PatchError(f"layer {lay.layer_id}: non-finite values")
    if model is None:
        return
    trainable = set(model.trainable_ids())
    for lay in patch.layers:
        if lay.layer_id not in trainable:
            raise PatchError(f"layer id {lay.layer_id} is not a parameterized layer of the model")
        n = model.layers[lay.layer_id].param_count
        if lay.count and int(lay.indices[-1]) >= n:
            raise PatchError(f"layer {lay.layer_id}: index {int(lay.indices[-1])} out of range for {n} params")
    if patch.count > patch.gamma * model.n_params:
        raise PatchError(f"{patch.count} entries exceed budget gamma*N = {patch.gamma * model.n_params:g}")


def load_patch(path, model: Autoencoder | None = None) -> DeltaPatch:
    return decode_patch(Path(path).read_bytes(), model)


def verify_digest(params: Autoencoder, patch: DeltaPatch) -> bool:
    return params.digest() == patch.model_digest


def _overwrite(model: Autoencoder, patch: DeltaPatch, field: str) -> Autoencoder:
    validate_patch(patch, model)
    params = list(model.params)
    for lay in patch.layers:
        if lay.count:
            p = params[lay.layer_id].copy()
            p[lay.indices] = getattr(lay, field)
            params[lay.layer_id] = p
    return model.with_params(params)


def apply_patch(params: Autoencoder, patch: DeltaPatch, check_digest: bool = True) -> Autoencoder:
    """Overwrites touched entries with their adapted values."""
    if check_digest and not verify_digest(params, patch):
        raise DigestMismatchError("parameters do not match the patch's pristine digest")
    return _overwrite(params, patch, "adapted")


def revert_patch(params: Autoencoder, patch: DeltaPatch) -> Autoencoder:
    """Overwrites touched entries with their originals and checks the digest."""
    restored = _overwrite(params, patch, "original")
    if not verify_digest(restored, patch):
        raise DigestMismatchError("restored parameters do not match the pristine digest "
                                  "(untouched entries were modified)")
    return restored
