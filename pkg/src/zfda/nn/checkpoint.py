"""The .zfm model checkpoint format.

Layout (all integers little-endian)::

    magic "ZFDM" | version u16 = 1 | layer-count u32
    per record: kind u8 | dim-count u8 | dims u32[] | param-count u64 | params f32[]

Besides the real layers, two parameter-free records carry the topology:
an INPUT record first (dims = per-sample input shape) and one SPLIT record
between the encoder and the decoder. Bias presence is implied by the
param-count. The digest is SHA-256 over the concatenated param bytes in
file order, which equals the model's canonical stream digest.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from zfda.nn import layers as L
from zfda.nn.layers import LayerSpec
from zfda.nn.model import Autoencoder, build_autoencoder

MAGIC = b"ZFDM"
VERSION = 1
INPUT, SPLIT = 6, 7
KIND_CODES = {L.DENSE: 0, L.CONV2D: 1, L.CONV_T2D: 2, L.RELU: 3, L.SIGMOID: 4, L.RESHAPE: 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


def _record(code: int, dims, params: np.ndarray) -> bytes:
    head = struct.pack("<BB", code, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + struct.pack("<Q", params.size) + np.ascontiguousarray(params, dtype="<f4").tobytes()


def encode_checkpoint(model: Autoencoder) -> bytes:
    empty = np.zeros(0, dtype=np.float32)
    records = [_record(INPUT, model.input_shape, empty)]
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        if i == model.n_enc_layers:
            records.append(_record(SPLIT, (), empty))
        records.append(_record(KIND_CODES[spec.kind], spec.dims, p))
    return MAGIC + struct.pack("<HI", VERSION, len(records)) + b"".join(records)


def save_checkpoint(model: Autoencoder, path) -> bytes:
    """Writes ``model`` to ``path`` and returns its digest."""
    Path(path).write_bytes(encode_checkpoint(model))
    return model.digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Autoencoder:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a .zfm checkpoint")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_shape = None
    sides: list[list] = [[]]
    params = []
    for rec in range(count):
        code, ndim = r.unpack("<BB", f"record {rec} header")
        dims = r.unpack(f"<{ndim}I", f"record {rec} dims")
        (n,) = r.unpack("<Q", f"record {rec} param-count")
        if n > (len(buf) - r.pos) // 4:
            raise CheckpointError(f"record {rec} declares {n} params beyond end of file")
        values = np.frombuffer(r.take(4 * n, f"record {rec} params"), dtype="<f4").astype(np.float32)
        if rec == 0:
            if code != INPUT or ndim == 0 or n or min(dims) == 0:
                raise CheckpointError("first record must be a non-empty INPUT shape")
            input_shape = dims
            continue
        if code == INPUT:
            raise CheckpointError(f"record {rec}: duplicate INPUT record")
        if code == SPLIT:
            if ndim or n or len(sides) == 2:
                raise CheckpointError(f"record {rec}: malformed or repeated SPLIT record")
            sides.append([])
            continue
        if code not in CODE_KINDS:
            raise CheckpointError(f"record {rec}: unknown layer kind code {code}")
        kind = CODE_KINDS[code]
        try:
            spec = LayerSpec(kind, dims, True)
            if kind in L.PARAMETERIZED and n == spec.param_count - spec.n_bias:
                spec = LayerSpec(kind, dims, False)
        except ValueError as exc:
            raise CheckpointError(f"record {rec}: {exc}") from None
        if n != spec.param_count:
            raise CheckpointError(f"record {rec}: param-count {n} inconsistent with {kind} dims {dims}")
        if not np.isfinite(values).all():
            raise CheckpointError(f"record {rec}: non-finite parameter values")
        sides[-1].append(spec)
        params.append(values)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")
    if input_shape is None or len(sides) != 2:
        raise CheckpointError("checkpoint lacks INPUT or SPLIT record")
    try:
        # output shape is whatever the chain produces (supervised models differ from input)
        shapes = [tuple(input_shape)]
        for spec in sides[0] + sides[1]:
            shapes.append(spec.output_shape(shapes[-1]))
        model = build_autoencoder(input_shape, sides[0], sides[1], seed=0, output_shape=shapes[-1])
    except ValueError as exc:
        raise CheckpointError(f"inconsistent topology: {exc}") from None
    model.params = params
    return model


def load_checkpoint(path) -> Autoencoder:
    return decode_checkpoint(Path(path).read_bytes())


def file_digest(path) -> bytes:
    """SHA-256 over the param bytes of a checkpoint file, in file order."""
    return hashlib.sha256(load_checkpoint(path).param_bytes()).digest()
