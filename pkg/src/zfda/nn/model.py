"""Encoder/decoder model container, forward pass and reverse-mode backward."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from zfda.nn.layers import LayerSpec, ShapeError, layer_backward, layer_forward
from zfda.rng import Rng


# He-uniform gain; gain 1 is the narrower +-1/sqrt(fan_in) range
INIT_GAIN = float(np.sqrt(6.0))


class NonFiniteError(FloatingPointError):
    """Raised when an engine operation produces NaN or Inf."""


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


@dataclass
class Autoencoder:
    """Encoder f and decoder g with flat per-layer parameter vectors.

    ``params`` holds one entry per layer (encoder layers first), an empty
    array for parameter-free layers.
    """

    input_shape: tuple[int, ...]
    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    params: list[np.ndarray] = field(repr=False)
    output_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.output_shape is None:
            self.output_shape = tuple(self.input_shape)

    @property
    def layers(self) -> list[LayerSpec]:
        return list(self.encoder) + list(self.decoder)

    @property
    def n_enc_layers(self) -> int:
        return len(self.encoder)

    @property
    def encoder_params(self) -> list[np.ndarray]:
        return self.params[: self.n_enc_layers]

    @property
    def decoder_params(self) -> list[np.ndarray]:
        return self.params[self.n_enc_layers:]

    @property
    def n_encoder(self) -> int:
        return sum(s.param_count for s in self.encoder)

    @property
    def n_decoder(self) -> int:
        return sum(s.param_count for s in self.decoder)

    @property
    def n_params(self) -> int:
        return self.n_encoder + self.n_decoder

    @property
    def semantic_shape(self) -> tuple[int, ...]:
        return _chain_shapes(self.input_shape, self.encoder, "encoder")[-1]

    @property
    def bandwidth_ratio(self) -> float:
        return float(np.prod(self.semantic_shape) / np.prod(self.input_shape))

    def trainable_ids(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.param_count > 0]

    def is_encoder_layer(self, layer_id: int) -> bool:
        return layer_id < self.n_enc_layers

    def copy(self) -> "Autoencoder":
        return self.with_params([p.copy() for p in self.params])

    def astype(self, dtype) -> "Autoencoder":
        return self.with_params([p.astype(dtype) for p in self.params])

    def with_params(self, params: list[np.ndarray]) -> "Autoencoder":
        check_layout(self, params)
        return Autoencoder(self.input_shape, list(self.encoder), list(self.decoder), list(params),
                           self.output_shape)

    def param_bytes(self) -> bytes:
        """Canonical stream: layer order, row-major, little-endian float32."""
        return b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in self.params)

    def digest(self) -> bytes:
        return hashlib.sha256(self.param_bytes()).digest()


def check_layout(model: Autoencoder, params: list[np.ndarray]) -> None:
    if len(params) != len(model.layers):
        raise ValueError(f"expected {len(model.layers)} parameter vectors, got {len(params)}")
    for i, (spec, p) in enumerate(zip(model.layers, params)):
        if p.shape != (spec.param_count,):
            raise ValueError(f"layer {i} ({spec.kind}) expects {spec.param_count} params, got shape {p.shape}")


def _describe(idx: int, spec: LayerSpec, side: str) -> str:
    return f"{side} layer {idx} ({spec.kind} {spec.dims})"


def _chain_shapes(in_shape, specs, side):
    shapes = [tuple(in_shape)]
    for i, spec in enumerate(specs):
        try:
            shapes.append(spec.output_shape(shapes[-1]))
        except ShapeError as exc:
            prev = _describe(i - 1, specs[i - 1], side) if i else f"{side} input {shapes[-1]}"
            raise ShapeError(f"{_describe(i, spec, side)} cannot follow {prev}: {exc}") from None
    return shapes


def build_autoencoder(input_shape, encoder: list[LayerSpec], decoder: list[LayerSpec],
                      seed: int, output_shape=None, init_gain: float = INIT_GAIN) -> Autoencoder:
    """Validates the layer chain and draws fan-in scaled uniform parameters.

    ``output_shape`` defaults to the input shape (reconstruction); a
    different shape turns the model into a supervised encoder/decoder.
    Weights are uniform in +-init_gain/sqrt(fan_in).
    """
    input_shape = tuple(int(d) for d in input_shape)
    if not encoder or not decoder:
        raise ValueError("encoder and decoder need at least one layer each")
    sem = _chain_shapes(input_shape, encoder, "encoder")[-1]
    try:
        out = _chain_shapes(sem, decoder, "decoder")[-1]
    except ShapeError as exc:
        raise ShapeError(f"{exc} (encoder output is {sem} from {_describe(len(encoder) - 1, encoder[-1], 'encoder')})") from None
    expected = input_shape if output_shape is None else tuple(int(d) for d in output_shape)
    if out != expected:
        raise ShapeError(f"decoder output {out} from {_describe(len(decoder) - 1, decoder[-1], 'decoder')} "
                         f"does not match expected output {expected}")
    rng = Rng(seed)
    params = []
    for spec in list(encoder) + list(decoder):
        if spec.param_count == 0:
            params.append(np.zeros(0, dtype=np.float32))
            continue
        bound = init_gain / np.sqrt(spec.fan_in())
        params.append(rng.uniform(-bound, bound, spec.param_count).astype(np.float32))
    return Autoencoder(input_shape, list(encoder), list(decoder), params, expected)


@dataclass
class Trace:
    """Recorded forward pass: outputs plus per-layer caches for backward."""

    semantics: np.ndarray
    outcome: np.ndarray
    caches: list = field(repr=False)


def run_layers(specs, params, x, start: int = 0):
    """Forward through ``specs``; returns (output, caches)."""
    caches = []
    for i, (spec, p) in enumerate(zip(specs, params)):
        x, cache = layer_forward(spec, p, x)
        check_finite(x, f"activation of layer {start + i} ({spec.kind})")
        caches.append(cache)
    return x, caches


def backprop_layers(specs, params, caches, gy):
    """Reverse pass; returns (grad wrt input, per-layer param grads)."""
    grads = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        gy, g = layer_backward(specs[i], params[i], caches[i], gy)
        grads[i] = g if g is not None else np.zeros(0, dtype=gy.dtype)
    return gy, grads


def _check_input(model: Autoencoder, x: np.ndarray) -> None:
    if x.ndim != len(model.input_shape) + 1 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"input batch shape {x.shape} does not match model input {model.input_shape}")


def encode(model: Autoencoder, x: np.ndarray) -> np.ndarray:
    _check_input(model, x)
    return run_layers(model.encoder, model.encoder_params, x)[0]


def decode(model: Autoencoder, s: np.ndarray) -> np.ndarray:
    if tuple(s.shape[1:]) != model.semantic_shape:
        raise ShapeError(f"semantics shape {s.shape[1:]} does not match decoder input {model.semantic_shape}")
    return run_layers(model.decoder, model.decoder_params, s, start=model.n_enc_layers)[0]


def forward(model: Autoencoder, x: np.ndarray) -> Trace:
    _check_input(model, x)
    sem, enc_caches = run_layers(model.encoder, model.encoder_params, x)
    out, dec_caches = run_layers(model.decoder, model.decoder_params, sem, start=model.n_enc_layers)
    return Trace(sem, out, enc_caches + dec_caches)


def backward(model: Autoencoder, trace: Trace | None, grad_outcome: np.ndarray,
             want_input_grad: bool = False):
    """Gradients aligned with ``model.params``; optionally also wrt the input batch."""
    if trace is None or len(trace.caches) != len(model.layers):
        raise RuntimeError("backward called without a recorded forward pass")
    ne = model.n_enc_layers
    g_sem, dec_grads = backprop_layers(model.decoder, model.decoder_params, trace.caches[ne:], grad_outcome)
    g_in, enc_grads = backprop_layers(model.encoder, model.encoder_params, trace.caches[:ne], g_sem)
    grads = enc_grads + dec_grads
    if want_input_grad:
        return grads, g_in
    return grads


def loss_mse(outcome: np.ndarray, target: np.ndarray) -> float:
    if outcome.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {outcome.shape} vs {target.shape}")
    diff = outcome - target
    return float(np.mean(diff * diff, dtype=np.float64))


def mse_grad(outcome: np.ndarray, target: np.ndarray) -> np.ndarray:
    if outcome.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {outcome.shape} vs {target.shape}")
    return (2.0 / outcome.size) * (outcome - target)


def loss_and_grads(model: Autoencoder, x: np.ndarray, target: np.ndarray | None = None):
    """Reconstruction MSE of ``x`` (or ``target``) and its parameter gradients."""
    target = x if target is None else target
    trace = forward(model, x)
    loss = loss_mse(trace.outcome, target)
    grads = backward(model, trace, mse_grad(trace.outcome, target))
    return loss, grads


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    """p <- p - lr * g; entries with a zero step keep their exact bits."""
    if len(params) != len(grads):
        raise ValueError("gradient layout does not match parameters")
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        check_finite(g, "gradient")
        step = (lr * g).astype(p.dtype, copy=False)
        new = p.copy()
        np.subtract(p, step, out=new, where=step != 0)
        out.append(new)
    return out
