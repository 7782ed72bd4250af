"""Semantic-communication experiment harness.

Domains, full and zero-forget adaptation, encoder/decoder cross pairing
over an identity link, misalignment measurement, the tuning and equalizer
re-alignment baselines, and patch-based restoration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from zfda.data import DatasetHandle
from zfda.delta import DeltaPatch, patch_from_delta, revert_patch
from zfda.nn.layers import DENSE, RELU, LayerSpec, ShapeError
from zfda.nn.model import (
    Autoencoder,
    NonFiniteError,
    backprop_layers,
    decode,
    encode,
    loss_mse,
    mse_grad,
    run_layers,
    sgd_step,
)
from zfda.nn.train import DivergenceError, batches, evaluate_mse, fit
from zfda.rng import Rng
from zfda.sam import SamRun, SamState, SparseDelta, effective_params, extract_delta, optimize_sam
from zfda.transforms import Transform, apply_transform


@dataclass
class Domain:
    images: np.ndarray
    labels: np.ndarray
    transform: Transform
    class_filter: tuple[int, ...] | None = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.images)


def make_domain(dataset: DatasetHandle, class_filter=None, transform: Transform | None = None,
                name: str = "") -> Domain:
    """Filters ``dataset`` by label and applies the domain's pixel transform."""
    transform = transform or Transform()
    labels = np.asarray(dataset.labels)
    if class_filter is None:
        keep = np.arange(len(labels))
    else:
        class_filter = tuple(sorted(int(c) for c in class_filter))
        keep = np.flatnonzero(np.isin(labels, class_filter))
    if keep.size == 0:
        raise ValueError(f"class filter {class_filter} selects no images")
    images = apply_transform(dataset.images[keep], transform)
    return Domain(images, labels[keep], transform, class_filter, name or str(transform))


def adapt_full(model: Autoencoder, domain: Domain, epochs: int = 10, lr: float = 1e-4,
               seed: int = 0, batch_size: int = 32) -> Autoencoder:
    """Dense fine-tune of every parameter on the domain; the input model is untouched."""
    if len(domain) == 0:
        raise ValueError("empty domain")
    if epochs == 0:
        return model.copy()
    return fit(model, domain.images, epochs, lr, batch_size, seed)[0]


@dataclass
class ZfdaResult:
    adapted: Autoencoder
    delta: SparseDelta
    patch: DeltaPatch
    run: SamRun

    @property
    def sam(self) -> SamState:
        return self.run.sam


def adapt_zfda(model: Autoencoder, domain: Domain, gamma: float, epochs: int = 30,
               alpha_s: float = 1.0, alpha_v: float = 1e-4, seed: int = 0,
               batch_size: int = 32, **sam_options) -> ZfdaResult:
    """SAM adaptation; returns the adapted model with the delta that undoes it."""
    run = optimize_sam(model, domain.images, gamma, epochs, alpha_s, alpha_v, seed,
                       batch_size, **sam_options)
    delta = extract_delta(run.sam, model)
    adapted = effective_params(model, run.sam)
    return ZfdaResult(adapted, delta, patch_from_delta(delta, model), run)


def _check_pair(enc: Autoencoder, dec: Autoencoder) -> None:
    if enc.semantic_shape != dec.semantic_shape:
        raise ShapeError(f"encoder emits semantics {enc.semantic_shape} but decoder expects {dec.semantic_shape}")


class Equalizer:
    """Residual two-layer dense map on semantics: z + W2 relu(W1 z + b1) + b2.

    W2 and b2 start at zero, so a fresh equalizer is the exact identity.
    """

    def __init__(self, dim: int, hidden: int, seed: int = 0):
        self.specs = [LayerSpec(DENSE, (dim, hidden)), LayerSpec(RELU), LayerSpec(DENSE, (hidden, dim))]
        bound = 1 / math.sqrt(dim)
        first = Rng(seed).uniform(-bound, bound, self.specs[0].param_count).astype(np.float32)
        first[dim * hidden:] = 0
        self.params = [first, np.zeros(0, np.float32), np.zeros(self.specs[2].param_count, np.float32)]

    def run(self, z: np.ndarray):
        flat = z.reshape(len(z), -1)
        y, caches = run_layers(self.specs, self.params, flat)
        return (flat + y).reshape(z.shape), caches

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.run(z)[0]


def sc_round_trip(enc: Autoencoder, dec: Autoencoder, x: np.ndarray,
                  equalizer: Equalizer | None = None) -> np.ndarray:
    """Encode with one model, pass semantics unchanged, decode with another."""
    _check_pair(enc, dec)
    s = encode(enc, x)
    if equalizer is not None:
        s = equalizer(s)
    return decode(dec, s)


def pair_mse(enc: Autoencoder, dec: Autoencoder, images: np.ndarray,
             equalizer: Equalizer | None = None, batch_size: int = 256) -> float:
    """Reconstruction MSE of the cross pair, reduced in fixed batch order."""
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    total = 0.0
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        total += loss_mse(sc_round_trip(enc, dec, x, equalizer), x) * x.size
    return total / images.size


def psnr(mse: float, max_val: float = 1.0) -> float:
    return math.inf if mse == 0 else 10 * math.log10(max_val**2 / mse)


@dataclass
class AlignmentReport:
    mse: float
    psnr_db: float
    misalignment_j: float
    eval_set: str = ""
    encoder: str = ""
    decoder: str = ""


def eval_alignment(enc: Autoencoder, dec: Autoencoder, eval_images: np.ndarray,
                   baseline_loss: float, eval_set: str = "", encoder_id: str = "",
                   decoder_id: str = "", equalizer: Equalizer | None = None) -> AlignmentReport:
    """MSE, PSNR and misalignment J = L(enc, dec) - L(pristine pair)."""
    mse = pair_mse(enc, dec, eval_images, equalizer)
    return AlignmentReport(mse, psnr(mse), mse - baseline_loss, eval_set, encoder_id, decoder_id)


def cross_model(enc: Autoencoder, dec: Autoencoder) -> Autoencoder:
    """A single model made of ``enc``'s encoder and ``dec``'s decoder."""
    _check_pair(enc, dec)
    return Autoencoder(enc.input_shape, list(enc.encoder), list(dec.decoder),
                       [p.copy() for p in enc.encoder_params + dec.decoder_params], dec.output_shape)


@dataclass
class TuningResult:
    model: Autoencoder
    j_before: float
    j_after: float


def realign_tuning(enc: Autoencoder, dec: Autoencoder, shared: np.ndarray, iterations: int = 8,
                   lr: float = 0.01, seed: int = 0, batch_size: int = 32,
                   eval_images: np.ndarray | None = None, baseline_loss: float = 0.0) -> TuningResult:
    """Joint fine-tune of the cross pair on shared data; one iteration = one pass.

    The returned model serves as both the re-tuned encoder and decoder.
    J is measured on ``eval_images`` (defaults to the shared data).
    """
    eval_images = shared if eval_images is None else eval_images
    pair = cross_model(enc, dec)
    j_before = pair_mse(pair, pair, eval_images) - baseline_loss
    if iterations:
        pair = fit(pair, shared, iterations, lr, batch_size, seed)[0]
    j_after = pair_mse(pair, pair, eval_images) - baseline_loss
    return TuningResult(pair, j_before, j_after)


def realign_equalizer(enc: Autoencoder, dec: Autoencoder, shared: np.ndarray, epochs: int = 30,
                      lr: float = 0.01, seed: int = 0, batch_size: int = 32,
                      hidden: int | None = None) -> Equalizer:
    """Trains an equalizer between frozen endpoints on end-to-end reconstruction."""
    _check_pair(enc, dec)
    if len(shared) == 0:
        raise ValueError("no shared data")
    dim = int(np.prod(enc.semantic_shape))
    eq = Equalizer(dim, hidden or dim, seed)
    sem = encode(enc, shared)
    rng = Rng(seed).spawn(7)
    for epoch in range(epochs):
        for idx in batches(len(shared), batch_size, rng):
            x = shared[idx]
            e, eq_caches = eq.run(sem[idx])
            out, dec_caches = run_layers(dec.decoder, dec.decoder_params, e)
            if not np.isfinite(loss_mse(out, x)):
                raise DivergenceError(f"equalizer training diverged in epoch {epoch}")
            ge, _ = backprop_layers(dec.decoder, dec.decoder_params, dec_caches, mse_grad(out, x))
            _, grads = backprop_layers(eq.specs, eq.params, eq_caches, ge.reshape(len(x), -1))
            try:
                eq.params = sgd_step(eq.params, grads, lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"equalizer training diverged in epoch {epoch}") from exc
    return eq


def restore_alignment(adapted: Autoencoder, patch: DeltaPatch) -> Autoencoder:
    """Exact restoration of the pristine parameters; refuses on digest mismatch."""
    return revert_patch(adapted, patch)


@dataclass
class DomainSplit:
    """Pretraining data, held-out eval data and per-domain train/test sets."""

    pretrain: np.ndarray
    eval: np.ndarray
    domains: dict[str, tuple[Domain, Domain]] = field(default_factory=dict)


def domain_train_test(dataset: DatasetHandle, classes, transform: Transform, n_test: int,
                      name: str = "") -> tuple[Domain, Domain]:
    dom = make_domain(dataset, classes, transform, name)
    if n_test >= len(dom):
        raise ValueError("domain too small for the requested test split")
    train = Domain(dom.images[:-n_test], dom.labels[:-n_test], transform, dom.class_filter, dom.name)
    test = Domain(dom.images[-n_test:], dom.labels[-n_test:], transform, dom.class_filter, dom.name)
    return train, test


def domain_mse(model: Autoencoder, domain: Domain) -> float:
    return evaluate_mse(model, domain.images)
