"""Sparse additive modification (SAM) optimizer.

A SAM delta is ``mask * values`` where the binary mask keeps the top-k
scores of each trainable layer. Scores are trained with a straight-through
gradient (the top-k indicator is treated as identity), values with plain
SGD. Keep-counts are fixed per layer, so the number of modified
parameters never exceeds ``gamma * N``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from zfda.nn.layers import LayerSpec
from zfda.nn.model import Autoencoder, NonFiniteError, backward, check_layout, forward, loss_mse, mse_grad
from zfda.nn.train import DivergenceError, batches
from zfda.rng import Rng

log = logging.getLogger(__name__)

DENSE_V = "dense"
MASKED_V = "masked"


def allocate_sparsity(layers: list[LayerSpec], gamma: float, scheme: str = "linear") -> list[float]:
    """Per-layer sparsity ratios for the parameterized layers, in order.

    ``linear`` spreads the budget ``gamma * N`` in proportion to
    ``d_in + d_out`` of each layer; ratios above 1 are clamped and the
    surplus is re-spread over the remaining layers until nothing exceeds 1.
    ``uniform`` uses ``gamma`` everywhere.
    """
    if not (0 < gamma <= 1) or not math.isfinite(gamma):
        raise ValueError(f"sparsity ratio must lie in (0, 1], got {gamma}")
    specs = [s for s in layers if s.param_count > 0]
    if not specs:
        raise ValueError("model has no parameters to modify")
    if scheme == "uniform":
        return [float(gamma)] * len(specs)
    if scheme != "linear":
        raise ValueError(f"unknown allocation scheme {scheme!r}")
    p = np.array([s.param_count for s in specs], dtype=np.float64)
    w = np.array([sum(s.fan_dims()) for s in specs], dtype=np.float64)
    budget = gamma * p.sum()
    alloc = np.zeros_like(p)
    free = np.ones(len(p), dtype=bool)
    while True:
        remaining = budget - alloc[~free].sum()
        alloc[free] = remaining * w[free] / w[free].sum()
        over = free & (alloc > p)
        if not over.any():
            break
        alloc[over] = p[over]
        free &= ~over
        if not free.any():
            break
    return [float(a / n) for a, n in zip(alloc, p)]


def keep_counts(gammas: list[float], sizes: list[int], gamma: float) -> list[int]:
    """floor(gamma_k * p_k), trimmed so the total never exceeds gamma * N."""
    counts = [min(n, math.floor(g * n + 1e-9)) for g, n in zip(gammas, sizes)]
    limit = gamma * sum(sizes)
    while sum(counts) > limit:
        i = int(np.argmax(counts))
        counts[i] -= 1
    return counts


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    if not 0 <= k <= scores.size:
        raise ValueError(f"k={k} out of range for {scores.size} scores")
    if np.isnan(scores).any():
        raise NonFiniteError("NaN score")
    mask = np.zeros(scores.size, dtype=bool)
    if k:
        order = np.argsort(-scores, kind="stable")
        mask[order[:k]] = True
    return mask


@dataclass
class SamLayer:
    layer_id: int
    scores: np.ndarray
    values: np.ndarray
    gamma: float
    keep: int
    mask: np.ndarray

    def refresh_mask(self) -> None:
        self.mask = topk_mask(self.scores, self.keep)


@dataclass
class SamState:
    layers: list[SamLayer]
    gamma: float
    alpha_s: float
    alpha_v: float
    n_encoder: int
    n_decoder: int
    n_enc_layers: int
    v_grad_mode: str = DENSE_V

    @property
    def kept(self) -> int:
        return sum(layer.keep for layer in self.layers)

    @property
    def gamma_encoder(self) -> float:
        k = sum(lay.keep for lay in self.layers if lay.layer_id < self.n_enc_layers)
        return k / self.n_encoder if self.n_encoder else 0.0

    @property
    def gamma_decoder(self) -> float:
        k = sum(lay.keep for lay in self.layers if lay.layer_id >= self.n_enc_layers)
        return k / self.n_decoder if self.n_decoder else 0.0

    def copy(self) -> "SamState":
        layers = [SamLayer(lay.layer_id, lay.scores.copy(), lay.values.copy(), lay.gamma,
                           lay.keep, lay.mask.copy()) for lay in self.layers]
        return SamState(layers, self.gamma, self.alpha_s, self.alpha_v, self.n_encoder,
                        self.n_decoder, self.n_enc_layers, self.v_grad_mode)


def init_sam(model: Autoencoder, gamma: float, seed: int, alpha_s: float = 1.0,
             alpha_v: float = 1e-4, allocation: str = "linear",
             v_grad_mode: str = DENSE_V) -> SamState:
    """Standard-normal scores, zero values, masks from the per-layer keep-counts."""
    if v_grad_mode not in (DENSE_V, MASKED_V):
        raise ValueError(f"unknown v-grad mode {v_grad_mode!r}")
    specs = model.layers
    ids = model.trainable_ids()
    gammas = allocate_sparsity(specs, gamma, allocation)
    sizes = [specs[i].param_count for i in ids]
    counts = keep_counts(gammas, sizes, gamma)
    rng = Rng(seed)
    layers = []
    for lid, g, n, k in zip(ids, gammas, sizes, counts):
        scores = rng.normal(n)
        layers.append(SamLayer(lid, scores, np.zeros(n, dtype=np.float32), g, k, topk_mask(scores, k)))
    return SamState(layers, float(gamma), float(alpha_s), float(alpha_v), model.n_encoder,
                    model.n_decoder, model.n_enc_layers, v_grad_mode)


def _check_sam_layout(model: Autoencoder, sam: SamState) -> None:
    if [lay.layer_id for lay in sam.layers] != model.trainable_ids():
        raise ValueError("SAM state does not match the model's trainable layers")
    for lay in sam.layers:
        n = model.layers[lay.layer_id].param_count
        if lay.scores.shape != (n,) or lay.values.shape != (n,):
            raise ValueError(f"SAM layer {lay.layer_id} has wrong length for {n} params")


def effective_params(pristine: Autoencoder, sam: SamState) -> Autoencoder:
    """Pristine parameters plus mask * values; unmodified entries keep their bits."""
    _check_sam_layout(pristine, sam)
    params = list(pristine.params)
    for lay in sam.layers:
        p = params[lay.layer_id]
        touched = lay.mask & (lay.values != 0)
        if touched.any():
            params[lay.layer_id] = np.where(touched, p + lay.values, p)
    return pristine.with_params(params)


@dataclass
class SamGrads:
    loss: float
    grad_v: list[np.ndarray] | None
    grad_m: list[np.ndarray]


def sam_gradients(pristine: Autoencoder, sam: SamState, batch: np.ndarray,
                  targets: np.ndarray | None = None, fixed_v: bool = False) -> SamGrads:
    """Straight-through gradients for values and mask entries on one batch.

    With g the gradient wrt the effective parameter: grad_m = g * v, and
    grad_v = g (dense mode) or g * m (masked mode).
    """
    model = effective_params(pristine, sam)
    targets = batch if targets is None else targets
    trace = forward(model, batch)
    loss = loss_mse(trace.outcome, targets)
    grads = backward(model, trace, mse_grad(trace.outcome, targets))
    grad_m, grad_v = [], []
    for lay in sam.layers:
        g = grads[lay.layer_id]
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of layer {lay.layer_id}")
        grad_m.append(g.astype(np.float64) * lay.values)
        if not fixed_v:
            grad_v.append(g if sam.v_grad_mode == DENSE_V else g * lay.mask)
    return SamGrads(loss, None if fixed_v else grad_v, grad_m)


@dataclass
class MaskSwap:
    """Mask entries that switched on (entering) and off (leaving) in one layer."""

    layer_id: int
    entering: np.ndarray
    leaving: np.ndarray
    grad_entering: np.ndarray
    grad_leaving: np.ndarray

    @property
    def count(self) -> int:
        return int(self.entering.size)

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    @property
    def g_imax(self) -> float | None:
        return float(self.grad_entering.max()) if self.count else None

    @property
    def g_jmin(self) -> float | None:
        return float(self.grad_leaving.min()) if self.count else None


def sam_step(sam: SamState, grads: SamGrads, update_scores: bool = True) -> list[MaskSwap]:
    """One SGD update of values and scores (in place); returns per-layer swaps."""
    if len(grads.grad_m) != len(sam.layers):
        raise ValueError("gradient layout does not match SAM state")
    swaps = []
    new_v, new_s = [], []
    for i, lay in enumerate(sam.layers):
        v = lay.values
        if grads.grad_v is not None and sam.alpha_v != 0:
            step = (sam.alpha_v * grads.grad_v[i]).astype(np.float32)
            v = v - step
        s = lay.scores
        if update_scores and sam.alpha_s != 0:
            s = s - sam.alpha_s * grads.grad_m[i]
        if not (np.isfinite(v).all() and np.isfinite(s).all()):
            raise NonFiniteError(f"non-finite SAM update in layer {lay.layer_id}")
        new_v.append(v)
        new_s.append(s)
    for i, lay in enumerate(sam.layers):
        old = lay.mask
        lay.values, lay.scores = new_v[i], new_s[i]
        lay.refresh_mask()
        entering = np.flatnonzero(lay.mask & ~old)
        leaving = np.flatnonzero(old & ~lay.mask)
        gm = grads.grad_m[i]
        swaps.append(MaskSwap(lay.layer_id, entering, leaving, gm[entering], gm[leaving]))
    return swaps


def predicted_loss_delta(swap: MaskSwap) -> float:
    """First-order loss change of a mask swap: sum of grad_m entering minus leaving."""
    if swap.is_empty:
        return 0.0
    return float(swap.grad_entering.sum() - swap.grad_leaving.sum())


@dataclass
class SamRun:
    sam: SamState
    history: list[float] = field(default_factory=list)
    swaps_per_epoch: list[int] = field(default_factory=list)


def optimize_sam(pristine: Autoencoder, images: np.ndarray, gamma: float, epochs: int = 30,
                 alpha_s: float = 1.0, alpha_v: float = 1e-4, seed: int = 0,
                 batch_size: int = 32, targets: np.ndarray | None = None,
                 allocation: str = "linear", train_mask: bool = True,
                 v_grad_mode: str = DENSE_V, fixed_v: bool = False, tol: float = 1e-5,
                 patience: int = 3, sam: SamState | None = None) -> SamRun:
    """Runs the SAM optimizer on a domain dataset.

    Stops after ``epochs`` or once the best epoch loss has improved by less
    than ``tol`` for ``patience`` consecutive epochs.
    """
    if len(images) == 0:
        raise ValueError("empty domain dataset")
    check_layout(pristine, pristine.params)
    rng = Rng(seed)
    if sam is None:
        sam = init_sam(pristine, gamma, rng.spawn(1).seed, alpha_s, alpha_v, allocation, v_grad_mode)
    run = SamRun(sam)
    order_rng = rng.spawn(2)
    best = math.inf
    stale = 0
    for epoch in range(epochs):
        total, swapped = 0.0, 0
        for idx in batches(len(images), batch_size, order_rng):
            backup = sam.copy()
            try:
                grads = sam_gradients(pristine, sam, images[idx],
                                      None if targets is None else targets[idx], fixed_v)
                if not math.isfinite(grads.loss):
                    raise NonFiniteError("domain loss")
                swaps = sam_step(sam, grads, update_scores=train_mask)
            except NonFiniteError as exc:
                run.sam = backup
                raise DivergenceError(f"SAM optimization diverged in epoch {epoch}: {exc}") from exc
            total += grads.loss * len(idx)
            swapped += sum(s.count for s in swaps)
        epoch_loss = total / len(images)
        run.history.append(epoch_loss)
        run.swaps_per_epoch.append(swapped)
        log.debug("sam epoch %d loss %.6g swaps %d", epoch, epoch_loss, swapped)
        if best - epoch_loss < tol:
            stale += 1
        else:
            stale = 0
        best = min(best, epoch_loss)
        if stale >= patience:
            break
    return run


@dataclass
class LayerDelta:
    layer_id: int
    indices: np.ndarray
    delta: np.ndarray
    adapted: np.ndarray
    original: np.ndarray

    @property
    def count(self) -> int:
        return int(self.indices.size)


@dataclass
class SparseDelta:
    gamma: float
    layers: list[LayerDelta]

    @property
    def count(self) -> int:
        return sum(lay.count for lay in self.layers)


def extract_delta(sam: SamState, pristine: Autoencoder) -> SparseDelta:
    """The masked entries with their original and adapted values."""
    adapted = effective_params(pristine, sam)
    out = []
    for lay in sam.layers:
        idx = np.flatnonzero(lay.mask).astype(np.uint32)
        orig = pristine.params[lay.layer_id][idx]
        new = adapted.params[lay.layer_id][idx]
        out.append(LayerDelta(lay.layer_id, idx, lay.values[idx].copy(), new.copy(), orig.copy()))
    return SparseDelta(sam.gamma, out)
