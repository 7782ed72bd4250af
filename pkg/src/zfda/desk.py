"""Desk-scale model topology and data split used by the experiment suites."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from zfda.align import Domain, domain_train_test
from zfda.data import DatasetHandle, gen_synthetic
from zfda.nn.layers import CONV2D, CONV_T2D, DENSE, RELU, RESHAPE, SIGMOID, LayerSpec
from zfda.nn.model import Autoencoder, build_autoencoder
from zfda.transforms import VA, VC, VH, VP, Transform

DOMAIN_KINDS = (VA, VP, VC, VH)


def desk_topology(channels: int = 3, size: int = 16, width: int = 8, hidden: int = 128,
                  bottleneck: int = 128):
    """Two strided convs + two dense layers per side.

    At 16x16x3 with a 128-wide bottleneck the bandwidth ratio is 0.167.
    """
    c1, c2 = width, 2 * width
    s = size // 4
    flat = c2 * s * s
    encoder = [
        LayerSpec(CONV2D, (channels, c1, 3, 3, 2, 1)), LayerSpec(RELU),
        LayerSpec(CONV2D, (c1, c2, 3, 3, 2, 1)), LayerSpec(RELU),
        LayerSpec(RESHAPE, (flat,)),
        LayerSpec(DENSE, (flat, hidden)), LayerSpec(RELU),
        LayerSpec(DENSE, (hidden, bottleneck)),
    ]
    decoder = [
        LayerSpec(DENSE, (bottleneck, hidden)), LayerSpec(RELU),
        LayerSpec(DENSE, (hidden, flat)), LayerSpec(RELU),
        LayerSpec(RESHAPE, (c2, s, s)),
        LayerSpec(CONV_T2D, (c2, c1, 4, 4, 2, 1)), LayerSpec(RELU),
        LayerSpec(CONV_T2D, (c1, channels, 4, 4, 2, 1)), LayerSpec(SIGMOID),
    ]
    return (channels, size, size), encoder, decoder


def build_desk_model(seed: int = 0, **topology) -> Autoencoder:
    shape, enc, dec = desk_topology(**topology)
    return build_autoencoder(shape, enc, dec, seed)


@dataclass
class DeskData:
    pretrain: np.ndarray
    eval: np.ndarray
    domains: dict[str, tuple[Domain, Domain]]
    pretrain_classes: tuple[int, ...]
    domain_classes: tuple[int, ...]


def desk_data(dataset: DatasetHandle | None = None, seed: int = 0, n_images: int = 3000,
              n_eval: int = 256, n_domain_test: int = 64, pretrain_classes=tuple(range(8)),
              domain_classes=(8, 9), transforms: dict[str, Transform] | None = None) -> DeskData:
    """Splits a labelled dataset into pretraining, held-out eval and four domains."""
    if dataset is None:
        dataset = gen_synthetic(n_images, 3, 16, 16, seed, n_classes=10)
    if set(pretrain_classes) & set(domain_classes):
        raise ValueError("pretraining and domain classes overlap")
    pre = dataset.images[np.isin(dataset.labels, pretrain_classes)]
    if len(pre) <= n_eval:
        raise ValueError("not enough pretraining images for the eval split")
    transforms = transforms or {k: Transform.default(k) for k in DOMAIN_KINDS}
    domains = {name: domain_train_test(dataset, domain_classes, t, n_domain_test, name)
               for name, t in transforms.items()}
    return DeskData(pre[:-n_eval], pre[-n_eval:], domains, tuple(pretrain_classes), tuple(domain_classes))
