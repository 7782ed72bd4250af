"""Desk-scale experiment suites emitting CSV tables.

Every cell derives its randomness from (config seed, cell seed), owns its
model copies, and rows are assembled in a fixed cell order, so reruns give
byte-identical tables.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from zfda.align import (
    adapt_full,
    adapt_zfda,
    domain_mse,
    eval_alignment,
    pair_mse,
    psnr,
    realign_equalizer,
    realign_tuning,
    restore_alignment,
)
from zfda.config import RunConfig
from zfda.data import DataError, DatasetHandle, downsample2x, gen_synthetic, read_cifar_binary, \
    read_tensor_file, write_csv_report
from zfda.delta import decode_patch
from zfda.desk import DeskData, build_desk_model, desk_data
from zfda.nn.checkpoint import encode_checkpoint, load_checkpoint
from zfda.nn.model import Autoencoder
from zfda.nn.train import pretrain

log = logging.getLogger(__name__)

BASELINE_NOTE = "simplified baseline"
SIDES = ("encoder", "decoder")
METHODS = ("misaligned", "tuning", "equalizer", "zfda-restore")


def load_dataset(cfg: RunConfig) -> DatasetHandle:
    """Dataset named by the ``dataset`` key, resized to ``image_size`` by 2x pooling."""
    src = cfg.dataset
    if src == "synthetic":
        return gen_synthetic(cfg.synthetic_size, cfg.channels, cfg.image_size, cfg.image_size,
                             cfg.data_seed, n_classes=max(cfg.pretrain_classes + cfg.domain_classes) + 1)
    path = Path(src)
    if not path.is_file():
        raise DataError(f"dataset: no such file {src!r}")
    if path.suffix == ".zft":
        lab_path = Path(cfg.labels) if cfg.labels else path.with_name("labels.zft")
        if not lab_path.is_file():
            raise DataError(f"labels: no such file {str(lab_path)!r}")
        images = read_tensor_file(path)
        labels = read_tensor_file(lab_path)
        if images.ndim != 4 or labels.ndim != 1:
            raise DataError("dataset .zft must be [N, C, H, W] with a rank-1 labels tensor")
        if np.any(labels != np.round(labels)):
            raise DataError("labels must be integers")
        ds = DatasetHandle(images, labels.astype(np.int64), f"zft:{path.name}")
    else:
        ds = read_cifar_binary(path, cfg.dataset_variant)
    while ds.images.shape[-1] > cfg.image_size:
        ds = DatasetHandle(downsample2x(ds.images), ds.labels, ds.source)
    if ds.images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DataError(f"dataset images {ds.images.shape[1:]} do not fit the configured "
                        f"{cfg.channels}x{cfg.image_size}x{cfg.image_size} model")
    return ds


def build_data(cfg: RunConfig, dataset: DatasetHandle | None = None) -> DeskData:
    dataset = dataset if dataset is not None else load_dataset(cfg)
    try:
        return desk_data(dataset, n_eval=cfg.n_eval, n_domain_test=cfg.n_domain_test,
                         pretrain_classes=cfg.pretrain_classes, domain_classes=cfg.domain_classes,
                         transforms=cfg.transforms())
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def pretrain_model(cfg: RunConfig, data: DeskData) -> tuple[Autoencoder, list[float]]:
    model = build_desk_model(cfg.seed, **cfg.topology())
    return pretrain(model, data.pretrain, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size, cfg.seed)


def pristine_model(cfg: RunConfig, data: DeskData) -> Autoencoder:
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    return pretrain_model(cfg, data)[0]


def _cell_seed(cfg: RunConfig, seed: int, domain_idx: int) -> int:
    return cfg.seed * 1000 + seed * 10 + domain_idx


def _zfda(cfg: RunConfig, model, domain, seed, gamma=None, epochs=None, **opts):
    return adapt_zfda(model, domain, cfg.gamma if gamma is None else gamma,
                      cfg.sam_epochs if epochs is None else epochs, cfg.alpha_s, cfg.alpha_v,
                      seed, cfg.batch_size, v_grad_mode=cfg.v_grad_mode, **opts)


def misalignment_suite(cfg: RunConfig, pristine: Autoencoder, data: DeskData) -> list[dict]:
    """Cross pairs with one side adapted to each domain, before and after re-alignment."""
    base = pair_mse(pristine, pristine, data.eval)
    shared = data.pretrain[:cfg.tuning_data]
    rows = []
    for d_idx, (name, (train, _)) in enumerate(data.domains.items()):
        for seed in cfg.seeds:
            cs = _cell_seed(cfg, seed, d_idx)
            full = adapt_full(pristine, train, cfg.da_epochs, cfg.da_lr, cs, cfg.batch_size)
            z = _zfda(cfg, pristine, train, cs)
            restored = restore_alignment(z.adapted, decode_patch(z.patch.to_bytes(), pristine))
            for side in SIDES:
                def pair(m):
                    return (m, pristine) if side == "encoder" else (pristine, m)

                enc, dec = pair(full)
                reports = {"misaligned": (eval_alignment(enc, dec, data.eval, base), "")}
                tuned = realign_tuning(enc, dec, shared, cfg.tuning_iterations, cfg.tuning_lr, cs,
                                       cfg.batch_size, data.eval, base).model
                reports["tuning"] = (eval_alignment(tuned, tuned, data.eval, base), BASELINE_NOTE)
                eq = realign_equalizer(enc, dec, shared, cfg.equalizer_epochs, cfg.equalizer_lr, cs,
                                       cfg.batch_size, cfg.equalizer_hidden or None)
                reports["equalizer"] = (eval_alignment(enc, dec, data.eval, base, equalizer=eq), BASELINE_NOTE)
                reports["zfda-restore"] = (eval_alignment(*pair(restored), data.eval, base), "")
                for method in METHODS:
                    rep, note = reports[method]
                    rows.append({"domain": name, "side": side, "method": method, "seed": seed,
                                 "mse": rep.mse, "psnr_db": rep.psnr_db, "j": rep.misalignment_j,
                                 "note": note})
            log.info("misalignment %s seed %d done", name, seed)
    return rows


def misalignment_summary(rows: list[dict]) -> list[dict]:
    out = []
    for side in SIDES:
        for method in METHODS:
            sel = [r for r in rows if r["side"] == side and r["method"] == method]
            if sel:
                out.append({"side": side, "method": method,
                            "mean_psnr_db": float(np.mean([r["psnr_db"] for r in sel])),
                            "mean_j": float(np.mean([r["j"] for r in sel])), "cells": len(sel),
                            "note": sel[0]["note"]})
    return out


def _patch_row(pristine, patch, extra):
    ckpt_bytes = len(encode_checkpoint(pristine))
    dense_bytes = 4 * pristine.n_params
    row = dict(extra)
    row.update({"entries": patch.count, "budget": int(patch.gamma * pristine.n_params),
                "patch_bytes": patch.file_size, "value_bytes": patch.value_bytes,
                "checkpoint_bytes": ckpt_bytes, "dense_f32_bytes": dense_bytes,
                "patch_ratio": patch.file_size / dense_bytes, "value_ratio": patch.value_bytes / dense_bytes})
    return row


def sweep_suite(cfg: RunConfig, pristine: Autoencoder, data: DeskData) -> list[dict]:
    """Domain quality and restored alignment across the sparsity grid, with full DA reference rows."""
    base = pair_mse(pristine, pristine, data.eval)
    rows = []
    for d_idx, (name, (train, test)) in enumerate(data.domains.items()):
        for seed in cfg.seeds:
            cs = _cell_seed(cfg, seed, d_idx)
            full = adapt_full(pristine, train, cfg.da_epochs, cfg.da_lr, cs, cfg.batch_size)
            fm = domain_mse(full, test)
            rows.append({"domain": name, "method": "full", "gamma": 1.0, "seed": seed,
                         "domain_mse": fm, "domain_psnr_db": psnr(fm),
                         "align_psnr_db": psnr(pair_mse(full, pristine, data.eval)),
                         "restored_j": float("nan"), "entries": pristine.n_params,
                         "patch_bytes": 0, "value_bytes": 4 * pristine.n_params})
            for gamma in cfg.gamma_grid:
                z = _zfda(cfg, pristine, train, cs, gamma=gamma)
                zm = domain_mse(z.adapted, test)
                patch = decode_patch(z.patch.to_bytes(), pristine)
                restored = restore_alignment(z.adapted, patch)
                rep = eval_alignment(restored, pristine, data.eval, base)
                rows.append({"domain": name, "method": "zfda", "gamma": gamma, "seed": seed,
                             "domain_mse": zm, "domain_psnr_db": psnr(zm), "align_psnr_db": rep.psnr_db,
                             "restored_j": rep.misalignment_j, "entries": patch.count,
                             "patch_bytes": patch.file_size, "value_bytes": patch.value_bytes})
            log.info("sweep %s seed %d done", name, seed)
    return rows


def economics_table(cfg: RunConfig, pristine: Autoencoder, data: DeskData) -> list[dict]:
    """Patch size against the dense f32 model, under both byte accountings."""
    train = next(iter(data.domains.values()))[0]
    rows = []
    for gamma in cfg.economics_gammas:
        z = _zfda(cfg, pristine, train, cfg.seed, gamma=gamma, epochs=1)
        rows.append(_patch_row(pristine, z.patch, {"gamma": gamma}))
    return rows


ABLATION_CELLS = (("optimized", "linear"), ("optimized", "uniform"), ("frozen", "linear"), ("frozen", "uniform"))


def ablation_suite(cfg: RunConfig, pristine: Autoencoder, data: DeskData) -> list[dict]:
    """Optimized vs frozen random masks crossed with linear vs uniform allocation."""
    rows = []
    for d_idx, (name, (train, test)) in enumerate(data.domains.items()):
        for seed in cfg.seeds:
            cs = _cell_seed(cfg, seed, d_idx)
            for mask, alloc in ABLATION_CELLS:
                z = _zfda(cfg, pristine, train, cs, gamma=cfg.ablation_gamma, epochs=cfg.ablation_epochs,
                          allocation=alloc, train_mask=mask == "optimized")
                m = domain_mse(z.adapted, test)
                rows.append({"domain": name, "seed": seed, "mask": mask, "allocation": alloc,
                             "domain_mse": m, "domain_psnr_db": psnr(m)})
            log.info("ablation %s seed %d done", name, seed)
    return rows


def ablation_summary(rows: list[dict]) -> list[dict]:
    out = []
    for mask, alloc in ABLATION_CELLS:
        sel = [r["domain_psnr_db"] for r in rows if r["mask"] == mask and r["allocation"] == alloc]
        out.append({"mask": mask, "allocation": alloc, "mean_psnr_db": float(np.mean(sel)), "cells": len(sel)})
    return out


SUITES = ("misalignment", "zfda-sweep", "ablation")


def run_suite(suite: str, cfg: RunConfig, pristine: Autoencoder | None = None,
              data: DeskData | None = None, out_dir=None) -> dict[str, list[dict]]:
    """Runs one suite and writes its CSV tables into ``out_dir`` (default ``cfg.out_dir``)."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    data = data if data is not None else build_data(cfg)
    pristine = pristine if pristine is not None else pristine_model(cfg, data)
    if suite == "misalignment":
        rows = misalignment_suite(cfg, pristine, data)
        tables = {"misalignment": rows, "misalignment_summary": misalignment_summary(rows)}
    elif suite == "zfda-sweep":
        tables = {"zfda_sweep": sweep_suite(cfg, pristine, data),
                  "patch_economics": economics_table(cfg, pristine, data)}
    else:
        rows = ablation_suite(cfg, pristine, data)
        tables = {"ablation": rows, "ablation_summary": ablation_summary(rows)}
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    for name, rows in tables.items():
        write_csv_report(rows, out / f"{name}.csv")
    return tables
