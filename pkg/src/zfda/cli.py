"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 data error, 3 divergence,
4 digest mismatch or failed restore verification, 5 incompatible shapes.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from zfda import experiments as ex
from zfda.align import adapt_zfda, domain_mse, eval_alignment, pair_mse, psnr
from zfda.config import KEYS, ConfigError, RunConfig, load_config
from zfda.data import DataError, gen_synthetic, write_csv_report, write_tensor_file
from zfda.delta import DigestMismatchError, PatchError, apply_patch, export_patch, load_patch, revert_patch
from zfda.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from zfda.nn.layers import ShapeError
from zfda.nn.model import Autoencoder
from zfda.nn.train import DivergenceError, fit

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_DIGEST, EXIT_SHAPE = range(6)

log = logging.getLogger("zfda")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    return out


def _read_model(path, key: str) -> Autoencoder:
    if not path:
        raise ConfigError(f"{key}: a checkpoint path is required")
    if not Path(path).is_file():
        raise DataError(f"{key}: no such file {str(path)!r}")
    return load_checkpoint(path)


def _pristine(cfg: RunConfig) -> Autoencoder:
    model = _read_model(cfg.checkpoint, "checkpoint")
    if cfg.pristine_digest and model.digest().hex() != cfg.pristine_digest.lower():
        raise DigestMismatchError(f"checkpoint digest {model.digest().hex()} differs from "
                                  f"pristine_digest {cfg.pristine_digest}")
    return model


def cmd_pretrain(cfg: RunConfig, args) -> int:
    data = ex.build_data(cfg)
    out = _out_dir(cfg)
    model, history = ex.pretrain_model(cfg, data)
    digest = save_checkpoint(model, out / "pristine.zfm").hex()
    (out / "pristine.sha256").write_text(digest + "\n")
    write_csv_report([{"epoch": i + 1, "loss": v} for i, v in enumerate(history)], out / "pretrain_loss.csv")
    ev = pair_mse(model, model, data.eval)
    print(f"pretrained {model.n_params} params, eval mse {ev:.6g} ({psnr(ev):.2f} dB)")
    print(f"digest {digest}")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, args) -> int:
    pristine = _pristine(cfg)
    data = ex.build_data(cfg)
    out = _out_dir(cfg)
    train, test = data.domains[cfg.domain]
    rows = [{"domain": cfg.domain, "method": "pristine", "train_mse": domain_mse(pristine, train),
             "test_mse": domain_mse(pristine, test)}]
    if args.method == "full":
        adapted, history = fit(pristine, train.images, cfg.da_epochs, cfg.da_lr, cfg.batch_size, cfg.seed)
        save_checkpoint(adapted, out / "adapted.zfm")
    else:
        res = adapt_zfda(pristine, train, cfg.gamma, cfg.sam_epochs, cfg.alpha_s, cfg.alpha_v, cfg.seed,
                         cfg.batch_size, allocation=cfg.allocation, v_grad_mode=cfg.v_grad_mode)
        adapted, history = res.adapted, res.run.history
        save_checkpoint(adapted, out / "adapted.zfm")
        export_patch(res.delta, pristine, out / "patch.zfp")
        # zero-forget is verified from the files just written
        patch = load_patch(out / "patch.zfp", pristine)
        restored = revert_patch(load_checkpoint(out / "adapted.zfm"), patch)
        if restored.digest() != pristine.digest():
            raise DigestMismatchError("restore verification failed")
        print(f"patch entries {patch.count} / {pristine.n_params} "
              f"({100 * patch.count / pristine.n_params:.4f}%, budget {100 * cfg.gamma:g}%)")
        print(f"restore verified {restored.digest().hex()}")
    rows.append({"domain": cfg.domain, "method": args.method, "train_mse": domain_mse(adapted, train),
                 "test_mse": domain_mse(adapted, test)})
    write_csv_report(rows, out / "domain_loss.csv")
    write_csv_report([{"epoch": i + 1, "loss": v} for i, v in enumerate(history)], out / "adapt_loss.csv")
    print(f"{args.method} {cfg.domain}: test mse {rows[0]['test_mse']:.6g} -> {rows[1]['test_mse']:.6g}")
    return EXIT_OK


ALIGN_COLUMNS = ["encoder", "decoder", "eval_set", "mse", "psnr_db", "j"]


def cmd_align_eval(cfg: RunConfig, args) -> int:
    pristine = _pristine(cfg)
    enc = _read_model(args.encoder, "encoder")
    dec = _read_model(args.decoder, "decoder")
    data = ex.build_data(cfg)
    base = pair_mse(pristine, pristine, data.eval)
    rep = eval_alignment(enc, dec, data.eval, base, "pretrain-eval", args.encoder, args.decoder)
    out = _out_dir(cfg)
    path = out / "align_eval.csv"
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(ALIGN_COLUMNS)
        w.writerow([rep.encoder, rep.decoder, rep.eval_set, format(rep.mse, ".9g"),
                    format(rep.psnr_db, ".9g"), "0" if rep.misalignment_j == 0 else format(rep.misalignment_j, ".9g")])
    print(f"mse {rep.mse:.6g}  psnr {rep.psnr_db:.4f} dB  J {rep.misalignment_j:.6g}")
    return EXIT_OK


def cmd_patch(cfg: RunConfig, args) -> int:
    model = _read_model(args.checkpoint, "checkpoint")
    if not Path(args.patch).is_file():
        raise DataError(f"patch: no such file {args.patch!r}")
    patch = load_patch(args.patch, model)
    if args.action == "verify":
        if model.digest() == patch.model_digest:
            print("OK")
            print(f"pristine {model.digest().hex()}")
            return EXIT_OK
        restored = revert_patch(model, patch)
        print("OK")
        print(f"adapted; reverts to {restored.digest().hex()}")
        return EXIT_OK
    if args.action == "apply":
        result = apply_patch(model, patch)
    else:
        result = revert_patch(model, patch)
    dest = Path(args.output) if args.output else Path(args.checkpoint).with_suffix(f".{args.action}.zfm")
    digest = save_checkpoint(result, dest)
    print(f"{args.action} -> {dest}")
    print(f"digest {digest.hex()}")
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, args) -> int:
    tables = ex.run_suite(args.suite, cfg)
    for name, rows in tables.items():
        print(f"{name}: {len(rows)} rows -> {Path(cfg.out_dir) / (name + '.csv')}")
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig, args) -> int:
    n_classes = max(cfg.pretrain_classes + cfg.domain_classes) + 1
    ds = gen_synthetic(cfg.synthetic_size, cfg.channels, cfg.image_size, cfg.image_size,
                       cfg.data_seed, n_classes)
    out = _out_dir(cfg)
    write_tensor_file(out / "images.zft", ds.images)
    write_tensor_file(out / "labels.zft", ds.labels.astype(np.float32))
    print(f"wrote {len(ds)} images to {out / 'images.zft'}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "align-eval": cmd_align_eval,
            "patch": cmd_patch, "experiment": cmd_experiment, "gen-data": cmd_gen_data}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config overrides")
    for key, spec in KEYS.items():
        keys.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V", help=spec.help)

    parser = argparse.ArgumentParser(prog="zfda", description="Zero-forget domain adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pretrain the autoencoder")
    p = sub.add_parser("adapt", parents=[common], help="adapt a pristine checkpoint to a domain")
    p.add_argument("--method", choices=("full", "zfda"), default="zfda")
    p = sub.add_parser("align-eval", parents=[common], help="evaluate an encoder/decoder cross pair")
    p.add_argument("--encoder", required=True)
    p.add_argument("--decoder", required=True)
    p = sub.add_parser("patch", parents=[common], help="apply, revert or verify a .zfp patch")
    p.add_argument("action", choices=("apply", "revert", "verify"))
    p.add_argument("checkpoint")
    p.add_argument("patch")
    p.add_argument("-o", "--output")
    p = sub.add_parser("experiment", parents=[common], help="run an experiment suite")
    p.add_argument("suite", choices=ex.SUITES)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as .zft files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except DigestMismatchError as exc:
        code, msg = EXIT_DIGEST, f"digest mismatch: {exc}"
    except ShapeError as exc:
        code, msg = EXIT_SHAPE, f"incompatible shapes: {exc}"
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGED, f"diverged: {exc}"
    except (DataError, CheckpointError, PatchError, OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    print(f"zfda: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
