"""Run configuration: ``key = value`` files with ``#`` comments plus flag overrides."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from zfda.transforms import VA, VC, VH, VP, Transform


class ConfigError(ValueError):
    pass


def _int_range(lo, hi=None):
    def parse(key, text):
        try:
            v = int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
        if v < lo or (hi is not None and v > hi):
            raise ConfigError(f"{key}: {v} outside [{lo}, {'inf' if hi is None else hi}]")
        return v
    return parse


def _float_range(lo, hi=None, lo_open=False):
    def parse(key, text):
        try:
            v = float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
        bad_lo = v <= lo if lo_open else v < lo
        if not math.isfinite(v) or bad_lo or (hi is not None and v > hi):
            bracket = "(" if lo_open else "["
            raise ConfigError(f"{key}: {v} outside {bracket}{lo}, {'inf' if hi is None else hi}]")
        return v
    return parse


def _choice(*options):
    def parse(key, text):
        if text not in options:
            raise ConfigError(f"{key}: {text!r} not one of {', '.join(options)}")
        return text
    return parse


def _text(key, text):
    return text


def _int_list(key, text):
    """Comma list with ``a-b`` ranges, e.g. ``0-7`` or ``8,9``."""
    out = []
    try:
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "-" in part:
                a, b = (int(x) for x in part.split("-", 1))
                if b < a:
                    raise ValueError
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse integer list {text!r}") from None
    if not out or min(out) < 0:
        raise ConfigError(f"{key}: need one or more non-negative integers")
    return tuple(out)


def _gamma_list(key, text):
    try:
        vals = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse number list {text!r}") from None
    if not vals or any(not (0 < v <= 1) for v in vals):
        raise ConfigError(f"{key}: every ratio must lie in (0, 1]")
    return vals


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str, str], Any]
    help: str


KEYS: dict[str, Key] = {
    # data
    "dataset": Key("synthetic", _text, "'synthetic', a CIFAR .bin file, or an images .zft file"),
    "dataset_variant": Key("cifar10", _choice("cifar10", "cifar100"), "CIFAR binary layout"),
    "labels": Key("", _text, "labels .zft for a .zft dataset (default: labels.zft beside it)"),
    "synthetic_size": Key(3000, _int_range(1), "images generated when dataset = synthetic"),
    "data_seed": Key(0, _int_range(0), "seed for synthetic data"),
    "pretrain_classes": Key((0, 1, 2, 3, 4, 5, 6, 7), _int_list, "labels in the pretraining distribution"),
    "domain_classes": Key((8, 9), _int_list, "labels forming the local domains"),
    "n_eval": Key(256, _int_range(1), "held-out pretraining-distribution images for J"),
    "n_domain_test": Key(64, _int_range(1), "held-out images per domain"),
    # topology
    "image_size": Key(16, _int_range(4), "model input height and width"),
    "channels": Key(3, _int_range(1), "image channels"),
    "width": Key(8, _int_range(1), "channels of the first conv layer"),
    "hidden": Key(128, _int_range(1), "dense hidden width"),
    "bottleneck": Key(128, _int_range(1), "semantic dimension"),
    # pretraining
    "seed": Key(0, _int_range(0), "model / run seed"),
    "pretrain_epochs": Key(40, _int_range(1), "pretraining epochs"),
    "pretrain_lr": Key(0.01, _float_range(0, None, lo_open=True), "pretraining learning rate"),
    "batch_size": Key(32, _int_range(1), "minibatch size"),
    # adaptation
    "checkpoint": Key("", _text, "pristine .zfm checkpoint"),
    "pristine_digest": Key("", _text, "expected SHA-256 hex of the pristine checkpoint"),
    "domain": Key(VA, _choice(VA, VP, VC, VH), "domain transform used by adapt"),
    "da_epochs": Key(10, _int_range(0), "full fine-tune epochs"),
    "da_lr": Key(1e-4, _float_range(0, None, lo_open=True), "full fine-tune learning rate"),
    "gamma": Key(0.01, _float_range(0, 1, lo_open=True), "sparsity ratio"),
    "sam_epochs": Key(30, _int_range(0), "SAM epochs"),
    "alpha_s": Key(1.0, _float_range(0), "score learning rate"),
    "alpha_v": Key(1e-4, _float_range(0), "value learning rate"),
    "allocation": Key("linear", _choice("linear", "uniform"), "per-layer sparsity scheme"),
    "v_grad_mode": Key("dense", _choice("dense", "masked"), "gradient used for the values"),
    # transforms
    "va_degrees": Key(30.0, _float_range(-360, 360), "rotation angle"),
    "vp_shift": Key(0.2, _float_range(0, 0.99), "perspective corner shift"),
    "vc_contrast": Key(1.8, _float_range(0, None, lo_open=True), "contrast factor"),
    "vh_degrees": Key(60.0, _float_range(-360, 360), "hue rotation"),
    # re-alignment baselines
    "tuning_iterations": Key(8, _int_range(0), "joint fine-tune passes"),
    "tuning_data": Key(1024, _int_range(1), "shared images for tuning and equalizer"),
    "tuning_lr": Key(0.01, _float_range(0, None, lo_open=True), "joint fine-tune learning rate"),
    "equalizer_epochs": Key(30, _int_range(0), "equalizer training epochs"),
    "equalizer_lr": Key(0.01, _float_range(0, None, lo_open=True), "equalizer learning rate"),
    "equalizer_hidden": Key(0, _int_range(0), "equalizer hidden width (0 = semantic dim)"),
    # experiments
    "seeds": Key((0, 1, 2), _int_list, "adaptation seeds for the suites"),
    "gamma_grid": Key((0.0003, 0.001, 0.003, 0.01), _gamma_list, "sweep ratios"),
    "economics_gammas": Key((0.0025, 0.01), _gamma_list, "ratios for the patch-size table"),
    "ablation_gamma": Key(0.01, _float_range(0, 1, lo_open=True), "ratio used by the ablation"),
    "ablation_epochs": Key(10, _int_range(1), "SAM epochs per ablation cell"),
    "out_dir": Key("out", _text, "output directory"),
}


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings; attribute access by key name."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = KEYS[key].parse(key, value.strip())
        else:
            value = KEYS[key].parse(key, _render(value))
        self._values[key] = value

    def __getattr__(self, key: str):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def transforms(self) -> dict[str, Transform]:
        return {VA: Transform(VA, self.va_degrees), VP: Transform(VP, self.vp_shift),
                VC: Transform(VC, self.vc_contrast), VH: Transform(VH, self.vh_degrees)}

    def topology(self) -> dict[str, int]:
        return {"channels": self.channels, "size": self.image_size, "width": self.width,
                "hidden": self.hidden, "bottleneck": self.bottleneck}

    def echo(self) -> str:
        lines = ["# resolved configuration"]
        lines += [f"{k} = {_render(v)}" for k, v in self._values.items()]
        return "\n".join(lines) + "\n"

    def write_echo(self, directory) -> Path:
        path = Path(directory) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.echo())
        return path


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key = value`` pairs; later duplicates are an error."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (from flags) on top."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for key, value in parse_config_text(text, str(path)).items():
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg
