from pathlib import Path

import numpy as np
import pytest

from zfda.config import load_config
from zfda.experiments import build_data, pretrain_model
from zfda.nn.layers import CONV2D, CONV_T2D, DENSE, RELU, RESHAPE, SIGMOID, LayerSpec
from zfda.nn.model import build_autoencoder

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.cfg"

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request, capsys):
    """Records and prints one PASS/FAIL line per criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


@pytest.fixture(scope="session")
def desk_cfg():
    return load_config(DESK_CONFIG)


@pytest.fixture(scope="session")
def desk(desk_cfg):
    return build_data(desk_cfg)


@pytest.fixture(scope="session")
def pristine(desk_cfg, desk):
    return pretrain_model(desk_cfg, desk)[0]


def tiny_model(seed=0, dtype=np.float32):
    """Small conv autoencoder touching every layer kind."""
    enc = [LayerSpec(CONV2D, (3, 4, 3, 3, 2, 1)), LayerSpec(RELU), LayerSpec(RESHAPE, (64,)),
           LayerSpec(DENSE, (64, 8))]
    dec = [LayerSpec(DENSE, (8, 64)), LayerSpec(RELU), LayerSpec(RESHAPE, (4, 4, 4)),
           LayerSpec(CONV_T2D, (4, 3, 4, 4, 2, 1)), LayerSpec(SIGMOID)]
    return build_autoencoder((3, 8, 8), enc, dec, seed).astype(dtype)


@pytest.fixture
def tiny():
    return tiny_model()
