from pathlib import Path

import numpy as np
import pytest
import torch

from refface.degrade import degrade_batch
from refface.diffusion import RestorationModel, make_schedule
from refface.encoders import GeneralEncoder, IdentityEncoder, freeze
from refface.toyfaces import build_dataset


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """8 identities (6 train / 2 test), 3 HQ + 3 refs each, both presets degraded."""
    root = tmp_path_factory.mktemp("toy8")
    m = build_dataset(8, 3, 0.75, seed=3, out_dir=root, hq_per_identity=2)
    m = degrade_batch(m, "moderate", 0)
    return degrade_batch(m, "severe", 0)


@pytest.fixture(scope="session")
def raw_encoders():
    """Untrained but frozen encoders: enough for shape, masking and gradient checks."""
    torch.manual_seed(0)
    return freeze(IdentityEncoder()), freeze(GeneralEncoder())


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return RestorationModel(channels=(16, 32)).eval()


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PIPELINE = ("gen-data", "degrade", "train-encoders", "train", "eval", "ablate", "sweep-ref", "sweep-lambda",
            "sweep-cfg", "plot")


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """The full CLI pipeline on the 8-identity smoke config. Returns (runs root, exit codes)."""
    from refface.cli import main

    out = tmp_path_factory.mktemp("runs")
    codes = {sub: main([sub, "--config", str(CONFIGS / "smoke.yaml"), "--out", str(out)]) for sub in PIPELINE}
    return out / "smoke", codes


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
