import numpy as np
import pytest

from omdet.autodiff import precision
from omdet.mdn import ModelConfig, OmDet


def tiny_config(**kw) -> ModelConfig:
    base = dict(num_proposals=5, d=16, stages=2, heads=4, max_k=4, d_text=8, backbone_channels=(8, 8, 16, 16),
                stem_channels=8, pool=2, encoder_layers=1, ffn_hidden=32, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return OmDet(tiny_config())


@pytest.fixture
def tiny_model64():
    with precision("float64"):
        return OmDet(tiny_config())


# (criterion, verdict, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {detail}")
