import numpy as np
import pytest
import torch

from cass.arms import ArmSpec
from cass.augment import AugmentConfig
from cass.data import split, synth_dataset


@pytest.fixture(autouse=True)
def _torch_double_default():
    torch.set_default_dtype(torch.float32)
    yield


@pytest.fixture(scope="session")
def tiny_ds():
    return split(synth_dataset(60, 3, 32, structure_seed=3), seed=0)


@pytest.fixture
def aug32():
    return AugmentConfig.for_size(32)


@pytest.fixture
def cnn_spec():
    return ArmSpec("cnn", "micro_cnn", head_dim=16)


@pytest.fixture
def vit_spec():
    return ArmSpec("vit", "vit_tiny_p4", head_dim=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            for key, value in getattr(rep, "user_properties", ()):
                if key == "criterion" and getattr(rep, "when", "call") == "call":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
