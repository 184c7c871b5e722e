import numpy as np
import pytest

from relmap.synthdata import DatasetConfig, generate_dataset
from relmap.vit import ViTConfig, init_model

TINY = ViTConfig(image_size=16, patch_size=8, embed_dim=8, depth=2, heads=2, mlp_ratio=2.0, num_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    return init_model(TINY, seed=0)


@pytest.fixture(scope="session")
def small_samples():
    samples, _ = generate_dataset(DatasetConfig(classes=8, per_class=4, seed=3))
    return samples


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
