import numpy as np
import pytest
import torch

from sfit.data import ImageSet


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def digits(n=40, channels=1, size=28, seed=0, labeled=True):
    """Random blocky images in [-1, 1] with labels 0..9."""
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(n, channels, size, size), dtype=np.uint8)
    images = px.astype(np.float32) / 127.5 - 1
    labels = rng.integers(0, 10, size=n) if labeled else None
    return ImageSet(images, labels)


@pytest.fixture
def small_set():
    return digits()


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
