import numpy as np
import pytest
from PIL import Image

from earseg.dataio import synth_vessels

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_samples():
    return synth_vessels(4, 32, np.random.default_rng(7))


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@pytest.fixture
def generic_root(tmp_path):
    """Generic layout with one 16×16 pair."""
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    gt = (rng.random((16, 16)) > 0.7).astype(np.uint8) * 255
    write_png(tmp_path / "images" / "a.png", img)
    write_png(tmp_path / "gt" / "a.png", gt)
    return tmp_path, img, gt
