import numpy as np
import pytest
import torch

from dap.config import ModelConfig
from dap.model import build_model

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(image_size=16, patch_size=4, vision_depth=2, vision_width=16, vision_heads=2,
                       text_depth=1, text_width=16, text_heads=2, vocab_size=12, embed_dim=16,
                       decoder_heads=2, decoder_channels=4)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0, dtype=torch.float64).eval()


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    images = torch.from_numpy(rng.uniform(size=(3, 1, 16, 16)))
    tokens = [(2, 3, 4), (5, 6), (7, 8, 9, 10)]
    return images, tokens


_CRITERIA = {}


def record_criterion(number, passed, detail):
    """Store an acceptance result; printed as one line per criterion at session end."""
    _CRITERIA[number] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
