import numpy as np
import pytest

from maformer.config import ModelConfig

TINY = dict(img_size=[32, 32], stage_dims=[8, 8, 8, 8], stage_depths=[1, 1, 1, 1],
            num_heads=[2, 2, 2, 2], window_sizes=[3, 3, 3, 3], stripe_widths=[3, 1, 1, 1],
            num_classes=3)


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny():
    return tiny_config()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
