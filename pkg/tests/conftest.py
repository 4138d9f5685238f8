import numpy as np
import pytest

from lpv.backbone import BackboneConfig
from lpv.model import LpvConfig, Schedule


def tiny_config(dtype="float64", n_stages=2, glrm_layers=1, t_max=3, seed=0, **sched):
    """16x16 images, E=8, two heads: small enough for finite differences."""
    return LpvConfig(
        n_stages=n_stages, glrm_layers=glrm_layers, t_max=t_max,
        backbone=BackboneConfig(img_h=16, img_w=16, e=8, heads=2, n_mix_blocks=1),
        schedule=Schedule(**sched), seed=seed, dtype=dtype)


@pytest.fixture
def tiny():
    return tiny_config()


def random_images(n, h=16, w=16, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).random((n, h, w, 1)).astype(dtype)


# Lines appended by the acceptance suite, echoed in the terminal summary so
# they appear even when stdout is captured.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
