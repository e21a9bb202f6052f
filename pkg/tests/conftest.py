import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from revgan3d.model import ModelConfig, RevGANModel
from revgan3d.revcore import RevSequence

settings.register_profile("revgan3d", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("revgan3d")

# small widths that keep full-model tests fast
TINY = dict(base_channels=4, core_channels=8, disc_channels=(4, 8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_params(module, rng, std=0.2):
    """Replace every parameter with random values (breaks the zero-init identity)."""
    for p in module.parameters():
        p.data = rng.normal(0.0, std, size=p.shape).astype(p.dtype)


def make_core(channels, depth, seed=0, dtype=np.float64, std=0.2):
    core = RevSequence(channels, depth, rng=np.random.default_rng(seed), dtype=dtype)
    randomize_params(core, np.random.default_rng(seed + 1), std)
    return core


def tiny_model(task="domain-adaptation", depth=2, dtype="float64", memory="reversible", seed=0,
               **overrides):
    cfg = ModelConfig(task=task, depth=depth, dtype=dtype, **{**TINY, **overrides})
    return RevGANModel(cfg, rng=np.random.default_rng(seed), memory=memory)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
