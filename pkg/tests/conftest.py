import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    """Collect one verdict line per acceptance criterion for the summary."""
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def full_scale_trace():
    """One 224x224 forward at the default width, shared across test files."""
    from mambaseg import unet

    cfg = unet.ModelConfig(input_h=224, input_w=224, num_classes=4, embed_dim=96)
    weights = unet.init_weights(cfg, seed=0)
    image = np.random.default_rng(0).normal(size=(224, 224, 1))
    trace = []
    logits = unet.forward(image, weights, trace=trace)
    return cfg, dict(trace), logits.shape
