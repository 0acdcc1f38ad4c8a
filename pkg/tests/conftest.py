import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lite_encoder.attention import AttentionHyper, init_params  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(hyper, kind, seed, scale=0.3):
    """Initialized parameters with every array perturbed, so no path is trivially zero."""
    base = init_params(hyper, seed, kind)
    r = np.random.default_rng(seed + 1)
    return base.replace(**{k: v + scale * r.standard_normal(v.shape) for k, v in base.arrays().items()})


@pytest.fixture
def small_case():
    """3 queries, 2 levels, M=2, K=2, d=4."""
    r = np.random.default_rng(7)
    hyper = AttentionHyper(m_heads=2, k_points=2, n_levels=2, d_model=4)
    levels = [r.standard_normal((4, 5, 4)), r.standard_normal((2, 3, 4))]
    queries = r.standard_normal((3, 4))
    refs = r.uniform(0.1, 0.9, (3, 2))
    return hyper, levels, queries, refs


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
