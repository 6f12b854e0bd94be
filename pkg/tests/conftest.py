import numpy as np
import pytest

from xmodal.corpus import COLORS, generate_corpus
from xmodal.model import ModelConfig
from xmodal.trainer import Dataset


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(0)


@pytest.fixture(scope="session")
def toy_dataset(corpus):
    """Corpus with cheap synthetic visual features (F=6) instead of CAE codes."""
    rng = np.random.default_rng(5)
    proj = rng.normal(size=(5, 6))
    feats = []
    for s in corpus.samples:
        colour = COLORS.index(s.scene.color_at(s.label.position)) / 6.0
        feats.append(np.tanh(s.joints @ proj) + colour)
    return Dataset.build(corpus, feats)


@pytest.fixture
def tiny_config():
    return ModelConfig(kind="ptae", h_dim=8, heads=4, f_visual=6)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
