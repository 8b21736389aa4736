import numpy as np
import pytest

from streamadapt.data import render_sequence, stock_domain
from streamadapt.model import ModelConfig, PerceptionModel


def smooth_image(h, w, seed=0, channels=3):
    """Low-frequency random image with values inside (0, 1)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.empty((h, w, channels))
    for c in range(channels):
        a, b, p, q = rng.uniform(0.5, 2.5, size=4)
        out[..., c] = 0.5 + 0.2 * np.sin(2 * np.pi * a * xx + p) * np.cos(2 * np.pi * b * yy + q)
    return out


@pytest.fixture(scope="session")
def source_seq():
    return render_sequence(stock_domain("domain-urban-a", n_frames=24))


@pytest.fixture(scope="session")
def target_seq():
    return render_sequence(stock_domain("domain-urban-b", n_frames=24))


@pytest.fixture(scope="session")
def source_samples(source_seq):
    return source_seq.samples()


@pytest.fixture(scope="session")
def target_samples(target_seq):
    return target_seq.samples()


@pytest.fixture
def tiny_model():
    return PerceptionModel(ModelConfig(height=16, width=16, enc_channels=(4, 6), head_channels=6), seed=3)
