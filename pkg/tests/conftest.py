import numpy as np
import pytest

from jointiq.enhancement import GrdnConfig
from jointiq.model import CodecModel, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(n=8, m=12, g=3, min_count=10, lam=0.06,
                grdn=GrdnConfig(1, 1, 2, 8), hidden_mult=2, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_model() -> CodecModel:
    return CodecModel(tiny_config())


@pytest.fixture(scope="session")
def toy_images():
    """Smooth random fields; compressible enough to exercise the codec."""
    rng = np.random.default_rng(42)
    images = []
    for h, w in [(13, 17), (33, 50), (40, 56), (64, 64)]:
        base = rng.uniform(-0.7, 0.7, (3, 1, 1))
        ramp = np.linspace(-0.2, 0.2, w)[None, None, :]
        img = np.clip(base + ramp + 0.05 * rng.standard_normal((3, h, w)),
                      -1.0, 1.0)
        images.append(img)
    return images
