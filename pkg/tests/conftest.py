import numpy as np
import pytest

from patchcast.data import SyntheticSpec, generate_synthetic, make_windows
from patchcast.model import Model, ModelConfig


TINY_CONFIG = ModelConfig(
    context_len=16, horizon=2, n_vars=1, scales=(4, 8),
    d_model=8, n_layers=2, n_heads=2, d_ff=16, adapter_enabled=True, proj_dim=16,
)

DESK_CONFIG = ModelConfig(
    context_len=64, horizon=8, n_vars=1, scales=(8, 16),
    d_model=32, n_layers=2, n_heads=4, d_ff=64, adapter_enabled=True,
)


@pytest.fixture
def tiny_model():
    return Model.init(TINY_CONFIG, seed=0)


@pytest.fixture
def tiny_model_random():
    """Tiny model with every tensor randomized (no exact ReLU kinks at zero)."""
    model = Model.init(TINY_CONFIG, seed=0)
    rng = np.random.default_rng(99)
    for t in model.params.values():
        t.data = rng.normal(0.0, 0.3, size=t.data.shape)
    return model


@pytest.fixture
def sine_windows():
    spec = SyntheticSpec(
        "sine_trend", length=256, n_series=2, seed=5,
        params={"period": 8.0, "noise_std": 0.2},
    )
    sources = generate_synthetic(spec)
    return [w for s in sources for w in make_windows(s, 16, 2, 8)]


@pytest.fixture
def desk_windows():
    spec = SyntheticSpec(
        "sine_trend", length=512, n_series=2, seed=7,
        params={"period": 16.0, "noise_std": 0.0},
    )
    sources = generate_synthetic(spec)
    return [w for s in sources for w in make_windows(s, 64, 8, 8)]
