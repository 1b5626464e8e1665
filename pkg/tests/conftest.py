import numpy as np
import pytest

from dummy_forcing import SessionConfig, ToyModelSpec, PlantedSpec


@pytest.fixture
def small_config():
    return SessionConfig(
        num_layers=2,
        num_heads=4,
        head_dim=8,
        HW=6,
        window_len=3,
        ar_steps=6,
        denoise_steps=2,
        dummy_count=4,
        probe_ar_step=2,
    )


@pytest.fixture
def small_toy_spec():
    return ToyModelSpec(
        num_layers=2, num_heads=4, head_dim=8, HW=6, denoise_steps=2, seed=7
    )


def planted_setup(
    seed: int,
    margin: float,
    num_layers: int = 2,
    num_heads: int = 8,
    subsample_ratio: float = 1.0,
    shuffle: bool = True,
):
    """A mixed-label planted scenario: 4 sink, 6 neighbor, 6 current heads."""
    from dummy_forcing import rng

    config = SessionConfig(
        num_layers=num_layers,
        num_heads=num_heads,
        head_dim=32,
        HW=8,
        window_len=4,
        ar_steps=4,
        denoise_steps=2,
        dummy_count=6,
        probe_ar_step=2,
        subsample_ratio=subsample_ratio,
    )
    labels = ("sink",) * 4 + ("neighbor",) * 6 + ("current",) * 6
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(labels))
        labels = tuple(labels[i] for i in order)
    spec = PlantedSpec(
        labels=labels, margin=margin, noise_seed=rng.derive(seed, "planted")
    )
    return config, spec
