import numpy as np
import pytest

from mae_lab import mae, masking


def small_config(**kw):
    """A 16-patch model that runs a forward/backward pass in milliseconds."""
    base = dict(n_mels=16, n_frames=16, patch_size=4, encoder_dim=8, encoder_depth=1, encoder_heads=2,
                decoder_dim=8, decoder_depth=1, decoder_heads=2, batch_size=2)
    base.update(kw)
    return mae.MaeConfig(**base)


def random_plans(config, patches, seed=0):
    v = np.asarray(patches).var(axis=2)
    return [masking.plan_mask(config.mask_strategy, vv, config.mask_ratio, seed + i) for i, vv in enumerate(v)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return small_config()
