import numpy as np
import pytest

from point2vec.config import ModelConfig, PretrainConfig
from point2vec.data import synthetic_classification_set

TINY_MODEL = dict(embed_first=(8, 12), embed_second=(16, 8), pos_hidden=6, depth=2, dim=8, heads=2, mlp_ratio=2.0)


def tiny_model(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **kw})


def tiny_pretrain(mode="point2vec", **kw) -> PretrainConfig:
    base = dict(mode=mode, batch_size=4, epochs=2, warmup_epochs=1, tau_warmup_epochs=1, target_layers=2,
                decoder_depth=1 if mode == "point2vec" else None)
    base.update(kw)
    return PretrainConfig(**base)


@pytest.fixture(scope="session")
def small_clouds():
    """Ten 256-point synthetic shapes (two per class), float32."""
    ds = synthetic_classification_set(2, 256, seed=11)
    return np.stack([c.points for c in ds.clouds]), ds.labels


def unit_scale(module, seed: int = 50):
    """Replace the small training init with unit-gain weights.

    Gradients of a freshly initialized toy model sit near 1e-9, below the
    roundoff floor of central differences at h=1e-6; unit-gain weights put
    them in a range where the finite-difference oracle is trustworthy.
    """
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        if p.ndim == 2:
            p.data = rng.standard_normal(p.shape) / np.sqrt(p.shape[0])
        else:
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return module
