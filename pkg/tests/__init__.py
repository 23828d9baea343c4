import logging
import unittest

import numpy as np

from vipamin_app.config import TaskSpec, TrainConfig, VitConfig
from vipamin_app.vit import FrozenBackbone


class TestCase(unittest.TestCase):
    logging.basicConfig(level=logging.DEBUG)


def tiny_vit(**kwargs):
    """
    d=8, L=2, two heads over a 2x2 grid of 2x2 patches (N_e = 5), three classes.
    """
    values = dict(depth=2, embed_dim=8, num_heads=2, patch_grid=(2, 2), patch_size=2, ffn_hidden=16,
                  num_classes=3)
    values.update(kwargs)
    return VitConfig(**values)


def tiny_task(**kwargs):
    values = dict(num_classes=3, samples_per_class=6, val_per_class=2, test_per_class=2, patch_grid=(2, 2),
                  patch_size=2, signal_rank=2, noise_sigma=0.1)
    values.update(kwargs)
    return TaskSpec(**values)


def tiny_train(**kwargs):
    values = dict(learning_rate=0.01, epochs=1, warmup_epochs=0, batch_size=8, diagnostic_samples=16)
    values.update(kwargs)
    return TrainConfig(**values)


def perturbed_backbone(config, seed=0, scale=0.1):
    """
    Random backbone with nonzero biases, LayerNorm parameters away from (1, 0) and a random head.
    """
    backbone = FrozenBackbone.random(config, seed=seed)
    rng = np.random.default_rng([seed, 3])
    params = {}
    for name, p in backbone.to_params().items():
        last = name.rsplit(".", 1)[-1]
        if last.startswith("b_") or last in ("bias", "ln1_shift", "ln2_shift", "ln1_scale", "ln2_scale"):
            p = p + scale * rng.standard_normal(p.shape)
        elif name == "head.weight":
            p = rng.standard_normal(p.shape)
        params[name] = p
    return FrozenBackbone.from_params(config, params)
