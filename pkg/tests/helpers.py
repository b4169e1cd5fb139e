"""Small builders shared by the test modules."""

import numpy as np

from hfseq.core import MULTIPLICATIVE, InitScheme, ModelConfig, init_params, make_rng
from hfseq.models import Batch


def tiny_config(arch, V=5, h=4, mode="softmax_xent", **kw):
    hs = (h, h - 1) if arch == "stacked_mrnn" else (h,)
    fs = hs if arch in MULTIPLICATIVE else None
    return ModelConfig(arch, V, hs, fs, mode, **kw)


def random_batch(config, T, n, seed=0):
    rng = make_rng(seed, 99)
    V = config.vocab_size
    if config.input_size is None:
        inputs = rng.integers(V, size=(T, n))
    else:
        inputs = rng.normal(size=(T, n, config.input_size))
    if config.output_mode == "softmax_xent":
        targets = rng.integers(V, size=(T, n))
    else:
        targets = rng.normal(size=(T, n, V))
    return Batch(inputs, targets)


def random_params(config, std=0.3, seed=0):
    return init_params(config, InitScheme.dense(std), make_rng(seed, 0))
