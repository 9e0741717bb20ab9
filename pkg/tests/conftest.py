import numpy as np
import pytest

from hirescross.decoder import DecoderConfig, HiResVLM, ModelConfig
from hirescross.encoder import EncoderConfig


def tiny_config(use_cross=True, layers=1, enc_layers=1) -> ModelConfig:
    return ModelConfig(
        lo=EncoderConfig(side=28, patch=14, layers=enc_layers, hidden=8, heads=2),
        hi=EncoderConfig(side=56, patch=14, layers=enc_layers, hidden=6, heads=2),
        dec=DecoderConfig(
            layers=layers, hidden=8, heads=2, cross_hidden=4, cross_heads=2, hi_hidden=6,
            vocab=11, max_text=6, use_cross=use_cross,
        ),
    )


def random_inputs(cfg: ModelConfig, batch=2, lt=3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    lo = rng.random((batch, cfg.lo.tokens, cfg.lo.patch_dim)).astype(dtype)
    hi = rng.random((batch, cfg.hi.tokens, cfg.hi.patch_dim)).astype(dtype)
    ids = rng.integers(0, cfg.dec.vocab, size=(batch, lt))
    return lo, hi, ids


def randomize_cross_output(model: HiResVLM, seed=5, scale=0.3):
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith("cross.wo"):
            t.data[...] = rng.normal(0, scale, t.shape)


@pytest.fixture
def tiny_model():
    model = HiResVLM(tiny_config(), seed=3, dtype=np.float64)
    randomize_cross_output(model)
    return model
