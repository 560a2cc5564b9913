import numpy as np
import pytest

from fovgen.conditioning import ResamplerConfig
from fovgen.diffusion import GenerativeModel, ModelConfig
from fovgen.encoder import EncoderConfig
from fovgen.unet import DenoiserConfig


def tiny_model_config(side=16, timesteps=50, seed=0) -> ModelConfig:
    """Small but structurally complete config used across the suite."""
    return ModelConfig(
        denoiser=DenoiserConfig(
            side=side, base=8, ch_mults=(1, 2), res_blocks=1,
            attn_sides=(side // 2,), heads=2, d_cond=16, groups=4, seed=seed,
        ),
        resampler=ResamplerConfig(
            num_latents=4, layers=1, dim=16, heads=2, in_dim=12, out_dim=16, seed=seed,
        ),
        encoder=EncoderConfig(patch_size=4, dim=12, seed=seed),
        timesteps=timesteps,
    )


@pytest.fixture(scope="session")
def tiny_model() -> GenerativeModel:
    return GenerativeModel(tiny_model_config(), init_seed=7)


def perturb_zero_inits(model: GenerativeModel, seed=0, scale=0.05) -> GenerativeModel:
    """Fill the zero-initialized residual/output projections with small random
    values so conditioning visibly affects outputs without training.  Null
    tokens stay zero."""
    rng = np.random.default_rng(seed)
    for name, p in model.unet.named_params():
        if p.data.ndim >= 2 and not p.data.any():
            p.data = (rng.standard_normal(p.data.shape) * scale).astype(p.data.dtype)
    return model


@pytest.fixture(scope="session")
def perturbed_model() -> GenerativeModel:
    return perturb_zero_inits(GenerativeModel(tiny_model_config(), init_seed=11), seed=13)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
