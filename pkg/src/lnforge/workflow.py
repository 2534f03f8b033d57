"""Training recipes that turn toy or real data into the models the pipeline needs.

These are shared by the command line and the test suite, so that a checkpoint
trained either way comes from the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lnforge.adapter import AdapterNet, make_noisy_recon, train_adapter
from lnforge.codec import LinearCodec, encode, fit_codec
from lnforge.config import PipelineConfig
from lnforge.diffusion import DenoiserNet, NoiseSchedule, make_schedule, train
from lnforge.optim import TrainConfig
from lnforge.phantoms import blob_family, lesion_texture
from lnforge.pipeline import PipelineModels, model_digest
from lnforge.sdf import TsdfGrid, mask_to_tsdf
from lnforge.volume import Mask, Volume


def schedule_from(cfg: PipelineConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def shape_tsdfs(masks: Sequence[Mask], cfg: PipelineConfig) -> list[TsdfGrid]:
    return [mask_to_tsdf(m, cfg.geometry.tau, cfg.norm_scale()) for m in masks]


def latent_matrix(codec: LinearCodec, grids: Sequence[TsdfGrid]) -> np.ndarray:
    return codec.encode_array(np.stack([g.values for g in grids]).reshape(len(grids), -1))


def _scale_for(z: np.ndarray) -> float:
    std = float(np.std(z))
    return 1.0 / std if std > 0 else 1.0


def _train_config(cfg: PipelineConfig, seed: int) -> TrainConfig:
    t = cfg.training
    return TrainConfig(lr=t.lr, steps=t.steps, batch_size=t.batch_size, seed=seed, lam=t.lam)


def train_shape_model(codec: LinearCodec, grids: Sequence[TsdfGrid], cfg: PipelineConfig,
                      seed: int | None = None) -> tuple[DenoiserNet, NoiseSchedule, list[float]]:
    """Fit the unconditional latent denoiser on the codec latents of ``grids``.

    Latents are scaled to unit standard deviation before diffusion; the factor
    is stored on the net as ``latent_scale``.
    """
    seed = cfg.run.seed if seed is None else seed
    z = latent_matrix(codec, grids)
    scale = _scale_for(z)
    h = cfg.training.hidden
    net = DenoiserNet(codec.latent_dim, hidden=(h, h), seed=seed, latent_scale=scale)
    s = schedule_from(cfg)
    net, trace = train(net, z * scale, s, _train_config(cfg, seed))
    return net, s, trace


def adapter_pairs(codec: LinearCodec, grids: Sequence[TsdfGrid], sigma_rel: float, seed: int):
    """``(M, M_hat)`` pairs with noise ``sigma_rel`` times the latent standard deviation."""
    sigma = sigma_rel * float(np.std(latent_matrix(codec, grids)))
    rng = np.random.default_rng(seed)
    return [(g, make_noisy_recon(g, codec, sigma, rng)) for g in grids]


def train_adapter_model(codec: LinearCodec, grids: Sequence[TsdfGrid], cfg: PipelineConfig,
                        seed: int | None = None, diffusion_loss_value: float | None = None):
    """Returns ``(adapter, trace, report)``."""
    seed = cfg.run.seed if seed is None else seed
    t = cfg.training
    pairs = adapter_pairs(codec, grids, t.sigma_adapter, seed)
    tc = TrainConfig(lr=t.adapter_lr, steps=t.adapter_steps, batch_size=t.adapter_batch,
                     seed=seed, lam=t.lam)
    A = AdapterNet(tau=cfg.geometry.tau, seed=seed)
    return train_adapter(A, pairs, tc, t.adapter_norm, diffusion_loss_value)


@dataclass(eq=False)
class TextureModel:
    codec: LinearCodec
    net: DenoiserNet
    schedule: NoiseSchedule
    trace: list


def train_texture_model(shape_codec: LinearCodec, masks: Sequence[Mask], textures: Sequence[Volume],
                        cfg: PipelineConfig, seed: int | None = None) -> TextureModel:
    """Fit a texture codec on normalized patches and a denoiser conditioned on shape latents."""
    seed = cfg.run.seed if seed is None else seed
    if len(masks) != len(textures):
        raise ValueError("need one texture per mask")
    patches = np.stack([v.values for v in textures]).reshape(len(textures), -1)
    tex_codec = fit_codec(np.asarray(patches, dtype=np.float64).reshape(len(textures), *textures[0].dims),
                          cfg.codec.texture_latent_dim, spacing=textures[0].spacing)
    z = tex_codec.encode_array(patches)
    cond = np.stack([encode(shape_codec, mask_to_tsdf(m, shape_codec.clip, shape_codec.norm_scale))
                     for m in masks])
    h = cfg.training.hidden
    net = DenoiserNet(tex_codec.latent_dim, cond_dim=shape_codec.latent_dim, hidden=(h, h), seed=seed,
                      latent_scale=_scale_for(z), cond_scale=_scale_for(cond))
    s = schedule_from(cfg)
    net, trace = train(net, z * net.latent_scale, s, _train_config(cfg, seed), cond=cond * net.cond_scale)
    return TextureModel(tex_codec, net, s, trace)


def toy_training_data(n: int, seed: int, cfg: PipelineConfig) -> tuple[list[Mask], list[Volume]]:
    """Blob masks on the configured patch grid with matching lesion textures."""
    masks = blob_family(n, seed, dims=cfg.geometry.patch_dims, spacing=cfg.geometry.spacing)
    rng = np.random.default_rng([seed, 1])
    return masks, [lesion_texture(m, rng) for m in masks]


def train_toy_models(cfg: PipelineConfig, n_shapes: int = 200, seed: int = 0,
                     use_adapter: bool = True) -> tuple[PipelineModels, dict]:
    """End-to-end training on the toy family; returns the models and a summary."""
    masks, textures = toy_training_data(n_shapes, seed, cfg)
    grids = shape_tsdfs(masks, cfg)
    codec = fit_codec(grids, cfg.codec.shape_latent_dim)
    net, s, trace = train_shape_model(codec, grids, cfg, seed)
    adapter, report = None, {}
    if use_adapter:
        adapter, _, report = train_adapter_model(codec, grids, cfg, seed, diffusion_loss_value=trace[-1])
    tex = train_texture_model(codec, masks, textures, cfg, seed)
    hashes = {
        "shape_codec": model_digest(codec.mean, codec.basis),
        "shape_net": model_digest(*net.params),
        "texture_codec": model_digest(tex.codec.mean, tex.codec.basis),
        "texture_net": model_digest(*tex.net.params),
    }
    if adapter is not None:
        hashes["adapter"] = model_digest(*adapter.params)
    models = PipelineModels(net, s, codec, tex.net, tex.schedule, tex.codec, adapter, hashes)
    summary = {"shape_trace": trace, "texture_trace": tex.trace, "adapter": report,
               "masks": masks, "grids": grids}
    return models, summary
