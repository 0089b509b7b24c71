"""Glue between conditioning-space samples and model tensors.

Numpy-side preparation (latents, crops, prompts) is separated from the
token encoders so training can run the trainable encoders inside the
autograd graph while the sampler wraps everything in no_grad.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from .conditioning import (
    Image,
    Mask,
    Sample,
    build_prompt,
    crop_to_encoder,
    make_background_prior,
    make_conditioning_mask,
)
from .diffusion import LatentCodec
from .dual_unet import DualUNet, DualUNetConfig, FeatureCache, HighLevelTokens
from .resample import bilinear_resize


@dataclass
class ModelInputs:
    """Numpy-derived tensors for one batch, before token encoding."""

    z0: torch.Tensor                 # (b, c, h, w) garment latents
    cond_latents: torch.Tensor       # (b, 3c, h, w) person/mask/agnostic latents
    crops: torch.Tensor              # (b, 3, S, S) encoder crops
    creation_prompts: List[str]
    condition_prompts: List[str]
    creation_extra: Optional[torch.Tensor]  # (b, 1+c, h, w) for the inpainting variant
    isolated: torch.Tensor           # (b, 3, H, W)
    garment: torch.Tensor            # (b, 3, H, W)


@dataclass
class ConditionBundle:
    """Everything the guided sampler needs besides the model itself."""

    cond_latents: torch.Tensor
    cond_text_tokens: Optional[torch.Tensor]
    tokens: Optional[HighLevelTokens]
    creation_extra: Optional[torch.Tensor]


def apply_mask_kind(sample: Sample, config: DualUNetConfig, dilation_radius: int = 3) -> Sample:
    """Rebuild a sample with the config's mask kind (datasets store fit masks)."""
    mask = make_conditioning_mask(sample.mask, config.mask_kind, radius=dilation_radius)
    return Sample.build(sample.person, sample.garment, mask, sample.description)


def _latent_chw(codec: LatentCodec, pixels) -> np.ndarray:
    return codec.encode(pixels).values.transpose(2, 0, 1)


def build_inputs(samples: List[Sample], config: DualUNetConfig, codec: LatentCodec) -> ModelInputs:
    z0, cond, crops, iso, gt = [], [], [], [], []
    creation_prompts, condition_prompts = [], []
    prior_extra = None
    for s in samples:
        z0.append(_latent_chw(codec, s.garment))
        cond.append(
            np.concatenate(
                [
                    _latent_chw(codec, s.person),
                    _latent_chw(codec, s.mask.pixels),
                    _latent_chw(codec, s.agnostic),
                ],
                axis=0,
            )
        )
        crop_src = s.isolated if config.ip_input_masked else s.person
        crop = crop_to_encoder(crop_src, s.mask, config.encoder_crop_size)
        crops.append(crop.pixels.transpose(2, 0, 1))
        creation_prompts.append(build_prompt(s.description, "creation"))
        condition_prompts.append(build_prompt(s.description, "condition"))
        iso.append(s.isolated.pixels.transpose(2, 0, 1))
        gt.append(s.garment.pixels.transpose(2, 0, 1))

    if config.creation_variant == "inpainting":
        h, w = samples[0].person.height, samples[0].person.width
        prior = make_background_prior(h, w)
        lat_h, lat_w = h // codec.factor, w // codec.factor
        mask_ds = bilinear_resize(prior.border_mask.pixels, lat_h, lat_w)[None]
        bg_lat = _latent_chw(codec, prior.masked_bg)
        one = np.concatenate([mask_ds, bg_lat], axis=0).astype(np.float32)
        prior_extra = torch.from_numpy(one)[None].repeat(len(samples), 1, 1, 1)

    as_t = lambda arrs: torch.from_numpy(np.stack(arrs)).float()
    return ModelInputs(
        z0=as_t(z0),
        cond_latents=as_t(cond),
        crops=as_t(crops),
        creation_prompts=creation_prompts,
        condition_prompts=condition_prompts,
        creation_extra=prior_extra,
        isolated=as_t(iso),
        garment=as_t(gt),
    )


def build_bundle(model: DualUNet, inputs: ModelInputs) -> ConditionBundle:
    """Run the (trainable) token encoders; call inside/outside autograd as needed."""
    tokens = None
    cond_text = None
    if model.config.high_level:
        tokens = HighLevelTokens(
            image_tokens=model.image_tokens(inputs.crops),
            text_tokens=model.text_tokens(inputs.creation_prompts),
        )
        cond_text = model.text_tokens(inputs.condition_prompts)
    return ConditionBundle(
        cond_latents=inputs.cond_latents,
        cond_text_tokens=cond_text,
        tokens=tokens,
        creation_extra=inputs.creation_extra,
    )


def drop_condition(cache: FeatureCache, tokens: Optional[HighLevelTokens], keep: torch.Tensor):
    """Zero cached condition features and tokens for samples where keep == 0."""
    k = keep.float()
    entries = {}
    for lid, e in cache.entries.items():
        m = k[:, None, None]
        entries[lid] = type(e)(key=e.key * m, value=e.value * m, hidden=e.hidden * m)
    dropped_cache = FeatureCache(entries=entries)
    dropped_tokens = tokens
    if tokens is not None:
        m = k[:, None, None]
        dropped_tokens = HighLevelTokens(
            image_tokens=tokens.image_tokens * m, text_tokens=tokens.text_tokens * m
        )
    return dropped_cache, dropped_tokens
