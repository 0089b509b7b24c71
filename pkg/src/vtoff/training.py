"""Combined objective and curriculum stage runner.

A stage pins the trainable parameter set (cre_ip / cond / joint), gates the
flow-warping term and the color jitter, and runs a fixed number of epochs
with AdamW. Frozen parameters never enter the optimizer, so their values and
optimizer moments stay untouched. The optimizer is rebuilt at each stage
boundary, which also makes resuming from a stage checkpoint bit-equal to an
uninterrupted run: everything a stage does is a function of (parameters,
seed, stage index).

All randomness (batch order, timesteps, noise, augmentation, conditioning
dropout) is derived from sha256 of (seed, stage, step, tag), never from
global RNG state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from .conditioning import AugmentationFlags, Sample, augment
from .diffusion import LatentCodec, NoiseSchedule, make_schedule
from .dual_unet import DualUNet, apply_selection, save_checkpoint
from .leffa import LeffaAdapter, LeffaConfig, build_adapter, leffa_loss
from .pipeline import build_bundle, build_inputs, drop_condition


# ---------------------------------------------------------------------------
# Loss pieces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_leffa: float = 1e-3
    lambda_perceptual: float = 0.0

    def __post_init__(self):
        if self.lambda_leffa < 0 or self.lambda_perceptual < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class PerceptualPlugin:
    """Feature extractor phi over latents plus a distance delta.

    ``delta`` is "l2" (mean squared feature difference) or "normalized"
    (channel-normalized features first, LPIPS style). phi's parameters are
    frozen; at desk scale the default networks are random but fixed.
    """

    variant: str = "none"
    phi: Optional[Callable] = None
    delta: str = "l2"

    @classmethod
    def none(cls) -> "PerceptualPlugin":
        return cls(variant="none")

    @classmethod
    def identity(cls, delta: str = "l2") -> "PerceptualPlugin":
        return cls(variant="identity", phi=lambda z: [z], delta=delta)

    @classmethod
    def latent_lpips_like(cls, in_channels: int, seed: int = 0) -> "PerceptualPlugin":
        return cls(variant="latent_lpips_like", phi=_random_feature_net(in_channels, seed), delta="normalized")

    @classmethod
    def lpl_like(cls, in_channels: int, seed: int = 0) -> "PerceptualPlugin":
        return cls(variant="lpl_like", phi=_random_feature_net(in_channels, seed), delta="l2")


def _random_feature_net(in_channels: int, seed: int) -> Callable:
    gen = torch.Generator().manual_seed(seed)
    w1 = torch.randn(32, in_channels, 3, 3, generator=gen) * (1.0 / math.sqrt(9 * in_channels))
    w2 = torch.randn(32, 32, 3, 3, generator=gen) * (1.0 / math.sqrt(9 * 32))

    def phi(z: torch.Tensor):
        f1 = torch.nn.functional.silu(torch.nn.functional.conv2d(z, w1.to(z.dtype), padding=1))
        f2 = torch.nn.functional.silu(torch.nn.functional.conv2d(f1, w2.to(z.dtype), padding=1, stride=2))
        return [f1, f2]

    return phi


def _feature_distance(fa, fb, delta: str):
    total = None
    for a, b in zip(fa, fb):
        if delta == "normalized":
            a = a / (a.norm(dim=1, keepdim=True) + 1e-10)
            b = b / (b.norm(dim=1, keepdim=True) + 1e-10)
        elif delta != "l2":
            raise ValueError(f"unknown delta {delta!r}")
        term = ((a - b) ** 2).mean()
        total = term if total is None else total + term
    return total


def perceptual_loss(z0, z0_hat, plugin: PerceptualPlugin):
    """delta(phi(z0), phi(z0_hat)); the ``none`` variant is exactly 0."""
    if plugin.variant == "none":
        return 0.0
    za = z0 if isinstance(z0, torch.Tensor) else torch.as_tensor(np.asarray(z0))
    zb = z0_hat if isinstance(z0_hat, torch.Tensor) else torch.as_tensor(np.asarray(z0_hat))
    if za.ndim == 3:
        za, zb = za[None], zb[None]
    out = _feature_distance(plugin.phi(za), plugin.phi(zb), plugin.delta)
    if isinstance(z0, torch.Tensor):
        return out
    return float(out)


def combined_loss(l_diff, l_leffa, l_perc, w: LossWeights):
    """L_diff + lambda_leffa * L_leffa + lambda_perceptual * L_perceptual."""
    return l_diff + w.lambda_leffa * l_leffa + w.lambda_perceptual * l_perc


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    trainable: str
    leffa_on: bool
    color_aug_on: bool
    epochs: int
    lr: float = 1e-5

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.trainable not in ("cre_ip", "cond", "joint"):
            raise ValueError(f"unknown trainable selection {self.trainable!r}")


@dataclass(frozen=True)
class Curriculum:
    stages: Tuple[StageConfig, ...]
    id: object = "custom"

    def __post_init__(self):
        if not self.stages:
            raise ValueError("curriculum must have at least one stage")

    def scaled(self, factor: float) -> "Curriculum":
        """Shrink/grow the epoch budget, keeping stage ratios (min 1 epoch)."""
        return Curriculum(
            stages=tuple(replace(s, epochs=max(1, round(s.epochs * factor))) for s in self.stages),
            id=self.id,
        )


def _st(trainable, leffa_on, color, epochs, lr=1e-5):
    return StageConfig(trainable=trainable, leffa_on=leffa_on, color_aug_on=color, epochs=epochs, lr=lr)


def curriculum_preset(cid: int) -> Curriculum:
    """The six published stage sequences (color jitter schedule included)."""
    presets = {
        1: (_st("joint", False, True, 130),),
        2: (
            _st("cre_ip", False, True, 130),
            _st("cre_ip", True, True, 130),
            _st("cond", True, True, 130),
            _st("cre_ip", True, True, 90),
        ),
        3: (
            _st("cre_ip", False, True, 130),
            _st("cond", True, True, 130),
            _st("cre_ip", True, True, 130),
            _st("cond", True, True, 130),
        ),
        4: (
            _st("cre_ip", False, True, 130),
            _st("joint", True, True, 130),
        ),
        5: (
            _st("cre_ip", False, False, 130),
            _st("cre_ip", True, False, 130),
            _st("cond", True, False, 130),
        ),
        6: (
            _st("cre_ip", False, True, 130),
            _st("cre_ip", True, False, 130),
            _st("cond", True, False, 130),
        ),
    }
    if cid not in presets:
        raise ValueError(f"curriculum preset must be 1..6, got {cid}")
    return Curriculum(stages=presets[cid], id=cid)


# ---------------------------------------------------------------------------
# Trainer state
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    batch_size: int = 4
    weight_decay: float = 0.01
    cond_dropout: float = 0.1
    dilation_radius: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    perceptual: PerceptualPlugin = field(default_factory=PerceptualPlugin.none)
    hflip_p: float = 0.5
    affine_p: float = 0.5
    max_shift: float = 0.1
    scale_range: Tuple[float, float] = (0.9, 1.1)
    log_path: Optional[str] = None


@dataclass
class TrainState:
    model: DualUNet
    adapter: LeffaAdapter
    leffa_cfg: LeffaConfig
    codec: LatentCodec
    schedule: NoiseSchedule
    settings: TrainSettings
    stage_index: int = 0
    global_step: int = 0

    @classmethod
    def create(cls, model: DualUNet, settings: Optional[TrainSettings] = None,
               schedule: Optional[NoiseSchedule] = None, leffa_cfg: Optional[LeffaConfig] = None,
               adapter_seed: int = 0) -> "TrainState":
        settings = settings or TrainSettings()
        torch.manual_seed(adapter_seed)
        if leffa_cfg is None:
            adapter = build_adapter(model)
            leffa_cfg = adapter.cfg
        else:
            adapter = build_adapter(model, cfg=leffa_cfg)
        return cls(
            model=model,
            adapter=adapter,
            leffa_cfg=leffa_cfg,
            codec=LatentCodec(model.config.codec_factor),
            schedule=schedule or model.noise_schedule(),
            settings=settings,
        )


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def _alpha_bars(sched: NoiseSchedule, t: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(sched.alpha_bar[(t.numpy() - 1)]).float()


def make_optimizer(state: TrainState, stage: StageConfig):
    """AdamW over the stage's trainable set (+ adapter group when gated on)."""
    trainable, _ = apply_selection(state.model, stage.trainable)
    groups = [
        {"params": list(trainable.values()), "lr": stage.lr, "weight_decay": state.settings.weight_decay}
    ]
    for p in state.adapter.parameters():
        p.requires_grad_(stage.leffa_on)
    if stage.leffa_on:
        groups.append(
            {"params": list(state.adapter.parameters()), "lr": state.leffa_cfg.adapter_lr, "weight_decay": 0.0}
        )
    return torch.optim.AdamW(groups)


def training_step(state: TrainState, stage: StageConfig, batch: List[Sample], step_seed: int):
    """One forward/backward pass worth of losses for a prepared batch."""
    cfg = state.model.config
    sett = state.settings
    gen = torch.Generator().manual_seed(step_seed)

    augmented = []
    for i, s in enumerate(batch):
        flags = AugmentationFlags(
            hflip_p=sett.hflip_p,
            affine_p=sett.affine_p,
            color_jitter=stage.color_aug_on,
            rng_seed=derive_seed(step_seed, "aug", i),
            max_shift=sett.max_shift,
            scale_range=sett.scale_range,
        )
        augmented.append(augment(s, flags))

    inputs = build_inputs(augmented, cfg, state.codec)
    bundle = build_bundle(state.model, inputs)
    b = inputs.z0.shape[0]

    t = torch.randint(1, state.schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(inputs.z0.shape, generator=gen)
    ab = _alpha_bars(state.schedule, t)[:, None, None, None]
    z_t = ab.sqrt() * inputs.z0 + (1.0 - ab).sqrt() * eps

    keep = (torch.rand(b, generator=gen) >= sett.cond_dropout).float()
    cache = state.model.encode_condition(bundle.cond_latents, bundle.cond_text_tokens)
    cache_d, tokens_d = drop_condition(cache, bundle.tokens, keep)

    eps_pred, record = state.model.predict_eps(
        z_t, t, cache=cache_d, tokens=tokens_d, extra_channels=bundle.creation_extra,
        record_attention=stage.leffa_on,
    )
    l_diff = ((eps - eps_pred) ** 2).mean()

    l_leffa = None
    if stage.leffa_on:
        keys = {lid: cache_d.entries[lid].hidden for lid in state.leffa_cfg.layer_ids}
        maps = state.adapter(record.queries, keys)
        l_leffa = leffa_loss(maps, inputs.isolated, inputs.garment, state.leffa_cfg, shapes=record.shapes)

    l_perc = None
    if sett.perceptual.variant != "none" and sett.loss_weights.lambda_perceptual > 0:
        z0_hat = (z_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt().clamp_min(1e-6)
        l_perc = perceptual_loss(inputs.z0, z0_hat, sett.perceptual)

    loss = l_diff
    if l_leffa is not None:
        loss = loss + sett.loss_weights.lambda_leffa * l_leffa
    if l_perc is not None:
        loss = loss + sett.loss_weights.lambda_perceptual * l_perc
    return loss, {
        "loss": float(loss.detach()),
        "l_diff": float(l_diff.detach()),
        "l_leffa": float(l_leffa.detach()) if l_leffa is not None else 0.0,
        "l_perceptual": float(l_perc.detach()) if l_perc is not None else 0.0,
    }


def run_stage(state: TrainState, stage: StageConfig, data: List[Sample], rng_seed: int) -> TrainState:
    """Train one curriculum stage; epochs are full passes over ``data``."""
    if not data:
        raise ValueError("stage needs a nonempty dataset")
    sett = state.settings
    optimizer = make_optimizer(state, stage)
    steps_per_epoch = math.ceil(len(data) / sett.batch_size)
    log_f = open(sett.log_path, "a", encoding="utf-8") if sett.log_path else None
    try:
        step_in_stage = 0
        for epoch in range(stage.epochs):
            perm = np.random.default_rng(
                derive_seed(rng_seed, state.stage_index, epoch, "perm")
            ).permutation(len(data))
            for bi in range(steps_per_epoch):
                idx = perm[bi * sett.batch_size : (bi + 1) * sett.batch_size]
                batch = [data[i] for i in idx]
                step_seed = derive_seed(rng_seed, state.stage_index, step_in_stage, "step")
                loss, parts = training_step(state, stage, batch, step_seed)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                if log_f is not None:
                    parts.update(stage=state.stage_index, step=state.global_step,
                                 trainable=stage.trainable, leffa_on=stage.leffa_on)
                    log_f.write(json.dumps(parts) + "\n")
                step_in_stage += 1
                state.global_step += 1
    finally:
        if log_f is not None:
            log_f.close()
    return state


def run_curriculum(state: TrainState, curriculum: Curriculum, data: List[Sample], seed: int,
                   out_dir=None, start_stage: int = 0):
    """Sequential stages with a checkpoint after each; resumable at any stage."""
    paths = []
    for idx in range(start_stage, len(curriculum.stages)):
        state.stage_index = idx
        run_stage(state, curriculum.stages[idx], data, rng_seed=seed)
        if out_dir is not None:
            path = Path(out_dir) / f"stage_{idx + 1:02d}.ckpt"
            save_checkpoint(path, state.model, stage=idx + 1, step=state.global_step,
                            adapter=state.adapter)
            paths.append(path)
    return state, paths
