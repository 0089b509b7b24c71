"""Run configuration: one YAML file captures model, schedule, training, sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .diffusion import NoiseSchedule, SamplerConfig, make_schedule
from .dual_unet import DualUNet, DualUNetConfig
from .ioutils import atomic_write_text, sha256_json
from .leffa import LeffaConfig
from .training import Curriculum, LossWeights, PerceptualPlugin, StageConfig, TrainSettings, curriculum_preset


@dataclass
class RunConfig:
    seed: int = 42
    resolution: Tuple[int, int] = (64, 48)
    model: DualUNetConfig = field(default_factory=DualUNetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    curriculum: object = 6            # preset id or explicit stage list
    epoch_scale: float = 1.0
    stage_lr: Optional[float] = None  # overrides preset stage lr when set
    batch_size: int = 4
    weight_decay: float = 0.01
    cond_dropout: float = 0.1
    dilation_radius: int = 3
    lambda_leffa: float = 1e-3
    lambda_perceptual: float = 0.0
    perceptual_variant: str = "none"
    adapter_lr: float = 5e-3
    leffa_heads: int = 2
    leffa_head_dim: int = 256
    hflip_p: float = 0.5
    affine_p: float = 0.5

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "resolution": list(self.resolution),
            "model": self.model.to_dict(),
            "sampler": {"steps": self.sampler.steps, "cfg_scale": self.sampler.cfg_scale, "seed": self.sampler.seed},
            "curriculum": self.curriculum if isinstance(self.curriculum, int)
            else [asdict(s) for s in self._stage_list()],
            "training": {
                "epoch_scale": self.epoch_scale,
                "stage_lr": self.stage_lr,
                "batch_size": self.batch_size,
                "weight_decay": self.weight_decay,
                "cond_dropout": self.cond_dropout,
                "dilation_radius": self.dilation_radius,
                "lambda_leffa": self.lambda_leffa,
                "lambda_perceptual": self.lambda_perceptual,
                "perceptual_variant": self.perceptual_variant,
                "adapter_lr": self.adapter_lr,
                "leffa_heads": self.leffa_heads,
                "leffa_head_dim": self.leffa_head_dim,
                "hflip_p": self.hflip_p,
                "affine_p": self.affine_p,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = DualUNetConfig(**{
            **d.get("model", {}),
            **(
                {"fusion_layer_ids": tuple(d["model"]["fusion_layer_ids"])}
                if d.get("model", {}).get("fusion_layer_ids") else {}
            ),
        }) if "model" in d else DualUNetConfig()
        samp = d.get("sampler", {})
        train = d.get("training", {})
        curriculum = d.get("curriculum", 6)
        if isinstance(curriculum, list):
            curriculum = [StageConfig(**s) for s in curriculum]
        return cls(
            seed=d.get("seed", 42),
            resolution=tuple(d.get("resolution", (64, 48))),
            model=model,
            sampler=SamplerConfig(
                steps=samp.get("steps", 30), cfg_scale=samp.get("cfg_scale", 2.0), seed=samp.get("seed", 42)
            ),
            curriculum=curriculum,
            epoch_scale=train.get("epoch_scale", 1.0),
            stage_lr=train.get("stage_lr"),
            batch_size=train.get("batch_size", 4),
            weight_decay=train.get("weight_decay", 0.01),
            cond_dropout=train.get("cond_dropout", 0.1),
            dilation_radius=train.get("dilation_radius", 3),
            lambda_leffa=train.get("lambda_leffa", 1e-3),
            lambda_perceptual=train.get("lambda_perceptual", 0.0),
            perceptual_variant=train.get("perceptual_variant", "none"),
            adapter_lr=train.get("adapter_lr", 5e-3),
            leffa_heads=train.get("leffa_heads", 2),
            leffa_head_dim=train.get("leffa_head_dim", 256),
            hflip_p=train.get("hflip_p", 0.5),
            affine_p=train.get("affine_p", 0.5),
        )

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(yaml.safe_load(f) or {})

    def save_yaml(self, path) -> None:
        atomic_write_text(path, yaml.safe_dump(self.to_dict(), sort_keys=True))

    def digest(self) -> str:
        return sha256_json(self.to_dict())

    # -- builders --------------------------------------------------------------

    def _stage_list(self):
        if isinstance(self.curriculum, int):
            return list(curriculum_preset(self.curriculum).stages)
        return list(self.curriculum)

    def curriculum_obj(self) -> Curriculum:
        if isinstance(self.curriculum, int):
            cur = curriculum_preset(self.curriculum)
        else:
            cur = Curriculum(stages=tuple(self.curriculum), id="custom")
        if self.stage_lr is not None:
            cur = Curriculum(stages=tuple(replace(s, lr=self.stage_lr) for s in cur.stages), id=cur.id)
        return cur.scaled(self.epoch_scale) if self.epoch_scale != 1.0 else cur

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.model.schedule_steps, self.model.beta_start, self.model.beta_end)

    def make_settings(self, log_path=None) -> TrainSettings:
        if self.perceptual_variant == "none":
            plugin = PerceptualPlugin.none()
        elif self.perceptual_variant == "latent_lpips_like":
            plugin = PerceptualPlugin.latent_lpips_like(self.model.latent_channels, seed=self.seed)
        elif self.perceptual_variant == "lpl_like":
            plugin = PerceptualPlugin.lpl_like(self.model.latent_channels, seed=self.seed)
        else:
            raise ValueError(f"unknown perceptual variant {self.perceptual_variant!r}")
        return TrainSettings(
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            cond_dropout=self.cond_dropout,
            dilation_radius=self.dilation_radius,
            loss_weights=LossWeights(lambda_leffa=self.lambda_leffa, lambda_perceptual=self.lambda_perceptual),
            perceptual=plugin,
            hflip_p=self.hflip_p,
            affine_p=self.affine_p,
            log_path=str(log_path) if log_path else None,
        )

    def make_leffa(self, model: DualUNet) -> LeffaConfig:
        return LeffaConfig(
            layer_ids=model.fusion_layer_ids,
            heads=self.leffa_heads,
            head_dim=self.leffa_head_dim,
            adapter_lr=self.adapter_lr,
            weight=self.lambda_leffa,
        )
