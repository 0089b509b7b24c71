"""Desk-scale dual-branch diffusion framework for virtual try-off."""

from .conditioning import (
    AugmentationFlags,
    BackgroundPrior,
    GarmentAttributes,
    Image,
    Mask,
    Sample,
    augment,
    build_prompt,
    crop_to_encoder,
    dilate_mask,
    make_agnostic,
    make_background_prior,
    make_conditioning_mask,
    make_isolated,
    prompt_at_level,
)
from .diffusion import (
    Latent,
    LatentCodec,
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    ddim_timesteps,
    ddim_update,
    diffusion_loss,
    make_schedule,
    predict_x0,
    sample,
)
from .dual_unet import (
    DualUNet,
    DualUNetConfig,
    FeatureCache,
    HighLevelTokens,
    build,
    encode_condition,
    encode_high_level,
    load_checkpoint,
    predict_eps,
    save_checkpoint,
    select_trainable,
)
from .leffa import (
    CoordinateMap,
    FlowField,
    LeffaAdapter,
    LeffaConfig,
    attention_to_flow,
    build_adapter,
    leffa_loss,
    make_coordinate_map,
    upsample_flow,
    warp,
)
from .metrics import (
    IdentityEmbedder,
    MetricReport,
    RandomConvEmbedder,
    dists_like,
    evaluate,
    fid,
    fid_from_moments,
    kid,
    lpips_like,
    load_features,
    mmd2_unbiased,
    save_features,
    ssim,
)
from .probe import (
    Distortion,
    TPSWarp,
    apply_distortion,
    bg_brightness,
    cloth_color,
    cloth_shape,
    cloth_texture,
    default_suite,
    fit_tps,
    run_probe,
)
from .synthetic import SyntheticSpec, generate_synthetic, render_synthetic_sample
from .training import (
    Curriculum,
    LossWeights,
    PerceptualPlugin,
    StageConfig,
    TrainSettings,
    TrainState,
    combined_loss,
    curriculum_preset,
    perceptual_loss,
    run_curriculum,
    run_stage,
)

__version__ = "0.1.0"
