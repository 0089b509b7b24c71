import numpy as np
import pytest
import torch

from vtoff.conditioning import Image
from vtoff.diffusion import (
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
from vtoff.dual_unet import DualUNetConfig, build
from vtoff.pipeline import build_bundle, build_inputs
from vtoff.synthetic import SyntheticSpec, render_synthetic_sample
from vtoff.conditioning import Mask, Sample


# -- codec ---------------------------------------------------------------------

def test_codec_round_trip():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3))
    codec = LatentCodec(4)
    rec = codec.decode(codec.encode(img))
    assert np.abs(rec.pixels - img).max() < 1e-5


def test_codec_constant_image():
    codec = LatentCodec(4)
    img = np.full((16, 16, 3), 0.5)
    lat = codec.encode(img)
    # constant image -> spatially constant latent
    assert np.allclose(lat.values, lat.values[0, 0][None, None, :])
    assert np.abs(codec.decode(lat).pixels - img).max() < 1e-10


def test_codec_linearity():
    rng = np.random.default_rng(1)
    img = rng.random((8, 8, 3))
    codec = LatentCodec(4)
    a = 0.37
    assert np.allclose(codec.encode(img * a).values, a * codec.encode(img).values, atol=1e-12)


def test_codec_indivisible_dims():
    with pytest.raises(ValueError):
        LatentCodec(4).encode(np.zeros((10, 16, 3)))


def test_codec_mask_input():
    codec = LatentCodec(4)
    mask = np.zeros((8, 8))
    mask[2:6, 2:6] = 1.0
    lat = codec.encode(mask)
    rec = codec.decode(lat).pixels
    assert np.abs(rec - np.repeat(mask[..., None], 3, axis=2)).max() < 1e-6


# -- schedule --------------------------------------------------------------------

def test_schedule_single_step():
    sched = make_schedule(1, 0.5, 0.5)
    assert sched.alpha_bar.tolist() == [0.5]


def test_schedule_monotone():
    sched = make_schedule(100, 1e-4, 2e-2)
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_schedule_final_value():
    sched = make_schedule(1000, 1e-4, 2e-2)
    # independent oracle: explicit product
    oracle = float(np.prod(1.0 - np.linspace(1e-4, 2e-2, 1000)))
    assert sched.alpha_bar[-1] == pytest.approx(oracle, rel=1e-12)
    assert sched.alpha_bar[-1] < 1e-4


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, beta=np.array([0.5, 1.5]), alpha_bar=np.array([0.5, 0.2]))
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, beta=np.array([0.5, 0.5]), alpha_bar=np.array([0.2, 0.5]))


def _toy_sched(alpha_bars):
    n = len(alpha_bars)
    return NoiseSchedule(T=n, beta=np.full(n, 0.5), alpha_bar=np.asarray(alpha_bars, dtype=float))


# -- forward/backward algebra ------------------------------------------------------

def test_add_noise_extremes_exact():
    sched = _toy_sched([1.0, 0.5, 0.0])
    z0 = np.random.default_rng(0).standard_normal((4, 4, 2))
    eps = np.random.default_rng(1).standard_normal((4, 4, 2))
    assert np.array_equal(add_noise(z0, eps, 1, sched), z0)
    assert np.array_equal(add_noise(z0, eps, 3, sched), eps)


def test_add_noise_scalar_case():
    sched = _toy_sched([0.25])
    assert add_noise(np.array([1.0]), np.array([0.0]), 1, sched)[0] == 0.5


def test_add_noise_latent_wrapper():
    sched = _toy_sched([0.25])
    z0 = Latent(np.ones((2, 2, 1)), scale_factor=4)
    eps = Latent(np.zeros((2, 2, 1)), scale_factor=4)
    out = add_noise(z0, eps, 1, sched)
    assert isinstance(out, Latent) and np.all(out.values == 0.5)


def test_diffusion_loss_trivials_and_oracle():
    z = np.random.default_rng(0).standard_normal((4, 4, 2))
    assert diffusion_loss(z, z) == 0.0
    assert diffusion_loss(np.zeros((3, 3)), np.full((3, 3), 2.0)) == 4.0
    a = np.random.default_rng(1).standard_normal((5, 5))
    b = np.random.default_rng(2).standard_normal((5, 5))
    oracle = sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert diffusion_loss(a, b) == pytest.approx(oracle, rel=1e-12)


def test_predict_x0_inverts_add_noise():
    sched = make_schedule(1000)
    rng = np.random.default_rng(3)
    z0 = rng.standard_normal((4, 4, 2))
    eps = rng.standard_normal((4, 4, 2))
    for t in rng.integers(1, 1001, size=20):
        z_t = add_noise(z0, eps, int(t), sched)
        rec = predict_x0(z_t, eps, int(t), sched)
        assert np.abs(rec - z0).max() < 1e-6


def test_predict_x0_scalar_case():
    sched = _toy_sched([0.25])
    out = predict_x0(np.array([0.5]), np.array([0.0]), 1, sched)
    assert out[0] == 1.0


def test_predict_x0_floor_warning():
    sched = _toy_sched([0.5, 1e-15])
    with pytest.warns(RuntimeWarning):
        predict_x0(np.array([0.5]), np.array([0.0]), 2, sched)


def test_add_noise_predict_x0_composition():
    sched = make_schedule(500)
    rng = np.random.default_rng(4)
    z0 = rng.standard_normal((8, 6, 3))
    eps = rng.standard_normal((8, 6, 3))
    for t in (1, 100, 250, 500):
        rec = predict_x0(add_noise(z0, eps, t, sched), eps, t, sched)
        again = add_noise(rec, eps, t, sched)
        assert np.abs(rec - z0).max() < 1e-6
        assert np.abs(again - add_noise(z0, eps, t, sched)).max() < 1e-9


def test_loss_gradient_matches_finite_differences():
    # d/d eps_pred of MSE vs central differences on a 4x4x2 latent
    rng = np.random.default_rng(5)
    eps = torch.tensor(rng.standard_normal((4, 4, 2)))
    pred = torch.tensor(rng.standard_normal((4, 4, 2)), requires_grad=True)
    loss = diffusion_loss(eps, pred)
    loss.backward()
    analytic = pred.grad.numpy()
    h = 1e-6
    fd = np.zeros_like(analytic)
    base = pred.detach().numpy()
    for idx in np.ndindex(base.shape):
        up, dn = base.copy(), base.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (diffusion_loss(eps.numpy(), up) - diffusion_loss(eps.numpy(), dn)) / (2 * h)
    assert np.abs(analytic - fd).max() / np.abs(fd).max() < 1e-4


# -- DDIM timesteps ------------------------------------------------------------------

def test_ddim_timesteps_spacing():
    ts = ddim_timesteps(1000, 30)
    assert len(ts) == 30 and ts[0] == 1000 and ts[-1] == 1
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))


def test_ddim_timesteps_errors():
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)


# -- guided sampling -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup():
    cfg = DualUNetConfig(
        base_channels=16, depth=2, attn_heads=2, token_dim=16,
        encoder_crop_size=16, schedule_steps=50,
    )
    model = build(cfg, rng_seed=0)
    model.eval()
    spec = SyntheticSpec(count=1, height=32, width=32, seed=3)
    rec = render_synthetic_sample(spec, 0)
    s = Sample.build(Image(rec["person"]), Image(rec["cloth"]), Mask(rec["mask"]), rec["description"])
    codec = LatentCodec(cfg.codec_factor)
    inputs = build_inputs([s], cfg, codec)
    with torch.no_grad():
        bundle = build_bundle(model, inputs)
    return model, bundle, codec


def test_sampler_deterministic(tiny_setup):
    model, bundle, codec = tiny_setup
    cfg = SamplerConfig(steps=8, cfg_scale=2.0, seed=42)
    a = sample(model, bundle, cfg)
    b = sample(model, bundle, cfg)
    assert np.array_equal(a.pixels, b.pixels)


def test_sampler_cfg_one_is_conditional_only(tiny_setup):
    model, bundle, codec = tiny_setup
    sched = model.noise_schedule()
    cfg = SamplerConfig(steps=6, cfg_scale=1.0, seed=11)
    got = sample(model, bundle, cfg, sched, codec)

    # independent loop over the public pieces, conditional branch only
    ts = ddim_timesteps(sched.T, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn((1, model.config.latent_channels, *bundle.cond_latents.shape[2:]), generator=gen)
    with torch.no_grad():
        cache = model.encode_condition(bundle.cond_latents, bundle.cond_text_tokens)
        for i, t in enumerate(ts):
            eps, _ = model.predict_eps(z, t, cache, bundle.tokens, extra_channels=bundle.creation_extra)
            ab_prev = sched.alpha_bar_at(ts[i + 1]) if i + 1 < len(ts) else 1.0
            z = ddim_update(z, eps, sched.alpha_bar_at(t), ab_prev)
    want = codec.decode(Latent(z[0].permute(1, 2, 0).numpy().astype(np.float64), codec.factor))
    assert np.array_equal(got.pixels, want.pixels)


def test_sampler_cfg_zero_is_unconditional_only(tiny_setup):
    model, bundle, codec = tiny_setup
    sched = model.noise_schedule()
    cfg = SamplerConfig(steps=5, cfg_scale=0.0, seed=7)
    got = sample(model, bundle, cfg, sched, codec)

    ts = ddim_timesteps(sched.T, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn((1, model.config.latent_channels, *bundle.cond_latents.shape[2:]), generator=gen)
    with torch.no_grad():
        cache = model.encode_condition(bundle.cond_latents, bundle.cond_text_tokens).zeroed()
        tokens = bundle.tokens.zeroed()
        for i, t in enumerate(ts):
            eps, _ = model.predict_eps(z, t, cache, tokens, extra_channels=bundle.creation_extra)
            ab_prev = sched.alpha_bar_at(ts[i + 1]) if i + 1 < len(ts) else 1.0
            z = ddim_update(z, eps, sched.alpha_bar_at(t), ab_prev)
    want = codec.decode(Latent(z[0].permute(1, 2, 0).numpy().astype(np.float64), codec.factor))
    assert np.array_equal(got.pixels, want.pixels)


def test_sampler_steps_exceeding_schedule(tiny_setup):
    model, bundle, codec = tiny_setup
    with pytest.raises(ValueError):
        sample(model, bundle, SamplerConfig(steps=51, cfg_scale=1.0, seed=0))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(cfg_scale=-1.0)
