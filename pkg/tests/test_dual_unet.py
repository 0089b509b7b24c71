import numpy as np
import pytest
import torch

from vtoff.dual_unet import (
    DualUNetConfig,
    FeatureCache,
    HighLevelTokens,
    apply_selection,
    build,
    load_checkpoint,
    parameter_count,
    read_checkpoint_header,
    save_checkpoint,
    select_trainable,
    CheckpointError,
)


def tiny_cfg(**kw):
    base = dict(base_channels=16, depth=2, attn_heads=2, token_dim=16,
                encoder_crop_size=16, schedule_steps=50)
    base.update(kw)
    return DualUNetConfig(**base)


@pytest.fixture(scope="module")
def model():
    m = build(tiny_cfg(), rng_seed=0)
    m.eval()
    return m


def rand_latents(cfg, b=1, h=4, w=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((b, cfg.latent_channels, h, w), generator=gen)
    cond = torch.randn((b, cfg.condition_in_channels, h, w), generator=gen)
    return z, cond


def make_tokens(model, b=1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    cfg = model.config
    return HighLevelTokens(
        image_tokens=torch.randn((b, cfg.token_count, cfg.token_dim), generator=gen),
        text_tokens=torch.randn((b, cfg.text_token_count, cfg.token_dim), generator=gen),
    )


# -- build ---------------------------------------------------------------------

def test_presets_differ_only_in_width_depth():
    small = DualUNetConfig.preset("small")
    large = DualUNetConfig.preset("large")
    assert (small.base_channels, small.depth) == (32, 2)
    assert (large.base_channels, large.depth) == (64, 3)
    others = {k: v for k, v in small.to_dict().items() if k not in ("scale", "base_channels", "depth")}
    others_l = {k: v for k, v in large.to_dict().items() if k not in ("scale", "base_channels", "depth")}
    assert others == others_l


def test_large_more_than_3x_small_params():
    small = build(DualUNetConfig.preset("small"), rng_seed=0)
    large = build(DualUNetConfig.preset("large"), rng_seed=0)
    n_small = sum(p.numel() for p in small.parameters())
    n_large = sum(p.numel() for p in large.parameters())
    assert n_large > 3 * n_small


def test_high_level_false_removes_cross_attention():
    m = build(tiny_cfg(high_level=False), rng_seed=0)
    assert m.image_tokens is None and m.text_tokens is None
    cross_params = [n for n, _ in m.named_parameters() if "cross_attn" in n]
    assert cross_params == []
    with pytest.raises(RuntimeError):
        m.encode_high_level(np.zeros((16, 16, 3)), "x")


def test_same_seed_identical_weights():
    a = build(tiny_cfg(), rng_seed=5)
    b = build(tiny_cfg(), rng_seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = build(tiny_cfg(), rng_seed=6)
    assert any(not torch.equal(pa, pc) for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(creation_variant="dit")
    with pytest.raises(ValueError):
        tiny_cfg(token_count=3)
    with pytest.raises(ValueError):
        tiny_cfg(attn_heads=5)
    with pytest.raises(ValueError):
        DualUNetConfig(fusion_layer_ids=("nope.attn",), base_channels=16, attn_heads=2) and build(
            DualUNetConfig(fusion_layer_ids=("nope.attn",), base_channels=16, attn_heads=2), 0
        )


# -- encode_condition ------------------------------------------------------------

def test_encode_condition_zero_input_finite_deterministic(model):
    cond = torch.zeros((1, model.config.condition_in_channels, 4, 4))
    with torch.no_grad():
        a = model.encode_condition(cond)
        b = model.encode_condition(cond)
    for lid in a.layer_ids():
        assert torch.isfinite(a.entries[lid].key).all()
        assert torch.equal(a.entries[lid].key, b.entries[lid].key)


def test_encode_condition_channel_mismatch(model):
    with pytest.raises(ValueError):
        model.encode_condition(torch.zeros((1, 7, 4, 4)))


def test_cache_layer_ids_match_fusion_layers(model):
    _, cond = rand_latents(model.config)
    with torch.no_grad():
        cache = model.encode_condition(cond)
    assert cache.layer_ids() == model.fusion_layer_ids
    assert set(model.fusion_layer_ids) == {"down0.attn", "down1.attn", "mid.attn", "up1.attn", "up0.attn"}


def test_cache_shapes_match_layer_resolutions(model):
    _, cond = rand_latents(model.config, h=4, w=4)
    with torch.no_grad():
        cache = model.encode_condition(cond)
    expected_tokens = {"down0.attn": 16, "up0.attn": 16, "down1.attn": 4, "mid.attn": 4, "up1.attn": 4}
    widths = {"down0.attn": 16, "up0.attn": 16, "down1.attn": 32, "mid.attn": 32, "up1.attn": 32}
    for lid, e in cache.entries.items():
        assert e.key.shape == (1, expected_tokens[lid], widths[lid])
        assert e.value.shape == e.key.shape and e.hidden.shape == e.key.shape


# -- predict_eps -------------------------------------------------------------------

def test_masked_fusion_equals_single_unet(model):
    z, cond = rand_latents(model.config, seed=1)
    tokens = make_tokens(model, seed=1)
    with torch.no_grad():
        cache = model.encode_condition(cond)
        solo, _ = model.predict_eps(z, 5, cache=None, tokens=tokens)
        zeroed, _ = model.predict_eps(z, 5, cache=cache.zeroed(), tokens=tokens, restrict_to_self=True)
    assert torch.equal(solo, zeroed)


def test_attention_rows_sum_to_one(model):
    z, cond = rand_latents(model.config, seed=2)
    tokens = make_tokens(model, seed=2)
    with torch.no_grad():
        cache = model.encode_condition(cond)
        _, record = model.predict_eps(z, 3, cache=cache, tokens=tokens, record_attention=True)
    assert set(record.maps.keys()) == set(model.fusion_layer_ids)
    for lid, m in record.maps.items():
        sums = m.sum(dim=-1)
        assert torch.all((sums - 1.0).abs() < 1e-5)


def test_truncated_model_ignores_tokens():
    m = build(tiny_cfg(high_level=False), rng_seed=1)
    m.eval()
    z, cond = rand_latents(m.config, seed=3)
    with torch.no_grad():
        cache = m.encode_condition(cond)
        a, _ = m.predict_eps(z, 2, cache=cache, tokens=None)
        b, _ = m.predict_eps(z, 2, cache=cache, tokens=make_tokens(m, seed=9))
    assert torch.equal(a, b)


def test_missing_cache_layer_rejected(model):
    z, cond = rand_latents(model.config, seed=4)
    with torch.no_grad():
        cache = model.encode_condition(cond)
        broken = FeatureCache(entries={k: v for k, v in cache.entries.items() if k != "mid.attn"})
        with pytest.raises(KeyError):
            model.predict_eps(z, 2, cache=broken, tokens=make_tokens(model))


def test_fusion_is_content_dependent(model):
    z, cond = rand_latents(model.config, seed=5)
    tokens = make_tokens(model, seed=5)
    cond2 = cond.clone()
    cond2[0, 0, 1, 1] += 1e-2
    with torch.no_grad():
        a, _ = model.predict_eps(z, 4, cache=model.encode_condition(cond), tokens=tokens)
        b, _ = model.predict_eps(z, 4, cache=model.encode_condition(cond2), tokens=tokens)
    assert (a - b).abs().max() > 0


def test_base_vs_inpainting_differ_only_in_input_convs():
    base = build(tiny_cfg(), rng_seed=0)
    inp = build(tiny_cfg(creation_variant="inpainting"), rng_seed=0)
    sb = {n: p.shape for n, p in base.named_parameters()}
    si = {n: p.shape for n, p in inp.named_parameters()}
    assert set(sb) == set(si)
    differing = {n for n in sb if sb[n] != si[n]}
    assert differing == {"creation.in_conv.weight", "creation.skip_gate.weight",
                         "creation.skip_gate.bias", "creation.skip_out.weight"}
    # inpainting consumes the prior channels; base refuses them
    z, cond = rand_latents(inp.config, seed=6)
    extra = torch.randn((1, 1 + inp.config.latent_channels, 4, 4))
    with torch.no_grad():
        cache = inp.encode_condition(cond)
        out1, _ = inp.predict_eps(z, 3, cache=cache, tokens=make_tokens(inp), extra_channels=extra)
        out2, _ = inp.predict_eps(z, 3, cache=cache, tokens=make_tokens(inp), extra_channels=extra * 0.5)
    assert (out1 - out2).abs().max() > 0
    with pytest.raises(ValueError):
        inp.predict_eps(z, 3, cache=cache, tokens=None, extra_channels=None)
    with pytest.raises(ValueError):
        base.predict_eps(z, 3, cache=None, tokens=None, extra_channels=extra)


# -- trainable selection -------------------------------------------------------------

def test_selection_counts_and_disjointness(model):
    cre, cre_frozen = select_trainable(model, "cre_ip")
    cond, _ = select_trainable(model, "cond")
    joint, joint_frozen = select_trainable(model, "joint")
    assert set(cre) & set(cond) == set()
    assert set(joint) == set(cre) | set(cond)
    assert parameter_count(joint) == parameter_count(cre) + parameter_count(cond)
    # only the structurally unreachable condition tail stays frozen under joint
    assert set(joint_frozen) == set(model.condition_dead_parameters())
    assert set(cre) <= set(cre_frozen.keys() | cre.keys())
    with pytest.raises(ValueError):
        select_trainable(model, "everything")


def test_frozen_params_bit_identical_after_step():
    m = build(tiny_cfg(), rng_seed=2)
    trainable, frozen = apply_selection(m, "cre_ip")
    before = {n: p.detach().clone() for n, p in frozen.items()}
    opt = torch.optim.AdamW([p for p in trainable.values()], lr=1e-2)
    z, cond = rand_latents(m.config, seed=7)
    cache = m.encode_condition(cond)
    eps, _ = m.predict_eps(z, 3, cache=cache, tokens=make_tokens(m))
    loss = (eps ** 2).mean()
    loss.backward()
    opt.step()
    for n, p in frozen.items():
        assert torch.equal(p, before[n]), n
    # and at least one trainable parameter moved
    assert any((p.grad is not None and p.grad.abs().sum() > 0) for p in trainable.values())


def test_gradients_flow_to_every_trainable():
    m = build(tiny_cfg(), rng_seed=3)
    for sel in ("cre_ip", "cond", "joint"):
        m.zero_grad(set_to_none=True)
        trainable, _ = apply_selection(m, sel)
        z, cond = rand_latents(m.config, seed=8)
        crop = torch.rand((1, 3, m.config.encoder_crop_size, m.config.encoder_crop_size))
        tokens = HighLevelTokens(image_tokens=m.image_tokens(crop), text_tokens=m.text_tokens(["red shirt"]))
        cache = m.encode_condition(cond, m.text_tokens(["model is wearing red shirt"]))
        eps, _ = m.predict_eps(z, 3, cache=cache, tokens=tokens)
        ((eps - 1.0) ** 2).mean().backward()
        dead = [n for n, p in trainable.items() if p.grad is None or p.grad.abs().sum() == 0]
        assert dead == [], f"dead branches in {sel}: {dead}"


# -- high-level tokens ----------------------------------------------------------------

def test_encode_high_level_deterministic_and_shaped(model):
    crop = np.random.default_rng(0).random((16, 16, 3))
    with torch.no_grad():
        a = model.encode_high_level(crop, "blue striped hoodie")
        b = model.encode_high_level(crop, "blue striped hoodie")
    cfg = model.config
    assert a.image_tokens.shape == (1, cfg.token_count, cfg.token_dim)
    assert a.text_tokens.shape == (1, cfg.text_token_count, cfg.token_dim)
    assert torch.equal(a.image_tokens, b.image_tokens)
    assert torch.equal(a.text_tokens, b.text_tokens)


def test_distinct_prompts_give_distinct_tokens(model):
    with torch.no_grad():
        a = model.text_tokens(["crimson woolly jumper"])
        b = model.text_tokens(["azure cotton vest"])
    assert not torch.equal(a, b)


def test_token_zeroing(model):
    t = make_tokens(model, seed=10)
    z = t.zeroed()
    assert torch.all(z.image_tokens == 0) and torch.all(z.text_tokens == 0)
    assert t.combined().shape[1] == model.config.token_count + model.config.text_token_count


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = build(tiny_cfg(), rng_seed=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, m, stage=2, step=17)
    m2 = build(tiny_cfg(), rng_seed=99)
    header = load_checkpoint(path, m2)
    assert header["stage"] == 2 and header["step"] == 17
    for (na, pa), (nb, pb) in zip(m.named_parameters(), m2.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    hdr = read_checkpoint_header(path)
    assert hdr["config_digest"] == m.config.digest()


def test_checkpoint_rejects_config_mismatch(tmp_path):
    m = build(tiny_cfg(), rng_seed=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, m, stage=1, step=1)
    other = build(tiny_cfg(base_channels=24, attn_heads=2), rng_seed=4)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    m = build(tiny_cfg(), rng_seed=0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, m)
