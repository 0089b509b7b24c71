import numpy as np
import pytest

from vtoff.conditioning import (
    AugmentationFlags,
    GarmentAttributes,
    Image,
    Mask,
    Sample,
    augment,
    build_prompt,
    crop_to_encoder,
    dilate_mask,
    extend_mask_up,
    hsv_color_shift,
    make_agnostic,
    make_background_prior,
    make_conditioning_mask,
    make_isolated,
    prompt_at_level,
)


def random_sample(rng, h=16, w=16):
    person = Image(rng.random((h, w, 3)))
    garment = Image(rng.random((h, w, 3)))
    mask_px = np.zeros((h, w))
    mask_px[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = 1.0
    return Sample.build(person, garment, Mask(mask_px), "red hoodie")


# -- agnostic / isolated -----------------------------------------------------

def test_agnostic_full_occlusion():
    person = np.full((4, 4), 0.7)
    assert np.all(make_agnostic(person, np.ones((4, 4))) == 0.0)


def test_agnostic_identity():
    person = np.random.default_rng(0).random((4, 4))
    out = make_agnostic(person, np.zeros((4, 4)))
    assert np.array_equal(out, person)


def test_agnostic_2x2_elementwise():
    person = np.array([[0.2, 0.4], [0.6, 0.8]])
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = person * (1.0 - mask)  # elementwise oracle
    assert np.array_equal(make_agnostic(person, mask), expected)
    assert np.array_equal(make_agnostic(person, mask), [[0.0, 0.4], [0.6, 0.0]])


def test_isolated_trivials_and_2x2():
    person = np.array([[0.2, 0.4], [0.6, 0.8]])
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(make_isolated(person, np.ones((2, 2))), person)
    assert np.all(make_isolated(person, np.zeros((2, 2))) == 0.0)
    assert np.array_equal(make_isolated(person, mask), [[0.2, 0.0], [0.0, 0.8]])


def test_agnostic_isolated_shape_mismatch():
    with pytest.raises(ValueError):
        make_agnostic(np.zeros((4, 4)), np.zeros((5, 4)))
    with pytest.raises(ValueError):
        make_isolated(np.zeros((4, 4)), np.zeros((4, 5)))


def test_agnostic_plus_isolated_exact():
    rng = np.random.default_rng(1)
    for _ in range(50):
        person = rng.random((8, 8, 3))
        mask = (rng.random((8, 8)) > 0.5).astype(float)
        total = make_agnostic(person, mask) + make_isolated(person, mask)
        assert np.array_equal(total, person)


# -- dilation ----------------------------------------------------------------

def brute_force_dilate(mask, radius):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if mask[i, j] > 0:
                for di in range(-radius, radius + 1):
                    for dj in range(-radius, radius + 1):
                        if di * di + dj * dj <= radius * radius:
                            y, x = i + di, j + dj
                            if 0 <= y < h and 0 <= x < w:
                                out[y, x] = 1.0
    return out


def test_dilate_radius_zero_identity():
    m = np.eye(5)
    assert np.array_equal(dilate_mask(m, 0), m)


def test_dilate_center_pixel_plus_shape():
    m = np.zeros((5, 5))
    m[2, 2] = 1.0
    out = dilate_mask(m, 1)
    assert np.array_equal(out, brute_force_dilate(m, 1))
    assert out.sum() == 5  # plus shape


def test_dilate_saturation():
    m = np.ones((6, 6))
    for r in (1, 2, 5):
        assert np.array_equal(dilate_mask(m, r), m)


def test_dilate_negative_radius():
    with pytest.raises(ValueError):
        dilate_mask(np.ones((4, 4)), -1)


def test_dilate_matches_scipy_and_is_monotone_extensive():
    from scipy import ndimage

    rng = np.random.default_rng(3)
    for _ in range(60):
        m = (rng.random((4, 4)) > 0.6).astype(float)
        for r in (1, 2):
            got = dilate_mask(m, r)
            struct = np.array(
                [[di * di + dj * dj <= r * r for dj in range(-r, r + 1)] for di in range(-r, r + 1)]
            )
            want = ndimage.binary_dilation(m > 0, structure=struct).astype(float)
            assert np.array_equal(got, want)
            # extensive
            assert np.all(got >= m)
        # monotone: subset masks dilate to subsets
        sub = m.copy()
        fg = np.argwhere(sub > 0)
        if len(fg):
            sub[tuple(fg[0])] = 0.0
        assert np.all(dilate_mask(sub, 2) <= dilate_mask(m, 2))


def test_conditioning_mask_kinds():
    fit_px = np.zeros((20, 20))
    fit_px[8:14, 6:12] = 1.0
    fit = Mask(fit_px)
    same = make_conditioning_mask(fit, "fit")
    assert same.kind == "fit" and np.array_equal(same.pixels, fit_px)
    dil = make_conditioning_mask(fit, "dilated", radius=2)
    assert dil.kind == "dilated"
    assert np.all(dil.pixels >= fit_px)  # fit subset of dilated
    # the upward band extends above the original top row
    assert dil.pixels[:8].sum() > 0
    with pytest.raises(ValueError):
        make_conditioning_mask(fit, "loose")


def test_extend_mask_up():
    m = np.zeros((10, 4))
    m[6:8, 1] = 1.0
    out = extend_mask_up(m, 3)
    assert np.array_equal(np.flatnonzero(out[:, 1]), np.arange(3, 8))


# -- background prior ----------------------------------------------------------

def test_background_prior_10x10():
    prior = make_background_prior(10, 10)
    assert np.all(prior.white.pixels == 1.0)
    center = prior.border_mask.pixels
    assert center[0].sum() == 0 and center[-1].sum() == 0
    assert center[1:9, 1:9].sum() == 64
    mb = prior.masked_bg.pixels
    assert np.all(mb[0] == 1.0) and np.all(mb[1:9, 1:9] == 0.0)


def test_background_prior_20x20_border_width():
    prior = make_background_prior(20, 20)
    mb = prior.masked_bg.pixels[..., 0]
    assert np.all(mb[:2] == 1.0) and np.all(mb[-2:] == 1.0)
    assert np.all(mb[:, :2] == 1.0) and np.all(mb[:, -2:] == 1.0)
    assert np.all(mb[2:18, 2:18] == 0.0)


def test_background_prior_area_accounting():
    for h, w in ((10, 10), (20, 20), (64, 48)):
        prior = make_background_prior(h, w)
        border_px = prior.masked_bg.pixels[..., 0].sum()
        center_px = prior.border_mask.pixels.sum()
        assert border_px == h * w - center_px


def test_background_prior_too_small():
    with pytest.raises(ValueError):
        make_background_prior(9, 30)


# -- crop ----------------------------------------------------------------------

def test_crop_full_mask_is_resize():
    from vtoff.resample import bilinear_resize

    rng = np.random.default_rng(0)
    person = rng.random((12, 16, 3))
    out = crop_to_encoder(person, np.ones((12, 16)), 8)
    assert np.allclose(out, np.clip(bilinear_resize(person, 8, 8), 0, 1))


def test_crop_single_pixel_mask_constant():
    rng = np.random.default_rng(1)
    person = rng.random((10, 10, 3))
    mask = np.zeros((10, 10))
    mask[4, 7] = 1.0
    out = crop_to_encoder(person, mask, 5)
    assert np.allclose(out, person[4, 7][None, None, :])


def test_crop_exact_block():
    rng = np.random.default_rng(2)
    person = rng.random((16, 16, 3))
    mask = np.zeros((16, 16))
    mask[5:9, 9:13] = 1.0
    out = crop_to_encoder(person, mask, 4)
    assert np.allclose(out, person[5:9, 9:13], atol=1e-12)


def test_crop_empty_mask_rejected():
    with pytest.raises(ValueError):
        crop_to_encoder(np.zeros((8, 8, 3)), np.zeros((8, 8)), 4)


# -- prompts --------------------------------------------------------------------

def test_build_prompt_templates():
    assert build_prompt("red hoodie", "creation") == "a frontal view of red hoodie"
    assert build_prompt("red hoodie", "condition") == "model is wearing red hoodie"
    assert build_prompt("", "creation") == "a frontal view of "
    with pytest.raises(ValueError):
        build_prompt("x", "reference")


ATTRS = GarmentAttributes(
    cloth_type="t-shirt", neckline="crew neck", sleeve_length="short sleeve",
    waist="regular waist", fit="slim fit", hem="straight hem", cloth_length="hip length",
    color="red", text="", pattern="striped",
)


def test_prompt_levels():
    assert prompt_at_level(ATTRS, 0) == "t-shirt"
    assert prompt_at_level(ATTRS, 1) == "t-shirt, crew neck, short sleeve"
    assert prompt_at_level(ATTRS, 2) == (
        "t-shirt, regular waist, slim fit, straight hem, crew neck, short sleeve, hip length"
    )
    lvl3 = prompt_at_level(ATTRS, 3)
    assert lvl3.endswith("hip length, red, striped")
    withtext = prompt_at_level(
        GarmentAttributes(**{**ATTRS.__dict__, "text": "logo text"}), 3
    )
    assert "logo text" in withtext


def test_prompt_missing_attribute():
    with pytest.raises(ValueError):
        prompt_at_level(GarmentAttributes(cloth_type="t-shirt"), 1)
    with pytest.raises(ValueError):
        prompt_at_level(ATTRS, 4)


# -- augmentation ----------------------------------------------------------------

def test_augment_noop():
    s = random_sample(np.random.default_rng(0))
    out = augment(s, AugmentationFlags(hflip_p=0.0, affine_p=0.0, color_jitter=False, rng_seed=1))
    assert np.array_equal(out.person.pixels, s.person.pixels)
    assert np.array_equal(out.mask.pixels, s.mask.pixels)


def test_augment_hflip_involution():
    s = random_sample(np.random.default_rng(1))
    flags = AugmentationFlags(hflip_p=1.0, affine_p=0.0, color_jitter=False, rng_seed=2)
    twice = augment(augment(s, flags), flags)
    assert np.array_equal(twice.person.pixels, s.person.pixels)
    assert np.array_equal(twice.mask.pixels, s.mask.pixels)


def test_augment_deterministic():
    s = random_sample(np.random.default_rng(2))
    flags = AugmentationFlags(hflip_p=0.7, affine_p=1.0, color_jitter=True, rng_seed=99)
    a = augment(s, flags)
    b = augment(s, flags)
    assert np.array_equal(a.person.pixels, b.person.pixels)
    assert np.array_equal(a.mask.pixels, b.mask.pixels)
    assert np.array_equal(a.agnostic.pixels, b.agnostic.pixels)


def test_augment_never_touches_garment_and_keeps_invariants():
    s = random_sample(np.random.default_rng(3))
    for seed in range(6):
        flags = AugmentationFlags(hflip_p=0.5, affine_p=0.8, color_jitter=True, rng_seed=seed)
        out = augment(s, flags)
        assert out.garment is s.garment
        px = out.person.pixels
        assert px.min() >= 0.0 and px.max() <= 1.0
        assert set(np.unique(out.mask.pixels)) <= {0.0, 1.0}
        total = out.agnostic.pixels + out.isolated.pixels
        assert np.array_equal(total, out.person.pixels)


def test_hsv_shift_identity_and_hue_wheel():
    rng = np.random.default_rng(4)
    px = rng.random((6, 6, 3))
    assert np.allclose(hsv_color_shift(px), px, atol=1e-6)
    red = np.zeros((2, 2, 3)); red[..., 0] = 1.0
    green = hsv_color_shift(red, dh=1.0 / 3.0)
    assert np.allclose(green[..., 1], 1.0) and np.allclose(green[..., 0], 0.0)


# -- type validation ---------------------------------------------------------------

def test_image_and_mask_validation():
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4, 3)))  # too small
    with pytest.raises(ValueError):
        Image(np.full((8, 8, 3), 1.5))
    with pytest.raises(ValueError):
        Mask(np.full((8, 8), 0.5))
    with pytest.raises(ValueError):
        Mask(np.zeros((8, 8)), kind="huge")


def test_sample_build_checks():
    rng = np.random.default_rng(5)
    person = Image(rng.random((8, 8, 3)))
    with pytest.raises(ValueError):
        Sample.build(person, person, Mask(np.zeros((8, 8))), "x")  # empty mask
