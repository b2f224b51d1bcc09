import io

import numpy as np
import pytest

from surfsense.imaging import (
    AugmentPolicy,
    IDENTITY_POLICY,
    Image,
    add_gaussian_noise,
    adjust_brightness,
    augment,
    augment_batch,
    center_crop_resize,
    gaussian_blur,
    gaussian_kernel_1d,
    log_sharpness,
    read_ppm,
    to_luminance,
    write_ppm,
)


def gray(h, w, value=0.5):
    return Image(np.full((h, w, 1), value, dtype=np.float64))


def random_texture(seed, side=64, channels=3, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(lo, hi, (side, side, channels)))


# --- independent dense-convolution oracle for the LoG score ---


def oracle_log_variance(img, sigma):
    """Brute-force 2-D convolutions with reflective padding; no
    separability shortcut."""
    plane = to_luminance(img).astype(np.float64)
    radius = int(np.ceil(3.0 * sigma))
    k1 = gaussian_kernel_1d(sigma)
    kernel2d = np.outer(k1, k1)
    padded = np.pad(plane, radius, mode="reflect")
    h, w = plane.shape
    blurred = np.zeros_like(plane)
    for i in range(h):
        for j in range(w):
            blurred[i, j] = np.sum(padded[i : i + 2 * radius + 1, j : j + 2 * radius + 1] * kernel2d)
    lap_kernel = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    padded = np.pad(blurred, 1, mode="reflect")
    resp = np.zeros_like(plane)
    for i in range(h):
        for j in range(w):
            resp[i, j] = np.sum(padded[i : i + 3, j : j + 3] * lap_kernel)
    return float(np.var(resp))


def test_constant_image_scores_zero():
    score = log_sharpness(gray(32, 32, 0.4), sigma=1.0)
    assert score.log_variance == 0.0
    assert not score.passed or score.blur_threshold == 0.0


def test_constant_image_fails_positive_threshold():
    score = log_sharpness(gray(32, 32, 0.4), sigma=1.0, blur_threshold=1e-9)
    assert not score.passed


def test_single_impulse_matches_dense_oracle():
    px = np.zeros((64, 64, 1))
    px[20, 31, 0] = 1.0
    img = Image(px)
    got = log_sharpness(img, sigma=1.0).log_variance
    want = oracle_log_variance(img, sigma=1.0)
    assert abs(got - want) < 1e-9


def test_random_texture_matches_dense_oracle():
    img = random_texture(3, side=24)
    got = log_sharpness(img, sigma=1.5).log_variance
    want = oracle_log_variance(img, sigma=1.5)
    assert abs(got - want) < 1e-9


def test_blur_monotonicity_twenty_textures():
    for seed in range(20):
        img = random_texture(seed, side=48)
        sharp = log_sharpness(img, sigma=1.0).log_variance
        blurred = log_sharpness(gaussian_blur(img, 2.0), sigma=1.0).log_variance
        assert blurred < sharp, f"seed {seed}"


def test_offset_invariance():
    img = random_texture(7, side=32, lo=0.0, hi=0.5)
    shifted = Image(img.pixels + 0.3)
    a = log_sharpness(img, 1.0).log_variance
    b = log_sharpness(shifted, 1.0).log_variance
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_quadratic_scaling():
    img = random_texture(9, side=32, lo=0.0, hi=0.5)
    scaled = Image(img.pixels * 2.0)
    a = log_sharpness(img, 1.0).log_variance
    b = log_sharpness(scaled, 1.0).log_variance
    assert b == pytest.approx(4.0 * a, rel=1e-6)


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        log_sharpness(gray(8, 8), sigma=0.0)


def test_empty_image_rejected():
    with pytest.raises(ValueError):
        Image(np.zeros((0, 4, 1)))


# --- crop / resize ---


def test_resize_identity_at_native_side():
    img = random_texture(1, side=224 // 4)  # keep it quick; identity is exact
    out = center_crop_resize(img, img.width)
    assert np.array_equal(out.pixels, img.pixels)


def test_wide_input_crops_centered_square():
    px = np.zeros((10, 30, 1))
    px[:, 10:20, 0] = 1.0  # centered 10x10 block of ones
    out = center_crop_resize(Image(px), 10)
    assert np.array_equal(out.pixels, np.ones((10, 10, 1)))


def test_1080p_to_224():
    rng = np.random.default_rng(0)
    img = Image(rng.uniform(0, 1, (108, 192, 3)))  # 1920x1080 scaled down 10x
    out = center_crop_resize(img, 22)
    assert out.width == out.height == 22
    # source region is the centered square: outside columns never sampled
    img2 = Image(np.concatenate([rng.uniform(0, 1, (108, 42, 3)), img.pixels[:, 42:150], rng.uniform(0, 1, (108, 42, 3))], axis=1))
    out2 = center_crop_resize(img2, 22)
    assert np.array_equal(out.pixels, out2.pixels)


def test_bilinear_upsample_matches_hand_computed():
    # 2x2 checkerboard to 4x4; half-pixel centers with edge clamping:
    # sample coords (i + 0.5)/2 - 0.5 = [-0.25, 0.25, 0.75, 1.25]
    px = np.array([[1.0, 0.0], [0.0, 1.0]])[:, :, None]
    out = center_crop_resize(Image(px), 4)
    c = [-0.25, 0.25, 0.75, 1.25]

    def sample(y, x):
        y0 = int(np.floor(y))
        x0 = int(np.floor(x))
        fy, fx = y - y0, x - x0
        def at(i, j):
            return px[min(max(i, 0), 1), min(max(j, 0), 1), 0]
        top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
        bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
        return top * (1 - fy) + bot * fy

    want = np.array([[sample(y, x) for x in c] for y in c])
    assert np.allclose(out.pixels[:, :, 0], np.clip(want, 0, 1), atol=1e-12)


def test_resize_idempotent_at_target():
    img = random_texture(5, side=37)
    once = center_crop_resize(img, 16)
    twice = center_crop_resize(once, 16)
    assert np.array_equal(once.pixels, twice.pixels)


def test_zero_side_rejected():
    with pytest.raises(ValueError):
        center_crop_resize(gray(8, 8), 0)


# --- augmentation ---


def test_identity_policy_passthrough():
    img = random_texture(2, side=32)
    out = augment(img, 0, IDENTITY_POLICY)
    assert np.array_equal(out.pixels, img.pixels)


def test_flip_only_exact_mirror():
    img = random_texture(3, side=32)
    policy = AugmentPolicy(flip_p=1.0, max_rotation_deg=0.0, max_shift_frac=0.0)
    out = augment(img, 7, policy)
    assert np.array_equal(out.pixels, img.pixels[:, ::-1, :])


def test_same_seed_bit_identical():
    img = random_texture(4, side=32)
    a = augment(img, 1234)
    b = augment(img, 1234)
    assert np.array_equal(a.pixels, b.pixels)


def test_different_seeds_differ():
    img = random_texture(4, side=32)
    a = augment(img, 1)
    b = augment(img, 2)
    assert not np.array_equal(a.pixels, b.pixels)


def test_augment_batch_equals_per_image():
    rng = np.random.default_rng(0)
    imgs = [Image(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)) for _ in range(8)]
    seeds = list(range(8))
    batch = augment_batch(imgs, seeds)
    for i in range(8):
        assert np.array_equal(batch[i], augment(imgs[i], seeds[i]).pixels)


def test_augment_requires_square():
    with pytest.raises(ValueError):
        augment(gray(8, 10), 0)


def test_outputs_stay_in_range():
    img = random_texture(11, side=24)
    for seed in range(10):
        out = augment(img, seed)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


# --- degradations ---


def test_brightness_clamps():
    img = random_texture(6, side=16)
    up = adjust_brightness(img, 1.4)
    assert up.pixels.max() <= 1.0
    down = adjust_brightness(img, 0.6)
    assert np.allclose(down.pixels, img.pixels * 0.6)


def test_noise_seeded():
    img = gray(16, 16, 0.5)
    a = add_gaussian_noise(img, 0.1, 5)
    b = add_gaussian_noise(img, 0.1, 5)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, img.pixels)


# --- PPM / PGM I/O ---


def test_ppm_roundtrip_rgb():
    img = random_texture(8, side=9)
    # quantize first so the roundtrip is exact
    q = Image(np.rint(img.pixels * 255) / np.float32(255.0))
    buf = io.BytesIO()
    write_ppm(q, buf)
    buf.seek(0)
    back = read_ppm(buf)
    assert np.allclose(back.pixels, q.pixels, atol=1e-7)


def test_pgm_roundtrip_gray():
    img = gray(5, 7, 0.25)
    buf = io.BytesIO()
    write_ppm(img, buf)
    buf.seek(0)
    back = read_ppm(buf)
    assert back.channels == 1
    assert np.allclose(back.pixels, img.pixels, atol=1 / 255)


def test_ppm_header_comments():
    buf = io.BytesIO(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = read_ppm(buf)
    assert img.width == 2 and img.height == 2
    assert img.pixels[0, 1, 0] == pytest.approx(128 / 255, abs=1e-6)


def test_truncated_raster_rejected():
    buf = io.BytesIO(b"P5\n2 2\n255\n\x00\x01")
    with pytest.raises(ValueError):
        read_ppm(buf)


def test_luminance_weights():
    px = np.zeros((1, 1, 3))
    px[0, 0] = [1.0, 0.0, 0.0]
    assert to_luminance(Image(px))[0, 0] == pytest.approx(0.299)
