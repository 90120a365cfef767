import numpy as np
import pytest

from mrir.config import Config, load_config
from mrir.degrade import (
    DegradationParams,
    StageParams,
    area_downsample,
    block_dct2,
    block_idct2,
    gaussian_kernel,
    jpeg_approx,
    sample_degradation_params,
    synthesize_pair,
)
from mrir.errors import ConfigError
from mrir.metrics import psnr_y

from conftest import make_image

NEUTRAL = StageParams(
    blur_kernel_size=1, blur_sigma=0.5, resize_scale=1.0, resize_mode="bilinear",
    noise_sigma=0.0, noise_gray=False, jpeg_quality=100,
)


def neutral_params(scale=4, seed=0):
    return DegradationParams(order1=NEUTRAL, order2=NEUTRAL, final_scale=scale, rng_seed=seed)


class TestParamSampling:
    def test_same_seed_identical(self):
        cfg = Config().degrade
        assert sample_degradation_params(cfg, 7) == sample_degradation_params(cfg, 7)

    def test_point_ranges_hit_exactly(self):
        cfg = load_config({
            "degrade": {
                "order1": {
                    "blur_kernel_size": [5, 5], "blur_sigma": [1.0, 1.0],
                    "resize_scale": [0.5, 0.5], "resize_modes": ["area"],
                    "noise_sigma": [0.02, 0.02], "noise_gray_prob": 0.0,
                    "jpeg_quality": [80, 80],
                },
            },
        }).degrade
        p = sample_degradation_params(cfg, 3).order1
        assert p == StageParams(5, 1.0, 0.5, "area", 0.02, False, 80)

    def test_bounds_hold_over_100_seeds(self):
        cfg = Config().degrade
        for seed in range(100):
            params = sample_degradation_params(cfg, seed)
            for ranges, stage in ((cfg.order1, params.order1), (cfg.order2, params.order2)):
                assert stage.blur_kernel_size % 2 == 1
                assert ranges.blur_kernel_size[0] <= stage.blur_kernel_size <= ranges.blur_kernel_size[1]
                assert ranges.blur_sigma[0] <= stage.blur_sigma <= ranges.blur_sigma[1]
                assert ranges.resize_scale[0] <= stage.resize_scale <= ranges.resize_scale[1]
                assert stage.resize_mode in ranges.resize_modes
                assert ranges.noise_sigma[0] <= stage.noise_sigma <= ranges.noise_sigma[1]
                assert ranges.jpeg_quality[0] <= stage.jpeg_quality <= ranges.jpeg_quality[1]

    def test_malformed_range_names_key(self):
        with pytest.raises(ConfigError, match="order1.blur_sigma"):
            load_config({"degrade": {"order1": {"blur_sigma": [2.0, 1.0]}}})
        with pytest.raises(ConfigError, match="order2.blur_kernel_size"):
            load_config({"degrade": {"order2": {"blur_kernel_size": [4, 8]}}})

    def test_serialization_round_trip(self):
        params = sample_degradation_params(Config().degrade, 99)
        assert DegradationParams.from_dict(params.to_dict()) == params


class TestJpegApprox:
    def test_quality_100_high_fidelity(self, image64):
        out = jpeg_approx(image64, 100)
        assert psnr_y(image64.astype(np.float64), out) >= 50.0

    def test_constant_midgray_survives(self):
        img = np.full((32, 32, 3), 0.5, dtype=np.float64)
        for q in (100, 70, 30):
            assert np.abs(jpeg_approx(img, q) - img).max() <= 1.0 / 255.0

    def test_psnr_nonincreasing_in_quality(self, image64):
        ref = image64.astype(np.float64)
        values = [psnr_y(ref, jpeg_approx(ref, q)) for q in (90, 70, 50, 30)]
        assert all(a >= b for a, b in zip(values, values[1:])), values

    def test_quality_out_of_range(self, image64):
        for q in (0, 101, -3):
            with pytest.raises(ValueError):
                jpeg_approx(image64, q)

    def test_pads_non_multiple_of_8(self):
        img = make_image(3, 64)[:52, :45]
        out = jpeg_approx(img, 80)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_dct_self_consistency(self):
        rng = np.random.default_rng(5)
        x = rng.random((24, 40))
        assert np.abs(block_idct2(block_dct2(x)) - x).max() < 1e-10

    def test_deterministic(self, image64):
        assert np.array_equal(jpeg_approx(image64, 65), jpeg_approx(image64, 65))


class TestSynthesizePair:
    def test_neutral_params_reduce_to_downsample(self):
        hq = make_image(11, 128)
        pair = synthesize_pair(hq, neutral_params())
        ref = np.clip(area_downsample(hq.astype(np.float64), (32, 32)), 0, 1)
        assert pair.lq.shape == (32, 32, 3)
        assert np.abs(pair.lq - ref).max() <= 1.0 / 255.0

    def test_bit_deterministic(self):
        hq = make_image(12, 64)
        params = sample_degradation_params(Config().degrade, 21)
        a = synthesize_pair(hq, params)
        b = synthesize_pair(hq, params)
        assert np.array_equal(a.lq, b.lq)

    def test_degradation_loses_information(self):
        hq = make_image(11, 128)
        ref = np.clip(area_downsample(hq.astype(np.float64), (32, 32)), 0, 1)
        neutral_psnr = psnr_y(
            synthesize_pair(hq, neutral_params()).lq.astype(np.float64), ref
        )
        params = sample_degradation_params(Config().degrade, 11)
        degraded = synthesize_pair(hq, params)
        assert degraded.lq.shape == (32, 32, 3)
        degraded_psnr = psnr_y(degraded.lq.astype(np.float64), ref)
        assert degraded_psnr < neutral_psnr

    def test_range_safety(self):
        hq = make_image(13, 64)
        for seed in (0, 5, 9):
            pair = synthesize_pair(hq, sample_degradation_params(Config().degrade, seed))
            assert pair.lq.shape == (16, 16, 3)
            assert np.isfinite(pair.lq).all()
            assert pair.lq.min() >= 0.0 and pair.lq.max() <= 1.0

    def test_rejects_small_and_bad_inputs(self):
        params = neutral_params()
        with pytest.raises(ValueError):
            synthesize_pair(make_image(1, 24), params)  # below 8 * scale
        with pytest.raises(ValueError):
            synthesize_pair(make_image(1, 64)[:63], params)  # not divisible
        bad = make_image(1, 64).astype(np.float64)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            synthesize_pair(bad, params)


def test_gaussian_kernel_normalized():
    for size, sigma in ((3, 0.4), (11, 2.0), (21, 3.0)):
        k = gaussian_kernel(size, sigma)
        assert abs(k.sum() - 1.0) < 1e-12
        assert k[size // 2, size // 2] == k.max()


def test_tiny_sigma_kernel_is_identity():
    k = gaussian_kernel(9, 1e-4)
    expect = np.zeros((9, 9))
    expect[4, 4] = 1.0
    assert np.array_equal(k, expect)
