"""Data layer tests: manifests, PNG round-trips, white balance, preprocessing,
the procedural pair generator, and the global-histogram swap."""

import numpy as np
import pytest

from renderpipe import data, model
from renderpipe.errors import ConfigurationError, DataError


def write_dummy_pair(d, stem, size=16, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0, 1, (size, size, 3)).astype(np.float32)
    srgb = rng.uniform(0, 1, (size, size, 3)).astype(np.float32)
    data.write_image(d / f"{stem}_raw.png", raw, bits=16)
    data.write_image(d / f"{stem}_srgb.png", srgb, bits=8)
    return f"{stem}_raw.png", f"{stem}_srgb.png"


class TestManifest:
    def test_round_trip(self, tmp_path):
        r0 = write_dummy_pair(tmp_path, "a", seed=1)
        r1 = write_dummy_pair(tmp_path, "b", seed=2)
        records = [
            data.PairRecord("a", r0[0], r0[1], (1.8, 1.0, 1.5)),
            data.PairRecord("b", r1[0], r1[1], (1.0, 1.0, 1.0)),
        ]
        path = tmp_path / "manifest.csv"
        data.save_manifest(path, records)
        assert data.load_manifest(path) == records

    def test_header_only_is_empty(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(data.MANIFEST_FIELDS) + "\n")
        assert data.load_manifest(path) == []

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("id,raw,srgb\n")
        with pytest.raises(DataError, match="header"):
            data.load_manifest(path)

    def test_non_numeric_gain_names_field_and_line(self, tmp_path):
        rp, sp = write_dummy_pair(tmp_path, "a")
        path = tmp_path / "m.csv"
        path.write_text(
            ",".join(data.MANIFEST_FIELDS) + f"\na,{rp},{sp},1.8,oops,1.5\n"
        )
        with pytest.raises(DataError, match="line 2.*wb_g"):
            data.load_manifest(path)

    def test_nonpositive_gain_rejected(self, tmp_path):
        rp, sp = write_dummy_pair(tmp_path, "a")
        path = tmp_path / "m.csv"
        path.write_text(",".join(data.MANIFEST_FIELDS) + f"\na,{rp},{sp},0.0,1.0,1.0\n")
        with pytest.raises(DataError, match="wb_r"):
            data.load_manifest(path)

    def test_missing_image_file_named(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(data.MANIFEST_FIELDS) + "\na,gone_raw.png,gone_srgb.png,1,1,1\n")
        with pytest.raises(DataError, match="gone_raw.png"):
            data.load_manifest(path)

    def test_wrong_field_count_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(data.MANIFEST_FIELDS) + "\na,b\n")
        with pytest.raises(DataError, match="line 2"):
            data.load_manifest(path)


class TestImageIO:
    def test_16bit_round_trip_error_bound(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (33, 47, 3)).astype(np.float32)
        p = tmp_path / "x.png"
        data.write_image(p, x, bits=16)
        y = data.read_image(p)
        assert y.shape == x.shape and y.dtype == np.float32
        # Half a quantization step: 0.5 / 65535.
        assert float(np.abs(y - x).max()) <= 0.5 / 65535 + 1e-9

    def test_8bit_round_trip_error_bound(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, (20, 20, 3)).astype(np.float32)
        p = tmp_path / "x.png"
        data.write_image(p, x, bits=8)
        assert float(np.abs(data.read_image(p) - x).max()) <= 0.5 / 255 + 1e-9

    def test_exact_at_stored_depth(self, tmp_path):
        # Values already on the 16-bit grid survive a write/read bitwise.
        rng = np.random.default_rng(5)
        q = rng.integers(0, 65536, (12, 12, 3))
        x = (q / 65535.0).astype(np.float32)
        p = tmp_path / "x.png"
        data.write_image(p, x, bits=16)
        assert np.array_equal(data.read_image(p), x)

    def test_channel_order_preserved(self, tmp_path):
        x = np.zeros((8, 8, 3), np.float32)
        x[..., 0], x[..., 1], x[..., 2] = 0.8, 0.4, 0.1
        p = tmp_path / "x.png"
        data.write_image(p, x, bits=8)
        y = data.read_image(p)
        assert abs(y[0, 0, 0] - 0.8) < 0.01
        assert abs(y[0, 0, 1] - 0.4) < 0.01
        assert abs(y[0, 0, 2] - 0.1) < 0.01

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            data.read_image(tmp_path / "nope.png")

    def test_single_channel_rejected(self, tmp_path):
        import cv2

        p = tmp_path / "gray.png"
        cv2.imwrite(str(p), np.zeros((8, 8), np.uint8))
        with pytest.raises(DataError, match="3 channels"):
            data.read_image(p)

    def test_image_bits(self, tmp_path):
        x = np.zeros((4, 4, 3), np.float32)
        data.write_image(tmp_path / "a.png", x, bits=8)
        data.write_image(tmp_path / "b.png", x, bits=16)
        assert data.image_bits(tmp_path / "a.png") == 8
        assert data.image_bits(tmp_path / "b.png") == 16


class TestWhiteBalance:
    def test_unit_gains_are_a_bitwise_noop(self):
        rng = np.random.default_rng(0)
        raw = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        raw[3, 3, :] = 1.0
        out = data.apply_white_balance(raw, (1.0, 1.0, 1.0))
        assert np.array_equal(out, raw)

    def test_pure_red_saturates(self):
        # (0.5, 0, 0) under gains (2, 1, 1): red doubles to 1.0, which is
        # also the new maximum, so renormalization divides by exactly 1.
        raw = np.zeros((4, 4, 3), np.float32)
        raw[..., 0] = 0.5
        out = data.apply_white_balance(raw, (2.0, 1.0, 1.0))
        assert np.all(out[..., 0] == 1.0)
        assert np.all(out[..., 1:] == 0.0)

    def test_output_attains_max_one(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0, 0.6, (10, 10, 3)).astype(np.float32)
        out = data.apply_white_balance(raw, (1.8, 1.0, 1.5))
        assert float(out.max()) == 1.0

    def test_zero_image_unchanged(self):
        raw = np.zeros((4, 4, 3), np.float32)
        assert np.array_equal(data.apply_white_balance(raw, (2.0, 1.0, 1.0)), raw)

    def test_invalid_gains_rejected(self):
        raw = np.ones((2, 2, 3), np.float32)
        for gains in [(0.0, 1.0, 1.0), (-1.0, 1.0, 1.0), (np.nan, 1.0, 1.0), (1.0, 1.0)]:
            with pytest.raises(ConfigurationError):
                data.apply_white_balance(raw, gains)


class TestPreprocess:
    def pair_of(self, h, w, seed=0):
        rng = np.random.default_rng(seed)
        raw = rng.uniform(0, 1, (h, w, 3)).astype(np.float32)
        return data.ImagePair("p", raw, raw.copy())

    def test_resize_arithmetic(self):
        # 1024x1536 with target 512: scale 1/2 on the short side gives
        # 512x768, then the center crop keeps columns 128..639.
        img = np.zeros((1024, 1536, 3), np.float32)
        resized = data._resize_short_side(img, 512)
        assert resized.shape == (512, 768, 3)
        out = data.preprocess(self.pair_of(1024, 1536), target=512)
        assert out.raw.shape == (512, 512, 3)

    def test_already_target_is_unchanged(self):
        pair = self.pair_of(128, 128, seed=2)
        out = data.preprocess(pair, target=128)
        assert np.array_equal(out.raw, pair.raw)
        assert np.array_equal(out.srgb, pair.srgb)

    def test_center_crop_coordinates(self):
        pair = self.pair_of(128, 192, seed=3)
        out = data.preprocess(pair, target=128)
        assert np.array_equal(out.raw, pair.raw[:, 32:160, :])

    def test_both_images_share_the_transform(self):
        pair = self.pair_of(300, 200, seed=4)
        out = data.preprocess(pair, target=128)
        assert out.raw.shape == out.srgb.shape == (128, 128, 3)
        assert np.array_equal(out.raw, out.srgb)

    def test_too_small_warns_and_skips(self):
        pair = self.pair_of(100, 200)
        with pytest.warns(UserWarning, match="smaller"):
            assert data.preprocess(pair, target=128) is None


class TestRenderer:
    def test_zero_strengths_is_pure_gamma(self):
        rng = np.random.default_rng(6)
        raw = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        cfg = data.SynthConfig(contrast_strength=0.0, saturation_strength=0.0)
        out = data.render_srgb(raw, cfg)
        assert np.array_equal(out, raw ** np.float32(cfg.gamma))

    def test_shadow_lift_exceeds_gamma_pointwise(self):
        # A dark scene has zero highlight tail mass, so the tone adjustment
        # reduces to the nonnegative shadow-lift term alone and every pixel
        # renders at or above its pure-gamma value.
        rng = np.random.default_rng(7)
        raw = rng.uniform(0.0, 0.1, (48, 48, 3)).astype(np.float32)
        cfg = data.SynthConfig(contrast_strength=1.0, saturation_strength=0.0, local_radius=0)
        out = data.render_srgb(raw, cfg)
        gamma = raw ** np.float32(cfg.gamma)
        assert np.all(out >= gamma)
        assert float(np.mean(out - gamma)) > 0.01

    def test_global_histogram_changes_fixed_pixel(self):
        # Identical content at the probe pixel, different global statistics.
        raw1 = np.full((64, 64, 3), 0.2, np.float32)
        raw1[0, 0, :] = 1.0
        raw2 = raw1.copy()
        raw2[:32, :, :] = 0.9
        cfg = data.SynthConfig(contrast_strength=1.0, saturation_strength=0.0, local_radius=0)
        out1 = data.render_srgb(raw1, cfg)
        out2 = data.render_srgb(raw2, cfg)
        assert not np.array_equal(out1[50, 50], out2[50, 50])

    def test_saturation_boost_widens_chroma(self):
        rng = np.random.default_rng(8)
        raw = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        plain = data.render_srgb(raw, data.SynthConfig(contrast_strength=0.0, saturation_strength=0.0))
        boosted = data.render_srgb(
            raw, data.SynthConfig(contrast_strength=0.0, saturation_strength=1.0, local_radius=0)
        )

        def spread(v):
            return float(np.mean(np.abs(v - v.mean(axis=-1, keepdims=True))))

        assert spread(boosted) > spread(plain) * 1.05

    def test_render_is_deterministic(self):
        rng = np.random.default_rng(9)
        raw = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        cfg = data.SynthConfig()
        assert np.array_equal(data.render_srgb(raw, cfg), data.render_srgb(raw, cfg))


class TestGenerator:
    def test_corpus_files_and_manifest(self, tmp_path):
        cfg = data.SynthConfig(count=4, size=32, seed=1)
        records = data.synth_generate(tmp_path, cfg)
        assert len(records) == 4
        loaded = data.load_manifest(tmp_path / "manifest.csv")
        assert loaded == records
        assert (tmp_path / "synth_config.json").exists()
        for rec in loaded:
            assert rec.wb_gains == (1.0, 1.0, 1.0)

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = data.SynthConfig(count=3, size=32, seed=7)
        data.synth_generate(tmp_path / "a", cfg)
        data.synth_generate(tmp_path / "b", cfg)
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_raw_attains_exactly_one(self, tmp_path):
        cfg = data.SynthConfig(count=4, size=32, seed=3)
        for rec in data.synth_generate(tmp_path, cfg):
            raw = data.read_image(rec.raw_abspath())
            assert float(raw.max()) == 1.0
            assert float(raw.min()) >= 0.0

    def test_archetypes_spread_the_exposure(self, tmp_path):
        cfg = data.SynthConfig(count=8, size=64, seed=5)
        records = data.synth_generate(tmp_path, cfg)
        means = [float(data.read_image(r.raw_abspath()).mean()) for r in records]
        assert float(np.std(means)) > 0.1

    def test_generate_raw_rejects_unknown_archetype(self):
        with pytest.raises(ConfigurationError):
            data.generate_raw(np.random.default_rng(0), 32, "vivid")


class TestOrientedTensors:
    def test_directions(self):
        rng = np.random.default_rng(0)
        pair = data.ImagePair("x", rng.uniform(size=(8, 8, 3)).astype(np.float32),
                              rng.uniform(size=(8, 8, 3)).astype(np.float32))
        inp, tgt = data.oriented_tensors(pair, "raw_to_srgb")
        assert inp.shape == (1, 8, 8, 3)
        assert np.array_equal(inp[0], pair.raw) and np.array_equal(tgt[0], pair.srgb)
        inp, tgt = data.oriented_tensors(pair, "srgb_to_raw")
        assert np.array_equal(inp[0], pair.srgb) and np.array_equal(tgt[0], pair.raw)
        with pytest.raises(ConfigurationError):
            data.oriented_tensors(pair, "up")


class TestSwap:
    def full_params(self, hidden=4, seed=0):
        cfg = model.NetworkConfig("raw_to_srgb", hidden_channels=hidden)
        return model.init_params(cfg, np.random.default_rng(seed))

    def images(self, seed=0, size=32):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.6, 1.0, (1, size, size, 3)).astype(np.float32)
        b = rng.uniform(0.0, 0.4, (1, size, size, 3)).astype(np.float32)
        return a, b

    def test_identity_swap_is_exactly_zero(self):
        params = self.full_params()
        _, b = self.images(1)
        res = data.swap_global_histogram(params, b, b)
        assert res.max_abs_difference == 0.0
        res = data.swap_global_histogram(params, b, b, all_scales=True, luminance_only=False)
        assert res.max_abs_difference == 0.0

    def test_different_context_changes_prediction(self):
        params = self.full_params()
        a, b = self.images(2)
        res = data.swap_global_histogram(params, a, b)
        assert res.max_abs_difference > 0.0
        assert res.difference.shape == res.baseline.shape

    def test_swapped_global_channel_ranges(self):
        dst = np.arange(18, dtype=np.float32).reshape(1, 1, 1, 18)
        src = dst + 100.0
        lum = data.swapped_global(dst, src, bins=6, luminance_only=True)
        assert np.array_equal(lum[..., :6], src[..., :6])
        assert np.array_equal(lum[..., 6:], dst[..., 6:])
        allc = data.swapped_global(dst, src, bins=6, luminance_only=False)
        assert np.array_equal(allc, src)
        assert np.array_equal(dst[0, 0, 0, :3], [0.0, 1.0, 2.0])

    def test_baseline_models_cannot_respond(self):
        cfg = model.BaselineConfig("mlp", "raw_to_srgb", hidden_channels=4)
        params = model.init_params(cfg, np.random.default_rng(0))
        a, b = self.images(3)
        res = data.swap_global_histogram(params, a, b)
        assert res.max_abs_difference == 0.0
        assert np.array_equal(res.baseline, res.manipulated)

    def test_global_swap_works_across_sizes(self):
        params = self.full_params()
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, (1, 24, 24, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (1, 40, 40, 3)).astype(np.float32)
        res = data.swap_global_histogram(params, a, b)
        assert res.baseline.shape == (1, 40, 40, 3)

    def test_all_scales_requires_matching_sizes(self):
        params = self.full_params()
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, (1, 24, 24, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (1, 40, 40, 3)).astype(np.float32)
        with pytest.raises(ConfigurationError, match="identical size"):
            data.swap_global_histogram(params, a, b, all_scales=True)
