import numpy as np
import pytest

from mtvnet.config import LevelSpec, ModelConfig
from mtvnet.volumes import (Volume, VolumeError, _ellipsoid_field,
                            block_mean_downsample, crop_centered, degrade,
                            foreground_mask, list_store, make_synthetic_corpus,
                            normalize_intensities, read_volume, sample_nested,
                            trilinear_upsample, volume_to_bytes, write_volume)


def single_level_cfg(ctx=16, scale=2):
    return ModelConfig(levels=(LevelSpec(ctx, 2, 1, 2),), window_size=4,
                       cat_size=2, embed_channels=8, skip_channels=4, heads=2,
                       scale=scale)


class TestVolume:
    def test_rejects_non_finite(self):
        data = np.zeros((1, 4, 4, 4), dtype=np.float32)
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(VolumeError, match="non-finite"):
            Volume(data)

    def test_rejects_unnormalized(self):
        with pytest.raises(VolumeError, match="normalized"):
            Volume(np.full((1, 4, 4, 4), 2.0, dtype=np.float32))

    def test_three_dim_input_gains_channel(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        assert v.data.shape == (1, 4, 4, 4)

    def test_normalize(self):
        rng = np.random.default_rng(0)
        data = rng.normal(5.0, 2.0, size=(1, 6, 6, 6))
        norm = normalize_intensities(data)
        assert norm.min() == 0.0 and norm.max() == 1.0
        assert normalize_intensities(np.full((1, 2, 2, 2), 3.0)).max() == 0.0


class TestDegrade:
    def test_constant_preserved_with_blur(self):
        hr = Volume(np.full((1, 16, 16, 16), 0.5, dtype=np.float32))
        lr = degrade(hr, 2, blur=True)
        assert lr.shape == (8, 8, 8)
        np.testing.assert_allclose(lr.data, 0.5, atol=1e-6)

    def test_impulse_block_mean_stencil(self):
        hr = np.zeros((1, 8, 8, 8), dtype=np.float32)
        hr[0, 4, 4, 4] = 1.0
        lr = degrade(Volume(hr), 2, blur=False)
        expected = np.zeros((1, 4, 4, 4), dtype=np.float32)
        expected[0, 2, 2, 2] = 1.0 / 8.0   # mean of the 8-voxel HR cell
        np.testing.assert_array_equal(lr.data, expected)

    def test_blur_off_is_pure_block_mean(self):
        rng = np.random.default_rng(1)
        hr = rng.random((1, 12, 12, 12)).astype(np.float32)
        lr = degrade(Volume(hr), 3, blur=False)
        np.testing.assert_allclose(lr.data, block_mean_downsample(hr, 3), atol=1e-7)

    def test_non_divisible_edge_rejected(self):
        with pytest.raises(VolumeError, match="not divisible"):
            degrade(Volume(np.zeros((1, 9, 8, 8), dtype=np.float32)), 2)

    def test_spacing_scales(self):
        hr = Volume(np.zeros((1, 8, 8, 8), dtype=np.float32), spacing=(0.5, 0.5, 1.0))
        assert degrade(hr, 2, blur=False).spacing == (1.0, 1.0, 2.0)


class TestTrilinearUpsample:
    def test_constant(self):
        x = np.full((1, 4, 4, 4), 0.3, dtype=np.float32)
        np.testing.assert_allclose(trilinear_upsample(x, 2), 0.3, atol=1e-6)

    def test_hand_stencil_interior(self):
        # impulse at index 2, cell-centered x2: output samples sit at
        # x = h/2 - 0.25, so the impulse spreads as 0.25, 0.75, 0.75, 0.25
        x = np.zeros((1, 6, 1, 1), dtype=np.float32)
        x[0, 2, 0, 0] = 1.0
        up = trilinear_upsample(x, 2)
        np.testing.assert_allclose(
            up[0, :, 0, 0],
            [0.0, 0.0, 0.0, 0.25, 0.75, 0.75, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0],
            atol=1e-6)

    def test_round_trip_on_bandlimited_content(self):
        # low-frequency cosine mixture, even at both boundaries so the
        # reflect extension is exact; only the resampling kernels matter
        n = 32
        ax = np.arange(n)
        rng = np.random.default_rng(0)
        field = np.full((n, n, n), 0.5)
        modes = [np.cos(np.pi * k * ax / (n - 1)) for k in range(3)]
        for kz in range(3):
            for ky in range(3):
                for kx in range(3):
                    if kz == ky == kx == 0:
                        continue
                    field += rng.uniform(-0.08, 0.08) * (
                        modes[kz][:, None, None] * modes[ky][None, :, None]
                        * modes[kx][None, None, :])
        field = np.clip(field, 0, 1).astype(np.float32)[None]
        down = block_mean_downsample(trilinear_upsample(field, 2), 2)
        assert np.sqrt(np.mean((down - field) ** 2)) < 1e-3


class TestForegroundMask:
    def test_all_zero(self):
        v = Volume(np.zeros((1, 4, 4, 4), dtype=np.float32))
        assert not foreground_mask(v).any()

    def test_half_split(self):
        data = np.zeros((1, 4, 4, 4), dtype=np.float32)
        data[:, :2] = 0.9
        mask = foreground_mask(Volume(data))
        assert mask.sum() == mask.size // 2

    def test_ellipsoid_membership(self):
        edge = 48
        semi = (14.0, 12.0, 10.0)
        center = (24.0, 24.0, 24.0)
        inside = _ellipsoid_field(edge, center, semi) <= 1.0
        vol = Volume(np.where(inside, 0.7, 0.0).astype(np.float32)[None])
        mask = foreground_mask(vol)
        np.testing.assert_array_equal(mask, inside)
        analytic = 4.0 / 3.0 * np.pi * semi[0] * semi[1] * semi[2]
        assert abs(mask.sum() - analytic) / analytic < 0.02


class TestCropCentered:
    def test_reflect_matches_numpy_pad(self):
        rng = np.random.default_rng(2)
        data = rng.random((2, 8, 8, 8)).astype(np.float32)
        crop = crop_centered(data, (1, 4, 7), 8, pad=True)
        padded = np.pad(data, ((0, 0), (4, 4), (4, 4), (4, 4)), mode="reflect")
        expected = padded[:, 1:9, 4:12, 7:15]
        np.testing.assert_array_equal(crop, expected)

    def test_out_of_bounds_without_pad(self):
        data = np.zeros((1, 8, 8, 8), dtype=np.float32)
        with pytest.raises(VolumeError, match="padding disabled"):
            crop_centered(data, (0, 4, 4), 8, pad=False)


class TestSampleNested:
    def test_single_level_center_range(self):
        lr = Volume(np.zeros((1, 64, 64, 64), dtype=np.float32))
        hr = Volume(np.zeros((1, 128, 128, 128), dtype=np.float32))
        cfg = single_level_cfg(ctx=16, scale=2)
        rng = np.random.default_rng(0)
        for _ in range(50):
            patch = sample_nested(lr, hr, cfg, rng)
            assert all(8 <= c < 56 for c in patch.center)
            assert patch.lr_contexts[0].shape == (1, 16, 16, 16)
            assert patch.hr_target.shape == (1, 32, 32, 32)

    def test_concentric_crops_nest_exactly(self):
        rng = np.random.default_rng(3)
        lr = Volume(rng.random((1, 48, 48, 48)).astype(np.float32))
        hr = Volume(rng.random((1, 96, 96, 96)).astype(np.float32))
        cfg = ModelConfig(levels=(LevelSpec(32, 4, 1, 2), LevelSpec(16, 2, 1, 2)),
                          window_size=4, cat_size=2, embed_channels=8,
                          skip_channels=4, heads=2, scale=2)
        patch = sample_nested(lr, hr, cfg, np.random.default_rng(1))
        outer, inner = patch.lr_contexts
        np.testing.assert_array_equal(outer[:, 8:24, 8:24, 8:24], inner)

    def test_hr_target_matches_degradation(self):
        rng = np.random.default_rng(4)
        hr = Volume(rng.random((1, 96, 96, 96)).astype(np.float32))
        lr = degrade(hr, 2, blur=False)
        cfg = single_level_cfg(ctx=16, scale=2)
        patch = sample_nested(lr, hr, cfg, np.random.default_rng(2))
        np.testing.assert_allclose(block_mean_downsample(patch.hr_target, 2),
                                   patch.lr_contexts[-1], atol=1e-6)

    def test_fixed_seed_reproduces_sequence(self):
        lr = Volume(np.zeros((1, 64, 64, 64), dtype=np.float32))
        hr = Volume(np.zeros((1, 128, 128, 128), dtype=np.float32))
        cfg = single_level_cfg()
        seq1 = [sample_nested(lr, hr, cfg, np.random.default_rng(9)).center
                for _ in range(1)]
        rng_a = np.random.default_rng(9)
        rng_b = np.random.default_rng(9)
        seq_a = [sample_nested(lr, hr, cfg, rng_a).center for _ in range(10)]
        seq_b = [sample_nested(lr, hr, cfg, rng_b).center for _ in range(10)]
        assert seq_a == seq_b
        assert seq1[0] == seq_a[0]

    def test_volume_too_small(self):
        lr = Volume(np.zeros((1, 12, 12, 12), dtype=np.float32))
        hr = Volume(np.zeros((1, 24, 24, 24), dtype=np.float32))
        cfg = single_level_cfg(ctx=16)
        with pytest.raises(VolumeError, match="too small"):
            sample_nested(lr, hr, cfg, np.random.default_rng(0), pad=False)

    def test_padding_extends_outer_context(self):
        rng = np.random.default_rng(5)
        lr = Volume(rng.random((1, 24, 24, 24)).astype(np.float32))
        hr = Volume(rng.random((1, 48, 48, 48)).astype(np.float32))
        cfg = ModelConfig(levels=(LevelSpec(32, 4, 1, 2), LevelSpec(16, 2, 1, 2)),
                          window_size=4, cat_size=2, embed_channels=8,
                          skip_channels=4, heads=2, scale=2)
        patch = sample_nested(lr, hr, cfg, np.random.default_rng(0), pad=True)
        assert patch.lr_contexts[0].shape == (1, 32, 32, 32)


class TestSyntheticCorpus:
    def test_deterministic_regeneration(self):
        a = make_synthetic_corpus("trabecular", 2, 48, seed=7)
        b = make_synthetic_corpus("trabecular", 2, 48, seed=7)
        for va, vb in zip(a, b):
            assert va.data.tobytes() == vb.data.tobytes()
            assert va.name == vb.name

    def test_ellipsoid_fraction_in_analytic_range(self):
        vol = make_synthetic_corpus("ellipsoid", 1, 64, seed=11)[0]
        frac = foreground_mask(vol).mean()
        lo = 4.0 / 3.0 * np.pi * 0.30 ** 3 * 0.98
        hi = 4.0 / 3.0 * np.pi * 0.40 ** 3 * 1.02
        assert lo <= frac <= hi

    def test_bandlimited_spectrum(self):
        cutoff = 0.25
        vol = make_synthetic_corpus("bandlimited", 1, 32, seed=5, cutoff=cutoff)[0]
        spec = np.abs(np.fft.rfftn(vol.data[0])) ** 2
        freqs = [np.fft.fftfreq(32), np.fft.fftfreq(32), np.fft.rfftfreq(32)]
        fz, fy, fx = np.meshgrid(*freqs, indexing="ij")
        radius = np.sqrt(fz ** 2 + fy ** 2 + fx ** 2)
        above = spec[radius > cutoff * 0.5].sum()
        assert above / spec.sum() < 0.01

    def test_values_normalized(self):
        for name in ("ellipsoid", "bandlimited", "trabecular"):
            vol = make_synthetic_corpus(name, 1, 24, seed=1)[0]
            assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0

    def test_unknown_generator(self):
        with pytest.raises(VolumeError, match="unknown generator"):
            make_synthetic_corpus("perlin", 1, 16, seed=0)


class TestVolumeStore:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        vol = Volume(rng.random((2, 6, 5, 4)).astype(np.float32),
                     spacing=(0.7, 0.7, 1.2), name="sample_01")
        path = tmp_path / "sample_01.mtvvol"
        write_volume(vol, path)
        loaded = read_volume(path)
        assert loaded.name == vol.name
        assert loaded.spacing == vol.spacing
        assert loaded.data.tobytes() == vol.data.tobytes()
        # re-serialization is byte-identical
        assert volume_to_bytes(loaded) == path.read_bytes()

    def test_header_magic(self, tmp_path):
        path = tmp_path / "bad.mtvvol"
        path.write_bytes(b"NOTAVOL\nend\n")
        with pytest.raises(VolumeError, match="MTVVOL1"):
            read_volume(path)

    def test_list_store_sorted(self, tmp_path):
        for name in ("b", "a", "c"):
            write_volume(Volume(np.zeros((1, 2, 2, 2), dtype=np.float32), name=name),
                         tmp_path / f"{name}.mtvvol")
        names = [p.split("/")[-1] for p in list_store(tmp_path)]
        assert names == ["a.mtvvol", "b.mtvvol", "c.mtvvol"]
        assert list_store(tmp_path / "missing") == []

    def test_no_partial_files_left(self, tmp_path):
        vol = Volume(np.zeros((1, 2, 2, 2), dtype=np.float32))
        write_volume(vol, tmp_path / "v.mtvvol")
        leftovers = [p for p in tmp_path.iterdir() if p.suffix != ".mtvvol"]
        assert leftovers == []
