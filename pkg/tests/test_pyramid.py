"""Synthetic pyramids, Otsu tissue masks, tile sampling, crops and on-disk formats."""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flexissl import pyramid as pyr
from flexissl.errors import InvalidArgumentError, SamplingError


# -----------------------------------------------------------------------
# pyramid construction
# -----------------------------------------------------------------------


class TestBuildPyramid:
    def test_level_sizes_halve(self):
        p = pyr.build_synthetic_pyramid(0, base_size=2048, texture_class="dots")
        assert [lv.shape[0] for lv in p.levels] == [2048, 1024, 512, 256]
        assert [lv.shape[1] for lv in p.levels] == [2048, 1024, 512, 256]
        assert p.mpp_per_level == (0.25, 0.5, 1.0, 2.0)

    def test_mpp_doubles(self, small_pyramid):
        mpp = np.array(small_pyramid.mpp_per_level)
        np.testing.assert_array_equal(mpp[1:] / mpp[:-1], 2.0)

    def test_box_mean_definition(self, small_pyramid):
        """level1[i, j] is the mean of the 2x2 block of level0 it covers."""
        l0 = small_pyramid.levels[0].astype(np.float64)
        l1 = small_pyramid.levels[1]
        oracle = l0.reshape(256, 2, 256, 2, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(l1, oracle, atol=1e-6)

    def test_mean_conserved_across_levels(self, small_pyramid):
        means = [lv.astype(np.float64).mean() for lv in small_pyramid.levels]
        np.testing.assert_allclose(np.diff(means), 0.0, atol=1e-6)

    def test_pixel_range(self, small_pyramid):
        for lv in small_pyramid.levels:
            assert lv.min() >= 0.0 and lv.max() <= 1.0

    def test_deterministic(self):
        a = pyr.build_synthetic_pyramid(7, 256, "checker")
        b = pyr.build_synthetic_pyramid(7, 256, "checker")
        for x, y in zip(a.levels, b.levels):
            assert np.array_equal(x, y)

    def test_seed_and_class_change_content(self):
        a = pyr.build_synthetic_pyramid(7, 256, "checker")
        b = pyr.build_synthetic_pyramid(8, 256, "checker")
        c = pyr.build_synthetic_pyramid(7, 256, "dots")
        assert not np.array_equal(a.levels[0], b.levels[0])
        assert not np.array_equal(a.levels[0], c.levels[0])

    @pytest.mark.parametrize("size", [0, 100, 255, 300, 768 + 128])
    def test_bad_base_size(self, size):
        with pytest.raises(InvalidArgumentError):
            pyr.build_synthetic_pyramid(0, base_size=size)

    def test_unknown_texture(self):
        with pytest.raises(InvalidArgumentError):
            pyr.build_synthetic_pyramid(0, 256, "plaid")

    def test_texture_classes_share_tissue_marginals(self):
        """Texture classes differ in structure, not in first-order color statistics."""
        grays = []
        for cls in pyr.TEXTURES:
            p = pyr.build_synthetic_pyramid(5, 512, cls)
            g = pyr.to_gray(p.levels[0])
            grays.append(g[g < 0.85])
        for g in grays[1:]:
            assert abs(np.median(g) - np.median(grays[0])) < 0.05


# -----------------------------------------------------------------------
# Otsu
# -----------------------------------------------------------------------


def _otsu_brute_force(gray, bins=256):
    """Exhaustive search over the 256 candidate thresholds t = k/256, k = 1..255."""
    best_t, best_var = None, -1.0
    values = gray.ravel()
    for k in range(1, bins):
        t = k / bins
        lo, hi = values[values < t], values[values >= t]
        if lo.size == 0 or hi.size == 0:
            continue
        w0, w1 = lo.size / values.size, hi.size / values.size
        # histogram-bin means, to match the binned statistic
        m0 = np.floor(lo * bins).mean()
        m1 = np.floor(hi * bins).mean()
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best_var + 1e-12:
            best_t, best_var = t, var
    return best_t


class TestOtsu:
    def test_all_white_is_empty(self):
        m = pyr.compute_tissue_mask(np.ones((32, 32, 3)))
        assert m.degenerate
        assert not m.grid.any()
        assert m.grid.shape == (32, 32)

    def test_two_mode_threshold(self):
        gray = np.array([0.2] * 500 + [0.8] * 500).reshape(20, 50)
        t, degenerate = pyr.otsu_threshold(gray)
        assert not degenerate
        assert 0.2 < t <= 0.8
        mask = pyr.compute_tissue_mask(gray)
        assert mask.grid.sum() == 500

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            gray = np.concatenate([rng.normal(0.35, 0.05, 400), rng.normal(0.8, 0.07, 600)]).clip(0, 0.999)
            t, _ = pyr.otsu_threshold(gray)
            assert t == pytest.approx(_otsu_brute_force(gray), abs=1e-12)

    def test_foreground_fraction_is_mass_below_threshold(self, small_pyramid):
        level = small_pyramid.levels[2]
        m = pyr.compute_tissue_mask(level)
        gray = pyr.to_gray(level)
        assert m.foreground_fraction == pytest.approx(np.mean(gray < m.threshold))

    def test_idempotent(self, small_pyramid):
        a = pyr.compute_tissue_mask(small_pyramid.levels[1])
        b = pyr.compute_tissue_mask(small_pyramid.levels[1])
        assert a.threshold == b.threshold
        assert np.array_equal(a.grid, b.grid)

    def test_mask_dims_match_level(self, small_pyramid):
        for lv, m in zip(small_pyramid.levels, pyr.compute_tissue_masks(small_pyramid)):
            assert m.grid.shape == lv.shape[:2]

    def test_tissue_is_found(self, small_pyramid):
        m = pyr.compute_tissue_mask(small_pyramid.levels[0])
        assert 0.05 < m.foreground_fraction < 0.95


# -----------------------------------------------------------------------
# tile sampling
# -----------------------------------------------------------------------


class TestSampleTiles:
    def test_single_level(self, small_pyramid):
        masks = pyr.compute_tissue_masks(small_pyramid)
        tiles = pyr.sample_tiles(small_pyramid, masks, (1, 0, 0, 0), n=20, tile_size=64, seed=1)
        assert all(t.mpp == 0.25 and t.origin[0] == 0 for t in tiles)

    def test_centers_in_foreground_and_bounds(self, small_pyramid):
        masks = pyr.compute_tissue_masks(small_pyramid)
        tiles = pyr.sample_tiles(small_pyramid, masks, (0.4, 0.3, 0.3, 0.0), n=200, tile_size=64, seed=2)
        for t in tiles:
            level, x, y = t.origin
            h, w = small_pyramid.level_shape(level)
            assert 0 <= x and x + 64 <= w and 0 <= y and y + 64 <= h
            cx, cy = t.center
            assert masks[level].grid[cy, cx]
            np.testing.assert_array_equal(t.pixels, small_pyramid.levels[level][y : y + 64, x : x + 64])

    def test_level_frequencies(self, small_pyramid):
        """n = 10,000 draws: each level count inside the 3-sigma binomial interval; chi-square p > 0.01."""
        masks = pyr.compute_tissue_masks(small_pyramid)
        n = 10_000
        tiles = pyr.sample_tiles(small_pyramid, masks, (0.25,) * 4, n=n, tile_size=16, seed=3)
        counts = np.bincount([t.origin[0] for t in tiles], minlength=4)
        sigma = np.sqrt(n * 0.25 * 0.75)
        assert np.all(np.abs(counts - 2500) <= 3 * sigma)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_deterministic(self, small_pyramid):
        masks = pyr.compute_tissue_masks(small_pyramid)
        a = pyr.sample_tiles(small_pyramid, masks, (0.25,) * 4, n=10, tile_size=32, seed=4)
        b = pyr.sample_tiles(small_pyramid, masks, (0.25,) * 4, n=10, tile_size=32, seed=4)
        assert [t.origin for t in a] == [t.origin for t in b]

    @pytest.mark.parametrize("probs", [(0, 0, 0, 0), (0.5, 0.5, 0.5, -0.5), (0.5, 0.5), (0.3, 0.3, 0.3, 0.3)])
    def test_bad_probs(self, small_pyramid, probs):
        masks = pyr.compute_tissue_masks(small_pyramid)
        with pytest.raises(InvalidArgumentError):
            pyr.sample_tiles(small_pyramid, masks, probs, n=1, tile_size=32)

    def test_no_foreground_raises_after_retries(self):
        blank = pyr.PyramidImage([np.ones((64, 64, 3), np.float32), np.ones((32, 32, 3), np.float32)], (0.25, 0.5))
        masks = [pyr.compute_tissue_mask(lv) for lv in blank.levels]
        with pytest.raises(SamplingError):
            pyr.sample_tiles(blank, masks, (0.5, 0.5), n=1, tile_size=16)

    def test_empty_level_is_skipped(self, small_pyramid):
        """A level with no usable foreground is resampled away, not returned."""
        masks = pyr.compute_tissue_masks(small_pyramid)
        masks[0] = pyr.TissueMask(np.zeros_like(masks[0].grid), 0.0, True)
        tiles = pyr.sample_tiles(small_pyramid, masks, (0.5, 0.5, 0, 0), n=50, tile_size=32, seed=5)
        assert {t.origin[0] for t in tiles} == {1}

    def test_tiles_are_read_only(self, small_pyramid):
        masks = pyr.compute_tissue_masks(small_pyramid)
        (t,) = pyr.sample_tiles(small_pyramid, masks, (1, 0, 0, 0), n=1, tile_size=32)
        with pytest.raises(ValueError):
            t.pixels[0, 0, 0] = 0.0


# -----------------------------------------------------------------------
# crops
# -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def tile():
    p = pyr.build_synthetic_pyramid(1, 512, "dots")
    masks = pyr.compute_tissue_masks(p)
    (t,) = pyr.sample_tiles(p, masks, (1, 0, 0, 0), n=1, tile_size=256, seed=0)
    return t


class TestCrops:
    def test_counts_and_sizes(self, tile):
        cs = pyr.make_crops(tile, seed=0)
        assert len(cs.global_crops) == 2 and len(cs.local_crops) == 4
        assert all(c.shape == (224, 224, 3) for c in cs.global_crops)
        assert all(c.shape == (96, 96, 3) for c in cs.local_crops)

    def test_no_augmentation_is_top_left(self, tile):
        cs = pyr.make_crops(tile, seed=0, augment=False)
        np.testing.assert_array_equal(cs.global_crops[0], tile.pixels[:224, :224])

    def test_deterministic(self, tile):
        a, b = pyr.make_crops(tile, seed=9), pyr.make_crops(tile, seed=9)
        for x, y in zip(a.global_crops + a.local_crops, b.global_crops + b.local_crops):
            assert np.array_equal(x, y)

    def test_range(self, tile):
        cs = pyr.make_crops(tile, seed=3)
        for c in cs.global_crops + cs.local_crops:
            assert c.min() >= 0 and c.max() <= 1

    def test_too_small(self):
        t = pyr.TileSample(np.zeros((200, 200, 3), np.float32), 0.25, (0, 0, 0))
        with pytest.raises(InvalidArgumentError):
            pyr.make_crops(t, seed=0)


@given(st.lists(st.integers(0, 2**31), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_derive_seed_stable_and_in_range(keys):
    s = pyr.derive_seed(*keys)
    assert s == pyr.derive_seed(*keys)
    assert 0 <= s < 2**63


# -----------------------------------------------------------------------
# on-disk formats
# -----------------------------------------------------------------------


class TestIO:
    def test_pyramid_roundtrip(self, tmp_path, small_pyramid):
        d = tmp_path / "p"
        pyr.save_pyramid(small_pyramid, str(d))
        assert sorted(os.listdir(d)) == ["level_0.png", "level_1.png", "level_2.png", "level_3.png", "manifest"]
        meta = pyr.read_manifest(str(d / "manifest"))
        assert meta["base_size"] == "512" and meta["mpp_3"] == "2.0"
        back = pyr.load_pyramid(str(d))
        assert back.texture_label == small_pyramid.texture_label and back.seed == small_pyramid.seed
        for a, b in zip(small_pyramid.levels, back.levels):
            np.testing.assert_allclose(a, b, atol=0.5 / 255 + 1e-6)

    def test_shard_roundtrip(self, tmp_path, small_pyramid):
        masks = pyr.compute_tissue_masks(small_pyramid)
        tiles = pyr.sample_tiles(small_pyramid, masks, (0.5, 0.5, 0, 0), n=3, tile_size=32, seed=0)
        index = pyr.write_tile_shard(tiles, str(tmp_path / "shard"))
        lines = open(index).read().splitlines()
        assert len(lines) == 3 and len(lines[0].split("\t")) == 6
        back = pyr.read_tile_shard(str(tmp_path / "shard"))
        assert [t.origin for t in back] == [t.origin for t in tiles]
        assert [t.label for t in back] == [t.label for t in tiles]
