"""Saliency tests: rasterization, smoothing, normalization, confidence fusion
and variant assembly."""

import numpy as np
import pytest

from graphite import saliency
from graphite.graphs import PATCH_SIZE, PatchNode
from graphite.mil import Bag, MilModel
from graphite.saliency import (FusionConfig, RasterMap, adaptive_weights,
                               confidence_fuse, confidence_score,
                               gaussian_smooth, gradient_saliency_map,
                               graphite_variant, grid_shape, load_csv,
                               mil_attention_map, minmax_normalize,
                               multilevel_fuse, rasterize, save_csv, to_gray,
                               to_rgb)

CELLS = PATCH_SIZE // 16  # level-0 footprint side on the default grid


def _nodes(level, coords):
    return [PatchNode(node_id=i, core_id="t", level=level, grid_row=r,
                      grid_col=c) for i, (r, c) in enumerate(coords)]


class TestRasterize:
    def test_level0_footprint(self):
        shape = grid_shape(2 * PATCH_SIZE, 2 * PATCH_SIZE)
        m = rasterize(_nodes(0, [(0, 0)]), [2.0], 0, shape)
        assert m.values.shape == shape
        assert np.all(m.values[:CELLS, :CELLS] == 2.0)
        assert np.all(m.values[CELLS:, :] == 0.0)
        assert np.all(m.values[:, CELLS:] == 0.0)

    def test_coarse_footprint_covers_children(self):
        shape = grid_shape(2 * PATCH_SIZE, 2 * PATCH_SIZE)
        m = rasterize(_nodes(1, [(0, 0)]), [1.0], 1, shape)
        assert np.all(m.values == 1.0)

    def test_overlaps_average(self):
        shape = grid_shape(PATCH_SIZE, PATCH_SIZE)
        nodes = _nodes(0, [(0, 0)]) + _nodes(0, [(0, 0)])
        m = rasterize(nodes, [1.0, 3.0], 0, shape)
        assert np.all(m.values == 2.0)

    def test_out_of_grid_error_names_node(self):
        shape = grid_shape(PATCH_SIZE, PATCH_SIZE)
        with pytest.raises(ValueError, match="node 0"):
            rasterize(_nodes(0, [(0, 1)]), [1.0], 0, shape)

    def test_nonfinite_scores_rejected(self):
        shape = grid_shape(PATCH_SIZE, PATCH_SIZE)
        with pytest.raises(ValueError):
            rasterize(_nodes(0, [(0, 0)]), [np.nan], 0, shape)


class TestSmoothing:
    def test_preserves_mass_of_constant(self):
        m = RasterMap(np.full((20, 20), 3.0))
        out = gaussian_smooth(m, 2.0)
        np.testing.assert_allclose(out.values, 3.0, atol=1e-12)

    def test_impulse_center_weight(self):
        """A unit impulse keeps exactly the kernel's center weight."""
        v = np.zeros((21, 21))
        v[10, 10] = 1.0
        out = gaussian_smooth(RasterMap(v), 1.0)
        k = saliency._gaussian_kernel(1.0)
        center = k[len(k) // 2]
        assert out.values[10, 10] == pytest.approx(center ** 2, rel=1e-12)

    def test_separable_matches_dense_2d(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(0, 1, (16, 16))
        out = gaussian_smooth(RasterMap(v), 1.5)
        k = saliency._gaussian_kernel(1.5)
        dense = np.outer(k, k)
        r = len(k) // 2
        padded = np.pad(v, r, mode="reflect")
        expect = np.zeros_like(v)
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                expect[i, j] = np.sum(
                    padded[i:i + 2 * r + 1, j:j + 2 * r + 1] * dense)
        np.testing.assert_allclose(out.values, expect, atol=1e-12)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            gaussian_smooth(RasterMap(np.zeros((4, 4))), 0.0)


class TestNormalize:
    def test_range_and_orientation(self):
        m = minmax_normalize(RasterMap(np.array([[1.0, 3.0], [5.0, 2.0]])))
        assert m.values.min() == 0.0
        assert m.values.max() < 1.0
        assert m.values.max() == pytest.approx(1.0, abs=1e-6)
        assert m.normalized

    def test_constant_map_goes_to_zero(self):
        m = minmax_normalize(RasterMap(np.full((3, 3), 7.0)))
        np.testing.assert_array_equal(m.values, np.zeros((3, 3)))

    def test_scale_invariant(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(0, 1, (8, 8))
        a = minmax_normalize(RasterMap(v)).values
        for k in (0.5, 3.0):
            b = minmax_normalize(RasterMap(v * k)).values
            assert np.abs(a - b).max() < 1e-12


class TestConfidence:
    def test_top_decile_mean(self):
        v = np.arange(100, dtype=np.float64).reshape(10, 10)
        # strictly above the 90th percentile of 0..99 -> values 90..99
        assert confidence_score(RasterMap(v)) == pytest.approx(np.mean(
            np.arange(90, 100)))

    def test_constant_map_gives_max(self):
        assert confidence_score(RasterMap(np.full((4, 4), 0.3))) == 0.3

    def test_equal_confidence_weights(self):
        maps = [RasterMap(np.full((4, 4), 0.5)) for _ in range(3)]
        w = adaptive_weights(maps, (0.6, 0.3, 0.1))
        np.testing.assert_allclose(w, [0.2, 0.1, 1.0 / 30.0], atol=1e-12)

    def test_zero_total_falls_back_to_coefficients(self):
        maps = [RasterMap(np.zeros((4, 4))) for _ in range(3)]
        w = adaptive_weights(maps, (0.6, 0.3, 0.1))
        np.testing.assert_allclose(w, [0.6, 0.3, 0.1], atol=1e-12)


class TestFusion:
    def test_multilevel_weights_and_shape(self):
        cfg = FusionConfig()
        maps = [RasterMap(np.full((10, 10), v)) for v in (1.0, 2.0, 3.0)]
        fused = multilevel_fuse(maps, cfg)
        expect = 0.5 * 1.0 + 0.3 * 2.0 + 0.2 * 3.0
        np.testing.assert_allclose(fused.values, expect, atol=1e-12)

    def test_multilevel_shape_mismatch(self):
        with pytest.raises(ValueError):
            multilevel_fuse([RasterMap(np.zeros((4, 4))),
                             RasterMap(np.zeros((5, 5)))])

    def test_confidence_fuse_in_unit_range(self):
        rng = np.random.default_rng(2)
        maps = [RasterMap(rng.uniform(0, 1, (12, 12))) for _ in range(3)]
        fused = confidence_fuse(*maps)
        assert fused.values.min() >= 0.0
        assert fused.values.max() <= 1.0

    def test_confidence_fuse_scale_invariant(self):
        rng = np.random.default_rng(3)
        maps = [RasterMap(rng.uniform(0, 1, (12, 12))) for _ in range(3)]
        base = confidence_fuse(*maps)
        for k in (0.5, 3.0):
            out = confidence_fuse(*[RasterMap(m.values * k) for m in maps])
            assert np.abs(out.values - base.values).max() < 1e-9

    def test_identical_constant_inputs_fuse_to_zero(self):
        maps = [RasterMap(np.full((5, 5), 0.4)) for _ in range(3)]
        fused = confidence_fuse(*maps)
        np.testing.assert_array_equal(fused.values, np.zeros((5, 5)))


class TestVariants:
    def test_base_is_normalized_combined(self):
        rng = np.random.default_rng(4)
        combined = RasterMap(rng.uniform(0, 2, (6, 6)))
        out = graphite_variant("base", combined)
        np.testing.assert_allclose(out.values,
                                   minmax_normalize(combined).values,
                                   atol=1e-12)

    def test_v1_equal_confidence_weights(self):
        maps = [RasterMap(np.full((4, 4), 0.5)) for _ in range(2)]
        w = adaptive_weights(maps, (2.0 / 3.0, 1.0 / 3.0))
        np.testing.assert_allclose(w, [1.0 / 3.0, 1.0 / 6.0], atol=1e-12)

    def test_v1_and_v2_require_components(self):
        combined = RasterMap(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            graphite_variant("v1", combined)
        with pytest.raises(ValueError):
            graphite_variant("v2", combined, RasterMap(np.zeros((3, 3))))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            graphite_variant("v3", RasterMap(np.zeros((3, 3))))

    def test_all_variants_in_unit_range(self):
        rng = np.random.default_rng(5)
        combined = RasterMap(rng.uniform(0, 1, (8, 8)))
        milm = RasterMap(rng.uniform(0, 1, (8, 8)))
        gradm = RasterMap(rng.uniform(0, 1, (8, 8)))
        for variant in saliency.VARIANTS:
            out = graphite_variant(variant, combined, milm, gradm)
            assert out.values.min() >= 0.0
            assert out.values.max() <= 1.0


class TestModelMaps:
    def test_mil_map_single_patch_is_zero(self):
        model = MilModel(feature_dim=4, seed=0)
        bag = Bag("one", np.ones((1, 4)), 1)
        nodes = _nodes(0, [(0, 0)])
        shape = grid_shape(PATCH_SIZE, PATCH_SIZE)
        m = mil_attention_map(model, bag, nodes, shape)
        np.testing.assert_array_equal(m.values, np.zeros(shape))

    def test_mil_map_two_patches_hits_extremes(self):
        model = MilModel(feature_dim=4, seed=0)
        rng = np.random.default_rng(6)
        bag = Bag("two", rng.normal(size=(2, 4)), 1)
        nodes = _nodes(0, [(0, 0), (0, 1)])
        shape = grid_shape(2 * PATCH_SIZE, PATCH_SIZE)
        m = mil_attention_map(model, bag, nodes, shape)
        vals = {m.values[0, 0], m.values[0, CELLS]}
        assert min(vals) == 0.0
        assert max(vals) == pytest.approx(1.0, abs=1e-6)

    def test_gradient_map_finite_and_normalized(self):
        model = MilModel(feature_dim=4, seed=1)
        rng = np.random.default_rng(7)
        bag = Bag("g", rng.normal(size=(4, 4)), 1)
        nodes = _nodes(0, [(0, 0), (0, 1), (1, 0), (1, 1)])
        shape = grid_shape(2 * PATCH_SIZE, 2 * PATCH_SIZE)
        m = gradient_saliency_map(model, bag, nodes, shape)
        assert np.all(np.isfinite(m.values))
        assert m.values.min() >= 0.0
        assert m.values.max() <= 1.0

    def test_gradient_map_leaves_model_detached(self):
        model = MilModel(feature_dim=4, seed=1)
        bag = Bag("g", np.ones((2, 4)), 1)
        nodes = _nodes(0, [(0, 0), (0, 1)])
        gradient_saliency_map(model, bag, nodes,
                              grid_shape(2 * PATCH_SIZE, PATCH_SIZE))
        assert all(t.tape is None for t in model.params.values())


class TestExports:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        m = RasterMap(rng.uniform(0, 1, (7, 9)))
        path = tmp_path / "m.csv"
        save_csv(m, path)
        back = load_csv(path)
        np.testing.assert_allclose(back.values, m.values, atol=1e-9)

    def test_gray_and_rgb_ranges(self):
        m = RasterMap(np.linspace(0, 1, 16).reshape(4, 4))
        g = to_gray(m)
        assert g.dtype == np.uint8
        assert g[0, 0] == 0 and g[-1, -1] == 255
        rgb = to_rgb(m)
        assert rgb.shape == (4, 4, 3)
        assert rgb.dtype == np.uint8

    def test_png_roundtrip(self, tmp_path):
        from PIL import Image
        m = RasterMap(np.linspace(0, 1, 64).reshape(8, 8))
        path = tmp_path / "m.png"
        saliency.save_png(m, path)
        arr = np.asarray(Image.open(path))
        np.testing.assert_array_equal(arr, to_gray(m))


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(rho=(0.5, -0.1, 0.2))
    with pytest.raises(ValueError):
        FusionConfig(level_sigmas=(1.0, 0.0, 4.0))


def test_raster_map_rejects_nonfinite():
    with pytest.raises(ValueError):
        RasterMap(np.array([[np.inf]]))
