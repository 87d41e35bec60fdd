"""Stage-2 tests: GAT attention normalization, scalewise attention, the two
self-supervised losses, and gradient fidelity on miniature graphs."""

import numpy as np
import pytest

from graphite import autodiff as ad
from graphite import gatsan
from graphite.autodiff import Tensor
from graphite.gatsan import (GatLayer, SanModel, Stage2Config, Stage2Model,
                             alignment_columns, cross_scale_weights,
                             gat_forward, infomax_loss, san_fuse,
                             san_level_attention, scalewise_loss, train_stage2)
from graphite.graphs import PATCH_SIZE, build_hierarchical_graph, build_level_grid


def _two_level_graph(cols=4, rows=4):
    w, h = cols * PATCH_SIZE, rows * PATCH_SIZE
    levels = [build_level_grid(w, h, 0, start_id=0),
              build_level_grid(w, h, 1, start_id=1000)]
    return build_hierarchical_graph(levels)


def _three_level_graph():
    w = 4 * PATCH_SIZE
    levels = [build_level_grid(w, w, 0, start_id=0),
              build_level_grid(w, w, 1, start_id=100),
              build_level_grid(w, w, 2, start_id=200)]
    return build_hierarchical_graph(levels)


class TestGatForward:
    def test_output_shape(self):
        g = _two_level_graph()
        layer = GatLayer(in_dim=8, head_dim=4, heads=2, out_dim=6, seed=0)
        rng = np.random.default_rng(0)
        out, attention = gat_forward(layer, g, rng.normal(size=(len(g.nodes), 8)))
        assert out.data.shape == (len(g.nodes), 6)
        assert set(attention) == {(k, h) for k in ("spatial", "cross")
                                  for h in range(2)}

    def test_attention_normalizes_per_destination(self):
        g = _two_level_graph()
        layer = GatLayer(in_dim=8, head_dim=4, heads=2, out_dim=6, seed=1)
        rng = np.random.default_rng(1)
        _, attention = gat_forward(layer, g, rng.normal(size=(len(g.nodes), 8)))
        for (kind, h), (dst, psi) in attention.items():
            sums = np.zeros(len(g.nodes))
            np.add.at(sums, dst, psi.reshape(-1))
            touched = np.zeros(len(g.nodes), dtype=bool)
            touched[dst] = True
            np.testing.assert_allclose(sums[touched], 1.0, atol=1e-9,
                                       err_msg=f"{kind} head {h}")

    def test_feature_width_mismatch(self):
        g = _two_level_graph()
        layer = GatLayer(in_dim=8, seed=0)
        with pytest.raises(ValueError):
            gat_forward(layer, g, np.zeros((len(g.nodes), 7)))

    def test_isolated_node_keeps_information(self):
        """Self-loops mean a node with no neighbors still produces output."""
        w = PATCH_SIZE
        levels = [build_level_grid(w, w, 0)]
        g = build_hierarchical_graph(levels)
        layer = GatLayer(in_dim=4, head_dim=3, heads=1, out_dim=4, seed=2)
        out, attention = gat_forward(layer, g, np.ones((1, 4)))
        assert np.all(np.isfinite(out.data))
        dst, psi = attention[("spatial", 0)]
        np.testing.assert_allclose(psi, [[1.0]], atol=1e-12)


class TestAlignment:
    def test_columns_shape_and_leading_row(self):
        g = _three_level_graph()
        cols = alignment_columns(g)
        n0 = len(g.nodes_at(0))
        assert cols.shape == (n0, 3)
        # first column indexes the level-0 nodes themselves
        for p in range(n0):
            assert g.nodes[cols[p, 0]].level == 0
            assert g.nodes[cols[p, 1]].level == 1
            assert g.nodes[cols[p, 2]].level == 2

    def test_nearest_parent_selected(self):
        g = _two_level_graph()
        cols = alignment_columns(g)
        by_row = g.nodes
        for p in range(cols.shape[0]):
            child = by_row[cols[p, 0]]
            parent = by_row[cols[p, 1]]
            # the aligned parent's footprint must contain the child patch
            assert parent.grid_row == child.grid_row // 2
            assert parent.grid_col == child.grid_col // 2

    def test_missing_parent_carries_forward(self):
        w = 4 * PATCH_SIZE
        levels = [build_level_grid(w, w, 0)]
        g = build_hierarchical_graph(levels)
        cols = alignment_columns(g)
        assert cols.shape == (16, 1)


class TestSan:
    def test_level_scores_sum_to_one(self):
        g = _three_level_graph()
        san = SanModel(num_levels=3, dim=8, seed=0)
        cols = alignment_columns(g)
        rng = np.random.default_rng(0)
        s = san_level_attention(san, rng.normal(size=(len(g.nodes), 8)), cols)
        assert s.data.shape == (cols.shape[0], 3)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-9)

    def test_level_count_mismatch(self):
        g = _three_level_graph()
        san = SanModel(num_levels=2, dim=8, seed=0)
        with pytest.raises(ValueError):
            san_level_attention(san, np.zeros((len(g.nodes), 8)),
                                alignment_columns(g))

    def test_cross_scale_weights_sum_to_one(self):
        g = _three_level_graph()
        san = SanModel(num_levels=3, dim=8, seed=1)
        rng = np.random.default_rng(1)
        c = cross_scale_weights(san, rng.normal(size=(len(g.nodes), 8)), g)
        assert c.data.shape == (3,)
        assert abs(c.data.sum() - 1.0) < 1e-9

    def test_fuse_shape(self):
        g = _three_level_graph()
        san = SanModel(num_levels=3, dim=8, seed=2)
        cols = alignment_columns(g)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(len(g.nodes), 8))
        s = san_level_attention(san, x, cols)
        c = cross_scale_weights(san, x, g)
        fused = san_fuse(san, x, cols, s, c)
        assert fused.data.shape == (cols.shape[0], 8)


class TestLosses:
    def test_infomax_positive(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(10, 6))
        loss = infomax_loss(h, h.mean(axis=0, keepdims=True))
        assert float(loss.data) > 0.0

    def test_infomax_single_node_is_zero(self):
        h = np.ones((1, 4))
        loss = infomax_loss(h, h.mean(axis=0, keepdims=True))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_infomax_prefers_aligned_nodes(self):
        """Nodes matching the summary vector score lower loss than scattered
        nodes, whose mutual similarities inflate the negative mass."""
        rng = np.random.default_rng(1)
        g = np.ones((1, 6))
        aligned = np.ones((8, 6)) + rng.normal(0, 1e-3, (8, 6))
        scattered = rng.normal(size=(8, 6))
        la = float(infomax_loss(aligned, g).data)
        ls = float(infomax_loss(scattered, g).data)
        assert la < ls

    def test_infomax_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            infomax_loss(np.ones((2, 2)), np.ones((1, 2)), tau=0.0)

    def test_scalewise_identical_levels_near_zero(self):
        """Two identical unit-similarity levels at tau=1 give the closed-form
        residual -log(e / (e + 1e-8))."""
        e = np.tile(np.array([[1.0, 0.0]]), (3, 1))
        loss = scalewise_loss([e, e.copy()], [1.0, 1.0], tau=1.0)
        expect = -np.log(np.e / (np.e + 1e-8))
        assert float(loss.data) == pytest.approx(expect, rel=1e-6)
        assert float(loss.data) == pytest.approx(3.68e-9, rel=0.01)

    def test_scalewise_single_level_is_zero(self):
        loss = scalewise_loss([np.ones((3, 2))], [1.0])
        assert float(loss.data) == 0.0

    def test_scalewise_weights_scale_terms(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        l1 = float(scalewise_loss([a, b], [1.0, 1.0]).data)
        l2 = float(scalewise_loss([a, b], [0.5, 0.5]).data)
        assert l2 == pytest.approx(0.25 * l1, rel=1e-9)

    def test_scalewise_contrastive_adds_negatives(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        plain = float(scalewise_loss([a, b], [1.0, 1.0]).data)
        contr = float(scalewise_loss([a, b], [1.0, 1.0], contrastive=True).data)
        assert contr > plain


class TestGradients:
    def test_stage2_loss_gradient_small_graph(self):
        """Full Stage-2 objective vs central differences on a 6-node graph."""
        w = 2 * PATCH_SIZE
        levels = [build_level_grid(w, w, 0, start_id=0),
                  build_level_grid(w, w, 1, start_id=10)]
        g = build_hierarchical_graph(levels)
        assert len(g.nodes) <= 6
        cfg = Stage2Config(seed=0, heads=1, head_dim=3, out_dim=4)
        model = Stage2Model(num_levels=2, in_dim=3, config=cfg)
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(len(g.nodes), 3))
        cols = alignment_columns(g)

        def f():
            total, _, _ = model.loss(g, feats, cols)
            return total

        err = ad.grad_check(f, list(model.params.values()))
        assert err < 1e-4


class TestTraining:
    def test_train_stage2_runs_and_is_deterministic(self):
        rng = np.random.default_rng(4)
        graphs = [_two_level_graph(), _two_level_graph(3, 3)]
        feats = [rng.normal(size=(len(g.nodes), 6)) for g in graphs]
        cfg = Stage2Config(seed=4, max_epochs=3, heads=2, head_dim=3, out_dim=6)
        m1, h1 = train_stage2(graphs, feats, cfg)
        m2, h2 = train_stage2(graphs, feats, cfg)
        assert h1 == h2
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)
        assert h1["val_loss"]

    def test_train_stage2_empty_rejected(self):
        with pytest.raises(ValueError):
            train_stage2([], [], Stage2Config())

    def test_forward_bundle_shapes(self):
        g = _three_level_graph()
        cfg = Stage2Config(seed=1, heads=2, head_dim=4, out_dim=8)
        model = Stage2Model(num_levels=3, in_dim=5, config=cfg)
        rng = np.random.default_rng(5)
        h_multi, s, c, gat_out, attention = model.forward(
            g, rng.normal(size=(len(g.nodes), 5)))
        n0 = len(g.nodes_at(0))
        assert h_multi.data.shape == (n0, 8)
        assert s.data.shape == (n0, 3)
        assert c.data.shape == (3,)
        assert gat_out.data.shape == (len(g.nodes), 8)

    def test_state_dict_roundtrip(self):
        cfg = Stage2Config(seed=3, heads=1, head_dim=2, out_dim=4)
        a = Stage2Model(num_levels=2, in_dim=3, config=cfg)
        b = Stage2Model(num_levels=2, in_dim=3,
                        config=Stage2Config(seed=9, heads=1, head_dim=2,
                                            out_dim=4))
        b.load_state_dict(a.state_dict())
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
