"""Orchestration tests: splits, engine maps, checkpoints and the manifest."""

import json
import os

import numpy as np
import pytest

from graphite import data, pipeline
from graphite.pipeline import (METHODS, RunConfig, SaliencyEngine,
                               bags_from_cores, level_node_scores,
                               load_stage1, load_stage2, run_pipeline,
                               save_models, split_cores, train_models)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """One shared tiny run to keep the suite fast."""
    ds = data.synth_generate(n_cores=8, grid_rows=6, grid_cols=6,
                             feature_dim=6, seed=0)
    cfg = RunConfig(seed=0)
    cfg.stage1.max_epochs = 4
    cfg.stage2.max_epochs = 2
    cfg.stage2.heads = 1
    cfg.stage2.head_dim = 4
    cfg.stage2.out_dim = 8
    out = str(tmp_path_factory.mktemp("run"))
    reports, manifest = run_pipeline(ds, cfg, out)
    return ds, cfg, out, reports, manifest


class TestConfig:
    def test_seed_propagates(self):
        cfg = RunConfig(seed=11)
        assert cfg.stage1.seed == 11
        assert cfg.stage2.seed == 11

    def test_invalid_variant(self):
        with pytest.raises(ValueError):
            RunConfig(variant="v9")

    def test_to_dict_is_json_serializable(self):
        json.dumps(RunConfig().to_dict())


class TestSplit:
    def test_split_is_stratified_and_seeded(self):
        ds = data.synth_generate(n_cores=16, grid_rows=6, grid_cols=6,
                                 feature_dim=4, seed=1)
        cfg = RunConfig(seed=1, test_fraction=0.25)
        train_a, test_a = split_cores(ds, cfg)
        train_b, test_b = split_cores(ds, cfg)
        assert [c.core_id for c in test_a] == [c.core_id for c in test_b]
        assert len(test_a) == 4
        assert {c.label for c in test_a} == {0, 1}
        assert len(train_a) + len(test_a) == 16


class TestLevelScores:
    def test_scores_average_back_to_nodes(self):
        ds = data.synth_generate(n_cores=2, grid_rows=6, grid_cols=6,
                                 feature_dim=4, seed=2)
        graph = data.graph_for_core(ds.cores[0])
        from graphite.gatsan import alignment_columns
        cols = alignment_columns(graph)
        s = np.tile(np.array([[0.5, 0.3, 0.2]]), (cols.shape[0], 1))
        per_level = level_node_scores(graph, cols, s)
        for m, level in enumerate(graph.levels()):
            nodes, scores = per_level[level]
            assert len(nodes) == len(graph.nodes_at(level))
            np.testing.assert_allclose(scores, s[0, m], atol=1e-12)


class TestEngine:
    def test_all_methods_produced(self, small_run):
        ds, cfg, out, reports, manifest = small_run
        stage1 = load_stage1(os.path.join(out, "checkpoints", "stage1.npz"))
        stage2 = load_stage2(os.path.join(out, "checkpoints", "stage2.npz"))
        engine = SaliencyEngine(stage1, stage2, cfg)
        maps = engine.core_maps(ds.cores[0], np.random.default_rng(0))
        assert set(maps) == set(METHODS)
        shape = (ds.cores[0].height // 16, ds.cores[0].width // 16)
        for name, m in maps.items():
            assert m.values.shape == shape, name
            assert m.values.min() >= 0.0 and m.values.max() <= 1.0, name

    def test_uniform_map_is_half(self, small_run):
        ds, cfg, out, reports, manifest = small_run
        stage1 = load_stage1(os.path.join(out, "checkpoints", "stage1.npz"))
        stage2 = load_stage2(os.path.join(out, "checkpoints", "stage2.npz"))
        engine = SaliencyEngine(stage1, stage2, cfg)
        maps = engine.core_maps(ds.cores[0], np.random.default_rng(0))
        assert np.all(maps["uniform"].values == 0.5)


class TestCheckpointRoundtrip:
    def test_models_reload_identically(self, small_run, tmp_path):
        ds, cfg, out, reports, manifest = small_run
        train, _ = split_cores(ds, cfg)
        stage1, stage2, _hist = train_models(ds, cfg, train)
        p1, p2 = save_models(stage1, stage2, str(tmp_path))
        back1 = load_stage1(p1)
        back2 = load_stage2(p2)
        for k in stage1.params:
            np.testing.assert_array_equal(stage1.params[k].data,
                                          back1.params[k].data)
        for k in stage2.params:
            np.testing.assert_array_equal(stage2.params[k].data,
                                          back2.params[k].data)


class TestRunOutputs:
    def test_reports_cover_all_methods(self, small_run):
        _, _, _, reports, _ = small_run
        assert {r.method for r in reports} == set(METHODS)
        ranked = [r.cxps for r in reports]
        assert ranked == sorted(ranked, reverse=True)

    def test_manifest_hashes_artifacts(self, small_run):
        ds, cfg, out, reports, manifest = small_run
        assert manifest["config"]["seed"] == 0
        assert len(manifest["train_cores"]) + len(manifest["test_cores"]) == 8
        for rel, digest in manifest["artifacts"].items():
            path = os.path.join(out, rel)
            assert os.path.exists(path), rel
            assert len(digest) == 64
        # manifest on disk matches the returned one
        with open(os.path.join(out, "run_manifest.json")) as fh:
            on_disk = json.load(fh)
        assert on_disk["artifacts"] == manifest["artifacts"]

    def test_bag_predictions_cover_test_cores(self, small_run):
        _, _, _, _, manifest = small_run
        assert sorted(manifest["bag_predictions"]) == manifest["test_cores"]
        for v in manifest["bag_predictions"].values():
            assert 0.0 <= v <= 1.0
