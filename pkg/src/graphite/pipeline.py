"""End-to-end orchestration: Stage-1 training, Stage-2 refinement, per-core
saliency for every method, metric reports and a reproducible run manifest.

Cores are processed in deterministic core-id order; everything downstream of
the seed is bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import gatsan, metrics, mil, saliency
from .checkpoint import load_checkpoint, save_checkpoint

METHODS = ("graphite-base", "graphite-v1", "graphite-v2",
           "mil", "gradient", "uniform", "random")


@dataclass
class RunConfig:
    spatial_threshold: float = 1.5
    scale_threshold: float = 1.0
    seed: int = 0
    variant: str = "v2"
    test_fraction: float = 0.25
    stage1: mil.TrainConfig = field(default_factory=mil.TrainConfig)
    stage2: gatsan.Stage2Config = field(default_factory=gatsan.Stage2Config)
    fusion: saliency.FusionConfig = field(default_factory=saliency.FusionConfig)
    grid: metrics.ThresholdGrid = field(default_factory=metrics.ThresholdGrid)

    def __post_init__(self):
        if self.variant not in saliency.VARIANTS:
            raise ValueError(f"invalid variant '{self.variant}'")
        self.stage1.seed = self.seed
        self.stage2.seed = self.seed

    def to_dict(self):
        return dataclasses.asdict(self)


def output_root():
    return os.environ.get("GRAPHITE_OUTPUT_ROOT", ".")


def bags_from_cores(cores):
    return [mil.Bag(core_id=c.core_id,
                    patch_embeddings=np.array([f for _, _, f in c.levels[0]]),
                    label=c.label)
            for c in cores]


def level_node_scores(graph, columns, s_values):
    """Average the per-position level scores back onto each node.

    Returns {level: (nodes, scores)} where a level-m node's score is the mean
    of ``s[:, m]`` over the aligned positions that map to it.
    """
    levels = graph.levels()
    out = {}
    for m, level in enumerate(levels):
        acc, cnt = {}, {}
        for p in range(columns.shape[0]):
            row = columns[p, m]
            acc[row] = acc.get(row, 0.0) + s_values[p, m]
            cnt[row] = cnt.get(row, 0) + 1
        nodes, scores = [], []
        for i, node in enumerate(graph.nodes):
            if node.level != level:
                continue
            nodes.append(node)
            scores.append(acc.get(i, 0.0) / cnt[i] if i in cnt else 0.0)
        out[level] = (nodes, np.array(scores))
    return out


class SaliencyEngine:
    """Produces every method's map for one core from the trained models."""

    def __init__(self, stage1, stage2, config):
        self.stage1 = stage1
        self.stage2 = stage2
        self.config = config

    def core_maps(self, core, rng):
        cfg = self.config
        shape = saliency.grid_shape(core.width, core.height,
                                    cfg.fusion.raster_downsample)
        graph = data_mod.graph_for_core(core, cfg.spatial_threshold,
                                        cfg.scale_threshold)
        raw = data_mod.features_in_node_order(core, graph)
        projected = mil.project_patches(self.stage1, raw).data
        columns = gatsan.alignment_columns(graph)
        _, s, _, _, _ = self.stage2.forward(graph, projected, columns)

        per_level = level_node_scores(graph, columns, s.data)
        level_maps = []
        for level in graph.levels():
            nodes, scores = per_level[level]
            raster = saliency.rasterize(nodes, scores, level, shape,
                                        cfg.fusion.raster_downsample)
            level_maps.append(saliency.minmax_normalize(raster,
                                                        eps=cfg.fusion.eps_norm))
        combined = saliency.multilevel_fuse(level_maps, cfg.fusion)

        level0_nodes = [n for n in graph.nodes if n.level == graph.levels()[0]]
        bag = mil.Bag(core_id=core.core_id,
                      patch_embeddings=core.level_features(0), label=core.label)
        yhat, _, _ = mil.forward_bag(self.stage1, bag)
        confidence = yhat.data.item()
        mil_map = saliency.mil_attention_map(self.stage1, bag, level0_nodes,
                                             shape, cfg.fusion)
        grad_map = saliency.gradient_saliency_map(self.stage1, bag, level0_nodes,
                                                  shape, cfg.fusion)
        mil_enh = saliency.gaussian_smooth(mil_map, cfg.fusion.mil_sigma)
        grad_enh = saliency.gaussian_smooth(grad_map, cfg.fusion.gradient_sigma)

        maps = {
            "graphite-base": saliency.graphite_variant("base", combined,
                                                       config=cfg.fusion),
            "graphite-v1": saliency.graphite_variant("v1", combined, mil_enh,
                                                     config=cfg.fusion),
            "graphite-v2": saliency.graphite_variant("v2", combined, mil_enh,
                                                     grad_enh, config=cfg.fusion),
            "mil": mil_map,
            "gradient": grad_map,
            "uniform": saliency.RasterMap(np.full(shape, 0.5), normalized=True),
            "random": saliency.RasterMap(rng.uniform(0.0, 1.0, shape),
                                         normalized=True),
        }
        # Model-derived maps explain the tumour prediction, so they are
        # conditioned on the bag probability: a core the classifier calls
        # benign carries no tumour evidence. Control baselines stay as-is.
        for method in ("graphite-base", "graphite-v1", "graphite-v2",
                       "mil", "gradient"):
            maps[method] = saliency.RasterMap(maps[method].values * confidence,
                                              normalized=True)
        return maps


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def split_cores(dataset, config):
    """Stratified train/test split over cores, seeded."""
    rng = np.random.default_rng(config.seed + 17)
    labels = [c.label for c in dataset.cores]
    kept, held = mil.stratified_split(dataset.cores, labels,
                                      config.test_fraction, rng)
    return [dataset.cores[i] for i in kept], [dataset.cores[i] for i in held]


def train_models(dataset, config, train_cores=None):
    """Stage-1 then Stage-2 training; returns (stage1, stage2, histories)."""
    cores = train_cores if train_cores is not None else dataset.cores
    bags = bags_from_cores(cores)
    stage1, hist1 = mil.train_stage1(bags, config.stage1)
    graphs, feats = [], []
    for core in sorted(cores, key=lambda c: c.core_id):
        g = data_mod.graph_for_core(core, config.spatial_threshold,
                                    config.scale_threshold)
        raw = data_mod.features_in_node_order(core, g)
        graphs.append(g)
        feats.append(mil.project_patches(stage1, raw).data)
    stage2, hist2 = gatsan.train_stage2(graphs, feats, config.stage2)
    return stage1, stage2, {"stage1": hist1, "stage2": hist2}


def save_models(stage1, stage2, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    p1 = os.path.join(out_dir, "stage1.npz")
    save_checkpoint(p1, {"mil": stage1.state_dict()},
                    meta={"feature_dim": stage1.feature_dim, "d_k": stage1.d_k})
    p2 = os.path.join(out_dir, "stage2.npz")
    save_checkpoint(p2, {"stage2": stage2.state_dict()},
                    meta={"num_levels": stage2.san.num_levels,
                          "in_dim": stage2.gat.in_dim,
                          "heads": stage2.gat.heads,
                          "head_dim": stage2.gat.head_dim,
                          "out_dim": stage2.gat.out_dim})
    return p1, p2


def load_stage1(path):
    sections, meta = load_checkpoint(path)
    model = mil.MilModel(int(meta["feature_dim"]), d_k=int(meta["d_k"]))
    model.load_state_dict(sections["mil"])
    return model


def load_stage2(path, config=None):
    sections, meta = load_checkpoint(path)
    cfg = config or gatsan.Stage2Config()
    cfg.heads = int(meta["heads"])
    cfg.head_dim = int(meta["head_dim"])
    cfg.out_dim = int(meta["out_dim"])
    model = gatsan.Stage2Model(num_levels=int(meta["num_levels"]),
                               in_dim=int(meta["in_dim"]), config=cfg)
    model.load_state_dict(sections["stage2"])
    return model


def run_pipeline(dataset, config, out_dir):
    """Full run: train, generate saliency for test cores, score all methods.

    Writes checkpoints, per-core saliency exports, metric reports, curve
    series and a run manifest with content hashes. Returns the ranked
    MetricReports.
    """
    dataset.validate()
    os.makedirs(out_dir, exist_ok=True)
    train_cores, test_cores = split_cores(dataset, config)
    stage1, stage2, histories = train_models(dataset, config, train_cores)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    artifacts = list(save_models(stage1, stage2, ckpt_dir))

    engine = SaliencyEngine(stage1, stage2, config)
    rng = np.random.default_rng(config.seed + 101)
    sal_dir = os.path.join(out_dir, "saliency")
    per_method_pixels = {m: {} for m in METHODS}
    test_bags = bags_from_cores(test_cores)
    bag_preds = {}
    for bag in test_bags:
        yhat, _, _ = mil.forward_bag(stage1, bag)
        bag_preds[bag.core_id] = yhat.data.item()

    for core in sorted(test_cores, key=lambda c: c.core_id):
        maps = engine.core_maps(core, rng)
        core_dir = os.path.join(sal_dir, core.core_id)
        os.makedirs(core_dir, exist_ok=True)
        mask = dataset.masks.get(core.core_id)
        for method in METHODS:
            m = maps[method]
            csv_path = os.path.join(core_dir, f"{method}.csv")
            saliency.save_csv(m, csv_path)
            png_path = os.path.join(core_dir, f"{method}.png")
            saliency.save_png(m, png_path)
            saliency.save_png(m, os.path.join(core_dir, f"{method}_color.png"),
                              color=True)
            artifacts += [csv_path, png_path]
            if mask is not None:
                per_method_pixels[method][core.core_id] = metrics.ScoredPixels(
                    np.clip(m.values.reshape(-1), 0.0, 1.0), mask.reshape(-1))

    report_dir = os.path.join(out_dir, "reports")
    os.makedirs(report_dir, exist_ok=True)
    reports = []
    for method in METHODS:
        if not per_method_pixels[method]:
            continue
        report = metrics.evaluate_method(method, per_method_pixels[method],
                                         config.grid)
        reports.append(report)
        pool = metrics.pooled(list(per_method_pixels[method].values()))
        metrics.write_curves_csv(pool, config.grid,
                                 os.path.join(report_dir, method))
    table_path = os.path.join(report_dir, "comparison.csv")
    metrics.write_comparison_csv(reports, table_path)
    artifacts.append(table_path)

    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "train_cores": sorted(c.core_id for c in train_cores),
        "test_cores": sorted(c.core_id for c in test_cores),
        "bag_predictions": {k: round(v, 12) for k, v in sorted(bag_preds.items())},
        "histories": histories,
        "artifacts": {os.path.relpath(p, out_dir): _sha256(p)
                      for p in sorted(artifacts)},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return metrics.compare_methods(reports), manifest
