"""Dataset ingestion and synthetic core generation.

On disk a dataset is a directory with a ``manifest.json`` plus one
subdirectory per core holding ``level{m}.csv`` files (rows:
``grid_row,grid_col,f0,...``) and an optional ``mask.png`` (8-bit grayscale on
the common raster grid, 0 = benign, 255 = tumour).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .graphs import PATCH_SIZE, PatchNode, build_hierarchical_graph
from .saliency import grid_shape

MANIFEST_VERSION = 1


@dataclass
class CoreRecord:
    core_id: str
    label: int
    width: int   # level-0 pixels
    height: int
    levels: dict = field(default_factory=dict)  # level -> list of (row, col, feature)

    def level_features(self, level):
        recs = self.levels[level]
        return np.array([f for _, _, f in recs], dtype=np.float64)


@dataclass
class FeatureDataset:
    cores: list
    masks: dict = field(default_factory=dict)  # core_id -> bool array (h, w)
    feature_dim: int = 0
    num_levels: int = 3
    raster_downsample: int = 16

    def core(self, core_id):
        for c in self.cores:
            if c.core_id == core_id:
                return c
        raise KeyError(core_id)

    def validate(self):
        for core in self.cores:
            if 0 not in core.levels or not core.levels[0]:
                raise ValueError(f"core {core.core_id}: no level-0 patches")
            for level, recs in core.levels.items():
                for row, col, f in recs:
                    if len(f) != self.feature_dim:
                        raise ValueError(
                            f"core {core.core_id} level {level} patch ({row},{col}): "
                            f"feature dim {len(f)} != manifest D {self.feature_dim}")
            if core.core_id in self.masks:
                expect = grid_shape(core.width, core.height, self.raster_downsample)
                got = self.masks[core.core_id].shape
                if got != expect:
                    raise ValueError(
                        f"core {core.core_id}: mask {got} misaligned with "
                        f"manifest grid {expect}")
        return self


def nodes_for_core(core):
    """PatchNode lists per level, ids unique within the core."""
    levels = []
    nid = 0
    for level in sorted(core.levels):
        lv = []
        for row, col, _f in core.levels[level]:
            lv.append(PatchNode(node_id=nid, core_id=core.core_id, level=level,
                                grid_row=row, grid_col=col))
            nid += 1
        levels.append(lv)
    return levels


def graph_for_core(core, spatial_threshold=1.5, scale_threshold=1.0):
    return build_hierarchical_graph(nodes_for_core(core),
                                    spatial_threshold, scale_threshold)


def features_in_node_order(core, graph):
    """Raw features aligned with the graph's node ordering."""
    lookup = {}
    for level, recs in core.levels.items():
        for row, col, f in recs:
            lookup[(level, row, col)] = f
    return np.array([lookup[(n.level, n.grid_row, n.grid_col)]
                     for n in graph.nodes], dtype=np.float64)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset, path):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "feature_dim": dataset.feature_dim,
        "num_levels": dataset.num_levels,
        "patch_size": PATCH_SIZE,
        "raster_downsample": dataset.raster_downsample,
        "cores": [{"core_id": c.core_id, "label": c.label,
                   "width": c.width, "height": c.height} for c in dataset.cores],
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    from PIL import Image
    for core in dataset.cores:
        core_dir = os.path.join(path, core.core_id)
        os.makedirs(core_dir, exist_ok=True)
        for level, recs in sorted(core.levels.items()):
            with open(os.path.join(core_dir, f"level{level}.csv"), "w") as fh:
                for row, col, f in recs:
                    vals = ",".join(f"{x:.10g}" for x in f)
                    fh.write(f"{row},{col},{vals}\n")
        if core.core_id in dataset.masks:
            mask = dataset.masks[core.core_id]
            Image.fromarray((mask.astype(np.uint8) * 255)).save(
                os.path.join(core_dir, "mask.png"))


def load_dataset(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValueError(f"no manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    from PIL import Image
    cores, masks = [], {}
    for entry in manifest["cores"]:
        cid = entry["core_id"]
        core_dir = os.path.join(path, cid)
        levels = {}
        for level in range(manifest["num_levels"]):
            fpath = os.path.join(core_dir, f"level{level}.csv")
            if not os.path.exists(fpath):
                continue
            recs = []
            with open(fpath) as fh:
                for lineno, line in enumerate(fh, 1):
                    parts = line.strip().split(",")
                    if len(parts) != 2 + manifest["feature_dim"]:
                        raise ValueError(
                            f"{fpath}:{lineno}: expected "
                            f"{2 + manifest['feature_dim']} fields, got {len(parts)}")
                    recs.append((int(parts[0]), int(parts[1]),
                                 np.array([float(x) for x in parts[2:]])))
            levels[level] = recs
        if 0 not in levels or not levels[0]:
            raise ValueError(f"core {cid}: missing level-0 patches")
        cores.append(CoreRecord(core_id=cid, label=int(entry["label"]),
                                width=int(entry["width"]), height=int(entry["height"]),
                                levels=levels))
        mask_path = os.path.join(core_dir, "mask.png")
        if os.path.exists(mask_path):
            masks[cid] = np.asarray(Image.open(mask_path)) > 127
    ds = FeatureDataset(cores=cores, masks=masks,
                        feature_dim=manifest["feature_dim"],
                        num_levels=manifest["num_levels"],
                        raster_downsample=manifest["raster_downsample"])
    return ds.validate()


# ---------------------------------------------------------------------------
# synthetic cores


def synth_generate(n_cores=16, grid_rows=8, grid_cols=8, feature_dim=32,
                   num_levels=3, mu=1.0, noise=0.3, blob_radius_range=(1.5, 3.0),
                   raster_downsample=16, seed=0):
    """Synthetic multiscale dataset with elliptical tumour blobs.

    Tumour cores get a blob whose level-0 patch features draw from
    N(+mu, noise); everything else draws from N(-mu, noise). Coarser-level
    features are the mean of their child level-0 features plus noise. Masks
    mark blob footprints on the common raster grid. Fully seeded.
    """
    if n_cores < 2:
        raise ValueError("synth_generate: need at least 2 cores")
    if noise <= 0:
        raise ValueError("synth_generate: noise must be positive")
    if 2 * blob_radius_range[1] > min(grid_rows, grid_cols):
        raise ValueError("synth_generate: blob larger than the patch grid")
    rng = np.random.default_rng(seed)
    width = grid_cols * PATCH_SIZE
    height = grid_rows * PATCH_SIZE
    gh, gw = grid_shape(width, height, raster_downsample)
    cores, masks = [], {}

    for i in range(n_cores):
        label = i % 2  # alternate benign/tumour so both classes always exist
        cid = f"core{i:03d}"
        mask = np.zeros((gh, gw), dtype=bool)
        in_blob = np.zeros((grid_rows, grid_cols), dtype=bool)
        if label == 1:
            rx = rng.uniform(*blob_radius_range)
            ry = rng.uniform(*blob_radius_range)
            cx = rng.uniform(rx, grid_cols - rx)
            cy = rng.uniform(ry, grid_rows - ry)
            # patch membership by center, mask by raster-cell center
            for r in range(grid_rows):
                for c in range(grid_cols):
                    if (((c + 0.5) - cx) / rx) ** 2 + (((r + 0.5) - cy) / ry) ** 2 <= 1:
                        in_blob[r, c] = True
            yy = (np.arange(gh) + 0.5) * raster_downsample / PATCH_SIZE
            xx = (np.arange(gw) + 0.5) * raster_downsample / PATCH_SIZE
            mask = (((xx[None, :] - cx) / rx) ** 2 +
                    ((yy[:, None] - cy) / ry) ** 2) <= 1

        level0 = np.empty((grid_rows, grid_cols, feature_dim))
        recs0 = []
        for r in range(grid_rows):
            for c in range(grid_cols):
                center = mu if in_blob[r, c] else -mu
                level0[r, c] = rng.normal(center, noise, feature_dim)
                recs0.append((r, c, level0[r, c].copy()))
        levels = {0: recs0}
        for m in range(1, num_levels):
            step = 2 ** m
            rows_m, cols_m = grid_rows // step, grid_cols // step
            recs = []
            for r in range(rows_m):
                for c in range(cols_m):
                    block = level0[r * step:(r + 1) * step, c * step:(c + 1) * step]
                    feat = block.reshape(-1, feature_dim).mean(axis=0)
                    feat = feat + rng.normal(0.0, noise / 2.0, feature_dim)
                    recs.append((r, c, feat))
            if recs:
                levels[m] = recs
        cores.append(CoreRecord(core_id=cid, label=label, width=width,
                                height=height, levels=levels))
        masks[cid] = mask

    ds = FeatureDataset(cores=cores, masks=masks, feature_dim=feature_dim,
                        num_levels=num_levels, raster_downsample=raster_downsample)
    return ds.validate()
