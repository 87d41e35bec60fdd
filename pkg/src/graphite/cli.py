"""Command-line front end.

Verbs: synth, build-graph, train-mil, train-ssl, saliency, eval, compare and
run. A JSON ``--config`` file overrides the built-in defaults and individual
flags override the file. Exit codes: 0 success, 1 validation failure,
2 runtime failure. ``GRAPHITE_OUTPUT_ROOT`` sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import gatsan, metrics, mil, pipeline, saliency


def _out_path(path):
    if os.path.isabs(path):
        return path
    return os.path.join(pipeline.output_root(), path)


def _load_config(args):
    cfg = pipeline.RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        for key, value in overrides.items():
            if key in ("stage1", "stage2", "fusion", "grid"):
                sub = getattr(cfg, key)
                for k, v in value.items():
                    if not hasattr(sub, k):
                        raise ValueError(f"config: unknown {key} field '{k}'")
                    setattr(sub, k, tuple(v) if isinstance(v, list) else v)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ValueError(f"config: unknown field '{key}'")
    for flag in ("seed", "variant", "spatial_threshold", "scale_threshold",
                 "test_fraction"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    cfg.stage1.seed = cfg.seed
    cfg.stage2.seed = cfg.seed
    if getattr(args, "coarse_grid", False):
        cfg.grid = metrics.COARSE_GRID
    return cfg


def cmd_synth(args):
    ds = data_mod.synth_generate(n_cores=args.cores, grid_rows=args.grid_rows,
                                 grid_cols=args.grid_cols,
                                 feature_dim=args.feature_dim, seed=args.seed or 0)
    data_mod.save_dataset(ds, _out_path(args.out))
    print(f"wrote {args.cores} synthetic cores to {_out_path(args.out)}")


def cmd_build_graph(args):
    cfg = _load_config(args)
    ds = data_mod.load_dataset(args.dataset)
    core = ds.core(args.core)
    graph = data_mod.graph_for_core(core, cfg.spatial_threshold,
                                    cfg.scale_threshold)
    summary = {
        "core_id": core.core_id,
        "nodes": len(graph.nodes),
        "spatial_edges": len(graph.spatial_edges),
        "cross_edges": len(graph.cross_edges),
        "levels": graph.levels(),
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        payload = dict(summary)
        payload["spatial_edge_list"] = graph.spatial_edges
        payload["cross_edge_list"] = graph.cross_edges
        with open(_out_path(args.out), "w") as fh:
            json.dump(payload, fh, indent=2)


def cmd_train_mil(args):
    cfg = _load_config(args)
    ds = data_mod.load_dataset(args.dataset)
    bags = pipeline.bags_from_cores(ds.cores)
    model, history = mil.train_stage1(bags, cfg.stage1)
    out = _out_path(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    from .checkpoint import save_checkpoint
    save_checkpoint(out, {"mil": model.state_dict()},
                    meta={"feature_dim": model.feature_dim, "d_k": model.d_k})
    print(f"stage-1 checkpoint: {out} "
          f"(best val loss {min(history['val_loss']):.4f})")


def cmd_train_ssl(args):
    cfg = _load_config(args)
    ds = data_mod.load_dataset(args.dataset)
    stage1 = pipeline.load_stage1(args.stage1)
    graphs, feats = [], []
    for core in sorted(ds.cores, key=lambda c: c.core_id):
        g = data_mod.graph_for_core(core, cfg.spatial_threshold,
                                    cfg.scale_threshold)
        graphs.append(g)
        feats.append(mil.project_patches(
            stage1, data_mod.features_in_node_order(core, g)).data)
    model, history = gatsan.train_stage2(graphs, feats, cfg.stage2)
    out = _out_path(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    from .checkpoint import save_checkpoint
    save_checkpoint(out, {"stage2": model.state_dict()},
                    meta={"num_levels": model.san.num_levels,
                          "in_dim": model.gat.in_dim,
                          "heads": model.gat.heads,
                          "head_dim": model.gat.head_dim,
                          "out_dim": model.gat.out_dim})
    print(f"stage-2 checkpoint: {out} "
          f"(best val loss {min(history['val_loss']):.4f})")


def cmd_saliency(args):
    cfg = _load_config(args)
    ds = data_mod.load_dataset(args.dataset)
    for ckpt, name in ((args.stage1, "stage-1"), (args.stage2, "stage-2")):
        if not os.path.exists(ckpt):
            raise ValueError(f"missing {name} checkpoint: {ckpt}")
    stage1 = pipeline.load_stage1(args.stage1)
    stage2 = pipeline.load_stage2(args.stage2)
    engine = pipeline.SaliencyEngine(stage1, stage2, cfg)
    rng = np.random.default_rng(cfg.seed + 101)
    cores = [ds.core(args.core)] if args.core else sorted(
        ds.cores, key=lambda c: c.core_id)
    out = _out_path(args.out)
    for core in cores:
        maps = engine.core_maps(core, rng)
        core_dir = os.path.join(out, core.core_id)
        os.makedirs(core_dir, exist_ok=True)
        for method, m in maps.items():
            saliency.save_csv(m, os.path.join(core_dir, f"{method}.csv"))
            saliency.save_png(m, os.path.join(core_dir, f"{method}.png"))
            saliency.save_png(m, os.path.join(core_dir, f"{method}_color.png"),
                              color=True)
        print(f"saliency maps for {core.core_id} -> {core_dir}")


def cmd_eval(args):
    cfg = _load_config(args)
    ds = data_mod.load_dataset(args.dataset)
    per_core = {}
    for core in sorted(ds.cores, key=lambda c: c.core_id):
        csv_path = os.path.join(args.saliency_dir, core.core_id,
                                f"{args.method}.csv")
        if not os.path.exists(csv_path) or core.core_id not in ds.masks:
            continue
        m = saliency.load_csv(csv_path)
        per_core[core.core_id] = metrics.ScoredPixels(
            np.clip(m.values.reshape(-1), 0.0, 1.0),
            ds.masks[core.core_id].reshape(-1))
    if not per_core:
        raise ValueError(f"no scored cores found for method '{args.method}'")
    report = metrics.evaluate_method(args.method, per_core, cfg.grid)
    out = _out_path(args.out)
    metrics.write_comparison_csv([report], out)
    print(f"report for {args.method}: CXPS={report.cxps:.4f} -> {out}")


def cmd_compare(args):
    import csv as csv_mod
    reports = []
    for path in args.reports:
        with open(path) as fh:
            for row in csv_mod.DictReader(fh):
                reports.append(metrics.MetricReport(
                    method=row["Method"], map=float(row["mAP"]),
                    auroc=float(row["AUROC"]), auprc=float(row["AUPRC"]),
                    miou=float(row["mIoU"]), ths=float(row["ThS"]),
                    thr=float(row["ThR"]), ba=float(row["BA"]),
                    cxps=float(row["CXPS"]), audc=float(row["AUDC"]),
                    audc_normalized=0.0))
    out = _out_path(args.out)
    metrics.write_comparison_csv(reports, out)
    print(f"ranked {len(reports)} methods -> {out}")


def cmd_run(args):
    cfg = _load_config(args)
    ds = data_mod.load_dataset(args.dataset)
    out = _out_path(args.out)
    reports, _ = pipeline.run_pipeline(ds, cfg, out)
    for r in reports:
        print(f"{r.method:14s} CXPS={r.cxps:.4f} AUROC={r.auroc:.4f}")
    print(f"artifacts under {out}")


def _add_common(p):
    p.add_argument("--config", help="JSON config file overriding defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=list(saliency.VARIANTS))
    p.add_argument("--spatial-threshold", dest="spatial_threshold", type=float)
    p.add_argument("--scale-threshold", dest="scale_threshold", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--grid", dest="coarse_grid", action="store_const",
                   const=True, help="use the coarse 0.1-step threshold grid")


def build_parser():
    parser = argparse.ArgumentParser(prog="graphite")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--cores", type=int, default=16)
    p.add_argument("--grid-rows", type=int, default=8)
    p.add_argument("--grid-cols", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="construct one core's graph")
    p.add_argument("--dataset", required=True)
    p.add_argument("--core", required=True)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train-mil", help="Stage-1 MIL training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_mil)

    p = sub.add_parser("train-ssl", help="Stage-2 self-supervised training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train_ssl)

    p = sub.add_parser("saliency", help="generate saliency maps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--core")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("eval", help="score one method's saliency maps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--saliency-dir", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="merge and rank report CSVs")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
