"""Tour of the explainability metric suite on hand-built score maps.

Run with:  python3 demos/metric_suite.py
"""

import numpy as np

from graphite.metrics import (ScoredPixels, ThresholdGrid, auroc, auroc_rank,
                              average_precision, ba, confusion_at, cxps,
                              evaluate_method, f1_curve, miou,
                              net_benefit_curve, ths, thr)

rng = np.random.default_rng(0)

# a "good" detector: tumour pixels score high, benign pixels low
truth = rng.integers(0, 2, 400)
good = np.clip(0.75 * truth + rng.uniform(0, 0.25, 400), 0, 1)
noisy = np.clip(0.35 * truth + rng.uniform(0, 0.65, 400), 0, 1)

for name, scores in (("good", good), ("noisy", noisy)):
    p = ScoredPixels(scores, truth)
    print(f"{name}: AUROC={auroc(p):.3f} (rank oracle {auroc_rank(p):.3f}), "
          f"AP={average_precision(p):.3f}, BA@0.5={ba(p):.3f}")
    tp, fp, tn, fn = confusion_at(p, 0.5)
    print(f"  confusion at 0.5: TP={tp} FP={fp} TN={tn} FN={fn}")

# threshold robustness: F1 swept over the default 0.01..0.99 grid
grid = ThresholdGrid()
p = ScoredPixels(good, truth)
f1 = f1_curve(p, grid)
print(f"\nF1 peak {f1.max():.3f}; "
      f"ThS (mean/max stability) = {ths(f1):.3f}; "
      f"ThR (span with F1 >= 95% of peak) = {thr(f1, grid):.3f}")

# net benefit: how many true positives the map is worth after paying for
# false positives at the threshold's odds
nb, audc, audc_norm = net_benefit_curve(p, grid)
print(f"net benefit at t=0.5: {nb[49]:.3f}; AUDC={audc:.1f} "
      f"(normalized {audc_norm:.3f})")

# the composite score blends six components with fixed weights
components = {"map": 0.56, "auroc": 0.94, "miou": 0.41,
              "ths": 0.50, "thr": 0.70, "ba": 0.68}
print(f"\nCXPS of a strong reference row: {cxps(components):.3f}")

# evaluate_method produces the full report from per-core pixel sets
per_core = {"core_a": ScoredPixels(good[:200], truth[:200]),
            "core_b": ScoredPixels(good[200:], truth[200:])}
report = evaluate_method("demo", per_core, grid)
miou_val, per_core_iou = miou(per_core)
print(f"report: CXPS={report.cxps:.3f}, mAP={report.map:.3f}, "
      f"mIoU={miou_val:.3f}, per-core IoU={ {k: round(v, 3) for k, v in per_core_iou.items()} }")
