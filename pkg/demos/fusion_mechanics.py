"""How multi-level node scores become a single saliency map.

Run with:  python3 demos/fusion_mechanics.py
"""

import numpy as np

from graphite.saliency import (FusionConfig, RasterMap, adaptive_weights,
                               confidence_fuse, confidence_score,
                               gaussian_smooth, grid_shape, minmax_normalize,
                               multilevel_fuse, rasterize)
from graphite.graphs import PATCH_SIZE, build_level_grid

# a 4x4-patch core on the common raster grid (16 px per cell)
w = 4 * PATCH_SIZE
shape = grid_shape(w, w)
print(f"core {w}x{w} px -> raster grid {shape}")

# per-node scores at two levels, painted onto the shared grid
rng = np.random.default_rng(0)
level0 = build_level_grid(w, w, 0, start_id=0)
level1 = build_level_grid(w, w, 1, start_id=100)
s0 = rng.uniform(0, 1, len(level0))
s1 = rng.uniform(0, 1, len(level1))
r0 = rasterize(level0, s0, 0, shape)
r1 = rasterize(level1, s1, 1, shape)
print(f"level-0 raster mean {r0.values.mean():.3f}, "
      f"level-1 raster mean {r1.values.mean():.3f}")

# coarser levels get stronger smoothing before the weighted combination
cfg = FusionConfig()
print(f"level weights rho={cfg.rho}, smoothing sigmas={cfg.level_sigmas}")
smooth0 = gaussian_smooth(r0, cfg.level_sigmas[0])
print(f"smoothing preserves the mean: {smooth0.values.mean():.3f}")
combined = multilevel_fuse([r0, r1])
print(f"combined map range [{combined.values.min():.3f}, "
      f"{combined.values.max():.3f}]")

# confidence = mean of the strictly-above-90th-percentile tail
c = confidence_score(combined)
print(f"\ntop-decile confidence of the combined map: {c:.3f}")

# the final fusion weights three evidence streams by their confidences
mil_map = minmax_normalize(RasterMap(rng.uniform(0, 1, shape)))
grad_map = minmax_normalize(RasterMap(rng.uniform(0, 1, shape)))
weights = adaptive_weights([combined, mil_map, grad_map],
                           cfg.base_coefficients)
print("adaptive weights (combined, mil, gradient):",
      " ".join(f"{v:.4f}" for v in weights))
fused = confidence_fuse(combined, mil_map, grad_map)
print(f"fused map range [{fused.values.min():.3f}, "
      f"{fused.values.max():.3f}]")

# rescaling all inputs by a positive constant leaves the result unchanged
doubled = confidence_fuse(RasterMap(combined.values * 2.0),
                          RasterMap(mil_map.values * 2.0),
                          RasterMap(grad_map.values * 2.0))
print("rescaling every input by 2 shifts the output by "
      f"{np.abs(doubled.values - fused.values).max():.2e}")
