"""Raster saliency maps: rasterization, Gaussian smoothing, multilevel and
confidence-based fusion, and the Base/V1/V2 variant assembly.

All maps live on a common grid of level-0 pixels divided by the raster
downsample factor (default 16), so one level-0 patch covers a 14x14 block.
Smoothing sigmas are expressed in grid cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mil
from .graphs import PATCH_SIZE


@dataclass
class RasterMap:
    """Scalar field on the common grid; ``values`` is (height, width)."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("RasterMap: values must be finite")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class FusionConfig:
    rho: tuple = (0.5, 0.3, 0.2)
    level_sigmas: tuple = (1.0, 2.0, 4.0)
    base_coefficients: tuple = (0.6, 0.3, 0.1)
    confidence_percentile: float = 90.0
    mil_sigma: float = 2.0
    gradient_sigma: float = 1.0
    eps_norm: float = 1e-8
    raster_downsample: int = 16

    def __post_init__(self):
        if any(r <= 0 for r in self.rho) or any(s <= 0 for s in self.level_sigmas):
            raise ValueError("FusionConfig: rho and sigma entries must be positive")


def grid_shape(core_width, core_height, downsample=16):
    """Common-grid dimensions (height, width) for a level-0 pixel extent."""
    return (core_height // downsample, core_width // downsample)


def rasterize(nodes, scores, level, shape, downsample=16):
    """Paint per-node scores over their level-0 footprints.

    Each level-m node covers a ``224 * 2**m / downsample`` square of grid
    cells; overlapping footprints average, untouched cells stay 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("rasterize: scores must be finite")
    h, w = shape
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    side = PATCH_SIZE * (2 ** level) / downsample
    for node, score in zip(nodes, scores):
        r0 = int(round(node.grid_row * side))
        c0 = int(round(node.grid_col * side))
        r1 = int(round((node.grid_row + 1) * side))
        c1 = int(round((node.grid_col + 1) * side))
        if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
            raise ValueError(
                f"rasterize: node {node.node_id} footprint "
                f"[{r0}:{r1}, {c0}:{c1}] outside grid {shape}")
        acc[r0:r1, c0:c1] += score
        cnt[r0:r1, c0:c1] += 1.0
    painted = cnt > 0
    acc[painted] /= cnt[painted]
    return RasterMap(acc)


def _gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(raster, sigma):
    """Separable Gaussian convolution with reflective boundary handling."""
    if sigma <= 0:
        raise ValueError("gaussian_smooth: sigma must be positive")
    k = _gaussian_kernel(sigma)
    radius = len(k) // 2
    v = raster.values
    padded = np.pad(v, ((radius, radius), (0, 0)), mode="reflect")
    rows = np.zeros_like(v)
    for i, kv in enumerate(k):
        rows += kv * padded[i:i + v.shape[0], :]
    padded = np.pad(rows, ((0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(v)
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + v.shape[1]]
    return RasterMap(out)


def minmax_normalize(raster, eps=1e-8):
    """Map to [0, 1); a constant map normalizes to all zeros.

    The stabilizer is applied relative to the span so the result is invariant
    to a positive rescaling of the input; a zero span falls back to the
    absolute stabilizer, sending constant maps to zero.
    """
    v = raster.values
    lo, hi = v.min(), v.max()
    span = hi - lo
    denom = span * (1.0 + eps) if span > 0 else eps
    return RasterMap((v - lo) / denom, normalized=True)


def multilevel_fuse(level_maps, config=None):
    """Weighted sum of per-level maps, each smoothed with its own sigma."""
    config = config or FusionConfig()
    shapes = {m.values.shape for m in level_maps}
    if len(shapes) != 1:
        raise ValueError(f"multilevel_fuse: mismatched grid dims {sorted(shapes)}")
    out = np.zeros(next(iter(shapes)))
    for m, rho, sigma in zip(level_maps, config.rho, config.level_sigmas):
        out += rho * gaussian_smooth(m, sigma).values
    return RasterMap(out)


def confidence_score(raster, percentile=90.0):
    """Mean of values strictly above the percentile; constant maps give max."""
    v = raster.values.reshape(-1)
    if v.size == 0:
        raise ValueError("confidence_score: empty map")
    cut = np.percentile(v, percentile)
    top = v[v > cut]
    if top.size == 0:
        return float(v.max())
    return float(top.mean())


def _confidence_fusion(maps, coefficients, config):
    shapes = {m.values.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"confidence fusion: mismatched grid dims {sorted(shapes)}")
    confidences = [confidence_score(m, config.confidence_percentile) for m in maps]
    total = sum(confidences)
    if total == 0:
        coef_sum = sum(coefficients)
        weights = [c / coef_sum for c in coefficients]
    else:
        weights = [coef * conf / total for coef, conf in zip(coefficients, confidences)]
    fused = np.zeros(next(iter(shapes)))
    for w, m in zip(weights, maps):
        fused += w * m.values
    return minmax_normalize(RasterMap(fused), eps=config.eps_norm), weights


def confidence_fuse(combined, mil_map, gradient_map, config=None):
    """Three-way adaptive fusion; inputs must already carry their
    method-specific smoothing (MIL sigma 2, gradient sigma 1)."""
    config = config or FusionConfig()
    fused, _ = _confidence_fusion([combined, mil_map, gradient_map],
                                  config.base_coefficients, config)
    return fused


def adaptive_weights(maps, coefficients, config=None):
    """The v weights the fusion would use; exposed for verification."""
    config = config or FusionConfig()
    confidences = [confidence_score(m, config.confidence_percentile) for m in maps]
    total = sum(confidences)
    if total == 0:
        coef_sum = sum(coefficients)
        return [c / coef_sum for c in coefficients]
    return [coef * conf / total for coef, conf in zip(coefficients, confidences)]


def mil_attention_map(model, bag, nodes, shape, config=None):
    """Rasterized, min-max normalized MIL attention over level-0 patches."""
    config = config or FusionConfig()
    _, alpha, _ = mil.forward_bag(model, bag)
    raster = rasterize(nodes, alpha.data.reshape(-1), 0, shape,
                       config.raster_downsample)
    return minmax_normalize(raster, eps=config.eps_norm)


def gradient_saliency_map(model, bag, nodes, shape, config=None):
    """Per-patch L2 norm of d(y_hat)/d(projected embedding), rasterized.

    This is the embedding-space stand-in for CNN bias-gradient saliency; it
    is labeled ``gradient`` everywhere.
    """
    config = config or FusionConfig()
    tape = ad.Tape()
    model.attach(tape)
    try:
        yhat, _, projected = mil.forward_bag(model, bag)
        ad.backward(ad.reshape(yhat, ()))
        grad = projected.grad
    finally:
        model.detach()
    norms = np.sqrt((grad ** 2).sum(axis=1))
    raster = rasterize(nodes, norms, 0, shape, config.raster_downsample)
    return minmax_normalize(raster, eps=config.eps_norm)


VARIANTS = ("base", "v1", "v2")


def graphite_variant(variant, combined=None, mil_map=None, gradient_map=None,
                     config=None):
    """Assemble the final map for one variant.

    base: normalized multilevel map. v1: confidence fusion of the multilevel
    and MIL maps with coefficients (0.6, 0.3) renormalized. v2: full
    three-way confidence fusion.
    """
    config = config or FusionConfig()
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    if combined is None:
        raise ValueError(f"variant '{variant}' requires the multilevel map")
    if variant == "base":
        return minmax_normalize(combined, eps=config.eps_norm)
    if mil_map is None:
        raise ValueError(f"variant '{variant}' requires the MIL attention map")
    if variant == "v1":
        c0, c1 = config.base_coefficients[0], config.base_coefficients[1]
        coefs = (c0 / (c0 + c1), c1 / (c0 + c1))
        fused, _ = _confidence_fusion([combined, mil_map], coefs, config)
        return fused
    if gradient_map is None:
        raise ValueError("variant 'v2' requires the gradient map")
    return confidence_fuse(combined, mil_map, gradient_map, config)


# ---------------------------------------------------------------------------
# exports

# Perceptually-ordered ramp (dark violet -> teal -> yellow), interpolated.
_RAMP = np.array([
    (68, 1, 84), (71, 44, 122), (59, 81, 139), (44, 113, 142),
    (33, 144, 141), (39, 173, 129), (92, 200, 99), (170, 220, 50),
    (253, 231, 37),
], dtype=np.float64)


def save_csv(raster, path):
    np.savetxt(path, raster.values, delimiter=",", fmt="%.10g")


def load_csv(path):
    return RasterMap(np.atleast_2d(np.loadtxt(path, delimiter=",")))


def to_gray(raster):
    return np.clip(np.round(raster.values * 255.0), 0, 255).astype(np.uint8)


def to_rgb(raster):
    v = np.clip(raster.values, 0.0, 1.0)
    pos = v * (len(_RAMP) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_RAMP) - 1)
    frac = (pos - lo)[..., None]
    rgb = _RAMP[lo] * (1 - frac) + _RAMP[hi] * frac
    return np.round(rgb).astype(np.uint8)


def save_png(raster, path, color=False):
    """8-bit grayscale (default) or color-ramp PNG."""
    from PIL import Image
    arr = to_rgb(raster) if color else to_gray(raster)
    Image.fromarray(arr).save(path)


def save_overlay(raster, core_image, path, alpha=0.5):
    """Heatmap alpha-blended over a core image (PIL image or array)."""
    from PIL import Image
    base = np.asarray(core_image.convert("RGB") if hasattr(core_image, "convert")
                      else core_image, dtype=np.float64)
    heat = to_rgb(raster).astype(np.float64)
    if base.shape[:2] != heat.shape[:2]:
        img = Image.fromarray(heat.astype(np.uint8)).resize(
            (base.shape[1], base.shape[0]))
        heat = np.asarray(img, dtype=np.float64)
    blended = np.round((1 - alpha) * base + alpha * heat).astype(np.uint8)
    Image.fromarray(blended).save(path)
