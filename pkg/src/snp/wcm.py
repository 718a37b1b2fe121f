"""Weight-map control: turn depth edges into per-site feature multipliers.

Pipeline: depth scaled to [0, 255] -> Canny edges -> square dilation ->
inversion -> resize to each site resolution -> rescale into [w_floor, 1].
Near depth discontinuities (object outlines) the control features are damped
to ``w_floor``; elsewhere they pass at full strength.

Canny stages are computed with fixed accumulation order (separable 5-tap
binomial blur, explicit Sobel sums) so results are reproducible to the bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractViolation

# 5-tap binomial: discrete Gaussian with variance exactly 1
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
TAN22 = 0.41421356237309503  # tan(22.5 deg)
TAN67 = 2.414213562373095  # tan(67.5 deg)


@dataclass(frozen=True)
class DepthCondition:
    """Single-channel depth in [0, 1], larger values are closer."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] == 0 or d.shape[1] == 0:
            raise ContractViolation(f"depth must be a non-empty 2-D array, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ContractViolation("depth contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ContractViolation(f"depth values must lie in [0, 1], got [{d.min()}, {d.max()}]")
        object.__setattr__(self, "depth", d)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class WcmConfig:
    canny_low: float = 50.0
    canny_high: float = 150.0
    dilation_radius: int = 2
    w_floor: float = 0.5

    def __post_init__(self):
        if not self.canny_low < self.canny_high:
            raise ContractViolation(f"canny_low ({self.canny_low}) must be below canny_high ({self.canny_high})")
        if self.dilation_radius < 0:
            raise ContractViolation("dilation_radius must be >= 0")
        if not 0.0 <= self.w_floor <= 1.0:
            raise ContractViolation("w_floor must lie in [0, 1]")


@dataclass(frozen=True)
class WeightMaps:
    maps: dict = field(default_factory=dict)
    w_floor: float = 0.5

    def __getitem__(self, site):
        return self.maps[site]


def _as_depth(depth) -> np.ndarray:
    if isinstance(depth, DepthCondition):
        return depth.depth
    return DepthCondition(depth).depth


def gaussian_blur(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    p = np.pad(img, 2, mode="edge")
    rows = np.zeros((h + 4, w))
    for t in range(5):
        rows = rows + BINOMIAL5[t] * p[:, t:t + w]
    out = np.zeros((h, w))
    for t in range(5):
        out = out + BINOMIAL5[t] * rows[t:t + h, :]
    return out


def sobel(img: np.ndarray):
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) - at(-1, -1)) + 2.0 * (at(0, 1) - at(0, -1)) + (at(1, 1) - at(1, -1))
    gy = (at(1, -1) - at(-1, -1)) + 2.0 * (at(1, 0) - at(-1, 0)) + (at(1, 1) - at(-1, 1))
    return gx, gy


def non_max_suppression(mag, gx, gy) -> np.ndarray:
    """Boolean map of local maxima along the quantised gradient direction.

    Ties along horizontal/vertical directions keep the pixel on the
    positive side, so a symmetric step yields a single-pixel line.
    """
    h, w = mag.shape
    mp = np.pad(mag, 1)

    def nb(dy, dx):
        return mp[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= ax * TAN22
    vert = ~horiz & (ay > ax * TAN67)
    diag = ~horiz & ~vert
    same_sign = (gx * gy) > 0

    keep = horiz & (mag >= nb(0, -1)) & (mag > nb(0, 1))
    keep |= vert & (mag >= nb(-1, 0)) & (mag > nb(1, 0))
    keep |= diag & same_sign & (mag > nb(-1, -1)) & (mag > nb(1, 1))
    keep |= diag & ~same_sign & (mag > nb(-1, 1)) & (mag > nb(1, -1))
    return keep


def hysteresis(mag, nms, low, high) -> np.ndarray:
    candidates = nms & (mag > low)
    labels, n = ndimage.label(candidates, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    strong = np.unique(labels[candidates & (mag > high)])
    return np.isin(labels, strong[strong > 0]).astype(np.uint8)


def gradient_magnitude(depth):
    img = _as_depth(depth) * 255.0
    gx, gy = sobel(gaussian_blur(img))
    return np.sqrt(gx * gx + gy * gy), gx, gy


def detect_edges(depth, low: float = 50.0, high: float = 150.0) -> np.ndarray:
    """Canny edge map (uint8, {0, 1}) of a depth map on the [0, 255] scale."""
    if not low < high:
        raise ContractViolation(f"low threshold {low} must be below high threshold {high}")
    mag, gx, gy = gradient_magnitude(depth)
    return hysteresis(mag, non_max_suppression(mag, gx, gy), low, high)


def dilate(edge_map: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ContractViolation("dilation radius must be >= 0")
    edge_map = np.asarray(edge_map).astype(bool)
    if radius == 0:
        return edge_map.astype(np.uint8)
    size = 2 * radius + 1
    out = ndimage.binary_dilation(edge_map, structure=np.ones((size, size), dtype=bool))
    return out.astype(np.uint8)


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic triangle-filter matrix mapping n_in samples to n_out.

    Pixel centres are at half-integers. On reduction the triangle widens
    with the scale factor, so thin bands are averaged rather than skipped.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    x = (np.arange(n_in)[None, :] + 0.5 - centers[:, None]) / support
    w = np.clip(1.0 - np.abs(x), 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def resize_bilinear(img: np.ndarray, size: Sequence[int]) -> np.ndarray:
    h, w = img.shape
    oh, ow = int(size[0]), int(size[1])
    if (oh, ow) == (h, w):
        return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    out = resample_matrix(h, oh) @ img @ resample_matrix(w, ow).T
    return np.clip(out, 0.0, 1.0)


def inverted_edge_mask(depth, config: WcmConfig) -> np.ndarray:
    """1 away from dilated edges, 0 on them, at depth resolution."""
    edges = detect_edges(depth, config.canny_low, config.canny_high)
    return 1.0 - dilate(edges, config.dilation_radius).astype(np.float64)


def build_weight_maps(
    depth,
    site_resolutions: Sequence,
    config: WcmConfig = WcmConfig(),
    sites: Optional[Iterable[int]] = None,
) -> WeightMaps:
    """One weight map per requested site (all sites by default)."""
    if len(site_resolutions) == 0:
        raise ContractViolation("site_resolutions must be non-empty")
    sites = range(len(site_resolutions)) if sites is None else sorted(sites)
    m = inverted_edge_mask(depth, config)
    cache = {}
    maps = {}
    for i in sites:
        res = tuple(int(v) for v in site_resolutions[i])
        if res not in cache:
            r = resize_bilinear(m, res)
            cache[res] = np.clip(1.0 - (1.0 - config.w_floor) * (1.0 - r), config.w_floor, 1.0)
        maps[i] = cache[res]
    return WeightMaps(maps, config.w_floor)
