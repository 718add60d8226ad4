"""Multi-scale feature pyramids.

``FeatureExtractor`` is the contract a learned encoder would implement. The
analytic baselines here are deterministic and exactly equivariant to
whole-cell column shifts: raw-ERP patches and gradient histograms wrap
horizontally and clamp vertically, tangent patches sample the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from . import sphere
from .errors import DimensionMismatch, ImageTooSmall, MalformedFile
from .frame import ErpImage
from .sphere import ErpGridSpec, PixelCoord

STRIDES = (32, 16, 8, 4, 2, 1)
COARSE_STRIDES = (32, 16)
FINE_STRIDES = (8, 4, 2, 1)

PYRAMID_FORMAT = "erpmatch-pyramid"
PYRAMID_VERSION = 1

_NORM_GUARD = 1e-9


@dataclass
class FeaturePyramid:
    """Feature grids keyed by stride, each (H/stride, W/stride, d)."""

    levels: dict[int, np.ndarray]
    low_texture: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for s in STRIDES:
            if s not in self.levels:
                raise DimensionMismatch(f"pyramid missing stride {s}")
            if self.levels[s].ndim != 3 or self.levels[s].shape[2] == 0:
                raise DimensionMismatch(f"stride {s} grid must be (h, w, d>0)")

    def __getitem__(self, stride: int) -> np.ndarray:
        return self.levels[stride]

    def dims(self) -> dict[int, int]:
        return {s: a.shape[2] for s, a in self.levels.items()}


class FeatureExtractor(Protocol):
    def extract(self, image: ErpImage) -> FeaturePyramid: ...


def box_downsample(gray: np.ndarray, stride: int) -> np.ndarray:
    h, w = gray.shape[0] // stride, gray.shape[1] // stride
    return gray.reshape(h, stride, w, stride).mean(axis=(1, 3))


def neighborhood(grid: np.ndarray, radius: int) -> np.ndarray:
    """Stack the (2r+1)^2 neighbors of every cell: (h, w) -> (h, w, (2r+1)^2).

    Columns wrap around the seam; rows clamp at the poles.
    """
    h = grid.shape[0]
    out = []
    for dy in range(-radius, radius + 1):
        rows = np.clip(np.arange(h) + dy, 0, h - 1)
        shifted = grid[rows]
        for dx in range(-radius, radius + 1):
            out.append(np.roll(shifted, -dx, axis=1))
    return np.stack(out, axis=-1)


def _normalize_rows(desc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    low = norm[..., 0] <= _NORM_GUARD
    return np.where(low[..., None], 0.0, desc / np.where(low[..., None], 1.0, norm)), low


def _check_size(image: ErpImage, strides) -> None:
    H = image.data.shape[0]
    top = max(strides)
    if H // top < 2:
        raise ImageTooSmall(f"height {H} gives fewer than 2 rows at stride {top}")
    if H % top:
        raise DimensionMismatch(f"height {H} must be divisible by {top}")


@dataclass(frozen=True)
class PatchExtractor:
    """Mean-removed, L2-normalized n x n grayscale patches at every stride."""

    patch: int = 5
    strides: tuple[int, ...] = STRIDES

    def extract(self, image: ErpImage) -> FeaturePyramid:
        _check_size(image, self.strides)
        gray = image.gray()
        levels, low = {}, {}
        for s in self.strides:
            desc = neighborhood(box_downsample(gray, s), self.patch // 2)
            desc = desc - desc.mean(axis=-1, keepdims=True)
            levels[s], low[s] = _normalize_rows(desc)
        return FeaturePyramid(levels, low)


def tangent_sample_points(grid: ErpGridSpec, radius: int, spacing: float = 1.0) -> np.ndarray:
    """Gnomonic sample directions around every cell, (h, w, (2r+1)^2, 3).

    Offsets step ``spacing`` latitude pitches along the cell's local east and
    north axes, so the footprint has the same angular size at every latitude.
    """
    u = sphere.pixel_to_sph(grid.pixel_centers(), grid)
    st, ct, sp, cp = np.sin(u.theta), np.cos(u.theta), np.sin(u.phi), np.cos(u.phi)
    center = sphere.sph_to_cart(u.theta, u.phi)
    east = np.stack([ct, np.zeros_like(ct), -st], axis=-1)
    north = np.stack([-st * sp, cp, -ct * sp], axis=-1)
    steps = np.tan(np.arange(-radius, radius + 1) * spacing * np.pi / grid.height)
    pts = [center + dx * east + dy * north for dy in steps[::-1] for dx in steps]
    return sphere.normalize(np.stack(pts, axis=-2))


@lru_cache(maxsize=32)
def _tangent_lattice(width: int, height: int, radius: int, spacing: float) -> PixelCoord:
    grid = ErpGridSpec(width, height)
    col, row = sphere.sph_to_pixel(sphere.cart_to_sph(tangent_sample_points(grid, radius, spacing)), grid)
    col.setflags(write=False)
    row.setflags(write=False)
    return PixelCoord(col, row)


@dataclass(frozen=True)
class TangentPatchExtractor:
    """Like ``PatchExtractor`` but each patch is sampled on the cell's tangent plane.

    Near the poles raw ERP neighborhoods cover a sliver of longitude and
    stretch wildly under viewpoint change; tangent sampling keeps the
    footprint geodesically uniform. Still exactly equivariant to whole-cell
    column shifts.
    """

    patch: int = 5
    spacing: float = 1.0
    strides: tuple[int, ...] = STRIDES

    def extract(self, image: ErpImage) -> FeaturePyramid:
        _check_size(image, self.strides)
        gray = image.gray()
        levels, low = {}, {}
        for s in self.strides:
            g = box_downsample(gray, s)
            col, row = _tangent_lattice(g.shape[1], g.shape[0], self.patch // 2, float(self.spacing))
            desc = sphere.erp_bilinear_sample(g, col, row)
            desc = desc - desc.mean(axis=-1, keepdims=True)
            levels[s], low[s] = _normalize_rows(desc)
        return FeaturePyramid(levels, low)


@dataclass(frozen=True)
class GradientExtractor:
    """Magnitude-weighted orientation histograms per cell.

    Gradients are taken at ``cell_samples`` sub-samples per cell side and
    binned per cell. ``layout="pooled"`` sums the histograms over an n x n
    cell window (``bins`` dims); ``layout="concat"`` stacks the window's
    histograms (``bins * n^2`` dims), which is far more distinctive.
    """

    window: int = 5
    bins: int = 8
    layout: str = "pooled"
    cell_samples: int = 8
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if self.layout not in ("pooled", "concat"):
            raise ValueError(f"unknown layout {self.layout!r}")

    def histograms(self, grid: np.ndarray) -> np.ndarray:
        """Per-sample soft-binned histograms of a 2D grid, (h, w, bins)."""
        h = grid.shape[0]
        gx = 0.5 * (np.roll(grid, -1, axis=1) - np.roll(grid, 1, axis=1))
        down = grid[np.minimum(np.arange(h) + 1, h - 1)]
        up = grid[np.maximum(np.arange(h) - 1, 0)]
        gy = 0.5 * (down - up)
        mag = np.hypot(gx, gy)
        pos = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (2 * np.pi) * self.bins
        lo = np.floor(pos)
        frac = pos - lo
        lo = lo.astype(np.int64) % self.bins
        hi = (lo + 1) % self.bins
        b = np.arange(self.bins)
        return (mag * (1.0 - frac))[..., None] * (lo[..., None] == b) + (mag * frac)[..., None] * (hi[..., None] == b)

    def cell_histograms(self, gray: np.ndarray, stride: int) -> np.ndarray:
        sub = max(1, stride // self.cell_samples)
        hist = self.histograms(box_downsample(gray, sub))
        f = stride // sub
        h, w = hist.shape[0] // f, hist.shape[1] // f
        return hist.reshape(h, f, w, f, self.bins).sum(axis=(1, 3))

    def extract(self, image: ErpImage) -> FeaturePyramid:
        _check_size(image, self.strides)
        gray = image.gray()
        r = self.window // 2
        levels, low = {}, {}
        for s in self.strides:
            cells = self.cell_histograms(gray, s)
            stacks = [neighborhood(cells[..., b], r) for b in range(self.bins)]
            if self.layout == "pooled":
                desc = np.stack([st.sum(axis=-1) for st in stacks], axis=-1)
            else:
                desc = np.concatenate(stacks, axis=-1)
            levels[s], low[s] = _normalize_rows(desc)
        return FeaturePyramid(levels, low)


def extract_patch_baseline(image: ErpImage, patch: int = 5) -> FeaturePyramid:
    return PatchExtractor(patch=patch).extract(image)


def extract_gradient_baseline(
    image: ErpImage, window: int = 5, bins: int = 8, layout: str = "pooled"
) -> FeaturePyramid:
    return GradientExtractor(window=window, bins=bins, layout=layout).extract(image)


def make_extractor(name: str, **params) -> FeatureExtractor:
    if name == "patch":
        return PatchExtractor(**params)
    if name == "tangent":
        return TangentPatchExtractor(**params)
    if name == "gradient":
        return GradientExtractor(**params)
    raise ValueError(f"unknown extractor {name!r}")


def save_pyramid(path, pyramid: FeaturePyramid) -> None:
    arrays = {f"level_{s}": a for s, a in pyramid.levels.items()}
    np.savez(path, format=np.array(PYRAMID_FORMAT), version=np.array(PYRAMID_VERSION), **arrays)


def load_pyramid(path) -> FeaturePyramid:
    try:
        with np.load(Path(path)) as data:
            if str(data["format"]) != PYRAMID_FORMAT or int(data["version"]) != PYRAMID_VERSION:
                raise MalformedFile(f"{path}: unsupported pyramid cache header")
            levels = {int(k.split("_")[1]): data[k] for k in data.files if k.startswith("level_")}
    except (OSError, KeyError, ValueError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return FeaturePyramid(levels, {s: ~np.any(a, axis=-1) for s, a in levels.items()})
