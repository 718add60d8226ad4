"""Coarse-to-fine refinement of spherical match fields.

Each fine level projects the current directions to (theta, phi), correlates
A's features with B's features on a (2k+1)^2 tap window around the match,
asks a refiner for a residual step, adds it in (theta, phi), and maps the
result back to unit vectors. Fields move between levels by bilinear
upsampling of the Cartesian directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Union

import numpy as np

from . import sphere
from .errors import DimensionMismatch
from .features import FeaturePyramid
from .frame import MatchField
from .sphere import ErpGridSpec, SphericalCoord


@dataclass(frozen=True)
class RefinerConfig:
    """Refinement settings; ``patch_radius`` is one int or one per stride."""

    patch_radius: Union[int, tuple[int, ...]] = 2
    temperature: float = 100.0
    strides: tuple[int, ...] = (16, 8, 4, 2, 1)
    geodesic: bool = False
    iterations: int = 1
    min_cos_lat: float = 0.1
    certainty_gain: float = 8.0
    certainty_center: float = 0.7

    def __post_init__(self):
        radii = self.patch_radius if isinstance(self.patch_radius, tuple) else (self.patch_radius,)
        if isinstance(self.patch_radius, tuple) and len(radii) != len(self.strides):
            raise ValueError("need one patch radius per stride")
        if min(radii) < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.min_cos_lat <= 1:
            raise ValueError("min_cos_lat must lie in (0, 1]")

    def radius_at(self, stride: int) -> int:
        if isinstance(self.patch_radius, tuple):
            return self.patch_radius[self.strides.index(stride)]
        return self.patch_radius


@dataclass(frozen=True)
class LevelGeometry:
    """Tap layout of one refinement level.

    ``offsets`` is (T, 2) with (dx, dy) in level cells; the horizontal
    offset of a tap is additionally multiplied by ``tap_scale`` (h, w).
    ``tap_valid`` (h, w, T) marks taps that stay on the raster; taps past
    the first or last row would only re-sample the clamped edge row.
    """

    grid: ErpGridSpec
    stride: int
    offsets: np.ndarray
    tap_scale: np.ndarray
    tap_valid: Optional[np.ndarray] = None


class Refiner(Protocol):
    def __call__(
        self,
        f_A: np.ndarray,
        f_B_warped: np.ndarray,
        corr: np.ndarray,
        flow: np.ndarray,
        level: LevelGeometry,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return (h, w, 2) residual (dtheta, dphi) in radians and (h, w) certainty residual."""
        ...


def tap_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


def latitude_scale(phi, geodesic: bool = True, min_cos_lat: float = 0.1) -> np.ndarray:
    """Horizontal stretch 1/cos(phi) that makes one tap one geodesic cell wide."""
    phi = np.asarray(phi, dtype=np.float64)
    if not geodesic:
        return np.ones_like(phi)
    return 1.0 / np.maximum(np.cos(phi), min_cos_lat)


def level_geometry(grid: ErpGridSpec, stride: int, u: SphericalCoord, cfg: RefinerConfig) -> LevelGeometry:
    offsets = tap_offsets(cfg.radius_at(stride))
    row = sphere.sph_to_pixel(u, grid).row[..., None] + offsets[:, 1]
    valid = (row >= -0.5) & (row <= grid.height - 0.5)
    return LevelGeometry(grid, stride, offsets, latitude_scale(u.phi, cfg.geodesic, cfg.min_cos_lat), valid)


def project_matches(m: MatchField) -> SphericalCoord:
    return sphere.cart_to_sph(m.directions)


def unproject_matches(u: SphericalCoord) -> np.ndarray:
    return sphere.sph_to_cart(u.theta, u.phi)


def warp_features(f_B: np.ndarray, u: SphericalCoord) -> np.ndarray:
    """Sample B's feature grid at spherical positions ``u`` (seam-aware bilinear)."""
    grid = ErpGridSpec(f_B.shape[1], f_B.shape[0])
    col, row = sphere.sph_to_pixel(u, grid)
    return sphere.erp_bilinear_sample(f_B, col, row)


def _bilinear_dot(f_A_flat, f_B_flat, H, W, col, row):
    """``f_A[p] . f_B<col[p], row[p]>`` without materializing the sample."""
    row = np.clip(row, 0.0, H - 1)
    c0f = np.floor(col)
    r0f = np.floor(row)
    wc = (col - c0f).ravel()
    wr = (row - r0f).ravel()
    c0 = np.mod(c0f.astype(np.int64), W).ravel()
    c1 = np.mod(c0 + 1, W)
    r0 = r0f.astype(np.int64).ravel()
    r1 = np.minimum(r0 + 1, H - 1)
    out = np.zeros(len(wc))
    for rr, cc, w in (
        (r0, c0, (1 - wr) * (1 - wc)),
        (r0, c1, (1 - wr) * wc),
        (r1, c0, wr * (1 - wc)),
        (r1, c1, wr * wc),
    ):
        out += w * np.einsum("nd,nd->n", f_A_flat, f_B_flat[rr * W + cc])
    return out


def local_correlation(
    f_A: np.ndarray,
    f_B: np.ndarray,
    u: SphericalCoord,
    radius: int,
    tap_scale: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Correlation of A's features with B's around each match, (h, w, (2k+1)^2).

    Taps sit at level-pixel offsets (dx * tap_scale, dy) from the match
    position ``u`` on B's grid; columns wrap across the seam.
    """
    if f_A.shape[:2] != np.shape(u.theta) or f_A.shape[-1] != f_B.shape[-1]:
        raise DimensionMismatch("feature grids and match grid disagree")
    H, W, d = f_B.shape
    grid = ErpGridSpec(W, H)
    col, row = sphere.sph_to_pixel(u, grid)
    scale = np.ones_like(col) if tap_scale is None else np.asarray(tap_scale)
    fa = f_A.reshape(-1, d)
    fb = f_B.reshape(-1, d)
    offsets = tap_offsets(radius)
    corr = np.empty(f_A.shape[:2] + (len(offsets),))
    for t, (dx, dy) in enumerate(offsets):
        corr[..., t] = _bilinear_dot(fa, fb, H, W, col + dx * scale, row + dy).reshape(col.shape)
    return corr


@dataclass(frozen=True)
class SoftArgmaxRefiner:
    """Expected tap offset under ``softmax(temperature * corr)``.

    The offset converts to radians with ``dtheta = dx * tap_scale * 2pi/w``
    and ``dphi = -dy * pi/h``; the certainty residual is the peak
    correlation pushed through a logistic rescaled to (-1, 1).
    """

    temperature: float = 100.0
    certainty_gain: float = 8.0
    certainty_center: float = 0.7

    def __call__(self, f_A, f_B_warped, corr, flow, level: LevelGeometry):
        logits = self.temperature * corr
        if level.tap_valid is not None:
            logits = np.where(level.tap_valid, logits, -np.inf)
        logits = logits - logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        dx = w @ level.offsets[:, 0]
        dy = w @ level.offsets[:, 1]
        du = np.stack(
            [dx * level.tap_scale * sphere.TWO_PI / level.grid.width, -dy * np.pi / level.grid.height],
            axis=-1,
        )
        peak = corr.max(axis=-1) if level.tap_valid is None else np.where(level.tap_valid, corr, -np.inf).max(axis=-1)
        dc = 2.0 / (1.0 + np.exp(-self.certainty_gain * (peak - self.certainty_center))) - 1.0
        return du, dc


def update_and_unproject(u: SphericalCoord, certainty, du, dc) -> MatchField:
    """Add residuals in (theta, phi), wrap longitude, clamp latitude and certainty."""
    du = np.asarray(du, dtype=np.float64)
    theta = sphere.wrap_angle(u.theta + du[..., 0])
    phi = np.clip(u.phi + du[..., 1], -sphere.HALF_PI, sphere.HALF_PI)
    c = np.clip(np.asarray(certainty) + np.asarray(dc), 0.0, 1.0)
    return MatchField(sphere.normalize(sphere.sph_to_cart(theta, phi)), c)


def upsample_matchfield(m: MatchField) -> MatchField:
    """Double the resolution by bilinear blending of Cartesian directions.

    Columns wrap at the seam. The outermost fine rows lie a quarter cell
    beyond the outermost coarse centers and are extrapolated linearly from
    the two nearest coarse rows; clamping would bias them by half a fine cell.
    """
    h, w = m.certainty.shape
    fine = ErpGridSpec(2 * w, 2 * h)
    cols, rows = fine.pixel_centers()
    src_c = (cols + 0.5) / 2.0 - 0.5
    src_r = (rows + 0.5) / 2.0 - 0.5
    if h > 1:
        r0 = np.clip(np.floor(src_r).astype(np.int64), 0, h - 2)
        r1 = r0 + 1
    else:
        r0 = r1 = np.zeros(src_r.shape, dtype=np.int64)
    wr = (src_r - r0)[..., None]
    top = sphere.erp_bilinear_sample(m.directions, src_c, r0.astype(np.float64))
    bottom = sphere.erp_bilinear_sample(m.directions, src_c, r1.astype(np.float64))
    blended = (1.0 - wr) * top + wr * bottom
    norm = np.linalg.norm(blended, axis=-1, keepdims=True)
    nearest = m.directions[
        np.clip(np.round(src_r).astype(int), 0, h - 1), np.mod(np.round(src_c).astype(int), w)
    ]
    directions = np.where(norm > 1e-6, blended / np.maximum(norm, 1e-300), nearest)
    certainty = np.clip(sphere.erp_bilinear_sample(m.certainty, src_c, src_r), 0.0, 1.0)
    return MatchField(directions, certainty)


def flow_residual(u: SphericalCoord, grid: ErpGridSpec) -> np.ndarray:
    """(dtheta, dphi) from each cell's own ray to its match, longitude wrapped."""
    own = sphere.pixel_to_sph(grid.pixel_centers(), grid)
    return np.stack([sphere.wrap_angle(u.theta - own.theta), u.phi - own.phi], axis=-1)


def refine_level(
    m: MatchField, f_A: np.ndarray, f_B: np.ndarray, stride: int, cfg: RefinerConfig, refiner: Refiner
) -> MatchField:
    if m.certainty.shape != f_A.shape[:2]:
        raise DimensionMismatch(f"match field {m.certainty.shape} vs features {f_A.shape[:2]}")
    grid = m.spec
    u = project_matches(m)
    geom = level_geometry(grid, stride, u, cfg)
    corr = local_correlation(f_A, f_B, u, cfg.radius_at(stride), geom.tap_scale)
    du, dc = refiner(f_A, warp_features(f_B, u), corr, flow_residual(u, grid), geom)
    return update_and_unproject(u, m.certainty, du, dc)


def run_refinement(
    coarse: MatchField,
    pyr_A: FeaturePyramid,
    pyr_B: FeaturePyramid,
    cfg: RefinerConfig = RefinerConfig(),
    refiner: Optional[Refiner] = None,
    return_levels: bool = False,
):
    """Refine a stride-32 field through the configured fine strides.

    With ``return_levels`` also returns ``{stride: field}`` holding the coarse
    input and the refined field of every level.
    """
    if refiner is None:
        refiner = SoftArgmaxRefiner(cfg.temperature, cfg.certainty_gain, cfg.certainty_center)
    m = coarse
    levels = {pyr_A[1].shape[0] // coarse.certainty.shape[0]: coarse}
    for s in cfg.strides:
        f_A, f_B = pyr_A[s], pyr_B[s]
        while m.certainty.shape[0] < f_A.shape[0]:
            m = upsample_matchfield(m)
        for _ in range(cfg.iterations):
            m = refine_level(m, f_A, f_B, s, cfg, refiner)
        levels[s] = m
    while m.certainty.shape[0] < pyr_A[1].shape[0]:
        m = upsample_matchfield(m)
    return (m, levels) if return_levels else m
