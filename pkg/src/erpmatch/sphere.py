"""Spherical, Cartesian and ERP-pixel conversions.

Conventions used throughout the package:

* Longitude ``theta`` in [-pi, pi], latitude ``phi`` in [-pi/2, pi/2].
* Unit vector ``S = (sin(theta) cos(phi), sin(phi), cos(theta) cos(phi))``;
  +y is up (gravity axis), +z is the forward direction at theta = 0.
* Pixel-center lattice: pixel ``(col, row)`` with integer coordinates sits at
  ``theta = 2*pi*(col + 0.5)/W - pi`` and ``phi = pi/2 - pi*(row + 0.5)/H``.
  Column ``W/2 - 0.5`` is theta = 0 and row 0 is next to the north pole.
* At the poles the longitude is pinned to 0.

All functions are vectorized over leading array dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, ZeroVector

TWO_PI = 2.0 * np.pi
HALF_PI = 0.5 * np.pi

_POLE_EPS = 1e-15
_ZERO_NORM = 1e-12


class SphericalCoord(NamedTuple):
    theta: np.ndarray
    phi: np.ndarray


class PixelCoord(NamedTuple):
    col: np.ndarray
    row: np.ndarray


@dataclass(frozen=True)
class ErpGridSpec:
    """Size of an equirectangular pixel lattice (``width == 2 * height``)."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.width != 2 * self.height:
            raise DimensionMismatch(
                f"ERP grid must satisfy width == 2*height >= 2, got {self.width}x{self.height}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def downsample(self, stride: int) -> "ErpGridSpec":
        if self.height % stride:
            raise DimensionMismatch(f"height {self.height} not divisible by stride {stride}")
        return ErpGridSpec(self.width // stride, self.height // stride)

    def pixel_centers(self) -> PixelCoord:
        rows, cols = np.meshgrid(
            np.arange(self.height, dtype=np.float64),
            np.arange(self.width, dtype=np.float64),
            indexing="ij",
        )
        return PixelCoord(cols, rows)

    def rays(self) -> np.ndarray:
        """Unit ray of every pixel center, shape (H, W, 3)."""
        return sph_to_cart(*pixel_to_sph(self.pixel_centers(), self))


def wrap_angle(theta):
    """Map angles into [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TWO_PI) - np.pi


def sph_to_cart(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    cos_phi = np.cos(phi)
    return np.stack([np.sin(theta) * cos_phi, np.sin(phi), np.cos(theta) * cos_phi], axis=-1)


def cart_to_sph(S) -> SphericalCoord:
    """Inverse of :func:`sph_to_cart`; accepts non-unit vectors.

    Raises:
        ZeroVector: if any input has norm below 1e-12.
    """
    S = np.asarray(S, dtype=np.float64)
    norm = np.linalg.norm(S, axis=-1)
    if np.any(norm < _ZERO_NORM):
        raise ZeroVector("cannot convert a zero vector to spherical coordinates")
    x, y, z = S[..., 0], S[..., 1], S[..., 2]
    phi = np.arcsin(np.clip(y / norm, -1.0, 1.0))
    at_pole = np.hypot(x, z) <= _POLE_EPS * norm
    theta = np.where(at_pole, 0.0, np.arctan2(x, z))
    return SphericalCoord(theta, phi)


def pixel_to_sph(p: PixelCoord, grid: ErpGridSpec) -> SphericalCoord:
    """Pixel-center coordinates to (theta, phi).

    Columns wrap around the seam; rows are clamped so that latitude stays
    inside [-pi/2, pi/2].
    """
    col = np.asarray(p[0], dtype=np.float64)
    row = np.clip(np.asarray(p[1], dtype=np.float64), -0.5, grid.height - 0.5)
    theta = wrap_angle(TWO_PI * (col + 0.5) / grid.width - np.pi)
    phi = HALF_PI - np.pi * (row + 0.5) / grid.height
    return SphericalCoord(theta, phi)


def sph_to_pixel(u: SphericalCoord, grid: ErpGridSpec) -> PixelCoord:
    """Inverse of :func:`pixel_to_sph`, columns canonicalized into [0, W)."""
    theta = np.asarray(u[0], dtype=np.float64)
    phi = np.asarray(u[1], dtype=np.float64)
    col = np.mod((theta + np.pi) * grid.width / TWO_PI - 0.5, grid.width)
    # np.mod can round a tiny negative up to exactly W
    col = np.where(col >= grid.width, col - grid.width, col)
    row = (HALF_PI - phi) * grid.height / np.pi - 0.5
    return PixelCoord(col, row)


def azimuth_rotation(angle: float) -> np.ndarray:
    """Rotation about the gravity (y) axis that adds ``angle`` to longitude."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def erp_bilinear_sample(grid, col, row) -> np.ndarray:
    """Bilinearly sample an (H, W) or (H, W, C) grid at pixel-center coordinates.

    Columns are periodic modulo W, rows clamp at the top and bottom edge.
    Integer coordinates return stored values exactly.
    """
    grid = np.asarray(grid)
    H, W = grid.shape[:2]
    col = np.asarray(col, dtype=np.float64)
    row = np.clip(np.asarray(row, dtype=np.float64), 0.0, H - 1)
    c0f = np.floor(col)
    r0f = np.floor(row)
    wc = col - c0f
    wr = row - r0f
    c0 = np.mod(c0f.astype(np.int64), W)
    c1 = np.mod(c0 + 1, W)
    r0 = r0f.astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    if grid.ndim == 3:
        wc = wc[..., None]
        wr = wr[..., None]
    top = grid[r0, c0] * (1.0 - wc) + grid[r0, c1] * wc
    bottom = grid[r1, c0] * (1.0 - wc) + grid[r1, c1] * wc
    return top * (1.0 - wr) + bottom * wr


def normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle(R) -> float:
    """Angle of a rotation matrix in radians."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def rodrigues(omega) -> np.ndarray:
    """Rotation matrix from an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega)
    K = skew(omega)
    if angle < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(angle) / angle * K + (1.0 - np.cos(angle)) / angle**2 * (K @ K)


def rotation_to_align(src, dst) -> np.ndarray:
    """Rotation R with ``R @ src`` parallel to ``dst``."""
    src = normalize(src)
    dst = normalize(dst)
    v = np.cross(src, dst)
    c = float(np.dot(src, dst))
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        perp = np.array([1.0, 0.0, 0.0]) if abs(src[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = normalize(np.cross(src, perp))
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = skew(v)
    return np.eye(3) + K + K @ K / (1.0 + c)
