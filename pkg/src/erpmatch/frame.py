"""ERP frame containers and ground-truth geometry between frames."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import sphere
from .errors import DataError, DimensionMismatch
from .sphere import ErpGridSpec

DEFAULT_CERTAINTY_ALPHA = 0.05
DEFAULT_OVERLAP_THRESHOLD = 0.1

_MIN_POINT_NORM = 1e-9


@dataclass(frozen=True)
class ErpImage:
    """Row-major (H, W, C) image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3:
            raise DimensionMismatch(f"image must be (H, W) or (H, W, C), got {data.shape}")
        ErpGridSpec(data.shape[1], data.shape[0])
        if not np.all(np.isfinite(data)):
            raise DataError("image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def spec(self) -> ErpGridSpec:
        return ErpGridSpec(self.data.shape[1], self.data.shape[0])

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[..., 0]
        if self.channels >= 3:
            return self.data[..., :3] @ np.array([0.299, 0.587, 0.114])
        return self.data.mean(axis=2)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel radial depth in meters with an explicit validity mask.

    Invalid pixels hold NaN in ``data``; non-positive or non-finite depths
    are always treated as invalid.
    """

    data: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionMismatch(f"depth must be (H, W), got {data.shape}")
        ErpGridSpec(data.shape[1], data.shape[0])
        valid = np.isfinite(data) & (data > 0)
        if self.valid is not None:
            mask = np.asarray(self.valid, dtype=bool)
            if mask.shape != data.shape:
                raise DimensionMismatch("validity mask shape differs from depth shape")
            valid &= mask
        data[~valid] = np.nan
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def spec(self) -> ErpGridSpec:
        return ErpGridSpec(self.data.shape[1], self.data.shape[0])

    def filled(self, value: float = 0.0) -> np.ndarray:
        return np.where(self.valid, self.data, value)


@dataclass(frozen=True)
class PoseSE3:
    """Camera-to-world rigid transform: ``X_world = R @ X_cam + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise DataError("pose rotation is not a proper rotation matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other`` (apply ``other`` first)."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])


def relative_pose(pose_A: PoseSE3, pose_B: PoseSE3) -> PoseSE3:
    """Transform taking points in A's camera frame to B's: ``T_B^-1 T_A``."""
    return pose_B.inverse().compose(pose_A)


@dataclass(frozen=True)
class MatchField:
    """Per-cell unit direction into the target sphere plus certainty in [0, 1]."""

    directions: np.ndarray
    certainty: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        c = np.asarray(self.certainty, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3 or c.shape != d.shape[:2]:
            raise DimensionMismatch(f"bad match field shapes {d.shape} / {c.shape}")
        ErpGridSpec(d.shape[1], d.shape[0])
        if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-6):
            raise DataError("match directions must be unit vectors")
        if np.any((c < 0) | (c > 1)) or not np.all(np.isfinite(c)):
            raise DataError("certainty must lie in [0, 1]")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "certainty", c)

    @property
    def spec(self) -> ErpGridSpec:
        return ErpGridSpec(self.directions.shape[1], self.directions.shape[0])

    @classmethod
    def identity(cls, grid: ErpGridSpec, certainty: float = 1.0) -> "MatchField":
        return cls(grid.rays(), np.full(grid.shape, certainty))


@dataclass(frozen=True)
class Frame:
    image: Optional[ErpImage] = None
    depth: Optional[DepthMap] = None
    pose: Optional[PoseSE3] = None
    name: str = ""

    @property
    def spec(self) -> ErpGridSpec:
        src = self.image if self.image is not None else self.depth
        return src.spec


def warp_points(directions, depths, transform: PoseSE3):
    """Move rays with depth from one camera frame into another.

    Returns ``(unit_directions, depths, ok)`` where ``ok`` is False for
    non-finite inputs or for points landing on the target center.
    """
    P = transform.apply(np.asarray(directions) * np.asarray(depths)[..., None])
    norm = np.linalg.norm(P, axis=-1)
    ok = np.isfinite(norm) & (norm >= _MIN_POINT_NORM)
    safe = np.where(ok, norm, 1.0)
    unit = np.where(ok[..., None], P / safe[..., None], np.asarray(directions))
    return unit, np.where(ok, norm, np.nan), ok


def warp_frame(depth_A: DepthMap, pose_A: PoseSE3, pose_B: PoseSE3) -> tuple[MatchField, DepthMap]:
    """Warp every valid pixel of A into B's sphere.

    The returned match field carries a 0/1 certainty equal to the validity of
    the warp; occlusion is left to :func:`certainty_mask`. Cells that are
    invalid keep A's own ray as a placeholder direction.
    """
    rays = depth_A.spec.rays()
    unit, dist, ok = warp_points(rays, depth_A.filled(np.nan), relative_pose(pose_A, pose_B))
    ok &= depth_A.valid
    unit = np.where(ok[..., None], unit, rays)
    return MatchField(unit, ok.astype(np.float64)), DepthMap(dist, ok)


def sample_depth(depth: DepthMap, directions) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth lookup along unit directions.

    A sample is valid only if every neighbor with nonzero weight is valid.
    """
    col, row = sphere.sph_to_pixel(sphere.cart_to_sph(directions), depth.spec)
    values = sphere.erp_bilinear_sample(depth.filled(0.0), col, row)
    weight = sphere.erp_bilinear_sample(depth.valid.astype(np.float64), col, row)
    ok = weight >= 1.0 - 1e-9
    return np.where(ok, values, np.nan), ok


def certainty_mask(warped_depth: DepthMap, depth_B: DepthMap, alpha: float = DEFAULT_CERTAINTY_ALPHA) -> np.ndarray:
    """Relative depth consistency ``|(D_AB - D_B) / D_B| < alpha``.

    Both depth maps live on A's grid: ``depth_B`` holds B's depth already
    sampled at the warped directions (see :func:`sample_depth`).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if warped_depth.data.shape != depth_B.data.shape:
        raise DimensionMismatch("depth grids differ")
    both = warped_depth.valid & depth_B.valid
    ratio = np.abs((warped_depth.filled(1.0) - depth_B.filled(1.0)) / depth_B.filled(1.0))
    return both & (ratio < alpha)


def ground_truth_matches(
    depth_A: DepthMap,
    pose_A: PoseSE3,
    depth_B: DepthMap,
    pose_B: PoseSE3,
    alpha: float = DEFAULT_CERTAINTY_ALPHA,
) -> tuple[MatchField, DepthMap]:
    """GT match field A->B whose certainty is the depth-consistency mask."""
    field_AB, warped = warp_frame(depth_A, pose_A, pose_B)
    sampled, ok = sample_depth(depth_B, field_AB.directions)
    mask = certainty_mask(warped, DepthMap(sampled, ok), alpha)
    return MatchField(field_AB.directions, mask.astype(np.float64)), warped


def overlap_ratio(
    frame_A: Frame,
    frame_B: Frame,
    depth_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
    relative: bool = False,
) -> float:
    """Fraction of A's valid pixels whose warped depth agrees with B's depth.

    Agreement is ``|D_AB - D_B| < depth_threshold`` in meters, or the same
    test on ``|D_AB - D_B| / D_B`` when ``relative`` is set.
    """
    if frame_A.depth is None or frame_B.depth is None or frame_A.pose is None or frame_B.pose is None:
        raise DataError("overlap_ratio needs depth and pose for both frames")
    n_valid = int(frame_A.depth.valid.sum())
    if n_valid == 0:
        return 0.0
    field_AB, warped = warp_frame(frame_A.depth, frame_A.pose, frame_B.pose)
    sampled, ok = sample_depth(frame_B.depth, field_AB.directions)
    ok &= warped.valid
    diff = np.abs(warped.filled(0.0) - np.where(ok, sampled, 0.0))
    if relative:
        diff = diff / np.where(ok, sampled, 1.0)
    inliers = ok & (diff < depth_threshold)
    return float(inliers.sum()) / n_valid


def snap_azimuth(angle: float, width: int) -> tuple[int, float]:
    """Nearest whole-column shift for ``angle`` and the angle it represents."""
    shift = int(np.round(angle * width / sphere.TWO_PI))
    return shift, shift * sphere.TWO_PI / width


def augment_azimuth(
    image: Optional[ErpImage],
    depth: Optional[DepthMap],
    pose: Optional[PoseSE3],
    angle: float,
    exact: bool = True,
):
    """Rotate a frame about the gravity axis without changing world geometry.

    Content moves to larger longitude by ``angle``. With ``exact`` the angle
    snaps to a whole number of columns and data is rolled; otherwise columns
    are bilinearly resampled.
    """
    spec = (image or depth).spec
    if exact:
        shift, angle = snap_azimuth(angle, spec.width)
        shift %= spec.width

        def move(a):
            return np.roll(a, shift, axis=1)

        new_image = None if image is None else ErpImage(move(image.data))
        new_depth = None if depth is None else DepthMap(move(depth.data), move(depth.valid))
    else:
        cols, rows = spec.pixel_centers()
        src = cols - angle * spec.width / sphere.TWO_PI
        new_image = None if image is None else ErpImage(sphere.erp_bilinear_sample(image.data, src, rows))
        new_depth = None
        if depth is not None:
            values = sphere.erp_bilinear_sample(depth.filled(0.0), src, rows)
            weight = sphere.erp_bilinear_sample(depth.valid.astype(np.float64), src, rows)
            new_depth = DepthMap(values, weight >= 1.0 - 1e-9)
    new_pose = None
    if pose is not None:
        new_pose = PoseSE3(pose.rotation @ sphere.azimuth_rotation(angle).T, pose.translation)
    return new_image, new_depth, new_pose
