"""End-to-end pair processing shared by the CLI and the evaluation suites."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from . import pose as pose_mod
from . import refine, sphere
from .config import RunConfig
from .errors import DataError, NumericalError
from .frame import ErpImage, Frame, MatchField, augment_azimuth, ground_truth_matches, relative_pose

MAX_OVERLAY_LINES = 200


@dataclass
class MatchResult:
    coarse: MatchField
    refined: MatchField
    levels: dict
    timing: dict = field(default_factory=dict)


def angular_error_deg(a, b) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(np.einsum("...i,...i->...", a, b), -1.0, 1.0)))


def upsample_to(m: MatchField, height: int) -> MatchField:
    while m.certainty.shape[0] < height:
        m = refine.upsample_matchfield(m)
    return m


def maybe_augment(frame: Frame, cfg: RunConfig) -> Frame:
    if not cfg.augmentation.enabled:
        return frame
    image, depth, pose = augment_azimuth(frame.image, frame.depth, frame.pose, cfg.augmentation.angle)
    return Frame(image, depth, pose, frame.name)


def match_frames(frame_A: Frame, frame_B: Frame, cfg: RunConfig) -> MatchResult:
    """Extract, coarse-match and refine; returns fields at A's full resolution."""
    if frame_A.image.data.shape[:2] != frame_B.image.data.shape[:2]:
        raise DataError("frames must share one ERP resolution")
    timing = {}
    t0 = time.perf_counter()
    extractor = cfg.extractor.build()
    pyr_A, pyr_B = extractor.extract(frame_A.image), extractor.extract(frame_B.image)
    t1 = time.perf_counter()
    coarse = cfg.coarse_matcher().match(pyr_A, pyr_B)
    t2 = time.perf_counter()
    refined, levels = refine.run_refinement(coarse, pyr_A, pyr_B, cfg.refiner_config(), return_levels=True)
    t3 = time.perf_counter()
    timing.update(extract=t1 - t0, coarse=t2 - t1, refine=t3 - t2)
    return MatchResult(coarse, refined, levels, timing)


def gt_field(frame_A: Frame, frame_B: Frame, alpha: float) -> MatchField:
    if frame_A.depth is None or frame_B.depth is None or frame_A.pose is None or frame_B.pose is None:
        raise DataError(f"GT evaluation of {frame_A.name}/{frame_B.name} needs depth and pose for both frames")
    return ground_truth_matches(frame_A.depth, frame_A.pose, frame_B.depth, frame_B.pose, alpha)[0]


def evaluate_matches(result: MatchResult, gt: MatchField) -> dict:
    """Mean angular errors (degrees) of the refined and upsampled-coarse fields."""
    mask = gt.certainty > 0.5
    if not mask.any():
        raise DataError("ground truth has no certain cells")
    up = upsample_to(result.coarse, gt.certainty.shape[0])
    e_fin = angular_error_deg(result.refined.directions, gt.directions)[mask]
    e_up = angular_error_deg(up.directions, gt.directions)[mask]
    return {
        "gt_certain_fraction": float(mask.mean()),
        "mean_error_deg": float(e_fin.mean()),
        "median_error_deg": float(np.median(e_fin)),
        "coarse_upsampled_mean_error_deg": float(e_up.mean()),
    }


def warped_image(image_B: ErpImage, m: MatchField) -> np.ndarray:
    """B's image pulled onto A's grid along the match directions, times certainty."""
    grid = image_B.spec
    col, row = sphere.sph_to_pixel(sphere.cart_to_sph(m.directions), grid)
    return sphere.erp_bilinear_sample(image_B.data, col, row) * m.certainty[..., None]


def match_lines_image(image_A: ErpImage, image_B: ErpImage, m: MatchField, max_lines: int = MAX_OVERLAY_LINES):
    """A above B with lines joining the most certain matches (grid-strided pick)."""
    grid = image_A.spec
    H, W = grid.height, grid.width
    canvas = np.concatenate([image_A.data, image_B.data], axis=0)
    if canvas.shape[2] == 1:
        canvas = np.repeat(canvas, 3, axis=2)
    img = Image.fromarray(np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    cert = m.certainty.reshape(-1)
    order = np.argsort(-cert, kind="stable")
    order = order[cert[order] > 0]
    step = max(1, len(order) // max_lines)
    picks = order[::step][:max_lines]
    col_B, row_B = sphere.sph_to_pixel(sphere.cart_to_sph(m.directions.reshape(-1, 3)[picks]), grid)
    rows, cols = np.divmod(picks, W)
    for ca, ra, cb, rb in zip(cols, rows, col_B, row_B):
        draw.line([(float(ca), float(ra)), (float(cb), float(rb) + H)], fill=(255, 40, 40), width=1)
    return img, len(picks)


def pose_for_field(m: MatchField, cfg: RunConfig, seed: Optional[int] = None) -> pose_mod.PoseEstimate:
    seed = cfg.seed if seed is None else seed
    c = pose_mod.sample_matches(m, cfg.sampling.threshold, cfg.sampling.max_n, seed)
    return pose_mod.estimate_relative_pose(
        c, cfg.ransac.iterations, cfg.ransac.threshold_deg, seed, cfg.ransac.refine
    )


def gt_relative(frame_A: Frame, frame_B: Frame) -> pose_mod.RelativePose:
    if frame_A.pose is None or frame_B.pose is None:
        raise DataError(f"pose evaluation of {frame_A.name}/{frame_B.name} needs both poses")
    return pose_mod.RelativePose.from_se3(relative_pose(frame_A.pose, frame_B.pose))


def evaluate_pose(frame_A: Frame, frame_B: Frame, cfg: RunConfig, use_gt_matches: bool = False) -> dict:
    """Pose error for one pair; numerical failures are recorded as 180 degrees."""
    record = {"frameA": frame_A.name, "frameB": frame_B.name}
    frame_A = maybe_augment(frame_A, cfg)
    gt = gt_relative(frame_A, frame_B)
    try:
        if use_gt_matches:
            m = gt_field(frame_A, frame_B, cfg.loss.alpha)
        else:
            m = match_frames(frame_A, frame_B, cfg).refined
        est = pose_for_field(m, cfg)
    except NumericalError as exc:
        record.update(error_deg=180.0, status="failed", reason=f"{type(exc).__name__}: {exc}")
        return record
    record.update(
        error_deg=pose_mod.pose_error(est.pose, gt),
        status="ok",
        inliers=int(est.inliers.sum()),
        samples=int(len(est.inliers)),
        rotation=est.pose.rotation.tolist(),
        translation=est.pose.translation.tolist(),
    )
    return record


def triangulate_field(m: MatchField, est: pose_mod.PoseEstimate, scale: float, cfg: RunConfig):
    """Triangulate every confident match (not just the RANSAC sample)."""
    cert = m.certainty >= cfg.sampling.threshold
    grid = m.spec
    c = pose_mod.BearingCorrespondences(grid.rays()[cert], m.directions[cert], np.argwhere(cert)[:, ::-1])
    residual = pose_mod.angular_residuals(est.essential, c)
    c = c.subset(residual < np.radians(cfg.ransac.threshold_deg))
    points, keep = pose_mod.triangulate_spherical(c, est.pose, scale)
    return points, c.pixels[keep]


def scale_aligned_depth_error(points, pixels, depth_A) -> float:
    """Median relative radial-depth error after a median-ratio scale fit."""
    est = np.linalg.norm(points, axis=1)
    gt = depth_A.data[pixels[:, 1], pixels[:, 0]]
    ok = np.isfinite(gt)
    if not ok.any():
        raise DataError("no triangulated point lands on valid GT depth")
    s = np.median(gt[ok] / est[ok])
    return float(np.median(np.abs(s * est[ok] - gt[ok]) / gt[ok]))
