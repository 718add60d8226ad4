"""Two-view relative pose for spherical cameras.

Relative poses map A's camera frame into B's: ``X_B = R X_A + t``. The
essential matrix is ``E = [t]x R`` and corresponding bearings satisfy
``x_B^T E x_A = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import sphere
from .errors import (
    AmbiguousDecomposition,
    DegenerateConfiguration,
    DimensionMismatch,
    EmptyList,
    NoModelFound,
    TooFewMatches,
)
from .frame import MatchField, PoseSE3

MIN_MATCHES = 8
DEFAULT_THRESHOLD = 0.8
DEFAULT_MAX_MATCHES = 5000
DEGENERACY_RATIO = 0.9
AUC_THRESHOLDS = (5.0, 10.0, 20.0)
_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class BearingCorrespondences:
    """Paired unit bearings ``(n, 3)`` with optional source pixels and certainty."""

    bearings_A: np.ndarray
    bearings_B: np.ndarray
    pixels: Optional[np.ndarray] = None
    certainty: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.bearings_A, dtype=np.float64).reshape(-1, 3)
        b = np.asarray(self.bearings_B, dtype=np.float64).reshape(-1, 3)
        if a.shape != b.shape:
            raise DimensionMismatch(f"bearing sets {a.shape} and {b.shape} differ")
        for v in (a, b):
            if v.size and np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0)) > 1e-6:
                raise ValueError("bearings must be unit vectors")
        object.__setattr__(self, "bearings_A", a)
        object.__setattr__(self, "bearings_B", b)

    def __len__(self) -> int:
        return len(self.bearings_A)

    def subset(self, mask) -> "BearingCorrespondences":
        pick = lambda x: None if x is None else np.asarray(x)[mask]
        return BearingCorrespondences(
            self.bearings_A[mask], self.bearings_B[mask], pick(self.pixels), pick(self.certainty)
        )


@dataclass(frozen=True)
class RelativePose:
    """Rotation and unit translation direction from A's frame to B's.

    A zero translation (pure rotation) is kept as the zero vector.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3) or np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be a proper 3x3 rotation")
        object.__setattr__(self, "rotation", R)
        n = np.linalg.norm(t)
        object.__setattr__(self, "translation", t / n if n > 0 else np.zeros(3))

    @classmethod
    def from_se3(cls, pose: PoseSE3) -> "RelativePose":
        return cls(pose.rotation, pose.translation)

    def essential(self) -> np.ndarray:
        return canonical_essential(sphere.skew(self.translation) @ self.rotation)


def canonical_essential(E) -> np.ndarray:
    """Scale ``E`` to unit Frobenius norm with its largest-magnitude entry positive."""
    E = np.asarray(E, dtype=np.float64)
    E = E / np.linalg.norm(E)
    return E if E.flat[np.argmax(np.abs(E))] > 0 else -E


def project_to_essential(E) -> np.ndarray:
    """Closest matrix with singular values (s, s, 0), normalized to Frobenius norm 1."""
    U, _, Vt = np.linalg.svd(E)
    out = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return out / np.linalg.norm(out, axis=(-2, -1), keepdims=True)


def sample_matches(
    m: MatchField, threshold: float = DEFAULT_THRESHOLD, max_n: int = DEFAULT_MAX_MATCHES, seed: int = 0
) -> BearingCorrespondences:
    """Draw up to ``max_n`` cells with certainty >= threshold, uniformly without replacement."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    grid = m.spec
    cert = m.certainty.reshape(-1)
    idx = np.flatnonzero(cert >= threshold)
    if len(idx) < MIN_MATCHES:
        raise TooFewMatches(f"{len(idx)} cells pass certainty {threshold}, need {MIN_MATCHES}")
    if len(idx) > max_n:
        idx = np.sort(np.random.default_rng(seed).choice(idx, size=max_n, replace=False))
    rows, cols = np.divmod(idx, grid.width)
    return BearingCorrespondences(
        grid.rays().reshape(-1, 3)[idx],
        m.directions.reshape(-1, 3)[idx],
        np.stack([cols, rows], axis=1),
        cert[idx],
    )


def correspondences_from_points(points_A, transform: PoseSE3) -> BearingCorrespondences:
    """Bearings of 3D points given in A's frame, seen from A and from B."""
    P = np.asarray(points_A, dtype=np.float64).reshape(-1, 3)
    return BearingCorrespondences(sphere.normalize(P), sphere.normalize(transform.apply(P)))


def _preconditioners(c: BearingCorrespondences) -> tuple[np.ndarray, np.ndarray]:
    z = np.array([0.0, 0.0, 1.0])
    out = []
    for v in (c.bearings_A, c.bearings_B):
        mean = v.mean(axis=0)
        out.append(np.eye(3) if np.linalg.norm(mean) < 1e-9 else sphere.rotation_to_align(mean / np.linalg.norm(mean), z))
    return out[0], out[1]


def _constraint_rows(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    rows = np.einsum("...i,...j->...ij", xb, xa).reshape(xa.shape[:-1] + (9,))
    return rows / np.maximum(np.linalg.norm(rows, axis=-1, keepdims=True), 1e-300)


def eight_point_spherical(c: BearingCorrespondences) -> np.ndarray:
    """Normalized linear estimate of E from >= 8 correspondences.

    Each bearing set is rotated so its mean points along +z and the
    constraint rows are scaled to unit norm before the SVD; the solution is
    projected onto the essential manifold and canonicalized.
    """
    if len(c) < MIN_MATCHES:
        raise TooFewMatches(f"{len(c)} correspondences, need {MIN_MATCHES}")
    Qa, Qb = _preconditioners(c)
    A = _constraint_rows(c.bearings_A @ Qa.T, c.bearings_B @ Qb.T)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s = np.concatenate([s, np.zeros(9 - len(s))]) if len(s) < 9 else s
    if s[7] <= 1e-10 * s[0] or s[8] / s[7] > DEGENERACY_RATIO:
        raise DegenerateConfiguration("epipolar constraints do not pin down a unique E")
    E = Qb.T @ Vt[-1].reshape(3, 3) @ Qa
    return canonical_essential(project_to_essential(E))


def angular_residuals(E, c: BearingCorrespondences, signed: bool = False) -> np.ndarray:
    """``asin(x_B . E x_A / |E x_A|)``: angle between x_B and A's epipolar plane.

    ``E`` may be a stack (k, 3, 3); the result is then (k, n).
    """
    Ex = np.einsum("...ij,nj->...ni", np.asarray(E), c.bearings_A)
    num = np.einsum("...ni,ni->...n", Ex, c.bearings_B)
    r = np.arcsin(np.clip(num / np.maximum(np.linalg.norm(Ex, axis=-1), 1e-300), -1.0, 1.0))
    return r if signed else np.abs(r)


def ransac_essential(
    c: BearingCorrespondences,
    iterations: int = 1000,
    threshold_deg: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Robust E by 8-point hypotheses scored on angular residuals.

    All minimal samples are drawn up front from one generator, so the result
    depends only on ``seed``; ties in inlier count go to the earliest
    hypothesis. The winner is re-fit on its inliers.
    """
    n = len(c)
    if n < MIN_MATCHES:
        raise TooFewMatches(f"{n} correspondences, need {MIN_MATCHES}")
    thr = np.radians(threshold_deg)
    rng = np.random.default_rng(seed)
    samples = np.argpartition(rng.random((iterations, n)), MIN_MATCHES - 1, axis=1)[:, :MIN_MATCHES]
    Qa, Qb = _preconditioners(c)
    xa, xb = c.bearings_A @ Qa.T, c.bearings_B @ Qb.T
    A = _constraint_rows(xa[samples], xb[samples])
    _, _, Vt = np.linalg.svd(A, full_matrices=True)
    E = Qb.T @ Vt[:, -1].reshape(-1, 3, 3) @ Qa
    E = project_to_essential(E)
    counts = np.empty(iterations, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, iterations, chunk):
        counts[start:start + chunk] = (angular_residuals(E[start:start + chunk], c) < thr).sum(axis=1)
    best = int(np.argmax(counts))
    if counts[best] < MIN_MATCHES:
        raise NoModelFound(f"best hypothesis has {counts[best]} inliers, need {MIN_MATCHES}")
    E_best = canonical_essential(E[best])
    inliers = angular_residuals(E_best, c) < thr
    try:
        E_fit = eight_point_spherical(c.subset(inliers))
        fit_inliers = angular_residuals(E_fit, c) < thr
        if fit_inliers.sum() >= inliers.sum():
            E_best, inliers = E_fit, fit_inliers
    except DegenerateConfiguration:
        pass
    return E_best, inliers


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    helper = np.eye(3)[np.argmin(np.abs(t))]
    b1 = sphere.normalize(np.cross(t, helper))
    return np.stack([b1, np.cross(t, b1)], axis=1)


def _pose_params(R0, t0, B, x) -> tuple[np.ndarray, np.ndarray]:
    return sphere.rodrigues(x[:3]) @ R0, sphere.normalize(t0 + B @ x[3:])


def refine_pose_nonlinear(
    pose: RelativePose, c: BearingCorrespondences, iterations: int = 20
) -> RelativePose:
    """Levenberg-Marquardt on squared angular residuals over (rotation, unit t).

    Rotation updates are left-multiplied axis-angle steps and translation
    moves in the tangent plane of the current direction, so there are five
    parameters. The cost never increases.
    """
    R, t = pose.rotation, pose.translation

    def cost_res(R, t):
        r = angular_residuals(sphere.skew(t) @ R, c, signed=True)
        return float(r @ r), r

    cost, r = cost_res(R, t)
    damping = 1e-3
    h = 1e-7
    for _ in range(iterations):
        if cost < 1e-30:
            break
        B = _tangent_basis(t)
        J = np.empty((len(c), 5))
        for k in range(5):
            dx = np.zeros(5)
            dx[k] = h
            Rp, tp = _pose_params(R, t, B, dx)
            Rm, tm = _pose_params(R, t, B, -dx)
            J[:, k] = (cost_res(Rp, tp)[1] - cost_res(Rm, tm)[1]) / (2 * h)
        JtJ, g = J.T @ J, J.T @ r
        improved = False
        for _ in range(10):
            step = np.linalg.solve(JtJ + damping * np.diag(np.diag(JtJ) + 1e-12), -g)
            Rn, tn = _pose_params(R, t, B, step)
            cn, rn = cost_res(Rn, tn)
            if cn < cost:
                R, t, cost, r = Rn, tn, cn, rn
                damping = max(damping / 10, 1e-9)
                improved = True
                break
            damping *= 10
        if not improved or np.linalg.norm(step) < 1e-12:
            break
    return RelativePose(R, t)


def decompose_essential(E, c: BearingCorrespondences) -> RelativePose:
    """Pick the (R, t) candidate with the most points in front of both cameras."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    candidates = [
        (U @ W @ Vt, s * U[:, 2]) for W in (_W, _W.T) for s in (1.0, -1.0)
    ]
    support = []
    for R, t in candidates:
        _, la, lb = _midpoint_depths(c.bearings_A @ R.T, c.bearings_B, t)
        support.append(int(np.sum((la > 0) & (lb > 0))))
    order = np.argsort(support)[::-1]
    if support[order[0]] == 0 or support[order[0]] == support[order[1]]:
        raise AmbiguousDecomposition(f"cheirality support {support} has no unique winner")
    R, t = candidates[order[0]]
    return RelativePose(R, t)


def refine_essential_nonlinear(E, c: BearingCorrespondences, iterations: int = 20) -> np.ndarray:
    """Refine E over the five-parameter pose manifold; see ``refine_pose_nonlinear``."""
    return refine_pose_nonlinear(decompose_essential(E, c), c, iterations).essential()


@dataclass(frozen=True)
class PoseEstimate:
    pose: RelativePose
    essential: np.ndarray
    inliers: np.ndarray


def estimate_relative_pose(
    c: BearingCorrespondences,
    iterations: int = 1000,
    threshold_deg: float = 1.0,
    seed: int = 0,
    refine: bool = True,
) -> PoseEstimate:
    """RANSAC, cheirality decomposition and nonlinear refinement on the inliers."""
    E, inliers = ransac_essential(c, iterations, threshold_deg, seed)
    inl = c.subset(inliers)
    pose = decompose_essential(E, inl)
    if refine:
        pose = refine_pose_nonlinear(pose, inl)
    return PoseEstimate(pose, pose.essential(), inliers)


def pose_error(est: RelativePose, gt: RelativePose) -> float:
    """max(rotation error, translation direction error) in degrees.

    The translation term is dropped when either side has no translation.
    """
    rot = sphere.rotation_angle(est.rotation @ gt.rotation.T)
    trans = 0.0
    if est.translation.any() and gt.translation.any():
        trans = np.arccos(np.clip(est.translation @ gt.translation, -1.0, 1.0))
    return float(np.degrees(max(rot, trans)))


def auc_at(errors: Iterable[float], thresholds: Iterable[float] = AUC_THRESHOLDS) -> dict[float, float]:
    """Area under the recall-vs-error curve up to each threshold, in percent.

    The curve runs through (0, 0) and (e_i, i/n) over the sorted errors and
    is integrated with the trapezoid rule, then divided by the threshold.
    """
    e = np.sort(np.asarray(list(errors), dtype=np.float64))
    if e.size == 0:
        raise EmptyList("no pose errors to summarize")
    if not np.all(np.isfinite(e)):
        raise ValueError("pose errors must be finite; record failures as 180")
    recall = np.arange(1, e.size + 1) / e.size
    e = np.concatenate([[0.0], e])
    recall = np.concatenate([[0.0], recall])
    out = {}
    for tau in thresholds:
        last = int(np.searchsorted(e, tau, side="left"))
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        x = np.concatenate([e[:last], [tau]])
        out[float(tau)] = float(100.0 * np.sum(0.5 * (r[1:] + r[:-1]) * np.diff(x)) / tau)
    return out


def _midpoint_depths(dA, dB, t):
    """Depths along A's rays (placed at ``t``) and B's rays (at the origin) of the
    closest-approach points, plus the midpoints. Inputs are (n, 3) in B's frame."""
    a = np.einsum("ij,ij->i", dA, dA)
    b = np.einsum("ij,ij->i", dA, dB)
    cc = np.einsum("ij,ij->i", dB, dB)
    d = dA @ t
    e = dB @ t
    denom = a * cc - b * b
    safe = np.where(np.abs(denom) < 1e-15, np.nan, denom)
    la = (b * e - cc * d) / safe
    lb = (a * e - b * d) / safe
    mid = 0.5 * ((t + la[:, None] * dA) + lb[:, None] * dB)
    return mid, np.nan_to_num(la, nan=-1.0), np.nan_to_num(lb, nan=-1.0)


def triangulate_spherical(
    c: BearingCorrespondences, pose: RelativePose, scale: float = 1.0, min_parallax_deg: float = 0.1
) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation, returning points in A's frame and the keep mask.

    ``scale`` sets the baseline length (the pose only fixes its direction).
    Points behind either camera or with ray parallax below the threshold
    are dropped.
    """
    R, t = pose.rotation, pose.translation * scale
    dA = c.bearings_A @ R.T
    mid, la, lb = _midpoint_depths(dA, c.bearings_B, t)
    parallax = np.arccos(np.clip(np.einsum("ij,ij->i", dA, c.bearings_B), -1.0, 1.0))
    keep = (la > 0) & (lb > 0) & (parallax >= np.radians(min_parallax_deg))
    points = (mid[keep] - t) @ R
    return points, keep
