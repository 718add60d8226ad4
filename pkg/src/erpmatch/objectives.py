"""Training objectives for dense spherical matching.

Regression compares predicted and ground-truth match directions by cosine,
certainty uses binary cross-entropy against the depth-consistency mask, and
the total sums both over pyramid levels. Analytic gradients are provided for
the (theta, phi) parametrization of predictions and for the certainty, with
a central-difference checker to validate them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import sphere
from .errors import DimensionMismatch, LevelMismatch
from .frame import DEFAULT_CERTAINTY_ALPHA, MatchField

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and conventions.

    ``signed_cosine`` uses ``1 - S.S_hat``; turning it off uses ``1 - |S.S_hat|``,
    under which antipodal predictions cost nothing. Probabilities are clamped
    to ``[clamp, 1 - clamp]`` before taking logs.
    """

    alpha: float = DEFAULT_CERTAINTY_ALPHA
    lam: float = 0.01
    signed_cosine: bool = True
    clamp: float = PROB_CLAMP
    reduction: str = "sum"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.clamp < 0.5:
            raise ValueError("clamp must lie in (0, 0.5)")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")


def _as_dirs(m) -> np.ndarray:
    return m.directions if isinstance(m, MatchField) else np.asarray(m, dtype=np.float64)


def _reduce(values: np.ndarray, count: float, reduction: str) -> float:
    total = float(np.sum(values))
    if reduction == "mean":
        return total / count if count > 0 else 0.0
    return total


def regression_loss(gt, pred, mask, signed: bool = True, reduction: str = "sum") -> float:
    """Sum over masked cells of ``1 - cos`` between GT and predicted directions.

    ``gt`` and ``pred`` are MatchFields or (..., 3) unit-vector arrays. With
    ``reduction="mean"`` the sum is divided by the number of masked cells.
    """
    S, S_hat = _as_dirs(gt), _as_dirs(pred)
    mask = np.asarray(mask, dtype=np.float64)
    if S.shape != S_hat.shape or S.shape[:-1] != mask.shape:
        raise DimensionMismatch(f"gt {S.shape}, pred {S_hat.shape} and mask {mask.shape} disagree")
    cos = np.einsum("...i,...i->...", S, S_hat)
    if not signed:
        cos = np.abs(cos)
    return _reduce(mask * (1.0 - cos), mask.sum(), reduction)


def certainty_loss(gt_mask, pred_c, clamp: float = PROB_CLAMP, reduction: str = "sum") -> float:
    """Binary cross-entropy ``-sum[c log c_hat + (1 - c) log(1 - c_hat)]``."""
    c = np.asarray(gt_mask, dtype=np.float64)
    p = np.asarray(pred_c, dtype=np.float64)
    if c.shape != p.shape:
        raise DimensionMismatch(f"gt mask {c.shape} and prediction {p.shape} disagree")
    p = np.clip(p, clamp, 1.0 - clamp)
    terms = -(c * np.log(p) + (1.0 - c) * np.log1p(-p))
    return _reduce(terms, c.size, reduction)


def total_loss(regression: Mapping[int, float], certainty: Mapping[int, float], lam: float = 0.01) -> float:
    """``sum_l (L_r^l + lam * L_c^l)`` over pyramid levels keyed by stride."""
    if set(regression) != set(certainty):
        raise LevelMismatch(f"regression levels {sorted(regression)} vs certainty levels {sorted(certainty)}")
    return float(sum(regression[s] + lam * certainty[s] for s in sorted(regression)))


def level_losses(
    gt: Mapping[int, MatchField], pred: Mapping[int, MatchField], cfg: LossConfig = LossConfig()
) -> dict:
    """Per-level breakdown and total, ready for a JSON report.

    The ground-truth certainty of each level doubles as the regression mask.
    """
    if set(gt) != set(pred):
        raise LevelMismatch(f"gt levels {sorted(gt)} vs predicted levels {sorted(pred)}")
    reg, cert = {}, {}
    for s in sorted(gt):
        mask = gt[s].certainty > 0.5
        reg[s] = regression_loss(gt[s], pred[s], mask, cfg.signed_cosine, cfg.reduction)
        cert[s] = certainty_loss(mask, pred[s].certainty, cfg.clamp, cfg.reduction)
    return {
        "levels": {str(s): {"regression": reg[s], "certainty": cert[s]} for s in sorted(gt)},
        "lambda": cfg.lam,
        "total": total_loss(reg, cert, cfg.lam),
    }


def regression_loss_grad(gt, theta, phi, mask, signed: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed regression loss w.r.t. predicted (theta, phi)."""
    S = _as_dirs(gt)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    d_theta = np.stack([ct * cp, np.zeros_like(theta), -st * cp], axis=-1)
    d_phi = np.stack([-st * sp, cp, -ct * sp], axis=-1)
    weight = -mask
    if not signed:
        cos = np.einsum("...i,...i->...", S, sphere.sph_to_cart(theta, phi))
        weight = weight * np.sign(cos)
    return (
        weight * np.einsum("...i,...i->...", S, d_theta),
        weight * np.einsum("...i,...i->...", S, d_phi),
    )


def certainty_loss_grad(gt_mask, pred_c, clamp: float = PROB_CLAMP) -> np.ndarray:
    """Gradient of the summed certainty loss w.r.t. ``pred_c`` (zero where clamped)."""
    c = np.asarray(gt_mask, dtype=np.float64)
    p = np.asarray(pred_c, dtype=np.float64)
    inside = (p > clamp) & (p < 1.0 - clamp)
    q = np.clip(p, clamp, 1.0 - clamp)
    return np.where(inside, -(c / q) + (1.0 - c) / (1.0 - q), 0.0)


def finite_diff_gradcheck(
    loss_fn: Callable[[np.ndarray], float],
    point,
    analytic_grad,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    ``analytic_grad`` is either an array shaped like ``point`` or a callable
    returning one. The relative error of each coordinate is
    ``|num - ana| / max(|num|, |ana|, floor)``.
    """
    x = np.array(point, dtype=np.float64)
    ana = np.asarray(analytic_grad(x) if callable(analytic_grad) else analytic_grad, dtype=np.float64)
    if ana.shape != x.shape:
        raise DimensionMismatch(f"gradient {ana.shape} does not match point {x.shape}")
    flat = x.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(x)
        flat[i] = orig - h
        down = loss_fn(x)
        flat[i] = orig
        num[i] = (up - down) / (2.0 * h)
    a = ana.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(num), np.abs(a)), floor)
    return float(np.max(np.abs(num - a) / denom)) if flat.size else 0.0
