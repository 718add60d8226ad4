"""Embedded invariant suites run by ``erpmatch selftest``.

Functions are looked up through their modules at call time so a patched
implementation is what gets tested.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import objectives, pose, sphere, ssam
from .frame import PoseSE3


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)


def _roundtrip(rng, n: int = 100_000) -> float:
    theta = rng.uniform(-np.pi, np.pi, n)
    phi = rng.uniform(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6, n)
    S = sphere.sph_to_cart(theta, phi)
    back = sphere.cart_to_sph(S)
    err_angles = max(np.max(np.abs(sphere.wrap_angle(back.theta - theta))), np.max(np.abs(back.phi - phi)))
    # independent reference for the forward map: +y up, theta measured from +z toward +x
    ref = np.stack([np.sin(theta) * np.cos(phi), np.sin(phi), np.cos(theta) * np.cos(phi)], axis=-1)
    return float(max(err_angles, np.max(np.abs(S - ref))))


def _kernel_psd(rng, trials: int = 20, n: int = 50) -> float:
    worst = 0.0
    cfg = ssam.GpConfig()
    for _ in range(trials):
        F = rng.normal(size=(n, 16))
        K = ssam.kernel_matrix(F, F, cfg.tau, cfg.epsilon)
        sym = np.max(np.abs(K - K.T))
        lam = np.linalg.eigvalsh(K + cfg.sigma_n**2 * np.eye(n)).min()
        worst = max(worst, sym, 0.0 if lam > 0 else 1.0, float(np.max(K) > 1.0))
    return worst


def _gradcheck(rng) -> float:
    shape = (4, 5)
    gt = sphere.sph_to_cart(rng.uniform(-3, 3, shape), rng.uniform(-1.4, 1.4, shape))
    mask = rng.random(shape) < 0.7
    x0 = np.stack([rng.uniform(-3, 3, shape), rng.uniform(-1.4, 1.4, shape)])

    def loss(x):
        return objectives.regression_loss(gt, sphere.sph_to_cart(x[0], x[1]), mask)

    def grad(x):
        return np.stack(objectives.regression_loss_grad(gt, x[0], x[1], mask))

    c = (rng.random(shape) < 0.5).astype(float)
    p0 = rng.uniform(0.05, 0.95, shape)
    err_c = objectives.finite_diff_gradcheck(lambda p: objectives.certainty_loss(c, p), p0,
                                             objectives.certainty_loss_grad(c, p0))
    return max(objectives.finite_diff_gradcheck(loss, x0, grad), err_c)


def _eight_point(rng) -> float:
    R = sphere.rodrigues(rng.normal(0, 0.4, 3))
    t = rng.normal(size=3)
    X = rng.normal(size=(100, 3)) * 3.0
    c = pose.correspondences_from_points(X, PoseSE3(R, t))
    E = pose.eight_point_spherical(c)
    return float(np.max(np.abs(E - pose.RelativePose(R, t).essential())))


SUITES = (
    ("coordinate round-trip", _roundtrip, 1e-9),
    ("kernel symmetric / PSD", _kernel_psd, 1e-12),
    ("loss gradcheck", _gradcheck, 1e-4),
    ("8-point oracle", _eight_point, 1e-6),
)


def run_selftest(seed: int = 0) -> list[SuiteResult]:
    results = []
    for name, fn, tol in SUITES:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            err = fn(rng)
        except Exception:  # a crash is a failed suite, not a crashed report
            err = float("inf")
        results.append(SuiteResult(name, err, tol, time.perf_counter() - t0))
    return results


def format_report(results: list[SuiteResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'suite'.ljust(width)}  status  max error    tolerance"]
    for r in results:
        lines.append(
            f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.max_error:<11.3e}  {r.tolerance:.0e}"
        )
    return "\n".join(lines)
