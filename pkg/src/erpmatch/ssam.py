"""Coarse global matching on the sphere.

Cells of frame B are embedded with a cosine positional embedding of their
3D ray, a GP with an exponential-cosine kernel over features regresses
those embeddings at frame A's cells, and a decoder turns the regressed
embeddings back into directions on B's sphere plus a certainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
import scipy.linalg

from . import sphere
from .errors import DimensionMismatch, SolveFailure
from .features import FeaturePyramid
from .frame import MatchField
from .sphere import ErpGridSpec

JITTER_LADDER = (1e-8, 1e-6, 1e-4)
COARSE_STRIDE = 32


@dataclass(frozen=True)
class GpConfig:
    tau: float = 5.0
    epsilon: float = 1e-6
    sigma_n: float = 0.1
    embed_dim: int = 160

    def __post_init__(self):
        if self.tau <= 0 or self.epsilon <= 0 or self.sigma_n <= 0:
            raise ValueError("tau, epsilon and sigma_n must be positive")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")


@dataclass(frozen=True)
class EmbeddingParams:
    """Weights (D, 3) and bias (D,) of the cosine positional embedding."""

    weights: np.ndarray
    bias: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != 3 or b.shape != (W.shape[0],):
            raise DimensionMismatch(f"embedding weights {W.shape} and bias {b.shape} disagree")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("embedding parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def random(
        cls,
        embed_dim: int = 160,
        seed: int = 42,
        scale: float = 2.0,
        azimuth_orbit: Optional[int] = None,
    ) -> "EmbeddingParams":
        """Gaussian weights (std ``scale``) and uniform [0, 2pi) biases.

        With ``azimuth_orbit = n`` the rows are generated as n azimuthal
        rotations of ``embed_dim // n`` base rows sharing one bias, so a
        rotation by 2*pi/n about the gravity axis permutes the embedding
        coordinates. Each row is still marginally Gaussian.
        """
        rng = np.random.default_rng(seed)
        if not azimuth_orbit:
            return cls(rng.normal(0.0, scale, (embed_dim, 3)), rng.uniform(0, 2 * np.pi, embed_dim), seed)
        n = int(azimuth_orbit)
        if embed_dim % n:
            raise ValueError(f"embed_dim {embed_dim} must be a multiple of the orbit size {n}")
        m = embed_dim // n
        base = rng.normal(0.0, scale, (m, 3))
        bias = rng.uniform(0, 2 * np.pi, m)
        rots = np.stack([sphere.azimuth_rotation(2 * np.pi * k / n) for k in range(n)])
        W = np.einsum("jc,kcd->jkd", base, rots).reshape(embed_dim, 3)
        return cls(W, np.repeat(bias, n), seed)


def spherical_positional_embedding(rays, params: EmbeddingParams) -> np.ndarray:
    """``cos(W S + b)`` for unit rays S of shape (..., 3)."""
    return np.cos(np.asarray(rays) @ params.weights.T + params.bias)


def grid_embedding(grid: ErpGridSpec, params: EmbeddingParams) -> np.ndarray:
    return spherical_positional_embedding(grid.rays(), params)


def kernel_matrix(F1, F2, tau: float = 5.0, epsilon: float = 1e-6) -> np.ndarray:
    """Exponential cosine-similarity kernel between rows of ``F1`` and ``F2``.

    ``K = exp(tau * (f1.f2 / sqrt(|f1|^2 |f2|^2 + eps) - 1))``; the guard makes
    zero descriptors safe (they get exp(-tau) against everything).
    """
    F1 = np.asarray(F1, dtype=np.float64)
    F2 = np.asarray(F2, dtype=np.float64)
    dots = F1 @ F2.T
    n1 = np.einsum("ij,ij->i", F1, F1)
    n2 = np.einsum("ij,ij->i", F2, F2)
    return np.exp(tau * (dots / np.sqrt(np.outer(n1, n2) + epsilon) - 1.0))


def _cholesky_with_jitter(A: np.ndarray):
    try:
        return scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        pass
    for jitter in JITTER_LADDER:
        try:
            return scipy.linalg.cho_factor(A + jitter * np.eye(len(A)), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise SolveFailure("kernel system is not positive definite even after jitter")


def gp_posterior_mean(f_A, f_B, chi_B, cfg: GpConfig = GpConfig()) -> np.ndarray:
    """``K_AB (K_BB + sigma_n^2 I)^-1 chi_B`` via a Cholesky solve.

    Feature grids may be (h, w, d) or (n, d); the result follows A's leading
    shape with the embedding dimension last.
    """
    f_A = np.asarray(f_A, dtype=np.float64)
    f_B = np.asarray(f_B, dtype=np.float64)
    chi_B = np.asarray(chi_B, dtype=np.float64)
    out_shape = f_A.shape[:-1] + (chi_B.shape[-1],)
    FA = f_A.reshape(-1, f_A.shape[-1])
    FB = f_B.reshape(-1, f_B.shape[-1])
    X = chi_B.reshape(-1, chi_B.shape[-1])
    if FB.shape[0] != X.shape[0] or FA.shape[1] != FB.shape[1]:
        raise DimensionMismatch("feature and embedding grids disagree")
    K_BB = kernel_matrix(FB, FB, cfg.tau, cfg.epsilon)
    K_AB = kernel_matrix(FA, FB, cfg.tau, cfg.epsilon)
    factor = _cholesky_with_jitter(K_BB + cfg.sigma_n**2 * np.eye(len(K_BB)))
    alpha = scipy.linalg.cho_solve(factor, X)
    return (K_AB @ alpha).reshape(out_shape)


class Decoder(Protocol):
    def __call__(self, mu: np.ndarray, f_A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map (h, w, D) posterior means (and A's coarse features) to
        (h, w, 3) directions and (h, w) raw certainty scores."""
        ...


@dataclass
class EmbeddingInversionDecoder:
    """Nearest B cell in embedding space.

    Certainty is the softmax margin ``p_best - p_second`` over all B cells,
    with logits ``-(|mu - chi|^2 / D) / temperature``. Ties go to the lower
    linear cell index. A's features are not used.
    """

    table: np.ndarray
    directions: np.ndarray
    temperature: float = 0.02

    @classmethod
    def for_grid(cls, grid: ErpGridSpec, params: EmbeddingParams, temperature: float = 0.02):
        rays = grid.rays().reshape(-1, 3)
        return cls(spherical_positional_embedding(rays, params), rays, temperature)

    def distances(self, mu: np.ndarray) -> np.ndarray:
        M = mu.reshape(-1, mu.shape[-1])
        d2 = (
            np.einsum("ij,ij->i", M, M)[:, None]
            - 2.0 * M @ self.table.T
            + np.einsum("ij,ij->i", self.table, self.table)[None, :]
        )
        return np.maximum(d2, 0.0)

    def __call__(self, mu, f_A=None):
        mu = np.asarray(mu, dtype=np.float64)
        d2 = self.distances(mu)
        best = np.argmin(d2, axis=1)
        logits = -(d2 / self.table.shape[1]) / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        top2 = np.sort(p, axis=1)[:, -2:] if p.shape[1] > 1 else np.hstack([np.zeros_like(p), p])
        certainty = top2[:, 1] - top2[:, 0]
        shape = mu.shape[:-1]
        return self.directions[best].reshape(shape + (3,)), certainty.reshape(shape)


def decode_coarse(mu, f_A_coarse, decoder: Decoder) -> MatchField:
    mu = np.asarray(mu)
    if mu.shape[:-1] != np.asarray(f_A_coarse).shape[:-1]:
        raise DimensionMismatch("posterior mean and coarse features disagree in shape")
    directions, raw = decoder(mu, f_A_coarse)
    directions = sphere.normalize(directions)
    return MatchField(directions, np.clip(np.nan_to_num(raw, nan=0.0), 0.0, 1.0))


@dataclass
class CoarseMatcher:
    """GP regression of B's positional embedding at A's coarse cells."""

    gp: GpConfig = GpConfig()
    embedding: Optional[EmbeddingParams] = None
    embedding_seed: int = 42
    embedding_scale: float = 2.0
    equivariant_embedding: bool = True
    decoder_temperature: float = 0.02
    stride: int = COARSE_STRIDE

    def params_for(self, grid: ErpGridSpec) -> EmbeddingParams:
        if self.embedding is not None:
            return self.embedding
        orbit = grid.width if self.equivariant_embedding else None
        dim = self.gp.embed_dim
        if orbit and dim % orbit:
            dim += orbit - dim % orbit
        return EmbeddingParams.random(dim, self.embedding_seed, self.embedding_scale, orbit)

    def match(self, pyr_A: FeaturePyramid, pyr_B: FeaturePyramid, decoder: Optional[Decoder] = None) -> MatchField:
        f_A = pyr_A[self.stride]
        f_B = pyr_B[self.stride]
        grid = ErpGridSpec(f_B.shape[1], f_B.shape[0])
        params = self.params_for(grid)
        chi_B = grid_embedding(grid, params)
        mu = gp_posterior_mean(f_A, f_B, chi_B, self.gp)
        if decoder is None:
            decoder = EmbeddingInversionDecoder.for_grid(grid, params, self.decoder_temperature)
        return decode_coarse(mu, f_A, decoder)
