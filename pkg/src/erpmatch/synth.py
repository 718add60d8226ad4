"""Analytic raycaster for procedurally textured scenes.

Scenes are built from spheres, axis-aligned boxes and planes. Spheres and
boxes are either solid (seen from outside) or hollow shells with a wall
thickness (a room: seen from inside, and from outside as an opaque block).
Textures are solid 3D functions of the hit point, so every view of a
surface sees the same pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import sphere
from .errors import CameraInsideGeometry
from .frame import DepthMap, ErpImage, Frame, MatchField, PoseSE3, ground_truth_matches, overlap_ratio
from .sphere import ErpGridSpec

CLEARANCE = 1e-4
_EPS_T = 1e-9


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Texture(_Model):
    kind: Literal["noise", "checker", "stripes", "flat"] = "noise"
    frequency: float = Field(2.0, gt=0, description="base spatial frequency, cycles per meter")
    octaves: int = Field(4, ge=1, le=10)
    persistence: float = Field(0.6, gt=0, le=1)
    contrast: float = Field(1.0, ge=0, le=1)
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0


class SpherePrim(_Model):
    type: Literal["sphere"] = "sphere"
    center: tuple[float, float, float]
    radius: float = Field(gt=0)
    hollow: bool = False
    thickness: float = Field(0.2, gt=0)
    texture: Texture = Texture()


class BoxPrim(_Model):
    type: Literal["box"] = "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    hollow: bool = False
    thickness: float = Field(0.2, gt=0)
    texture: Texture = Texture()


class PlanePrim(_Model):
    type: Literal["plane"] = "plane"
    normal: tuple[float, float, float]
    offset: float = Field(description="plane is {x : normal . x = offset}")
    texture: Texture = Texture()


Primitive = Annotated[Union[SpherePrim, BoxPrim, PlanePrim], Field(discriminator="type")]


class SceneSpec(_Model):
    primitives: list[Primitive] = Field(min_length=1)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0


# ---------------------------------------------------------------------------
# intersections: each returns (t_near, t_far) of the solid interval, inf on miss
# ---------------------------------------------------------------------------


def _sphere_interval(origin, dirs, center, radius):
    oc = origin - np.asarray(center)
    b = dirs @ oc
    cc = oc @ oc - radius * radius
    disc = b * b - cc
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t1 = np.where(hit, -b - root, np.inf)
    t2 = np.where(hit, -b + root, np.inf)
    return t1, t2


def _box_interval(origin, dirs, center, size):
    lo = np.asarray(center) - 0.5 * np.asarray(size)
    hi = np.asarray(center) + 0.5 * np.asarray(size)
    # zero direction components give +-inf slab bounds, which is the right limit
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origin) * inv
        tb = (hi - origin) * inv
    t1 = np.minimum(ta, tb).max(axis=-1)
    t2 = np.maximum(ta, tb).min(axis=-1)
    hit = t1 <= t2
    return np.where(hit, t1, np.inf), np.where(hit, t2, np.inf)


def _interval(prim, origin, dirs, grow: float = 0.0):
    if isinstance(prim, SpherePrim):
        return _sphere_interval(origin, dirs, prim.center, prim.radius + grow)
    return _box_interval(origin, dirs, prim.center, np.asarray(prim.size) + 2.0 * grow)


def _inside(prim, point, grow: float = 0.0) -> bool:
    p = np.asarray(point, dtype=np.float64)
    if isinstance(prim, SpherePrim):
        return np.linalg.norm(p - prim.center) < prim.radius + grow
    half = 0.5 * np.asarray(prim.size) + grow
    return bool(np.all(np.abs(p - prim.center) < half))


def _surface_distance(prim, point) -> float:
    p = np.asarray(point, dtype=np.float64)
    if isinstance(prim, PlanePrim):
        n = np.asarray(prim.normal) / np.linalg.norm(prim.normal)
        return abs(n @ p - prim.offset / np.linalg.norm(prim.normal))
    if isinstance(prim, SpherePrim):
        return abs(np.linalg.norm(p - prim.center) - prim.radius)
    q = np.abs(p - prim.center) - 0.5 * np.asarray(prim.size)
    outside = np.linalg.norm(np.maximum(q, 0.0))
    return float(outside if outside > 0 else -q.max())


def _first_hit(prim, origin, dirs):
    """Distance to the first visible surface of ``prim`` along each ray."""
    if isinstance(prim, PlanePrim):
        n = np.asarray(prim.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (prim.offset - n @ origin) / denom
        return np.where((denom != 0) & (t > _EPS_T), t, np.inf)
    if prim.hollow and _inside(prim, origin):
        _, t_exit = _interval(prim, origin, dirs)
        return np.where(t_exit > _EPS_T, t_exit, np.inf)
    grow = prim.thickness if prim.hollow else 0.0
    t_in, _ = _interval(prim, origin, dirs, grow)
    return np.where(t_in > _EPS_T, t_in, np.inf)


def _grown(prim):
    if isinstance(prim, SpherePrim):
        return prim.model_copy(update={"radius": prim.radius + prim.thickness})
    return prim.model_copy(update={"size": tuple(np.asarray(prim.size) + 2 * prim.thickness)})


def check_camera(scene: SceneSpec, center) -> None:
    for i, prim in enumerate(scene.primitives):
        surfaces = [prim]
        if isinstance(prim, PlanePrim):
            blocked = False
        elif prim.hollow:
            outer = _grown(prim)
            blocked = _inside(outer, center) and not _inside(prim, center)
            surfaces.append(outer)
        else:
            blocked = _inside(prim, center)
        if blocked or min(_surface_distance(s, center) for s in surfaces) < CLEARANCE:
            raise CameraInsideGeometry(f"camera at {tuple(center)} is inside or on primitive {i}")


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------


def _perm_table(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    return np.concatenate([perm, perm]), rng.random(256)


def _value_noise(points, seed: int) -> np.ndarray:
    perm, values = _perm_table(seed)
    base = np.floor(points)
    frac = points - base
    i = base.astype(np.int64) & 255
    s = frac * frac * (3.0 - 2.0 * frac)

    def lattice(dx, dy, dz):
        h = perm[perm[perm[(i[:, 0] + dx) & 255] + ((i[:, 1] + dy) & 255)] + ((i[:, 2] + dz) & 255)]
        return values[h]

    out = 0.0
    for dx in (0, 1):
        wx = s[:, 0] if dx else 1.0 - s[:, 0]
        for dy in (0, 1):
            wy = s[:, 1] if dy else 1.0 - s[:, 1]
            for dz in (0, 1):
                wz = s[:, 2] if dz else 1.0 - s[:, 2]
                out = out + wx * wy * wz * lattice(dx, dy, dz)
    return out


def _shade(tex: Texture, points, normals, scene_seed: int) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((0, 3))
    seed = (scene_seed * 1_000_003 + tex.seed) % (2**32)
    f = tex.frequency
    if tex.kind == "noise":
        total, amp, norm = 0.0, 1.0, 0.0
        for octave in range(tex.octaves):
            # offset each octave so lattice planes do not line up
            total = total + amp * _value_noise(points * f * 2**octave + 17.123 * octave, seed + octave)
            norm += amp
            amp *= tex.persistence
        value = total / norm
    elif tex.kind == "checker":
        cells = np.floor(points * f).astype(np.int64).sum(axis=1)
        value = (cells & 1).astype(np.float64)
    elif tex.kind == "stripes":
        # phase depends on the dominant normal axis so adjacent faces differ
        axis = np.argmax(np.abs(normals), axis=1)
        phase = np.array([0.0, 2.1, 4.2])[axis] + seed % 7
        coord = points[np.arange(len(points)), (axis + 1) % 3]
        value = 0.5 + 0.5 * np.sin(2 * np.pi * f * coord + phase)
    else:
        value = np.full(len(points), 0.5)
    value = 0.5 + tex.contrast * (value - 0.5)
    return np.clip(value[:, None] * np.asarray(tex.color), 0.0, 1.0)


def _normals(prim, points) -> np.ndarray:
    if isinstance(prim, PlanePrim):
        n = np.asarray(prim.normal, dtype=np.float64)
        return np.broadcast_to(n / np.linalg.norm(n), points.shape)
    d = points - np.asarray(prim.center)
    if isinstance(prim, SpherePrim):
        return sphere.normalize(d)
    scaled = np.abs(d) / (0.5 * np.asarray(prim.size))
    out = np.zeros_like(d)
    axis = np.argmax(scaled, axis=1)
    out[np.arange(len(d)), axis] = np.sign(d[np.arange(len(d)), axis])
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def cast_rays(scene: SceneSpec, origin, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit distance and primitive index per world-space unit ray.

    Misses get distance ``inf`` and index -1.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _first_hit(prim, origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, i, which)
    return best, which


def shade_hits(scene: SceneSpec, origin, dirs, t, which) -> np.ndarray:
    colors = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(dirs), 3)).copy()
    for i, prim in enumerate(scene.primitives):
        sel = which == i
        if not np.any(sel):
            continue
        pts = origin + dirs[sel] * t[sel, None]
        colors[sel] = _shade(prim.texture, pts, _normals(prim, pts), scene.seed)
    return colors


def raycast_erp(
    scene: SceneSpec, pose: PoseSE3, grid: ErpGridSpec, supersample: int = 1
) -> tuple[ErpImage, DepthMap]:
    """Render an ERP image and radial depth map from ``pose``.

    ``supersample`` > 1 averages an n x n grid of sub-pixel rays for the
    image (depth always comes from the pixel-center ray).

    Raises:
        CameraInsideGeometry: camera inside a solid or within 1e-4 m of a surface.
    """
    check_camera(scene, pose.translation)
    origin = pose.translation
    rays = grid.rays().reshape(-1, 3) @ pose.rotation.T
    t, which = cast_rays(scene, origin, rays)
    valid = np.isfinite(t)
    depth = DepthMap(np.where(valid, t, np.nan).reshape(grid.shape), valid.reshape(grid.shape))
    if supersample <= 1:
        colors = shade_hits(scene, origin, rays, t, which)
    else:
        cols, rows = grid.pixel_centers()
        colors = np.zeros((rays.shape[0], 3))
        offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
        for dr in offsets:
            for dc in offsets:
                sub = sphere.sph_to_cart(
                    *sphere.pixel_to_sph(sphere.PixelCoord(cols + dc, rows + dr), grid)
                ).reshape(-1, 3) @ pose.rotation.T
                ts, ws = cast_rays(scene, origin, sub)
                colors += shade_hits(scene, origin, sub, ts, ws)
        colors /= supersample**2
    return ErpImage(colors.reshape(grid.height, grid.width, 3)), depth


def default_room_scene(seed: int = 0, texture: Optional[Texture] = None) -> SceneSpec:
    """A 4 x 3 x 4 m textured room with a few solid objects; camera region at the origin."""
    rng = np.random.default_rng(seed)
    base = texture or Texture(kind="noise", frequency=0.5, octaves=7, persistence=0.6)

    def tex(k):
        tint = tuple(float(v) for v in 0.55 + 0.45 * rng.random(3))
        return base.model_copy(update={"seed": base.seed + 101 * k, "color": tint})

    prims = [BoxPrim(center=(0.0, 0.0, 0.0), size=(4.0, 3.0, 4.0), hollow=True, texture=tex(0))]
    for k in range(1, 4):
        ang = 2 * np.pi * (k / 3.0) + rng.uniform(-0.4, 0.4)
        dist = rng.uniform(1.3, 1.6)
        c = (dist * np.sin(ang), rng.uniform(-1.1, -0.6), dist * np.cos(ang))
        if k % 2:
            prims.append(SpherePrim(center=c, radius=float(rng.uniform(0.25, 0.4)), texture=tex(k)))
        else:
            s = float(rng.uniform(0.3, 0.5))
            prims.append(BoxPrim(center=c, size=(s, float(rng.uniform(0.5, 0.9)), s), texture=tex(k)))
    return SceneSpec(primitives=prims, seed=seed)


@dataclass(frozen=True)
class SyntheticPair:
    frame_A: Frame
    frame_B: Frame
    gt: MatchField
    overlap: float


def pair_poses(baseline: float, rotation: float, seed: int, tilt: float = 0.0,
               center=(0.0, 0.0, 0.0)) -> tuple[PoseSE3, PoseSE3]:
    """Pose A at ``center``; B displaced by ``baseline`` meters and yawed by ``rotation``.

    The translation direction is drawn from ``seed`` (mostly horizontal).
    ``tilt`` adds a rotation of that many radians about a random horizontal axis.
    """
    if baseline < 0:
        raise ValueError("baseline must be non-negative")
    rng = np.random.default_rng(seed)
    az = rng.uniform(-np.pi, np.pi)
    el = rng.uniform(-0.3, 0.3)
    direction = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    R = sphere.azimuth_rotation(rotation)
    if tilt:
        axis_az = rng.uniform(-np.pi, np.pi)
        R = sphere.rodrigues(tilt * np.array([np.cos(axis_az), 0.0, np.sin(axis_az)])) @ R
    c = np.asarray(center, dtype=np.float64)
    return PoseSE3(np.eye(3), c), PoseSE3(R, c + baseline * direction)


def make_pair(
    scene: SceneSpec,
    baseline: float,
    rotation: float,
    grid: ErpGridSpec,
    seed: int = 0,
    tilt: float = 0.0,
    supersample: int = 1,
) -> SyntheticPair:
    """Render two frames related by the given motion plus their GT matches."""
    pose_A, pose_B = pair_poses(baseline, rotation, seed, tilt)
    img_A, dep_A = raycast_erp(scene, pose_A, grid, supersample)
    img_B, dep_B = raycast_erp(scene, pose_B, grid, supersample)
    frame_A = Frame(img_A, dep_A, pose_A, "A")
    frame_B = Frame(img_B, dep_B, pose_B, "B")
    gt, _ = ground_truth_matches(dep_A, pose_A, dep_B, pose_B)
    return SyntheticPair(frame_A, frame_B, gt, overlap_ratio(frame_A, frame_B))


def ground_truth_pyramid(
    scene: SceneSpec, pose_A: PoseSE3, depth_B: DepthMap, pose_B: PoseSE3, grid: ErpGridSpec, strides
) -> dict[int, MatchField]:
    """GT match fields from A's cells at each stride into B's full-resolution depth.

    A is re-rendered at every coarser grid so each cell's ray is its own
    center ray rather than an average of finer pixels.
    """
    out = {}
    for s in strides:
        _, dep_A = raycast_erp(scene, pose_A, grid.downsample(s))
        out[s] = ground_truth_matches(dep_A, pose_A, depth_B, pose_B)[0]
    return out
