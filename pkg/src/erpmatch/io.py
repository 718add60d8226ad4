"""File formats: PNG images, PFM depth, pose text, pair lists, PLY clouds.

Frame directory layout for a frame called ``name``::

    name.png          image (8- or 16-bit)
    name.pfm          radial depth in meters (little-endian PFM)
    name.valid.png    depth validity mask (nonzero = valid)
    name.pose.txt     12 numbers, row-major 3x4 [R|t], camera-to-world
"""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .errors import DataError, DimensionMismatch, MalformedFile
from .frame import DepthMap, ErpImage, Frame, MatchField, PoseSE3

PAIR_HEADER = ["frameA", "frameB", "overlap"]


def _check_erp(width: int, height: int, path) -> None:
    if width != 2 * height or width < 2:
        raise DimensionMismatch(f"{path}: ERP images need width == 2*height, got {width}x{height}")


def read_png(path) -> np.ndarray:
    """Read a PNG into float64 (H, W, C) in [0, 1]."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                if mode not in ("L", "RGB", "RGBA"):
                    im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_png(path, data, bits: int = 8) -> None:
    data = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if bits == 16:
        if data.ndim != 2:
            raise ValueError("16-bit output supports single-channel data only")
        Image.fromarray(np.round(data * 65535.0).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(data * 255.0).astype(np.uint8)).save(path)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file, returning rows top-to-bottom as float32."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline().strip()
            if header not in (b"Pf", b"PF"):
                raise MalformedFile(f"{path}: not a PFM file")
            channels = 3 if header == b"PF" else 1
            dims = fh.readline()
            m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
            if not m:
                raise MalformedFile(f"{path}: bad PFM dimensions line")
            width, height = int(m.group(1)), int(m.group(2))
            scale = float(fh.readline().strip())
            dtype = "<f4" if scale < 0 else ">f4"
            raw = np.frombuffer(fh.read(), dtype=dtype)
    except (OSError, ValueError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    expected = width * height * channels
    if raw.size != expected:
        raise MalformedFile(f"{path}: expected {expected} samples, found {raw.size}")
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(raw.reshape(shape)).astype(np.float32)


def write_pfm(path, data) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    elif data.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3) data, got {data.shape}")
    height, width = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{width} {height}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def read_pose(path) -> PoseSE3:
    try:
        values = np.array(Path(path).read_text().split(), dtype=np.float64)
    except ValueError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if values.size != 12:
        raise MalformedFile(f"{path}: pose needs 12 numbers, found {values.size}")
    M = values.reshape(3, 4)
    try:
        return PoseSE3(M[:, :3], M[:, 3])
    except (ValueError, DataError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc


def write_pose(path, pose: PoseSE3) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in pose.as_matrix()]
    Path(path).write_text("\n".join(rows) + "\n")


def frame_paths(directory, name: str) -> dict[str, Path]:
    base = Path(directory)
    return {
        "image": base / f"{name}.png",
        "depth": base / f"{name}.pfm",
        "valid": base / f"{name}.valid.png",
        "pose": base / f"{name}.pose.txt",
    }


def save_frame(directory, name: str, frame: Frame) -> None:
    paths = frame_paths(directory, name)
    Path(directory).mkdir(parents=True, exist_ok=True)
    if frame.image is not None:
        write_png(paths["image"], frame.image.data)
    if frame.depth is not None:
        write_pfm(paths["depth"], frame.depth.filled(0.0))
        write_png(paths["valid"], frame.depth.valid.astype(np.float64))
    if frame.pose is not None:
        write_pose(paths["pose"], frame.pose)


def load_frame(directory, name: str) -> Frame:
    """Load a frame; depth and pose are optional, the image is required."""
    paths = frame_paths(directory, name)
    if not paths["image"].exists():
        raise MalformedFile(f"missing image {paths['image']}")
    data = read_png(paths["image"])
    _check_erp(data.shape[1], data.shape[0], paths["image"])
    image = ErpImage(data)
    depth = None
    if paths["depth"].exists():
        values = read_pfm(paths["depth"]).astype(np.float64)
        if values.ndim != 2:
            raise MalformedFile(f"{paths['depth']}: depth must be single-channel")
        _check_erp(values.shape[1], values.shape[0], paths["depth"])
        if values.shape != image.data.shape[:2]:
            raise DimensionMismatch(f"{paths['depth']}: depth size differs from image")
        valid = None
        if paths["valid"].exists():
            valid = read_png(paths["valid"])[..., 0] > 0
            if valid.shape != values.shape:
                raise DimensionMismatch(f"{paths['valid']}: mask size differs from depth")
        depth = DepthMap(values, valid)
    pose = read_pose(paths["pose"]) if paths["pose"].exists() else None
    return Frame(image, depth, pose, name)


def write_pairs(path, pairs: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PAIR_HEADER)
        for a, b, overlap in pairs:
            writer.writerow([a, b, repr(float(overlap))])


def read_pairs(path) -> list[tuple[str, str, Optional[float]]]:
    out = []
    try:
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0] == PAIR_HEADER[0]:
                    continue
                if len(row) < 2:
                    raise MalformedFile(f"{path}: pair rows need at least two names")
                overlap = float(row[2]) if len(row) > 2 and row[2] != "" else None
                out.append((row[0].strip(), row[1].strip(), overlap))
    except (OSError, ValueError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return out


def write_ply(path, points, colors=None) -> None:
    """ASCII PLY point cloud; ``colors`` in [0, 1] if given."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        colors = np.round(np.clip(np.asarray(colors).reshape(-1, 3), 0, 1) * 255).astype(int)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(points):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if colors is not None:
            row += " {} {} {}".format(*colors[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    try:
        n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
        start = lines.index("end_header") + 1
    except (StopIteration, ValueError) as exc:
        raise MalformedFile(f"{path}: not an ASCII PLY") from exc
    if n == 0:
        return np.zeros((0, 3))
    return np.array([l.split()[:3] for l in lines[start:start + n]], dtype=np.float64)


def save_matchfield(prefix, field: MatchField) -> None:
    """Dump a match field as ``prefix.dirs.pfm`` (x, y, z) and ``prefix.certainty.png``."""
    write_pfm(f"{prefix}.dirs.pfm", field.directions)
    write_png(f"{prefix}.certainty.png", field.certainty, bits=16)


def load_matchfield(prefix) -> MatchField:
    dirs = read_pfm(f"{prefix}.dirs.pfm").astype(np.float64)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    cert = read_png(f"{prefix}.certainty.png")[..., 0]
    return MatchField(dirs, cert)

