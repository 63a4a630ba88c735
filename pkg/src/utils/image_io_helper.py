"""
Readers and writers for the bit-exact interchange formats used by the CLI.

- PPM (``P6``, maxval 255) for RGB images, PGM (``P5``) for masks and gray images
- PFM (``Pf``, little-endian, scale -1.0) for float depth maps, rows stored bottom-up
- a plain-text ``key = value`` sidecar for intrinsics and poses
"""

import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from src.domd_bench.errors import InputValidationError
from src.domd_bench.geometry import CameraIntrinsics, RigidPose

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim == 3 and rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    height, width = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(to_bytes(rgb).tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype == bool:
        gray = gray.astype(np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    height, width = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(to_bytes(gray).tobytes())


def _read_netpbm(path: PathLike, magic: bytes) -> Tuple[np.ndarray, int, int]:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise InputValidationError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InputValidationError(f"{path}: only maxval 255 is supported")
    return np.frombuffer(data[pos + 1 :], dtype=np.uint8), width, height


def read_ppm(path: PathLike) -> np.ndarray:
    raw, width, height = _read_netpbm(path, b"P6")
    return raw[: width * height * 3].reshape(height, width, 3) / 255.0


def read_pgm(path: PathLike) -> np.ndarray:
    raw, width, height = _read_netpbm(path, b"P5")
    return raw[: width * height].reshape(height, width) / 255.0


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    height, width = values.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise InputValidationError(f"{path}: expected a single-channel PFM file")
        width, height = (int(t) for t in f.readline().split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        values = np.frombuffer(f.read(width * height * 4), dtype=dtype)
    return values.reshape(height, width)[::-1].astype(np.float64)


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def write_camera_sidecar(
    path: PathLike, intr: CameraIntrinsics, poses: Dict[str, RigidPose]
) -> None:
    lines = [
        f"fx = {intr.fx!r}",
        f"fy = {intr.fy!r}",
        f"cx = {intr.cx!r}",
        f"cy = {intr.cy!r}",
        f"width = {intr.width}",
        f"height = {intr.height}",
    ]
    for name, pose in poses.items():
        lines.append(f"{name}.rotation = {_format_floats(pose.rotation)}")
        lines.append(f"{name}.translation = {_format_floats(pose.translation)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_camera_sidecar(path: PathLike) -> Tuple[CameraIntrinsics, Dict[str, RigidPose]]:
    entries = {}
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InputValidationError(f"{path}:{number}: expected 'key = value'")
            entries[key.strip()] = value.strip()
    try:
        intr = CameraIntrinsics(
            float(entries["fx"]),
            float(entries["fy"]),
            float(entries["cx"]),
            float(entries["cy"]),
            int(entries["width"]),
            int(entries["height"]),
        )
        poses = {}
        for key in entries:
            if key.endswith(".rotation"):
                name = key[: -len(".rotation")]
                rotation = np.array([float(v) for v in entries[key].split()])
                translation = np.array([float(v) for v in entries[f"{name}.translation"].split()])
                poses[name] = RigidPose(rotation.reshape(3, 3), translation)
    except KeyError as e:
        raise InputValidationError(f"{path}: missing key {e.args[0]!r}") from e
    return intr, poses
