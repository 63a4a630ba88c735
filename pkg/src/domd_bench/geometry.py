"""
Pinhole camera model, rigid transforms and bilinear inverse warping.

Conventions shared by the whole package:

- pixel centers sit at integer coordinates, ``u`` in ``[0, width - 1]`` and ``v`` in
  ``[0, height - 1]``;
- a ``RigidPose`` maps points from a target camera frame into a source camera frame,
  ``X_source = R @ X_target + t``. ``a.compose(b)`` applies ``b`` first;
- images are ``(height, width, channels)`` float arrays with values in ``[0, 1]``.

    >>> intr = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)
    >>> project(np.array([1.0, 0.0, 2.0]), intr)
    (array([100.,  50.]), array(2.))
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.domd_bench.errors import BehindCameraError, InvalidDepthError, ParameterError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-9
# continuous coordinates this close to a pixel center are treated as the center
SNAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(
                f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )
        if self.width < 2 or self.height < 2:
            raise ParameterError(
                f"image must be at least 2x2 pixels, got {self.width}x{self.height}"
            )
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ParameterError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rotation plus translation, mapping target-frame points into a source frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ParameterError("pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise ParameterError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ParameterError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation) -> "RigidPose":
        return cls(np.eye(3), translation)

    @classmethod
    def from_euler(cls, axes: str, angles_deg, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        rotation = Rotation.from_euler(axes, angles_deg, degrees=True).as_matrix()
        return cls(rotation, translation)

    def inverse(self) -> "RigidPose":
        rotation_t = self.rotation.T
        return RigidPose(rotation_t, -rotation_t @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Pose equivalent to applying ``other`` and then ``self``."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        return transform(self, points)

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def allclose(self, other: "RigidPose", atol: float = 1e-9) -> bool:
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Per-pixel intensities in ``[0, 1]``, stored as ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ParameterError(f"image must be HxW, HxWx1 or HxWx3, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("image contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ParameterError(
                f"image values must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def constant(cls, height: int, width: int, value: float, channels: int = 3):
        return cls(np.full((height, width, channels), value, dtype=np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def gray(self) -> np.ndarray:
        return self.data.mean(axis=2)

    def painted(self, mask: np.ndarray, value: float = 0.0) -> "ImageBuffer":
        """Copy with ``mask`` pixels set to ``value`` in every channel."""
        data = self.data.copy()
        data[np.asarray(mask, dtype=bool)] = value
        return ImageBuffer(data)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth along the optical axis with a per-pixel validity flag."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ParameterError(
                f"depth {depth.shape} and validity {valid.shape} must be equal 2-D shapes"
            )
        good = np.isfinite(depth) & (depth > 0)
        if np.any(valid & ~good):
            raise InvalidDepthError("valid pixels must have finite positive depth")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        depth = np.array(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(np.where(valid, depth, 0.0), valid)

    @classmethod
    def constant(cls, height: int, width: int, value: float) -> "DepthMap":
        if not (np.isfinite(value) and value > 0):
            raise InvalidDepthError(f"constant depth must be positive, got {value}")
        return cls(np.full((height, width), float(value)), np.ones((height, width), bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


def project(points, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points to continuous pixel coordinates.

    Args:
        points: array of shape ``(..., 3)`` in meters
        intr: camera intrinsics

    Returns:
        pixels: ``(..., 2)`` array of ``(u, v)``
        depth: ``(...)`` array of z values
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("cannot project a point with non-positive z")
    u = intr.fx * points[..., 0] / z + intr.cx
    v = intr.fy * points[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def backproject(pixels, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Lift continuous pixel coordinates with depth to camera-frame points.

    Args:
        pixels: array of shape ``(..., 2)``
        depth: array broadcastable to ``(...)``, meters along the optical axis
        intr: camera intrinsics

    Returns:
        ``(..., 3)`` array of points in meters
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(np.isfinite(depth) & (depth > 0))):
        raise InvalidDepthError("cannot backproject a non-positive or non-finite depth")
    x = (pixels[..., 0] - intr.cx) / intr.fx * depth
    y = (pixels[..., 1] - intr.cy) / intr.fy * depth
    z = np.broadcast_to(depth, x.shape)
    return np.stack([x, y, z], axis=-1)


def transform(pose: RigidPose, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ pose.rotation.T + pose.translation


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``(height, width, 2)`` array of integer pixel centers as ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def snap_to_centers(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) <= SNAP_TOLERANCE, nearest, coords)


def warp_coordinates(
    target_depth: DepthMap, pose_target_to_source: RigidPose, intr: CameraIntrinsics
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Source-frame coordinates of every target pixel.

    Returns:
        u, v: continuous source coordinates (snapped to centers within tolerance)
        z: source-frame depth
        ok: target depth valid and point in front of the source camera
    """
    height, width = target_depth.shape
    ok = target_depth.valid.copy()
    depth = np.where(ok, target_depth.depth, 1.0)
    points = transform(pose_target_to_source, backproject(pixel_grid(height, width), depth, intr))
    z = points[..., 2]
    ok &= z > 0
    z_safe = np.where(ok, z, 1.0)
    u = intr.fx * points[..., 0] / z_safe + intr.cx
    v = intr.fy * points[..., 1] / z_safe + intr.cy
    return snap_to_centers(u), snap_to_centers(v), z, ok


def bilinear_taps(u: np.ndarray, v: np.ndarray, height: int, width: int):
    """Top-left tap indices and fractional offsets for bilinear sampling.

    The top-left tap is clamped to ``width - 2`` / ``height - 2`` so that samples on the
    last row or column keep all four taps inside the image.

    Returns:
        inside, x0, y0, ax, ay
    """
    inside = (
        np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    )
    us = np.where(inside, u, 0.0)
    vs = np.where(inside, v, 0.0)
    x0 = np.minimum(np.floor(us), width - 2).astype(np.intp)
    y0 = np.minimum(np.floor(vs), height - 2).astype(np.intp)
    return inside, x0, y0, us - x0, vs - y0


def weighted_taps(x0: np.ndarray, y0: np.ndarray, ax: np.ndarray, ay: np.ndarray):
    """The four ``(rows, cols, weight)`` taps of a bilinear sample."""
    return (
        (y0, x0, (1.0 - ax) * (1.0 - ay)),
        (y0, x0 + 1, ax * (1.0 - ay)),
        (y0 + 1, x0, (1.0 - ax) * ay),
        (y0 + 1, x0 + 1, ax * ay),
    )


def sample_bilinear(
    data: np.ndarray, u: np.ndarray, v: np.ndarray, invalid: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``data`` (H, W, C) at continuous coordinates.

    A sample is invalid when it falls outside ``[0, W-1] x [0, H-1]`` or when one of its
    taps with a positive weight is flagged in ``invalid``. Invalid samples are zero.
    """
    height, width = data.shape[:2]
    inside, x0, y0, ax, ay = bilinear_taps(u, v, height, width)
    taps = weighted_taps(x0, y0, ax, ay)
    values = sum(weight[..., None] * data[rows, cols] for rows, cols, weight in taps)

    valid = inside
    if invalid is not None:
        invalid = np.asarray(invalid, dtype=bool)
        touched = np.zeros(inside.shape, dtype=bool)
        for rows, cols, weight in taps:
            touched |= invalid[rows, cols] & (weight > 0)
        valid = inside & ~touched
    values = np.where(valid[..., None], values, 0.0)
    return values, valid


def warp_image(
    source: ImageBuffer,
    target_depth: DepthMap,
    pose_target_to_source: RigidPose,
    intr: CameraIntrinsics,
    source_invalid: Optional[np.ndarray] = None,
) -> Tuple[ImageBuffer, np.ndarray]:
    """Inverse-warp ``source`` into the target view.

    Each target pixel is backprojected with ``target_depth``, moved into the source frame
    and bilinearly sampled. Invalid pixels (outside the source frustum, behind the source
    camera, invalid target depth, or a weighted tap on ``source_invalid``) are zero and
    flagged ``False`` in the returned mask.

    Args:
        source: image seen by the source camera
        target_depth: depth of every target pixel
        pose_target_to_source: maps target-frame points into the source frame
        intr: intrinsics shared by both cameras
        source_invalid: optional (H, W) mask of source pixels without usable data

    Returns:
        warped: ImageBuffer in the target view
        valid: (H, W) boolean mask
    """
    if target_depth.shape != intr.shape or source.shape != intr.shape:
        raise ParameterError(
            f"resolution mismatch: source {source.shape}, depth {target_depth.shape}, "
            f"intrinsics {intr.shape}"
        )
    u, v, _, ok = warp_coordinates(target_depth, pose_target_to_source, intr)
    values, valid = sample_bilinear(source.data, u, v, source_invalid)
    valid &= ok
    values = np.where(valid[..., None], np.clip(values, 0.0, 1.0), 0.0)
    return ImageBuffer(values), valid
