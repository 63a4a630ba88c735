"""
Dynamic object motion disentanglement.

A moving object breaks the static-scene assumption of plane-sweep matching: its pixels in
the reference frame sit where the object *was*, not where the camera motion alone would
put it. ``disentangle`` removes the old object appearance from the reference frame and
forward-splats the time-t appearance into it through the depth prior, so the reference
shows the object where a static scene would.

Pixels that belonged to the old object and receive no splat have no source data. They
are painted black and reported in ``OcclusionMasks.occluded``; consumers must consult the
mask, never the pixel value.

    >>> ref = disentangle(I_prev, I_cur, S_prev, S_cur, prior, pose_to_prev, intr)
    >>> ref.masks.occluded.sum()
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from src.domd_bench.errors import InputValidationError, PriorCoverageError
from src.domd_bench.geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageBuffer,
    RigidPose,
    backproject,
    pixel_grid,
    snap_to_centers,
    transform,
)

logger = logging.getLogger(__name__)

CRACK_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class OcclusionMasks:
    """Reference-frame pixels without source data (``occluded``) and their complement."""

    occluded: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        occluded = np.asarray(self.occluded, dtype=bool)
        visible = np.asarray(self.visible, dtype=bool)
        if occluded.shape != visible.shape or np.any(occluded == visible):
            raise InputValidationError("occluded and visible masks must partition the frame")
        object.__setattr__(self, "occluded", occluded)
        object.__setattr__(self, "visible", visible)

    @classmethod
    def empty(cls, height: int, width: int) -> "OcclusionMasks":
        return cls(np.zeros((height, width), bool), np.ones((height, width), bool))

    @classmethod
    def from_occluded(cls, occluded: np.ndarray) -> "OcclusionMasks":
        occluded = np.asarray(occluded, dtype=bool)
        return cls(occluded, ~occluded)


@dataclass(frozen=True, eq=False)
class DisentangledFrame:
    """A reference frame with its dynamic objects moved to where time t puts them.

    ``depth`` holds the reference-frame depth of every repainted pixel and is zero elsewhere.
    """

    image: ImageBuffer
    masks: OcclusionMasks
    repainted: np.ndarray
    depth: np.ndarray

    @classmethod
    def passthrough(cls, image: ImageBuffer) -> "DisentangledFrame":
        """A raw reference frame: nothing repainted, nothing occluded."""
        height, width = image.shape
        return cls(
            image,
            OcclusionMasks.empty(height, width),
            np.zeros((height, width), bool),
            np.zeros((height, width)),
        )


def splat_nearest(
    values: np.ndarray,
    pixels: np.ndarray,
    depth: np.ndarray,
    order: np.ndarray,
    height: int,
    width: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Z-buffered nearest-pixel splat.

    Args:
        values: (N, C) values to splat
        pixels: (N, 2) continuous target coordinates ``(u, v)``
        depth: (N,) target-frame depth used by the z-buffer
        order: (N,) source linear index, breaking depth ties toward the smaller index
        height, width: target resolution

    Returns:
        canvas: (height, width, C) splatted values, zero where nothing landed
        hit: (height, width) mask of pixels that received a splat
    """
    canvas = np.zeros((height, width, values.shape[1]))
    hit = np.zeros((height, width), bool)
    # round half up
    cols = np.floor(pixels[:, 0] + 0.5)
    rows = np.floor(pixels[:, 1] + 0.5)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height) & (depth > 0)
    if not np.any(inside):
        return canvas, hit
    target = rows[inside].astype(np.intp) * width + cols[inside].astype(np.intp)
    ranked = np.lexsort((order[inside], depth[inside], target))
    winners_target, first = np.unique(target[ranked], return_index=True)
    winners = ranked[first]
    canvas.reshape(-1, values.shape[1])[winners_target] = values[inside][winners]
    hit.reshape(-1)[winners_target] = True
    return canvas, hit


def close_cracks(canvas: np.ndarray, hit: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Fill one-pixel pinholes of a splat with the mean of their splatted neighbours."""
    closed = ndimage.binary_closing(hit, structure=CRACK_STRUCTURE)
    cracks = closed & ~hit
    if not np.any(cracks):
        return canvas, hit
    kernel = CRACK_STRUCTURE.astype(np.float64)
    count = ndimage.convolve(hit.astype(np.float64), kernel, mode="constant")
    canvas = canvas.copy()
    for channel in range(canvas.shape[2]):
        total = ndimage.convolve(canvas[..., channel] * hit, kernel, mode="constant")
        canvas[..., channel][cracks] = total[cracks] / count[cracks]
    logger.debug("closed %d splat cracks", int(cracks.sum()))
    return canvas, hit | cracks


def disentangle(
    I_ref: ImageBuffer,
    I_t: ImageBuffer,
    S_ref: np.ndarray,
    S_t: np.ndarray,
    D_pr: DepthMap,
    pose_t_to_ref: RigidPose,
    intr: CameraIntrinsics,
    close_splat_cracks: bool = True,
) -> DisentangledFrame:
    """Replace the dynamic objects of ``I_ref`` with their time-t appearance.

    Args:
        I_ref: reference frame (t-1 or t+1)
        I_t: target frame
        S_ref, S_t: dynamic-object masks of the two frames
        D_pr: depth prior of the target frame, valid on ``S_t``
        pose_t_to_ref: maps time-t camera points into the reference camera
        intr: shared intrinsics
        close_splat_cracks: close one-pixel pinholes left by the splat

    Returns:
        DisentangledFrame with the repainted image, occlusion masks, splat footprint and
        splat depth
    """
    S_ref = np.asarray(S_ref, dtype=bool)
    S_t = np.asarray(S_t, dtype=bool)
    shape = intr.shape
    for name, buffer_shape in (
        ("I_ref", I_ref.shape),
        ("I_t", I_t.shape),
        ("S_ref", S_ref.shape),
        ("S_t", S_t.shape),
        ("D_pr", D_pr.shape),
    ):
        if buffer_shape != shape:
            raise InputValidationError(f"{name} has shape {buffer_shape}, expected {shape}")
    if I_ref.channels != I_t.channels:
        raise InputValidationError("reference and target images differ in channel count")
    uncovered = S_t & ~D_pr.valid
    if np.any(uncovered):
        raise PriorCoverageError(
            f"depth prior is invalid on {int(uncovered.sum())} dynamic-object pixels"
        )

    height, width = shape
    rows, cols = np.nonzero(S_t)
    pixels = pixel_grid(height, width)[rows, cols]
    points = transform(pose_t_to_ref, backproject(pixels, D_pr.depth[rows, cols], intr))
    z = points[:, 2]
    z_safe = np.where(z > 0, z, 1.0)
    projected = np.stack(
        [intr.fx * points[:, 0] / z_safe + intr.cx, intr.fy * points[:, 1] / z_safe + intr.cy],
        axis=-1,
    )
    # depth rides along as an extra channel so cracks get a depth too
    canvas, repainted = splat_nearest(
        np.column_stack([I_t.data[rows, cols], z]),
        snap_to_centers(projected),
        z,
        rows * width + cols,
        height,
        width,
    )
    if close_splat_cracks:
        canvas, repainted = close_cracks(canvas, repainted)

    image = I_ref.data.copy()
    image[S_ref] = 0.0
    image[repainted] = canvas[repainted, :-1]
    occluded = S_ref & ~repainted
    logger.debug(
        "disentangled %d object pixels: %d repainted, %d occluded",
        len(rows),
        int(repainted.sum()),
        int(occluded.sum()),
    )
    return DisentangledFrame(
        ImageBuffer(np.clip(image, 0.0, 1.0)),
        OcclusionMasks.from_occluded(occluded),
        repainted,
        np.where(repainted, canvas[..., -1], 0.0),
    )
