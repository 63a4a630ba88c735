"""
Photometric, occlusion-aware, cycle-consistency and smoothness losses.

Error maps are ``(H, W)`` float arrays. Occlusion masks passed to the losses live in the
*target* frame: a target pixel is occluded for a source when its warp sampled an occluded
source pixel (or left the frustum).

    >>> params = PhotometricParams()
    >>> e_prev = masked_photometric(I_t, warped_prev, occluded_prev, params)
    >>> e_next = masked_photometric(I_t, warped_next, occluded_next, params)
    >>> result = occlusion_aware_loss(e_prev, e_next, occluded_prev, ~occluded_prev,
    ...                               occluded_next, ~occluded_next)
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from src.domd_bench.errors import DomainError, InputValidationError
from src.domd_bench.geometry import DepthMap, ImageBuffer

logger = logging.getLogger(__name__)

DEFAULT_CYCLE_THRESHOLD = 1.0


class PhotometricParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(default=0.85, ge=0, le=1)
    ssim_window: int = 3
    ssim_c1: float = Field(default=1e-4, gt=0)
    ssim_c2: float = Field(default=9e-4, gt=0)

    @field_validator("ssim_window")
    @classmethod
    def _odd_window(cls, window):
        if window < 3 or window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {window}")
        return window


class LossWeights(BaseModel):
    """Per-term weights of the total loss; all 1 gives the plain sum."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    cycle: float = Field(default=1.0, ge=0)
    reprojection: float = Field(default=1.0, ge=0)
    smoothness: float = Field(default=1.0, ge=0)


class SourceChoice(IntEnum):
    """Which source frame's error a target pixel uses."""

    NONE = 0
    PREV = 1
    NEXT = 2
    MIN = 3


@dataclass(frozen=True, eq=False)
class OcclusionAwareResult:
    loss: float
    e_or_map: np.ndarray
    source_choice: np.ndarray
    support: int


@dataclass(frozen=True, eq=False)
class LossReport:
    l_c: float
    l_or: float
    l_s: float
    l_total: float
    e_maps: Dict[str, np.ndarray] = field(default_factory=dict)
    e_or_map: np.ndarray = None
    source_choice: np.ndarray = None

    def as_dict(self) -> Dict[str, float]:
        return {"l_c": self.l_c, "l_or": self.l_or, "l_s": self.l_s, "l_total": self.l_total}


def _check_same_shape(a: ImageBuffer, b: ImageBuffer):
    if a.data.shape != b.data.shape:
        raise InputValidationError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def ssim(a: np.ndarray, b: np.ndarray, params: PhotometricParams) -> np.ndarray:
    """Per-pixel, per-channel SSIM over a square window with mirrored borders."""
    size = (params.ssim_window, params.ssim_window, 1)

    def pool(x):
        return ndimage.uniform_filter(x, size=size, mode="mirror")

    mu_a = pool(a)
    mu_b = pool(b)
    mu_ab = mu_a * mu_b
    mu_a_sq = mu_a * mu_a
    mu_b_sq = mu_b * mu_b
    sigma_a = pool(a * a) - mu_a_sq
    sigma_b = pool(b * b) - mu_b_sq
    sigma_ab = pool(a * b) - mu_ab
    numerator = (2 * mu_ab + params.ssim_c1) * (2 * sigma_ab + params.ssim_c2)
    denominator = (mu_a_sq + mu_b_sq + params.ssim_c1) * (sigma_a + sigma_b + params.ssim_c2)
    return numerator / denominator


def photometric_error(
    a: ImageBuffer, b: ImageBuffer, params: PhotometricParams = PhotometricParams()
) -> np.ndarray:
    """``gamma * (1 - SSIM) / 2 + (1 - gamma) * |a - b|``, averaged over channels."""
    _check_same_shape(a, b)
    structure = np.clip((1.0 - ssim(a.data, b.data, params)) / 2.0, 0.0, 1.0)
    l1 = np.abs(a.data - b.data)
    return (params.gamma * structure + (1.0 - params.gamma) * l1).mean(axis=2)


def masked_photometric(
    I_t: ImageBuffer,
    I_warp: ImageBuffer,
    O_a: np.ndarray,
    params: PhotometricParams = PhotometricParams(),
) -> np.ndarray:
    """Photometric error with both images painted black on ``O_a``.

    Pixels in ``O_a`` get error 0; aggregations must also exclude them.
    """
    _check_same_shape(I_t, I_warp)
    O_a = np.asarray(O_a, dtype=bool)
    error = photometric_error(I_t.painted(O_a), I_warp.painted(O_a), params)
    error[O_a] = 0.0
    return error


def reprojection_loss(E_prev: np.ndarray, E_next: np.ndarray) -> float:
    return float(np.mean((E_prev + E_next) / 2.0))


def min_reprojection_loss(E_prev: np.ndarray, E_next: np.ndarray) -> float:
    return float(np.mean(np.minimum(E_prev, E_next)))


def occlusion_aware_loss(
    E_prev: np.ndarray,
    E_next: np.ndarray,
    O_prev: np.ndarray,
    V_prev: np.ndarray,
    O_next: np.ndarray,
    V_next: np.ndarray,
) -> OcclusionAwareResult:
    """Per-pixel source switching between the two reference frames.

    - visible in both: the smaller error
    - visible in one: that source's error, even when it is the larger one
    - occluded in both: 0, and the pixel is left out of the mean
    """
    O_prev, V_prev, O_next, V_next = (
        np.asarray(m, dtype=bool) for m in (O_prev, V_prev, O_next, V_next)
    )
    if np.any(O_prev == V_prev) or np.any(O_next == V_next):
        raise InputValidationError("occluded and visible masks must partition the frame")

    choice = np.full(E_prev.shape, SourceChoice.NONE, dtype=np.int8)
    choice[V_prev & V_next] = SourceChoice.MIN
    choice[V_prev & O_next] = SourceChoice.PREV
    choice[O_prev & V_next] = SourceChoice.NEXT

    e_or = np.zeros(E_prev.shape)
    e_or = np.where(choice == SourceChoice.MIN, np.minimum(E_prev, E_next), e_or)
    e_or = np.where(choice == SourceChoice.PREV, E_prev, e_or)
    e_or = np.where(choice == SourceChoice.NEXT, E_next, e_or)

    support = int(np.sum(~(O_prev & O_next)))
    if support == 0:
        logger.warning("every pixel is occluded in both source frames; loss set to 0")
        return OcclusionAwareResult(0.0, e_or, choice, 0)
    return OcclusionAwareResult(float(np.sum(e_or) / support), e_or, choice, support)


def inconsistent_set(
    D: np.ndarray, D_pr: np.ndarray, threshold: float = DEFAULT_CYCLE_THRESHOLD
) -> np.ndarray:
    """Pixels whose relative depth gap ``|D - D_pr| / min(D, D_pr)`` exceeds ``threshold``."""
    D = np.asarray(D, dtype=np.float64)
    D_pr = np.asarray(D_pr, dtype=np.float64)
    if np.any(~(D > 0)) or np.any(~(D_pr > 0)):
        raise DomainError("cycle consistency needs positive depths")
    return np.abs(D - D_pr) / np.minimum(D, D_pr) > threshold


def cycle_consistency(
    D: DepthMap,
    D_pr: DepthMap,
    S: np.ndarray,
    threshold: float = DEFAULT_CYCLE_THRESHOLD,
) -> float:
    """Mean ``|D - D_pr|`` over dynamic pixels with a large relative gap, 0 if there are none."""
    S = np.asarray(S, dtype=bool)
    if not np.any(S):
        return 0.0
    if np.any(S & ~(D.valid & D_pr.valid)):
        raise DomainError("both depth maps must be valid on the dynamic-object mask")
    members = inconsistent_set(D.depth[S], D_pr.depth[S], threshold)
    if not np.any(members):
        return 0.0
    return float(np.mean(np.abs(D.depth[S] - D_pr.depth[S])[members]))


def smoothness(D: DepthMap, I_t: ImageBuffer) -> float:
    """Edge-aware smoothness of mean-normalized inverse depth.

    Forward differences on the common ``(H-1) x (W-1)`` domain; a difference is used
    only when both of its pixels have valid depth.
    """
    if D.shape != I_t.shape:
        raise InputValidationError(f"depth {D.shape} and image {I_t.shape} differ in size")
    if not np.any(D.valid):
        return 0.0
    inverse = np.where(D.valid, 1.0 / np.where(D.valid, D.depth, 1.0), 0.0)
    normalized = inverse / inverse[D.valid].mean()

    image = I_t.data
    dx_d = np.abs(normalized[:-1, 1:] - normalized[:-1, :-1])
    dy_d = np.abs(normalized[1:, :-1] - normalized[:-1, :-1])
    dx_i = np.abs(image[:-1, 1:] - image[:-1, :-1]).mean(axis=2)
    dy_i = np.abs(image[1:, :-1] - image[:-1, :-1]).mean(axis=2)
    ok = D.valid[:-1, :-1] & D.valid[:-1, 1:] & D.valid[1:, :-1]
    if not np.any(ok):
        return 0.0
    terms = dx_d * np.exp(-dx_i) + dy_d * np.exp(-dy_i)
    return float(np.mean(terms[ok]))


def total_loss(
    l_c: float,
    l_or: float,
    l_s: float,
    weights: LossWeights = LossWeights(),
    e_maps: Dict[str, np.ndarray] = None,
    e_or_map: np.ndarray = None,
    source_choice: np.ndarray = None,
) -> LossReport:
    parts = (weights.cycle * l_c, weights.reprojection * l_or, weights.smoothness * l_s)
    for value in parts:
        if not np.isfinite(value):
            raise DomainError(f"loss terms must be finite, got {parts}")
    return LossReport(
        l_c=parts[0],
        l_or=parts[1],
        l_s=parts[2],
        l_total=parts[0] + parts[1] + parts[2],
        e_maps=e_maps or {},
        e_or_map=e_or_map,
        source_choice=source_choice,
    )
