"""
Occlusion-aware plane-sweep cost volume.

The (disentangled) reference frame is warped into the target view once per depth
hypothesis; the channel-mean L1 difference to the target is the matching cost. Voxels
whose warp touches an occluded reference pixel, leaves the frustum, or (for static pixels)
lands behind a repainted object are invalid. They are repaired first from the nearest
valid pixel of the same motion class on the same layer, then from the nearest valid
hypothesis of the same pixel column.

Depth is read out by winner-take-all with parabolic refinement in inverse depth. This
stands in for a learned decoder.

    >>> hyp = DepthHypotheses.linear_inverse(2.0, 40.0, count=96)
    >>> cv = build_cost_volume(I_t, ref, pose_to_prev, intr, hyp, segments=S_t)
    >>> cv = fill_occlusions(fill_from_neighbours(cv, S_t))
    >>> depth = extract_depth(cv, hyp)
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from src.domd_bench.domd import DisentangledFrame
from src.domd_bench.errors import ParameterError
from src.domd_bench.geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageBuffer,
    RigidPose,
    bilinear_taps,
    warp_coordinates,
    warp_image,
    weighted_taps,
)

logger = logging.getLogger(__name__)

DEFAULT_HYPOTHESES = 96
DEFAULT_FILL_WINDOW = 8
DEFAULT_FILL_RADIUS = 16
# winners at or below this cost are exact matches and are not refined
MATCH_TOLERANCE = 1e-12
# relative margin before a repainted surface counts as nearer
DEPTH_ORDER_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class DepthHypotheses:
    """Strictly increasing positive depth values, one per cost-volume layer."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size < 2:
            raise ParameterError(f"need at least 2 depth hypotheses, got {values.size}")
        if not (np.all(np.isfinite(values)) and np.all(values > 0)):
            raise ParameterError("depth hypotheses must be finite and positive")
        if np.any(np.diff(values) <= 0):
            raise ParameterError("depth hypotheses must be strictly increasing")
        object.__setattr__(self, "values", values)

    @classmethod
    def linear_inverse(
        cls, d_min: float, d_max: float, count: int = DEFAULT_HYPOTHESES
    ) -> "DepthHypotheses":
        """``count`` depths evenly spaced in inverse depth, ``d_min`` and ``d_max`` included."""
        if not (0 < d_min < d_max and np.isfinite(d_max)):
            raise ParameterError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
        if count < 2:
            raise ParameterError(f"need at least 2 depth hypotheses, got {count}")
        values = 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, count)
        values[0], values[-1] = d_min, d_max
        return cls(values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def d_min(self) -> float:
        return float(self.values[0])

    @property
    def d_max(self) -> float:
        return float(self.values[-1])

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.values

    def bin_of(self, depth) -> np.ndarray:
        """Index of the hypothesis nearest in inverse depth."""
        inv = 1.0 / np.asarray(depth, dtype=np.float64)
        return np.abs(inv[..., None] - self.inverse).argmin(axis=-1)


@dataclass(frozen=True, eq=False)
class CostVolume:
    """``|P| x H x W`` costs with per-voxel validity.

    ``filled`` flags voxels whose cost was copied from another hypothesis; they are also
    flagged in ``valid``.
    """

    cost: np.ndarray
    valid: np.ndarray
    filled: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.filled is None:
            object.__setattr__(self, "filled", np.zeros(self.valid.shape, bool))

    @property
    def shape(self):
        return self.cost.shape

    @property
    def column_valid(self) -> np.ndarray:
        return self.valid.any(axis=0)

    def winners(self) -> np.ndarray:
        """Per-pixel index of the cheapest valid hypothesis (0 where the column is invalid)."""
        return np.where(self.valid, self.cost, np.inf).argmin(axis=0)

    def observed(self) -> np.ndarray:
        """Pixels whose winning voxel was measured rather than filled."""
        winning_filled = np.take_along_axis(self.filled, self.winners()[None], axis=0)[0]
        return self.column_valid & ~winning_filled


def _box_mean(cost: np.ndarray, valid: np.ndarray, window: int) -> np.ndarray:
    weights = valid.astype(np.float64)
    total = ndimage.uniform_filter(cost * weights, size=window, mode="nearest")
    count = ndimage.uniform_filter(weights, size=window, mode="nearest")
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = total / count
    return np.where(valid & (count > 0), mean, cost)


def aggregate(
    cost: np.ndarray, valid: np.ndarray, window: int, segments: Optional[np.ndarray] = None
) -> np.ndarray:
    """Box-filter mean of the valid costs around each pixel of one layer.

    With ``segments`` each pixel only pools pixels of its own motion class, so object and
    background costs never mix across the object boundary.
    """
    if window <= 1:
        return cost
    if segments is None:
        return _box_mean(cost, valid, window)
    segments = np.asarray(segments, dtype=bool)
    result = cost
    for member in (segments, ~segments):
        if np.any(member):
            result = np.where(member, _box_mean(cost, valid & member, window), result)
    return result


def _check_window(aggregation_window: int):
    if aggregation_window < 1 or aggregation_window % 2 == 0:
        raise ParameterError(f"aggregation window must be odd and >= 1, got {aggregation_window}")


def _check_segments(segments: Optional[np.ndarray], shape) -> Optional[np.ndarray]:
    if segments is None:
        return None
    segments = np.asarray(segments, dtype=bool)
    if segments.shape != tuple(shape):
        raise ParameterError(f"segments have shape {segments.shape}, expected {tuple(shape)}")
    return segments


def hidden_by_repaint(
    F_d_ref: DisentangledFrame,
    target_depth: DepthMap,
    pose_t_to_ref: RigidPose,
    intr: CameraIntrinsics,
) -> np.ndarray:
    """Target pixels whose warp lands behind a nearer repainted object pixel.

    A point is hidden when a positively weighted tap of its sample is repainted with a
    splat depth smaller than the point's own reference-frame depth.
    """
    u, v, z, ok = warp_coordinates(target_depth, pose_t_to_ref, intr)
    inside, x0, y0, ax, ay = bilinear_taps(u, v, intr.height, intr.width)
    hidden = np.zeros(ok.shape, bool)
    for rows, cols, weight in weighted_taps(x0, y0, ax, ay):
        nearer = F_d_ref.depth[rows, cols] * (1.0 + DEPTH_ORDER_TOLERANCE) < z
        hidden |= F_d_ref.repainted[rows, cols] & nearer & (weight > 0)
    return ok & inside & hidden


def build_cost_volume(
    F_t: ImageBuffer,
    F_d_ref: DisentangledFrame,
    pose_t_to_ref: RigidPose,
    intr: CameraIntrinsics,
    hyp: DepthHypotheses,
    respect_occlusions: bool = True,
    aggregation_window: int = 1,
    segments: Optional[np.ndarray] = None,
) -> CostVolume:
    """Channel-mean L1 cost of the reference warped at every hypothesis.

    Args:
        F_t: target frame
        F_d_ref: reference frame, disentangled or passed through
        pose_t_to_ref: maps target points into the reference camera
        intr: shared intrinsics
        hyp: depth hypotheses
        respect_occlusions: invalidate voxels whose warp touches ``F_d_ref``'s occluded
            pixels, and static voxels hidden behind a repainted object; when off, those
            voxels keep the cost of whatever they land on
        aggregation_window: odd box size for cost aggregation, 1 for per-pixel costs
        segments: dynamic-object mask of the target frame; aggregation stays inside each
            motion class and only pixels outside it get the depth-order test. ``None``
            treats every pixel as static

    Returns:
        CostVolume of shape ``(len(hyp), H, W)``
    """
    _check_window(aggregation_window)
    height, width = intr.shape
    segments = _check_segments(segments, intr.shape)
    static = np.ones((height, width), bool) if segments is None else ~segments
    source_invalid = F_d_ref.masks.occluded if respect_occlusions else None
    depth_order = respect_occlusions and bool(np.any(F_d_ref.repainted))
    cost = np.zeros((len(hyp), height, width))
    valid = np.zeros((len(hyp), height, width), bool)
    for index, depth in enumerate(hyp.values):
        plane = DepthMap.constant(height, width, depth)
        warped, ok = warp_image(F_d_ref.image, plane, pose_t_to_ref, intr, source_invalid)
        if depth_order:
            ok &= ~(static & hidden_by_repaint(F_d_ref, plane, pose_t_to_ref, intr))
        layer = np.abs(F_t.data - warped.data).mean(axis=2)
        cost[index] = aggregate(np.where(ok, layer, 0.0), ok, aggregation_window, segments)
        valid[index] = ok
    logger.debug(
        "cost volume %s: %d invalid voxels", cost.shape, int(valid.size - valid.sum())
    )
    return CostVolume(cost, valid)


def fill_from_neighbours(
    cv: CostVolume, segments: Optional[np.ndarray] = None, radius: int = DEFAULT_FILL_RADIUS
) -> CostVolume:
    """Copy each invalid voxel's cost from the nearest valid pixel of its layer.

    Donors must belong to the same motion class as the filled pixel (``segments`` split
    objects from background; ``None`` is a single class) and lie within ``radius`` pixels.
    Valid voxels are never modified; voxels without a donor stay invalid.
    """
    if radius < 0:
        raise ParameterError(f"fill radius must be >= 0, got {radius}")
    segments = _check_segments(segments, cv.shape[1:])
    classes = [np.ones(cv.shape[1:], bool)] if segments is None else [segments, ~segments]
    cost = cv.cost.copy()
    filled = np.zeros_like(cv.valid)
    for index in range(cv.shape[0]):
        for member in classes:
            donors = cv.valid[index] & member
            pending = ~cv.valid[index] & member
            if not (np.any(donors) and np.any(pending)):
                continue
            distance, (rows, cols) = ndimage.distance_transform_edt(~donors, return_indices=True)
            take = pending & (distance <= radius)
            cost[index][take] = cv.cost[index][rows[take], cols[take]]
            filled[index] |= take
    logger.debug("filled %d voxels from spatial neighbours", int(filled.sum()))
    return CostVolume(cost, cv.valid | filled, cv.filled | filled)


def fill_occlusions(cv: CostVolume, window: int = DEFAULT_FILL_WINDOW) -> CostVolume:
    """Copy each invalid voxel's cost from the nearest valid hypothesis within ``window``.

    Ties between the two directions go to the smaller hypothesis index. Valid voxels are
    never modified; voxels with no valid donor within ``window`` stay invalid.
    """
    if window < 0:
        raise ParameterError(f"fill window must be >= 0, got {window}")
    cost = cv.cost.copy()
    donors = cv.valid
    filled = np.zeros_like(donors)
    pending = ~donors
    count = donors.shape[0]
    for step in range(1, min(window, count - 1) + 1):
        if not np.any(pending):
            break
        for shift in (-step, step):
            take = np.zeros_like(pending)
            source = np.zeros_like(cost)
            if shift < 0:
                take[step:] = pending[step:] & donors[:-step]
                source[step:] = cv.cost[:-step]
            else:
                take[:-step] = pending[:-step] & donors[step:]
                source[:-step] = cv.cost[step:]
            cost[take] = source[take]
            filled |= take
            pending &= ~take
    logger.debug("filled %d occluded voxels", int(filled.sum()))
    return CostVolume(cost, donors | filled, cv.filled | filled)


def extract_depth(cv: CostVolume, hyp: DepthHypotheses) -> DepthMap:
    """Winner-take-all depth with parabolic refinement in inverse depth.

    The parabola through the winner and its two neighbours is used only when both
    neighbours are valid and the winner's cost exceeds ``MATCH_TOLERANCE``; the offset is
    clamped to half a bin. Pixels whose column has no valid voxel are invalid.
    """
    if cv.cost.shape[0] != len(hyp):
        raise ParameterError(
            f"cost volume has {cv.cost.shape[0]} layers but {len(hyp)} hypotheses were given"
        )
    count = len(hyp)
    masked = np.where(cv.valid, cv.cost, np.inf)
    best = cv.winners()
    column_valid = cv.column_valid

    rows, cols = np.indices(best.shape)
    below = np.clip(best - 1, 0, count - 1)
    above = np.clip(best + 1, 0, count - 1)
    c0 = masked[best, rows, cols]
    c_below = masked[below, rows, cols]
    c_above = masked[above, rows, cols]
    interior = (best > 0) & (best < count - 1) & np.isfinite(c_below) & np.isfinite(c_above)

    offset = np.zeros(best.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        curvature = c_below - 2.0 * c0 + c_above
        refine = column_valid & interior & (c0 > MATCH_TOLERANCE) & (curvature > 0)
        offset[refine] = 0.5 * (c_below[refine] - c_above[refine]) / curvature[refine]
    offset = np.clip(offset, -0.5, 0.5)

    inverse = hyp.inverse
    step = np.where(
        offset >= 0,
        inverse[above] - inverse[best],
        inverse[best] - inverse[below],
    )
    refined = 1.0 / (inverse[best] + offset * step)
    depth = np.where(offset == 0, hyp.values[best], refined)
    depth = np.where(column_valid, depth, 0.0)
    if not np.all(column_valid):
        logger.debug("%d pixels have no valid hypothesis", int((~column_valid).sum()))
    return DepthMap(depth, column_valid)


def plane_sweep(
    F_t: ImageBuffer,
    F_ref: ImageBuffer,
    pose_t_to_ref: RigidPose,
    intr: CameraIntrinsics,
    hyp: DepthHypotheses,
    aggregation_window: int = 1,
) -> DepthMap:
    """Plain plane sweep over a raw reference frame, without occlusion handling."""
    _check_window(aggregation_window)
    height, width = intr.shape
    layers, masks = [], []
    for depth in hyp.values:
        warped, ok = warp_image(F_ref, DepthMap.constant(height, width, depth), pose_t_to_ref, intr)
        layer = np.where(ok, np.abs(F_t.data - warped.data).mean(axis=2), 0.0)
        layers.append(aggregate(layer, ok, aggregation_window))
        masks.append(ok)
    return extract_depth(CostVolume(np.stack(layers), np.stack(masks)), hyp)
