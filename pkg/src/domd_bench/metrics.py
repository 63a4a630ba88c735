"""
Depth evaluation metrics, region-split evaluation and abs-rel error maps.

    >>> report = compute_metrics(result.depth, triplet.gt_depths[CUR], mask=triplet.masks[CUR])
    >>> report.abs_rel
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from matplotlib.colors import LinearSegmentedColormap

from src.domd_bench.errors import EmptySupportError, ParameterError
from src.domd_bench.geometry import DepthMap, ImageBuffer

logger = logging.getLogger(__name__)

DEFAULT_CLIP_MAX = 80.0
MIN_DEPTH = 1e-3
DELTA_BASE = 1.25
METRIC_NAMES = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"]
CSV_COLUMNS = ["scene_id", "variant", "region"] + METRIC_NAMES + ["n_pixels"]
REGIONS = ("all", "dynamic", "static")

# abs-rel 0 is white, ERROR_RAMP_MAX and above is saturated red
ERROR_RAMP_MAX = 0.5
ERROR_RAMP = LinearSegmentedColormap.from_list("abs_rel", [(1.0, 1.0, 1.0), (1.0, 0.0, 0.0)])
INVALID_GRAY = 0.5


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def as_dict(self) -> Dict[str, Union[float, int]]:
        return asdict(self)


def compute_metrics(
    pred: DepthMap,
    gt: DepthMap,
    mask: Optional[np.ndarray] = None,
    clip_max: float = DEFAULT_CLIP_MAX,
    median_scaling: bool = False,
) -> MetricReport:
    """Standard depth metrics over ``valid(pred) & valid(gt) & mask``.

    Args:
        pred: predicted depth
        gt: ground-truth depth
        mask: optional region to evaluate
        clip_max: predictions are clipped to ``[MIN_DEPTH, clip_max]``
        median_scaling: rescale predictions by ``median(gt) / median(pred)`` first

    Returns:
        MetricReport
    """
    if pred.shape != gt.shape:
        raise ParameterError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not clip_max > MIN_DEPTH:
        raise ParameterError(f"clip_max must exceed {MIN_DEPTH}, got {clip_max}")
    support = pred.valid & gt.valid
    if mask is not None:
        support &= np.asarray(mask, dtype=bool)
    if not np.any(support):
        raise EmptySupportError("no pixel is valid in both maps inside the evaluation mask")

    p = pred.depth[support]
    g = gt.depth[support]
    if median_scaling:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, MIN_DEPTH, clip_max)

    thresh = np.maximum(g / p, p / g)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(g - p) / g)),
        sq_rel=float(np.mean((g - p) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((g - p) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        delta1=float(np.mean(thresh < DELTA_BASE)),
        delta2=float(np.mean(thresh < DELTA_BASE**2)),
        delta3=float(np.mean(thresh < DELTA_BASE**3)),
        n_pixels=int(support.sum()),
    )


def region_masks(dynamic: np.ndarray) -> Dict[str, np.ndarray]:
    dynamic = np.asarray(dynamic, dtype=bool)
    return {"all": np.ones_like(dynamic), "dynamic": dynamic, "static": ~dynamic}


def evaluate_regions(
    pred: DepthMap,
    gt: DepthMap,
    dynamic: np.ndarray,
    clip_max: float = DEFAULT_CLIP_MAX,
    median_scaling: bool = False,
) -> Dict[str, MetricReport]:
    """Metrics for the whole frame, the dynamic objects and the static background.

    Regions without support are left out with a warning.
    """
    reports = {}
    for region, mask in region_masks(dynamic).items():
        try:
            reports[region] = compute_metrics(pred, gt, mask, clip_max, median_scaling)
        except EmptySupportError:
            logger.warning("region '%s' has no valid pixels; skipped", region)
    return reports


def metric_rows(
    scene_id: str, variant: str, reports: Dict[str, MetricReport]
) -> List[Dict[str, Union[str, float, int]]]:
    return [
        {"scene_id": scene_id, "variant": variant, "region": region, **report.as_dict()}
        for region, report in reports.items()
    ]


def metrics_frame(rows: Iterable[Dict]) -> pd.DataFrame:
    """Rows in the stable CSV column order."""
    return pd.DataFrame(list(rows), columns=CSV_COLUMNS)


def write_metrics_csv(frame: pd.DataFrame, path) -> None:
    frame[CSV_COLUMNS].to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def error_map(pred: DepthMap, gt: DepthMap) -> ImageBuffer:
    """Per-pixel abs-rel through a white-to-red ramp; invalid pixels are gray."""
    if pred.shape != gt.shape:
        raise ParameterError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = pred.valid & gt.valid
    safe_gt = np.where(valid, gt.depth, 1.0)
    abs_rel = np.where(valid, np.abs(pred.depth - gt.depth) / safe_gt, 0.0)
    rgb = ERROR_RAMP(np.clip(abs_rel / ERROR_RAMP_MAX, 0.0, 1.0))[..., :3]
    rgb[~valid] = INVALID_GRAY
    return ImageBuffer(rgb)
