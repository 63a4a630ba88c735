"""
End-to-end depth pipelines over a rendered frame triplet.

``solve`` runs one pass: depth prior -> disentanglement -> cost volume -> depth, then
scores the result with the training losses. Only frames t-1 and t feed the depth
estimate; frame t+1 contributes to the losses.

``refine_prior_loop`` adapts cycle-consistent training to inference time: instead of
updating network weights, it moves the prior map toward the estimate on dynamic pixels
where the two disagree by more than the cycle threshold, and solves again.

    >>> cfg = SolverConfig(d_min=2.0, d_max=40.0, iterations=3)
    >>> result = refine_prior_loop(triplet, prior, cfg)
    >>> result.depth, result.reports[-1].l_total
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.domd_bench.costvol import (
    DEFAULT_FILL_RADIUS,
    DEFAULT_FILL_WINDOW,
    DEFAULT_HYPOTHESES,
    CostVolume,
    DepthHypotheses,
    build_cost_volume,
    extract_depth,
    fill_from_neighbours,
    fill_occlusions,
)
from src.domd_bench.domd import DisentangledFrame, disentangle
from src.domd_bench.errors import EmptySupportError, InputValidationError, ParameterError
from src.domd_bench.geometry import DepthMap, bilinear_taps, warp_image
from src.domd_bench.losses import (
    DEFAULT_CYCLE_THRESHOLD,
    LossReport,
    LossWeights,
    PhotometricParams,
    SourceChoice,
    cycle_consistency,
    inconsistent_set,
    masked_photometric,
    min_reprojection_loss,
    occlusion_aware_loss,
    photometric_error,
    smoothness,
    total_loss,
)
from src.domd_bench.metrics import DEFAULT_CLIP_MAX, compute_metrics, evaluate_regions, metric_rows
from src.domd_bench.scenesim import (
    CUR,
    NEXT,
    PREV,
    FrameTriplet,
    SceneSpec,
    prior_from_spec,
    render,
    with_pose_noise,
)
from src.utils.run_helper import StageTimer

logger = logging.getLogger(__name__)


class PriorUpdate(str, Enum):
    REPLACE = "replace"
    DAMPED = "damped"


class AblationVariant(str, Enum):
    FULL = "full"
    NO_CYCLE = "no_cycle"
    NO_FILL = "no_fill"
    SWITCHING_ONLY = "switching_only"
    MASKING_ONLY = "masking_only"
    NO_SWITCHING_MASKING = "no_switching_masking"
    NO_DOMD = "no_domd"


# toggles each variant turns off, relative to the full method
VARIANT_TOGGLES: Dict[AblationVariant, Dict[str, bool]] = {
    AblationVariant.FULL: {},
    AblationVariant.NO_CYCLE: {"use_cycle": False},
    AblationVariant.NO_FILL: {"use_cv_fill": False},
    AblationVariant.SWITCHING_ONLY: {"loss_masking": False},
    AblationVariant.MASKING_ONLY: {"loss_switching": False},
    AblationVariant.NO_SWITCHING_MASKING: {"loss_switching": False, "loss_masking": False},
    AblationVariant.NO_DOMD: {"use_domd": False},
}


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    use_domd: bool = True
    use_cv_fill: bool = True
    loss_switching: bool = True
    loss_masking: bool = True
    use_cycle: bool = True

    d_min: float = Field(default=2.0, gt=0)
    d_max: float = Field(default=40.0, gt=0)
    hypotheses: int = Field(default=DEFAULT_HYPOTHESES, ge=2)
    fill_window: int = Field(default=DEFAULT_FILL_WINDOW, ge=0)
    fill_radius: int = Field(default=DEFAULT_FILL_RADIUS, ge=0)
    aggregation_window: int = 5
    close_cracks: bool = True

    iterations: int = Field(default=3, ge=0)
    prior_update: PriorUpdate = PriorUpdate.REPLACE
    damping: float = Field(default=0.5, gt=0, le=1)
    cycle_threshold: float = Field(default=DEFAULT_CYCLE_THRESHOLD, gt=0)
    divergence_patience: int = Field(default=3, ge=1)

    photometric: PhotometricParams = PhotometricParams()
    weights: LossWeights = LossWeights()

    @field_validator("aggregation_window")
    @classmethod
    def _odd_window(cls, window):
        if window < 1 or window % 2 == 0:
            raise ValueError(f"aggregation_window must be odd and >= 1, got {window}")
        return window

    @model_validator(mode="after")
    def _depth_range(self):
        if not self.d_min < self.d_max:
            raise ValueError(f"d_min ({self.d_min}) must be below d_max ({self.d_max})")
        return self

    def depth_hypotheses(self) -> DepthHypotheses:
        return DepthHypotheses.linear_inverse(self.d_min, self.d_max, self.hypotheses)

    def for_variant(self, variant: AblationVariant) -> "SolverConfig":
        return self.model_copy(update=VARIANT_TOGGLES[AblationVariant(variant)])


@dataclass(frozen=True, eq=False)
class SolveResult:
    depth: DepthMap
    prior: DepthMap
    reports: List[LossReport]
    timings: Dict[str, float]
    iterations: int = 1
    selected: int = 1
    converged: bool = False
    diverged: bool = False
    references: Optional[Tuple[DisentangledFrame, DisentangledFrame]] = None
    cost_volume: Optional[CostVolume] = None
    object_abs_rel: List[float] = field(default_factory=list)

    @property
    def report(self) -> LossReport:
        return self.reports[-1]


def _check_inputs(triplet: FrameTriplet, prior: DepthMap):
    if prior.shape != triplet.shape:
        raise InputValidationError(
            f"prior {prior.shape} does not match the frames {triplet.shape}"
        )


def reference_frames(
    triplet: FrameTriplet, prior: DepthMap, cfg: SolverConfig
) -> Tuple[DisentangledFrame, DisentangledFrame]:
    """Disentangled (or raw) frames t-1 and t+1."""
    if not cfg.use_domd:
        return (
            DisentangledFrame.passthrough(triplet.images[PREV]),
            DisentangledFrame.passthrough(triplet.images[NEXT]),
        )
    return tuple(
        disentangle(
            triplet.images[index],
            triplet.images[CUR],
            triplet.masks[index],
            triplet.masks[CUR],
            prior,
            pose,
            triplet.intrinsics,
            cfg.close_cracks,
        )
        for index, pose in ((PREV, triplet.pose_to_prev), (NEXT, triplet.pose_to_next))
    )


def evaluate_losses(
    triplet: FrameTriplet,
    depth: DepthMap,
    prior: DepthMap,
    references: Tuple[DisentangledFrame, DisentangledFrame],
    cfg: SolverConfig,
) -> LossReport:
    """Score ``depth`` with the training losses selected by ``cfg``."""
    I_t = triplet.images[CUR]
    errors, occluded = {}, {}
    for name, reference, pose in (
        ("prev", references[0], triplet.pose_to_prev),
        ("next", references[1], triplet.pose_to_next),
    ):
        warped, valid = warp_image(
            reference.image, depth, pose, triplet.intrinsics, reference.masks.occluded
        )
        occluded[name] = ~valid
        if cfg.loss_masking:
            errors[name] = masked_photometric(I_t, warped, occluded[name], cfg.photometric)
        else:
            # holes and out-of-frame samples stay black and are scored as-is
            raw, _ = warp_image(reference.image, depth, pose, triplet.intrinsics)
            errors[name] = photometric_error(I_t, raw, cfg.photometric)

    if cfg.loss_switching:
        switched = occlusion_aware_loss(
            errors["prev"],
            errors["next"],
            occluded["prev"],
            ~occluded["prev"],
            occluded["next"],
            ~occluded["next"],
        )
        l_or, e_or_map, choice = switched.loss, switched.e_or_map, switched.source_choice
    else:
        l_or = min_reprojection_loss(errors["prev"], errors["next"])
        e_or_map = np.minimum(errors["prev"], errors["next"])
        choice = np.full(e_or_map.shape, SourceChoice.MIN, dtype=np.int8)

    l_c = 0.0
    if cfg.use_cycle:
        l_c = cycle_consistency(
            depth, prior, triplet.masks[CUR] & depth.valid, cfg.cycle_threshold
        )
    l_s = smoothness(depth, I_t)
    return total_loss(l_c, l_or, l_s, cfg.weights, errors, e_or_map, choice)


def solve(triplet: FrameTriplet, prior: DepthMap, cfg: SolverConfig) -> SolveResult:
    """One pass of the pipeline; the prior is returned unchanged."""
    _check_inputs(triplet, prior)
    timer = StageTimer()
    hyp = cfg.depth_hypotheses()

    with timer.stage("disentangle"):
        references = reference_frames(triplet, prior, cfg)
    # motion classes only exist once objects are disentangled
    segments = triplet.masks[CUR] if cfg.use_domd else None
    with timer.stage("cost_volume"):
        cv = build_cost_volume(
            triplet.images[CUR],
            references[0],
            triplet.pose_to_prev,
            triplet.intrinsics,
            hyp,
            respect_occlusions=cfg.use_cv_fill,
            aggregation_window=cfg.aggregation_window,
            segments=segments,
        )
        if cfg.use_cv_fill:
            cv = fill_from_neighbours(cv, segments, cfg.fill_radius)
            cv = fill_occlusions(cv, cfg.fill_window)
    with timer.stage("extract"):
        depth = extract_depth(cv, hyp)
    with timer.stage("losses"):
        report = evaluate_losses(triplet, depth, prior, references, cfg)

    logger.info(
        "solve done: %d/%d valid pixels, loss %.5f",
        int(depth.valid.sum()),
        depth.valid.size,
        report.l_total,
    )
    return SolveResult(
        depth=depth,
        prior=prior,
        reports=[report],
        timings=timer.timings,
        references=references,
        cost_volume=cv,
    )


def object_abs_rel(depth: DepthMap, triplet: FrameTriplet) -> Optional[float]:
    try:
        return compute_metrics(depth, triplet.gt_depths[CUR], triplet.masks[CUR]).abs_rel
    except EmptySupportError:
        return None


def update_prior(
    prior: DepthMap, depth: DepthMap, region: np.ndarray, cfg: SolverConfig
) -> DepthMap:
    """Move the prior toward ``depth`` on ``region``: replace, or a convex step."""
    updated = prior.depth.copy()
    target = depth.depth[region]
    if cfg.prior_update is PriorUpdate.REPLACE:
        updated[region] = target
    else:
        updated[region] = (1.0 - cfg.damping) * prior.depth[region] + cfg.damping * target
    return DepthMap(updated, prior.valid.copy())


def refine_prior_loop(triplet: FrameTriplet, prior0: DepthMap, cfg: SolverConfig) -> SolveResult:
    """Alternate solving and prior updates on inconsistent dynamic pixels.

    Stops after ``cfg.iterations`` passes, as soon as the cycle loss is 0, or when the
    dynamic-object abs-rel grows ``cfg.divergence_patience`` passes in a row. Only pixels
    whose winning cost was measured (not filled) move the prior.

    A converged loop returns its last pass; otherwise the pass with the lowest total loss
    is returned together with the prior that produced it.
    """
    if cfg.iterations < 1:
        raise ParameterError(f"the refinement loop needs at least 1 iteration, got {cfg.iterations}")
    _check_inputs(triplet, prior0)
    timer = StageTimer()
    prior = prior0
    reports: List[LossReport] = []
    passes: List[Tuple[SolveResult, DepthMap]] = []
    history: List[float] = []
    rising = 0
    converged = diverged = False

    for iteration in range(1, cfg.iterations + 1):
        result = solve(triplet, prior, cfg)
        timer.merge(result.timings)
        reports.append(result.report)
        passes.append((result, prior))
        score = object_abs_rel(result.depth, triplet)
        if score is not None:
            if history and score > history[-1]:
                rising += 1
            else:
                rising = 0
            history.append(score)

        if result.report.l_c == 0:
            converged = True
            logger.info("refinement converged after %d iteration(s)", iteration)
            break
        if rising >= cfg.divergence_patience:
            diverged = True
            logger.warning(
                "dynamic-object abs rel rose %d iterations running; stopping", rising
            )
            break
        if iteration == cfg.iterations:
            break

        depth = result.depth
        region = triplet.masks[CUR] & depth.valid & result.cost_volume.observed()
        members = np.zeros(region.shape, bool)
        members[region] = inconsistent_set(
            depth.depth[region], prior.depth[region], cfg.cycle_threshold
        )
        prior = update_prior(prior, depth, members, cfg)
        logger.debug("iteration %d updated %d prior pixels", iteration, int(members.sum()))

    selected = len(passes)
    if not converged:
        losses = [report.l_total for report in reports]
        selected = losses.index(min(losses)) + 1
        logger.debug("keeping pass %d of %d (lowest total loss)", selected, len(passes))
    chosen, chosen_prior = passes[selected - 1]
    return SolveResult(
        depth=chosen.depth,
        prior=chosen_prior,
        reports=reports,
        timings=timer.timings,
        iterations=len(reports),
        selected=selected,
        converged=converged,
        diverged=diverged,
        references=chosen.references,
        cost_volume=chosen.cost_volume,
        object_abs_rel=history,
    )


def run(triplet: FrameTriplet, prior: DepthMap, cfg: SolverConfig) -> SolveResult:
    """``refine_prior_loop`` when iterations are configured, a single ``solve`` otherwise."""
    if cfg.iterations >= 1:
        return refine_prior_loop(triplet, prior, cfg)
    return solve(triplet, prior, cfg)


# ---------------------------------------------------------------------------
# Gradient check


@dataclass(frozen=True)
class GradSample:
    row: int
    col: int
    depth: float
    analytic: float
    numeric: float
    rel_err: float
    order: float = float("nan")
    skipped: str = ""


@dataclass(frozen=True, eq=False)
class GradCheckReport:
    samples: List[GradSample]
    eps_scale: float
    threshold: float

    @property
    def checked(self) -> List[GradSample]:
        return [s for s in self.samples if not s.skipped]

    @property
    def n_skipped(self) -> int:
        return len(self.samples) - len(self.checked)

    @property
    def skip_reasons(self) -> Dict[str, int]:
        reasons: Dict[str, int] = {}
        for sample in self.samples:
            if sample.skipped:
                reasons[sample.skipped] = reasons.get(sample.skipped, 0) + 1
        return reasons

    @property
    def max_rel_err(self) -> float:
        checked = self.checked
        return max((s.rel_err for s in checked), default=0.0)

    @property
    def pass_fraction(self) -> float:
        checked = self.checked
        if not checked:
            return 0.0
        return sum(s.rel_err < self.threshold for s in checked) / len(checked)

    @property
    def order(self) -> float:
        """Median observed convergence order of the central difference."""
        orders = [s.order for s in self.checked if np.isfinite(s.order)]
        return float(np.median(orders)) if orders else float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.checked) and self.max_rel_err <= self.threshold


class _PixelWarp:
    """Photometric L1 residual of one target pixel as a function of its depth."""

    def __init__(self, triplet: FrameTriplet, row: int, col: int, gamma: float):
        intr = triplet.intrinsics
        self.intr = intr
        self.pose = triplet.pose_to_prev
        self.source = triplet.images[PREV].data
        self.target = triplet.images[CUR].data[row, col]
        self.weight = 1.0 - gamma
        ray = np.array([(col - intr.cx) / intr.fx, (row - intr.cy) / intr.fy, 1.0])
        self.direction = self.pose.rotation @ ray

    def evaluate(self, depth: float):
        """Returns (residual per channel, dW/dd per channel, taps, inside)."""
        intr = self.intr
        point = depth * self.direction + self.pose.translation
        if point[2] <= 0:
            return None
        u = intr.fx * point[0] / point[2] + intr.cx
        v = intr.fy * point[1] / point[2] + intr.cy
        du = intr.fx * (self.direction[0] * point[2] - point[0] * self.direction[2]) / point[2] ** 2
        dv = intr.fy * (self.direction[1] * point[2] - point[1] * self.direction[2]) / point[2] ** 2
        inside, x0, y0, ax, ay = bilinear_taps(
            np.array([u]), np.array([v]), intr.height, intr.width
        )
        if not inside[0]:
            return None
        x0, y0, ax, ay = int(x0[0]), int(y0[0]), float(ax[0]), float(ay[0])
        s00 = self.source[y0, x0]
        s10 = self.source[y0, x0 + 1]
        s01 = self.source[y0 + 1, x0]
        s11 = self.source[y0 + 1, x0 + 1]
        warped = (
            (1 - ax) * (1 - ay) * s00 + ax * (1 - ay) * s10 + (1 - ax) * ay * s01 + ax * ay * s11
        )
        dw_du = (1 - ay) * (s10 - s00) + ay * (s11 - s01)
        dw_dv = (1 - ax) * (s01 - s00) + ax * (s11 - s10)
        return warped - self.target, dw_du, dw_dv, dw_du * du + dw_dv * dv, (x0, y0)

    def loss(self, depth: float) -> float:
        return self.weight * float(np.mean(np.abs(self.evaluate(depth)[0])))


def _central(warp: _PixelWarp, depth: float, eps: float) -> float:
    return (warp.loss(depth + eps) - warp.loss(depth - eps)) / (2.0 * eps)


def _relative(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    return abs(analytic - numeric) / scale if scale > 0 else 0.0


FLAT_TEXTURE = 1e-9


def grad_check(
    triplet: FrameTriplet,
    D: DepthMap,
    pixels: Sequence[Tuple[int, int]],
    eps_scale: float = 1e-4,
    params: PhotometricParams = PhotometricParams(),
    threshold: float = 1e-3,
) -> GradCheckReport:
    """Compare the analytic depth gradient of the L1 photometric term with central differences.

    The term at pixel ``p`` is ``(1 - gamma) * mean_c |I_t(p) - W(d)(p)|`` with ``W`` the
    bilinear warp of frame t-1. The step is ``eps_scale * d``. Samples on dynamic objects,
    with a flat texture, a tap change or a residual sign change within the step are
    recorded with a skip reason and left out of the statistics.
    """
    if not eps_scale > 0:
        raise ParameterError(f"eps_scale must be positive, got {eps_scale}")
    if D.shape != triplet.shape:
        raise InputValidationError(f"depth {D.shape} does not match the frames {triplet.shape}")
    samples = []
    for row, col in pixels:
        row, col = int(row), int(col)
        d = float(D.depth[row, col])
        eps = eps_scale * d
        if not D.valid[row, col]:
            samples.append(GradSample(row, col, d, 0.0, 0.0, 0.0, skipped="invalid-depth"))
            continue
        if triplet.masks[CUR][row, col]:
            samples.append(GradSample(row, col, d, 0.0, 0.0, 0.0, skipped="dynamic"))
            continue
        warp = _PixelWarp(triplet, row, col, params.gamma)
        states = [warp.evaluate(d + k * eps) for k in (-1, 0, 1)]
        if any(state is None for state in states):
            samples.append(GradSample(row, col, d, 0.0, 0.0, 0.0, skipped="outside"))
            continue
        residual, dw_du, dw_dv, dw_dd, taps = states[1]
        analytic = warp.weight * float(np.mean(np.sign(residual) * dw_dd))
        numeric = _central(warp, d, eps)
        rel_err = _relative(analytic, numeric)

        skipped = ""
        if max(np.max(np.abs(dw_du)), np.max(np.abs(dw_dv))) < FLAT_TEXTURE:
            skipped = "flat-texture"
        elif states[0][4] != taps or states[2][4] != taps:
            skipped = "tap-change"
        elif np.any(residual == 0) or np.any(
            np.sign(states[0][0]) != np.sign(residual)
        ) or np.any(np.sign(states[2][0]) != np.sign(residual)):
            skipped = "sign-change"
        if skipped:
            samples.append(GradSample(row, col, d, analytic, numeric, rel_err, skipped=skipped))
            continue

        coarse = numeric - _central(warp, d, eps / 2)
        fine = _central(warp, d, eps / 2) - _central(warp, d, eps / 4)
        order = float(np.log2(abs(coarse) / abs(fine))) if coarse != 0 and fine != 0 else np.nan
        samples.append(GradSample(row, col, d, analytic, numeric, rel_err, order))

    report = GradCheckReport(samples, eps_scale, threshold)
    if report.n_skipped:
        logger.warning(
            "grad check skipped %d of %d samples: %s",
            report.n_skipped,
            len(samples),
            report.skip_reasons,
        )
    return report


def sample_pixels(shape: Tuple[int, int], count: int, seed: int = 0, margin: int = 2):
    """``count`` distinct interior pixels, seeded."""
    height, width = shape
    if height <= 2 * margin or width <= 2 * margin:
        raise ParameterError(f"margin {margin} leaves no interior pixels in {shape}")
    rows, cols = np.mgrid[margin : height - margin, margin : width - margin]
    candidates = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
    return [tuple(int(x) for x in candidates[i]) for i in np.sort(picked)]


# ---------------------------------------------------------------------------
# Suite evaluation


def prepare_scene(spec: SceneSpec) -> Tuple[FrameTriplet, DepthMap]:
    """Rendered triplet (with pose noise applied) and the scene's depth prior."""
    triplet = render(spec)
    prior = prior_from_spec(triplet.gt_depths[CUR], spec.prior, spec.seed)
    return with_pose_noise(triplet, spec.pose_noise), prior


def evaluate_variants(
    spec: SceneSpec,
    cfg: SolverConfig,
    variants: Sequence[AblationVariant],
    clip_max: float = DEFAULT_CLIP_MAX,
    median_scaling: bool = False,
) -> List[Dict]:
    """Metric rows (one per variant and region) for one scene."""
    triplet, prior = prepare_scene(spec)
    gt, dynamic = triplet.gt_depths[CUR], triplet.masks[CUR]
    rows = []
    for variant in variants:
        variant = AblationVariant(variant)
        result = run(triplet, prior, cfg.for_variant(variant))
        reports = evaluate_regions(result.depth, gt, dynamic, clip_max, median_scaling)
        rows.extend(metric_rows(spec.name, variant.value, reports))
    logger.info("evaluated %d variants on scene '%s'", len(variants), spec.name)
    return rows
