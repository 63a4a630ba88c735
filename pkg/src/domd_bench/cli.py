"""
Command-line front end.

Subcommands::

    domd-bench render    --config scene.yaml --out runs/scene
    domd-bench solve     --config scene.yaml --out runs/solve [--no-domd] [--iters 3]
    domd-bench solve     --scene runs/scene --out runs/solve --prior bias:0.1
    domd-bench eval      --pred runs/solve/depth.pfm --gt runs/scene/depth_cur.pfm \\
                         --mask runs/scene/mask_cur.pgm --out runs/eval
    domd-bench ablate    --config suite.yaml --out runs/ablate
    domd-bench gradcheck --config scene.yaml --out runs/grad --samples 200

Flags override config-file fields, which override model defaults. Exit codes: 0 success,
1 invalid input or configuration, 2 runtime failure (including a failed gradient check).
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rich.console import Console
from rich.table import Table
from termcolor import colored

from src.domd_bench import __version__
from src.domd_bench.errors import DomdBenchError, EmptySupportError, InputValidationError
from src.domd_bench.geometry import DepthMap, ImageBuffer
from src.domd_bench.metrics import (
    DEFAULT_CLIP_MAX,
    compute_metrics,
    error_map,
    evaluate_regions,
    metric_rows,
    metrics_frame,
    write_metrics_csv,
)
from src.domd_bench.scenesim import (
    CUR,
    NEXT,
    PREV,
    SPEC_VERSION,
    FrameTriplet,
    PriorSpec,
    SceneSpec,
    make_prior,
    make_suite,
    parse_prior_flag,
    prior_from_spec,
    render,
    with_pose_noise,
)
from src.domd_bench.solver import (
    AblationVariant,
    SolveResult,
    SolverConfig,
    evaluate_variants,
    grad_check,
    run,
    sample_pixels,
)
from src.utils.config_helper import config_hash, dump_model, load_model, validate_model
from src.utils.image_io_helper import (
    read_camera_sidecar,
    read_pfm,
    read_pgm,
    read_ppm,
    write_camera_sidecar,
    write_pfm,
    write_pgm,
    write_ppm,
)
from src.utils.run_helper import RunManifest, StageTimer, configure_logging, thread_cap

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

FRAME_NAMES = {PREV: "prev", CUR: "cur", NEXT: "next"}
EPS_SWEEP = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


class SuiteSpec(BaseModel):
    """Seeded suite plus the solver settings shared by every scene."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    spec_version: int = Field(ge=SPEC_VERSION, le=SPEC_VERSION)
    count: int = Field(default=20, ge=1)
    seed: int = 0
    width: int = Field(default=96, ge=32, le=256)
    height: int = Field(default=64, ge=32, le=128)
    prior: PriorSpec = PriorSpec()
    variants: List[AblationVariant] = list(AblationVariant)
    clip_max: float = Field(default=DEFAULT_CLIP_MAX, gt=0)
    median_scaling: bool = False
    solver: SolverConfig = SolverConfig()

    def scenes(self) -> List[SceneSpec]:
        return make_suite(self.count, self.seed, self.width, self.height, self.prior)


# ---------------------------------------------------------------------------
# Helpers


def _echo(message: str, color: str = "green") -> None:
    print(colored(message, color))


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene(args) -> SceneSpec:
    spec = load_model(args.config, SceneSpec)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "prior", None):
        updates["prior"] = parse_prior_flag(args.prior).model_dump()
    if updates:
        spec = validate_model({**spec.model_dump(), **updates}, SceneSpec, args.config)
    return spec


def _solver_config(args, base: Optional[SolverConfig] = None) -> SolverConfig:
    cfg = base or SolverConfig()
    if getattr(args, "solver_config", None):
        cfg = load_model(args.solver_config, SolverConfig)
    updates = {}
    for flag, toggle in (
        ("no_domd", "use_domd"),
        ("no_fill", "use_cv_fill"),
        ("no_switching", "loss_switching"),
        ("no_masking", "loss_masking"),
        ("no_cycle", "use_cycle"),
    ):
        if getattr(args, flag, False):
            updates[toggle] = False
    if getattr(args, "iters", None) is not None:
        updates["iterations"] = args.iters
    if updates:
        cfg = validate_model({**cfg.model_dump(), **updates}, SolverConfig, "<flags>")
    return cfg


def _write_triplet(out: Path, triplet: FrameTriplet, manifest: RunManifest) -> None:
    for index, name in FRAME_NAMES.items():
        for path, writer, payload in (
            (out / f"frame_{name}.ppm", write_ppm, triplet.images[index].data),
            (out / f"depth_{name}.pfm", write_pfm, triplet.gt_depths[index].depth),
            (out / f"mask_{name}.pgm", write_pgm, triplet.masks[index]),
        ):
            writer(path, payload)
            manifest.add_output(path)
    sidecar = out / "camera.txt"
    write_camera_sidecar(
        sidecar,
        triplet.intrinsics,
        {"to_prev": triplet.pose_to_prev, "to_next": triplet.pose_to_next},
    )
    manifest.add_output(sidecar)


def load_triplet_dir(directory) -> FrameTriplet:
    """Read a directory written by ``render`` back into a frame triplet."""
    directory = Path(directory)
    if not (directory / "camera.txt").exists():
        raise InputValidationError(f"{directory} is not a rendered scene (no camera.txt)")
    intr, poses = read_camera_sidecar(directory / "camera.txt")
    if "to_prev" not in poses or "to_next" not in poses:
        raise InputValidationError(f"{directory / 'camera.txt'} lacks the to_prev/to_next poses")
    images, depths, masks = [], [], []
    for index, name in FRAME_NAMES.items():
        images.append(ImageBuffer(read_ppm(directory / f"frame_{name}.ppm")))
        depths.append(DepthMap.from_array(read_pfm(directory / f"depth_{name}.pfm")))
        masks.append(read_pgm(directory / f"mask_{name}.pgm") > 0.5)
    try:
        return FrameTriplet(
            tuple(images), tuple(depths), tuple(masks), poses["to_prev"], poses["to_next"], intr
        )
    except DomdBenchError as e:
        raise InputValidationError(f"{directory}: {e}") from e


def _gray(values: np.ndarray, scale: Optional[float] = None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    if scale is None:
        scale = float(values[finite].max()) if np.any(finite) else 1.0
    scale = scale if scale > 0 else 1.0
    return np.clip(np.where(finite, values, 0.0) / scale, 0.0, 1.0)


def _dump(out: Path, result: SolveResult, triplet: FrameTriplet, manifest: RunManifest) -> None:
    """Inspection images: references, occlusion masks, cost slices and loss maps."""
    dump = _out_dir(out / "dump")
    for reference, name in zip(result.references, ("prev", "next")):
        write_ppm(dump / f"disentangled_{name}.ppm", reference.image.data)
        write_pgm(dump / f"occluded_{name}.pgm", reference.masks.occluded)
        manifest.add_output(dump / f"disentangled_{name}.ppm")
        manifest.add_output(dump / f"occluded_{name}.pgm")
    cv = result.cost_volume
    for layer in sorted({0, len(cv.cost) // 2, len(cv.cost) - 1}):
        path = dump / f"cost_{layer:03d}.pgm"
        write_pgm(path, _gray(np.where(cv.valid[layer], cv.cost[layer], 0.0), 1.0))
        manifest.add_output(path)
    report = result.report
    for name, values in list(report.e_maps.items()) + [("or", report.e_or_map)]:
        path = dump / f"loss_{name}.pgm"
        write_pgm(path, _gray(values, 1.0))
        manifest.add_output(path)
    path = dump / "error_map.ppm"
    write_ppm(path, error_map(result.depth, triplet.gt_depths[CUR]).data)
    manifest.add_output(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_render(args) -> int:
    spec = _load_scene(args)
    out = _out_dir(args.out)
    timer = StageTimer()
    with timer.stage("render"):
        triplet = render(spec)
    manifest = RunManifest("render", config_hash(spec), spec.seed)
    _write_triplet(out, triplet, manifest)
    dump_model(spec, out / "scene.yaml")
    manifest.add_output(out / "scene.yaml")
    manifest.timings = timer.timings
    manifest.write(out)
    _echo(f"rendered '{spec.name}' to {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    if bool(args.config) == bool(args.scene):
        raise InputValidationError("solve needs exactly one of --config or --scene")
    cfg = _solver_config(args)
    if args.config:
        spec = _load_scene(args)
        triplet = with_pose_noise(render(spec), spec.pose_noise)
        prior = prior_from_spec(triplet.gt_depths[CUR], spec.prior, spec.seed)
        hashed, seed, scene_id = config_hash(spec, cfg), spec.seed, spec.name
    else:
        triplet = load_triplet_dir(args.scene)
        prior_spec = parse_prior_flag(args.prior or "exact")
        seed = args.seed or 0
        prior = make_prior(
            triplet.gt_depths[CUR], prior_spec.mode, prior_spec.sigma, prior_spec.beta, seed
        )
        hashed = config_hash(prior_spec, cfg)
        scene_id = Path(args.scene).name

    out = _out_dir(args.out)
    result = run(triplet, prior, cfg)
    manifest = RunManifest("solve", hashed, seed, timings=dict(result.timings))

    write_pfm(out / "depth.pfm", result.depth.depth)
    manifest.add_output(out / "depth.pfm")
    losses = pd.DataFrame(
        [{"iteration": i + 1, **report.as_dict()} for i, report in enumerate(result.reports)]
    )
    losses.to_csv(out / "losses.csv", index=False, float_format="%.10g", lineterminator="\n")
    manifest.add_output(out / "losses.csv")

    gt, dynamic = triplet.gt_depths[CUR], triplet.masks[CUR]
    rows = metric_rows(scene_id, "prior", evaluate_regions(prior, gt, dynamic))
    rows += metric_rows(scene_id, "solve", evaluate_regions(result.depth, gt, dynamic))
    write_metrics_csv(metrics_frame(rows), out / "metrics.csv")
    manifest.add_output(out / "metrics.csv")
    if args.dump:
        _dump(out, result, triplet, manifest)
    manifest.write(out)

    if result.diverged:
        _echo("refinement stopped by the divergence guard", "yellow")
    _echo(
        f"solved {scene_id}: {result.iterations} iteration(s), "
        f"loss {result.report.l_total:.5f}, outputs in {out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = DepthMap.from_array(read_pfm(args.pred))
    gt = DepthMap.from_array(read_pfm(args.gt))
    if pred.shape != gt.shape:
        raise InputValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    out = _out_dir(args.out)
    manifest = RunManifest("eval", "", 0)
    if args.mask:
        dynamic = read_pgm(args.mask) > 0.5
        reports = evaluate_regions(pred, gt, dynamic, args.clip_max, args.median_scaling)
    else:
        reports = {"all": compute_metrics(pred, gt, None, args.clip_max, args.median_scaling)}
    if "all" not in reports:
        raise EmptySupportError(f"{args.pred}: no pixel is valid in both depth maps")
    write_metrics_csv(metrics_frame(metric_rows(args.scene_id, "eval", reports)), out / "metrics.csv")
    write_ppm(out / "error_map.ppm", error_map(pred, gt).data)
    manifest.add_output(out / "metrics.csv")
    manifest.add_output(out / "error_map.ppm")
    manifest.write(out)
    _echo(f"abs_rel {reports['all'].abs_rel:.4f} over {reports['all'].n_pixels} pixels")
    return EXIT_OK


def _summary_table(frame: pd.DataFrame) -> Table:
    table = Table(title="mean abs_rel per variant")
    table.add_column("variant")
    regions = [r for r in ("all", "dynamic", "static") if r in set(frame["region"])]
    for region in regions:
        table.add_column(region, justify="right")
    means = frame.groupby(["variant", "region"], sort=False)["abs_rel"].mean()
    for variant in dict.fromkeys(frame["variant"]):
        table.add_row(variant, *(f"{means.get((variant, r), float('nan')):.4f}" for r in regions))
    return table


def cmd_ablate(args) -> int:
    suite = load_model(args.config, SuiteSpec)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.prior:
        updates["prior"] = parse_prior_flag(args.prior).model_dump()
    solver = _solver_config(args, suite.solver)
    if updates or solver != suite.solver:
        suite = validate_model(
            {**suite.model_dump(), **updates, "solver": solver.model_dump()}, SuiteSpec, args.config
        )
    out = _out_dir(args.out)
    timer = StageTimer()
    workers = min(thread_cap(), suite.count)
    logger.info("ablating %d scenes x %d variants on %d workers", suite.count, len(suite.variants), workers)

    def evaluate(spec: SceneSpec) -> List[Dict]:
        return evaluate_variants(
            spec, suite.solver, suite.variants, suite.clip_max, suite.median_scaling
        )

    with timer.stage("ablate"):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(evaluate, suite.scenes()))
    frame = metrics_frame(row for rows in per_scene for row in rows)
    write_metrics_csv(frame, out / "ablation.csv")

    manifest = RunManifest("ablate", config_hash(suite), suite.seed, timings=timer.timings)
    manifest.add_output(out / "ablation.csv")
    manifest.write(out)
    Console().print(_summary_table(frame))
    _echo(f"wrote {len(frame)} rows to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = _load_scene(args)
    triplet = render(spec)
    prior_spec = parse_prior_flag(args.prior)
    depth = make_prior(
        triplet.gt_depths[CUR], prior_spec.mode, prior_spec.sigma, prior_spec.beta, spec.seed
    )
    pixels = sample_pixels(triplet.shape, args.samples, spec.seed)
    report = grad_check(triplet, depth, pixels, args.eps, threshold=args.threshold)

    out = _out_dir(args.out)
    manifest = RunManifest("gradcheck", config_hash(spec, prior_spec), spec.seed)
    pd.DataFrame([asdict(s) for s in report.samples]).to_csv(
        out / "gradcheck.csv", index=False, float_format="%.10g", lineterminator="\n"
    )
    sweep = pd.DataFrame(
        {
            "eps_scale": list(EPS_SWEEP),
            "max_rel_err": [
                grad_check(triplet, depth, pixels, eps, threshold=args.threshold).max_rel_err
                for eps in EPS_SWEEP
            ],
        }
    )
    sweep.to_csv(out / "eps_sweep.csv", index=False, float_format="%.10g", lineterminator="\n")
    manifest.add_output(out / "gradcheck.csv")
    manifest.add_output(out / "eps_sweep.csv")
    manifest.write(out)

    checked = len(report.checked)
    if report.n_skipped:
        _echo(f"skipped {report.n_skipped} degenerate samples: {report.skip_reasons}", "yellow")
    if not checked:
        _echo("no non-degenerate samples to check", "yellow")
        return EXIT_OK
    summary = (
        f"{checked} samples, max rel err {report.max_rel_err:.3g}, "
        f"{100 * report.pass_fraction:.1f}% below {args.threshold:g}, order {report.order:.2f}"
    )
    if not report.passed:
        _echo(f"gradient check failed: {summary}", "red")
        return EXIT_RUNTIME
    _echo(f"gradient check passed: {summary}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_toggles(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--solver-config", help="YAML file with solver settings")
    parser.add_argument("--no-domd", action="store_true", help="use raw reference frames")
    parser.add_argument("--no-fill", action="store_true", help="disable occlusion filling")
    parser.add_argument("--no-switching", action="store_true", help="disable source switching")
    parser.add_argument("--no-masking", action="store_true", help="disable occlusion masking")
    parser.add_argument("--no-cycle", action="store_true", help="disable the cycle loss")
    parser.add_argument("--iters", type=int, help="prior refinement iterations (0 = single pass)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domd-bench", description="Depth from motion with dynamic-object disentanglement"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="overrides the LOG_LEVEL environment variable")
    commands = parser.add_subparsers(dest="command", required=True)

    render_parser = commands.add_parser("render", help="render a scene to image files")
    render_parser.add_argument("--config", required=True, help="scene YAML file")
    render_parser.add_argument("--out", required=True, help="output directory")
    render_parser.add_argument("--seed", type=int, help="overrides the scene seed")
    render_parser.set_defaults(handler=cmd_render)

    solve_parser = commands.add_parser("solve", help="estimate depth for frame t")
    solve_parser.add_argument("--config", help="scene YAML file")
    solve_parser.add_argument("--scene", help="directory written by 'render'")
    solve_parser.add_argument("--out", required=True, help="output directory")
    solve_parser.add_argument("--seed", type=int, help="overrides the scene / prior seed")
    solve_parser.add_argument("--prior", help="exact | noise:SIGMA | bias:BETA")
    solve_parser.add_argument("--dump", action="store_true", help="write inspection images")
    _add_toggles(solve_parser)
    solve_parser.set_defaults(handler=cmd_solve)

    eval_parser = commands.add_parser("eval", help="score a depth map against ground truth")
    eval_parser.add_argument("--pred", required=True, help="predicted depth PFM")
    eval_parser.add_argument("--gt", required=True, help="ground-truth depth PFM")
    eval_parser.add_argument("--mask", help="dynamic-object mask PGM for the region split")
    eval_parser.add_argument("--out", required=True, help="output directory")
    eval_parser.add_argument("--scene-id", default="scene")
    eval_parser.add_argument("--clip-max", type=float, default=DEFAULT_CLIP_MAX)
    eval_parser.add_argument("--median-scaling", action="store_true")
    eval_parser.set_defaults(handler=cmd_eval)

    ablate_parser = commands.add_parser("ablate", help="run the ablation grid over a suite")
    ablate_parser.add_argument("--config", required=True, help="suite YAML file")
    ablate_parser.add_argument("--out", required=True, help="output directory")
    ablate_parser.add_argument("--seed", type=int, help="overrides the suite seed")
    ablate_parser.add_argument("--prior", help="exact | noise:SIGMA | bias:BETA")
    _add_toggles(ablate_parser)
    ablate_parser.set_defaults(handler=cmd_ablate)

    grad_parser = commands.add_parser("gradcheck", help="check depth gradients numerically")
    grad_parser.add_argument("--config", required=True, help="scene YAML file")
    grad_parser.add_argument("--out", required=True, help="output directory")
    grad_parser.add_argument("--seed", type=int, help="overrides the scene seed")
    grad_parser.add_argument("--samples", type=int, default=200)
    grad_parser.add_argument("--eps", type=float, default=1e-4, help="relative step")
    grad_parser.add_argument("--threshold", type=float, default=1e-3)
    grad_parser.add_argument(
        "--prior", default="bias:0.1", help="depth at which gradients are checked"
    )
    grad_parser.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version exit cleanly; usage errors are invalid input
        if e.code in (0, None):
            raise
        return EXIT_VALIDATION
    try:
        configure_logging(args.log_level)
        return args.handler(args)
    except (DomdBenchError, ValidationError) as e:
        logger.error("%s", e)
        print(colored(f"error: {e}", "red"), file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception("%s failed", args.command)
        print(colored(f"failed: {e}", "red"), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
