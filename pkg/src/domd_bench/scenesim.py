"""
Analytic renderer of layered textured planes with moving billboard sprites.

The renderer is the oracle for every other stage: each pixel is ray-cast in closed form
against the background planes and the sprites, so ground-truth depth, dynamic masks and
poses are exact. The world frame is the camera frame at time t; cameras at t-1 and t+1
are placed by the scene's ego-motion.

Here is a quick example of using the module:

    >>> spec = SceneSpec.model_validate(yaml.safe_load(open("scene.yaml")))
    >>> triplet = render(spec)
    >>> prior = make_prior(triplet.gt_depths[CUR], PriorMode.BIAS, beta=0.1)
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from src.domd_bench.errors import ParameterError, SpecInvalidError
from src.domd_bench.geometry import (
    CameraIntrinsics,
    DepthMap,
    ImageBuffer,
    RigidPose,
    pixel_grid,
)

logger = logging.getLogger(__name__)

SPEC_VERSION = 1
PREV, CUR, NEXT = 0, 1, 2
FRAME_OFFSETS = (-1, 0, 1)
LATTICE_SIZE = 256


class TextureKind(str, Enum):
    VALUE_NOISE = "value_noise"
    SINUSOID = "sinusoid"


class PriorMode(str, Enum):
    EXACT = "exact"
    NOISE = "noise"
    BIAS = "bias"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TextureSpec(_Strict):
    kind: TextureKind = TextureKind.VALUE_NOISE
    seed: int = 0
    # lattice cells (value noise) or base cycles (sinusoid) per meter
    scale: float = Field(default=1.0, gt=0)
    octaves: int = Field(default=3, ge=1, le=8)
    mean: float = Field(default=0.5, ge=0, le=1)
    contrast: float = Field(default=0.4, ge=0, le=1)

    @model_validator(mode="after")
    def _non_constant(self):
        if self.contrast <= 0:
            raise ValueError("texture contrast must be positive (constant textures cannot be matched)")
        if self.mean - self.contrast / 2 < 0 or self.mean + self.contrast / 2 > 1:
            raise ValueError("texture mean +/- contrast/2 must stay inside [0, 1]")
        return self


class PlaneSpec(_Strict):
    """Infinite plane through (0, 0, depth) of the time-t camera frame."""

    depth: float = Field(gt=0)
    tilt_x_deg: float = Field(default=0.0, gt=-80, lt=80)
    tilt_y_deg: float = Field(default=0.0, gt=-80, lt=80)
    texture: TextureSpec = TextureSpec()


class SpriteSpec(_Strict):
    """Fronto-parallel rectangle with one world-frame center per frame (t-1, t, t+1)."""

    size: Tuple[float, float]
    positions: Tuple[
        Tuple[float, float, float], Tuple[float, float, float], Tuple[float, float, float]
    ]
    texture: TextureSpec = TextureSpec(seed=1)

    @field_validator("size")
    @classmethod
    def _positive_size(cls, size):
        if min(size) <= 0:
            raise ValueError("sprite size must be positive")
        return size

    @field_validator("positions")
    @classmethod
    def _positive_depth(cls, positions):
        if any(p[2] <= 0 for p in positions):
            raise ValueError("sprite depth must be positive in every frame")
        return positions


class EgoStep(_Strict):
    """Camera displacement over one frame step, expressed in the earlier camera's axes."""

    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_deg: float = 0.0


class CameraSpec(_Strict):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(ge=2, le=4096)
    height: int = Field(ge=2, le=4096)
    # camera motion t-1 -> t and t -> t+1
    ego_prev: EgoStep = EgoStep()
    ego_next: EgoStep = EgoStep()

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class PriorSpec(_Strict):
    mode: PriorMode = PriorMode.EXACT
    sigma: float = 0.0
    beta: float = 0.0
    seed: int = 0


class PoseNoiseSpec(_Strict):
    translation: float = Field(default=0.0, ge=0)
    rotation_deg: float = Field(default=0.0, ge=0)
    seed: int = 0


class SceneSpec(_Strict):
    spec_version: int
    name: str = "scene"
    seed: int = 0
    camera: CameraSpec
    background: List[PlaneSpec] = Field(min_length=1)
    objects: List[SpriteSpec] = []
    prior: PriorSpec = PriorSpec()
    pose_noise: PoseNoiseSpec = PoseNoiseSpec()

    @field_validator("spec_version")
    @classmethod
    def _known_version(cls, version):
        if version != SPEC_VERSION:
            raise ValueError(f"unsupported spec_version {version}, expected {SPEC_VERSION}")
        return version

    @model_validator(mode="after")
    def _objects_in_front(self):
        self.camera.intrinsics()
        for index, sprite in enumerate(self.objects):
            for frame, center in enumerate(sprite.positions):
                direction = np.asarray(center, dtype=np.float64)
                behind = _background_depth_along(self.background, np.zeros(3), direction / direction[2])
                if not center[2] < behind:
                    raise ValueError(
                        f"objects[{index}] at frame {frame} is not in front of the background "
                        f"(object z={center[2]}, background z={behind:.3f})"
                    )
        return self


@dataclass(frozen=True, eq=False)
class FrameTriplet:
    """Frames t-1, t, t+1 (indexed with PREV, CUR, NEXT) with their oracle data."""

    images: Tuple[ImageBuffer, ImageBuffer, ImageBuffer]
    gt_depths: Tuple[DepthMap, DepthMap, DepthMap]
    masks: Tuple[np.ndarray, np.ndarray, np.ndarray]
    pose_to_prev: RigidPose
    pose_to_next: RigidPose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        shape = self.intrinsics.shape
        for image, depth, mask in zip(self.images, self.gt_depths, self.masks):
            if image.shape != shape or depth.shape != shape or mask.shape != shape:
                raise SpecInvalidError(f"triplet buffers must all be {shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.intrinsics.shape


# ---------------------------------------------------------------------------
# Textures


@lru_cache(maxsize=64)
def _lattice(seed: int, octaves: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((octaves, 3, LATTICE_SIZE, LATTICE_SIZE))


@lru_cache(maxsize=64)
def _waves(seed: int, octaves: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # per octave and channel: direction angle, frequency jitter, phase
    return rng.random((octaves, 3, 3))


def _value_noise(texture: TextureSpec, seed: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    lattice = _lattice(seed, texture.octaves)
    total = np.zeros(s.shape + (3,))
    norm = 0.0
    for octave in range(texture.octaves):
        frequency = texture.scale * 2.0**octave
        amplitude = 0.5**octave
        xs, ys = s * frequency, t * frequency
        x0, y0 = np.floor(xs), np.floor(ys)
        fx, fy = xs - x0, ys - y0
        # smoothstep keeps the field C1 across lattice cells
        fx = fx * fx * (3.0 - 2.0 * fx)
        fy = fy * fy * (3.0 - 2.0 * fy)
        ix0 = x0.astype(np.int64) % LATTICE_SIZE
        iy0 = y0.astype(np.int64) % LATTICE_SIZE
        ix1 = (ix0 + 1) % LATTICE_SIZE
        iy1 = (iy0 + 1) % LATTICE_SIZE
        for channel in range(3):
            grid = lattice[octave, channel]
            top = grid[iy0, ix0] * (1 - fx) + grid[iy0, ix1] * fx
            bottom = grid[iy1, ix0] * (1 - fx) + grid[iy1, ix1] * fx
            total[..., channel] += amplitude * (top * (1 - fy) + bottom * fy)
        norm += amplitude
    return total / norm


def _sinusoid(texture: TextureSpec, seed: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    waves = _waves(seed, texture.octaves)
    total = np.zeros(s.shape + (3,))
    norm = 0.0
    for octave in range(texture.octaves):
        amplitude = 0.5**octave
        for channel in range(3):
            angle, jitter, phase = waves[octave, channel]
            frequency = texture.scale * 2.0**octave * (0.75 + 0.5 * jitter)
            direction = 2.0 * np.pi * angle
            arg = 2.0 * np.pi * frequency * (s * np.cos(direction) + t * np.sin(direction))
            total[..., channel] += amplitude * 0.5 * (1.0 + np.sin(arg + 2.0 * np.pi * phase))
        norm += amplitude
    return total / norm


def shade(texture: TextureSpec, scene_seed: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """RGB texture values at surface coordinates ``(s, t)`` in meters."""
    seed = texture.seed + scene_seed
    if texture.kind is TextureKind.VALUE_NOISE:
        field = _value_noise(texture, seed, s, t)
    else:
        field = _sinusoid(texture, seed, s, t)
    return np.clip(texture.mean + texture.contrast * (field - 0.5), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Cameras and ray casting


def _ego_rotation(step: EgoStep) -> np.ndarray:
    return Rotation.from_euler("y", step.yaw_deg, degrees=True).as_matrix()


def camera_placement(camera: CameraSpec, offset: int) -> Tuple[np.ndarray, np.ndarray]:
    """Camera-to-world rotation and center of the camera at frame ``t + offset``."""
    if offset == 0:
        return np.eye(3), np.zeros(3)
    if offset == 1:
        return _ego_rotation(camera.ego_next), np.asarray(camera.ego_next.translation, float)
    if offset == -1:
        # camera t sits at R_prev @ T_prev + c_prev with R_prev as its orientation
        rotation = _ego_rotation(camera.ego_prev).T
        center = -rotation @ np.asarray(camera.ego_prev.translation, float)
        return rotation, center
    raise ParameterError(f"frame offset must be -1, 0 or 1, got {offset}")


def pose_from_current(camera: CameraSpec, offset: int) -> RigidPose:
    """Pose mapping time-t camera points into the camera at ``t + offset``."""
    rotation, center = camera_placement(camera, offset)
    return RigidPose(rotation.T, -rotation.T @ center)


def _plane_frame(plane: PlaneSpec) -> Tuple[np.ndarray, np.ndarray]:
    rotation = Rotation.from_euler("xy", [plane.tilt_x_deg, plane.tilt_y_deg], degrees=True)
    return rotation.as_matrix(), np.array([0.0, 0.0, plane.depth])


def _intersect_plane(
    normal: np.ndarray, anchor: np.ndarray, origin: np.ndarray, directions: np.ndarray
) -> np.ndarray:
    denom = directions @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (anchor - origin) @ normal / denom
    return np.where(np.isfinite(s) & (s > 0), s, np.inf)


def _background_depth_along(
    planes: List[PlaneSpec], origin: np.ndarray, direction: np.ndarray
) -> float:
    best = np.inf
    for plane in planes:
        frame, anchor = _plane_frame(plane)
        s = _intersect_plane(frame[:, 2], anchor, origin, direction[None, :])[0]
        best = min(best, float(s))
    return best


def render_frame(
    spec: SceneSpec, camera_offset: int, object_offset: Optional[int] = None
) -> Tuple[ImageBuffer, DepthMap, np.ndarray]:
    """Ray-cast one view.

    Args:
        spec: scene description
        camera_offset: which camera renders the view (-1, 0 or 1)
        object_offset: frame whose sprite positions are used; defaults to the camera's
            own frame. Rendering camera -1 with objects at 0 gives the view the
            disentangled reference frame should reproduce.

    Returns:
        image, ground-truth depth, dynamic-object mask
    """
    if object_offset is None:
        object_offset = camera_offset
    intr = spec.camera.intrinsics()
    rotation, center = camera_placement(spec.camera, camera_offset)

    grid = pixel_grid(intr.height, intr.width)
    rays = np.stack(
        [
            (grid[..., 0] - intr.cx) / intr.fx,
            (grid[..., 1] - intr.cy) / intr.fy,
            np.ones(intr.shape),
        ],
        axis=-1,
    )
    directions = rays @ rotation.T

    depth = np.full(intr.shape, np.inf)
    winner = np.full(intr.shape, -1, dtype=np.int64)
    surfaces = []
    for plane in spec.background:
        frame, anchor = _plane_frame(plane)
        s = _intersect_plane(frame[:, 2], anchor, center, directions)
        surfaces.append(("plane", plane, frame, anchor))
        closer = s < depth
        depth = np.where(closer, s, depth)
        winner = np.where(closer, len(surfaces) - 1, winner)

    normal = np.array([0.0, 0.0, 1.0])
    for sprite in spec.objects:
        anchor = np.asarray(sprite.positions[FRAME_OFFSETS.index(object_offset)], float)
        s = _intersect_plane(normal, anchor, center, directions)
        hit = center + np.where(np.isfinite(s), s, 0.0)[..., None] * directions
        inside = (np.abs(hit[..., 0] - anchor[0]) <= sprite.size[0] / 2) & (
            np.abs(hit[..., 1] - anchor[1]) <= sprite.size[1] / 2
        )
        s = np.where(inside, s, np.inf)
        surfaces.append(("sprite", sprite, np.eye(3), anchor))
        closer = s <= depth
        depth = np.where(closer, s, depth)
        winner = np.where(closer, len(surfaces) - 1, winner)

    if np.any(winner < 0):
        missing = int(np.sum(winner < 0))
        raise SpecInvalidError(
            f"{missing} rays of camera {camera_offset:+d} hit nothing; "
            "the background must cover the frustum"
        )

    points = center + depth[..., None] * directions
    image = np.zeros(intr.shape + (3,))
    for index, (_, surface, frame, anchor) in enumerate(surfaces):
        hit = winner == index
        if not np.any(hit):
            continue
        local = (points[hit] - anchor) @ frame
        image[hit] = shade(surface.texture, spec.seed, local[:, 0], local[:, 1])

    dynamic = winner >= len(spec.background)
    logger.debug(
        "rendered camera %+d (objects at %+d): %d dynamic pixels",
        camera_offset,
        object_offset,
        int(dynamic.sum()),
    )
    return ImageBuffer(image), DepthMap(depth, np.ones(intr.shape, bool)), dynamic


def render(spec: SceneSpec) -> FrameTriplet:
    """Render frames t-1, t, t+1 with ground truth."""
    views = [render_frame(spec, offset) for offset in FRAME_OFFSETS]
    triplet = FrameTriplet(
        images=tuple(view[0] for view in views),
        gt_depths=tuple(view[1] for view in views),
        masks=tuple(view[2] for view in views),
        pose_to_prev=pose_from_current(spec.camera, -1),
        pose_to_next=pose_from_current(spec.camera, 1),
        intrinsics=spec.camera.intrinsics(),
    )
    logger.info("rendered scene '%s' at %dx%d", spec.name, spec.camera.width, spec.camera.height)
    return triplet


def perturb_pose(pose: RigidPose, noise: PoseNoiseSpec, stream: int = 0) -> RigidPose:
    """Apply seeded uniform translation/rotation noise to a pose."""
    if noise.translation == 0 and noise.rotation_deg == 0:
        return pose
    rng = np.random.default_rng([noise.seed, stream])
    delta_t = rng.uniform(-noise.translation, noise.translation, size=3)
    delta_r = rng.uniform(-noise.rotation_deg, noise.rotation_deg, size=3)
    jitter = RigidPose.from_euler("xyz", delta_r, delta_t)
    return jitter.compose(pose)


def with_pose_noise(triplet: FrameTriplet, noise: PoseNoiseSpec) -> FrameTriplet:
    """Copy of ``triplet`` whose poses carry seeded estimation noise."""
    return replace(
        triplet,
        pose_to_prev=perturb_pose(triplet.pose_to_prev, noise, stream=0),
        pose_to_next=perturb_pose(triplet.pose_to_next, noise, stream=1),
    )


def make_prior(
    gt: DepthMap,
    mode: PriorMode = PriorMode.EXACT,
    sigma: float = 0.0,
    beta: float = 0.0,
    seed: int = 0,
) -> DepthMap:
    """Corrupt ground truth into a depth prior.

    - exact: copy
    - noise: ``d * exp(eps)``, ``eps ~ Uniform(-sigma, sigma)`` per pixel, seeded
    - bias: ``d * (1 + beta)``
    """
    mode = PriorMode(mode)
    if not np.all(gt.valid):
        raise ParameterError("ground truth must be valid everywhere to build a prior")
    if mode is PriorMode.EXACT:
        return DepthMap(gt.depth.copy(), gt.valid.copy())
    if mode is PriorMode.NOISE:
        if not (np.isfinite(sigma) and sigma >= 0):
            raise ParameterError(f"noise amplitude must be finite and >= 0, got {sigma}")
        eps = np.random.default_rng(seed).uniform(-sigma, sigma, size=gt.shape)
        return DepthMap(gt.depth * np.exp(eps), gt.valid.copy())
    if not (np.isfinite(beta) and 1.0 + beta > 0):
        raise ParameterError(f"bias {beta} would produce non-positive depth")
    return DepthMap(gt.depth * (1.0 + beta), gt.valid.copy())


def prior_from_spec(gt: DepthMap, prior: PriorSpec, scene_seed: int = 0) -> DepthMap:
    return make_prior(gt, prior.mode, prior.sigma, prior.beta, prior.seed + scene_seed)


def parse_prior_flag(flag: str) -> PriorSpec:
    """Parse ``exact``, ``noise:SIGMA`` or ``bias:BETA``."""
    name, _, value = flag.partition(":")
    try:
        mode = PriorMode(name)
    except ValueError:
        raise ParameterError(f"unknown prior mode '{name}'") from None
    if mode is PriorMode.EXACT:
        return PriorSpec()
    try:
        amount = float(value)
    except ValueError:
        raise ParameterError(f"prior '{flag}' needs a numeric amount") from None
    if mode is PriorMode.NOISE:
        return PriorSpec(mode=mode, sigma=amount)
    return PriorSpec(mode=mode, beta=amount)


# ---------------------------------------------------------------------------
# Seeded suite

# fx * baseline of every suite camera, in pixel-meters
SUITE_FX_BASELINE = 30.0
SUITE_BACKGROUND_DEPTH = 10.0
# sprite depths per motion kind (with the camera, against it, across it); all of them and
# the background sit on the default hypothesis grid with a whole-pixel parallax
SUITE_SPRITE_DEPTHS = ((2.5, 10.0 / 3.0, 5.0), (10.0 / 3.0, 5.0), (2.5, 5.0))


def make_suite_scene(
    index: int, seed: int = 0, width: int = 96, height: int = 64, prior: PriorSpec = PriorSpec()
) -> SceneSpec:
    """Moving-sprite scene number ``index`` of the standard suite.

    The camera translates sideways by ``baseline`` per frame and the sprite moves with the
    camera, against it, or vertically across it (``index % 3``). Sprite and background
    depths are exact hypotheses of the default solver grid and give a whole number of
    pixels of parallax, so nearest-pixel splats are exact under an exact prior and the
    true depth is a cost-volume bin.
    """
    rng = np.random.default_rng([seed, index])
    kind = index % 3
    fx = 0.625 * width
    baseline = SUITE_FX_BASELINE / fx
    choices = SUITE_SPRITE_DEPTHS[kind]
    sprite_z = float(choices[int(rng.integers(len(choices)))])
    pixel_m = sprite_z / fx
    lateral = float(rng.uniform(-1.0, 1.0)) * width / 12 * pixel_m
    vertical = float(rng.uniform(-1.0, 1.0)) * height / 12 * pixel_m
    step = np.array([(baseline, -baseline, 0.0)[kind], baseline / 2 if kind == 2 else 0.0, 0.0])
    center = np.array([lateral, vertical, sprite_z])
    positions = tuple(tuple(float(c) for c in center + k * step) for k in FRAME_OFFSETS)
    background_px = SUITE_BACKGROUND_DEPTH / fx
    return SceneSpec(
        spec_version=SPEC_VERSION,
        name=f"suite-{seed}-{index:02d}",
        seed=seed * 1000 + index,
        camera=CameraSpec(
            fx=fx,
            fy=fx,
            cx=(width - 1) / 2,
            cy=(height - 1) / 2,
            width=width,
            height=height,
            ego_prev=EgoStep(translation=(baseline, 0.0, 0.0)),
            ego_next=EgoStep(translation=(baseline, 0.0, 0.0)),
        ),
        background=[
            PlaneSpec(
                depth=SUITE_BACKGROUND_DEPTH,
                texture=TextureSpec(seed=10 + index, scale=1.0 / (12 * background_px), octaves=3),
            )
        ],
        objects=[
            SpriteSpec(
                size=(0.3 * width * pixel_m, 0.35 * height * pixel_m),
                positions=positions,
                texture=TextureSpec(seed=50 + index, scale=1.0 / (10 * pixel_m), octaves=2),
            )
        ],
        prior=prior,
    )


def make_suite(
    count: int = 20, seed: int = 0, width: int = 96, height: int = 64, prior: PriorSpec = PriorSpec()
) -> List[SceneSpec]:
    return [make_suite_scene(index, seed, width, height, prior) for index in range(count)]
