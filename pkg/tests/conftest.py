import numpy as np
import pytest

from src.domd_bench.geometry import CameraIntrinsics
from src.domd_bench.scenesim import (
    CameraSpec,
    EgoStep,
    PlaneSpec,
    SceneSpec,
    SpriteSpec,
    TextureSpec,
    render,
)

FX = 60.0
WIDTH, HEIGHT = 96, 64
BASELINE = 0.5


def camera(ego_prev=(BASELINE, 0.0, 0.0), ego_next=(BASELINE, 0.0, 0.0)) -> CameraSpec:
    return CameraSpec(
        fx=FX,
        fy=FX,
        cx=(WIDTH - 1) / 2,
        cy=(HEIGHT - 1) / 2,
        width=WIDTH,
        height=HEIGHT,
        ego_prev=EgoStep(translation=ego_prev),
        ego_next=EgoStep(translation=ego_next),
    )


def static_plane_spec(depth: float = 10.0, **camera_kwargs) -> SceneSpec:
    # 12-pixel lattice cells at the plane's depth
    return SceneSpec(
        spec_version=1,
        name="static-plane",
        camera=camera(**camera_kwargs),
        background=[
            PlaneSpec(depth=depth, texture=TextureSpec(seed=3, scale=FX / (12 * depth)))
        ],
    )


def moving_sprite_spec() -> SceneSpec:
    """Sprite at 5 m moving with the camera: 6 px camera parallax, none in the raw frames."""
    return SceneSpec(
        spec_version=1,
        name="moving-sprite",
        camera=camera(),
        background=[PlaneSpec(depth=12.0, texture=TextureSpec(seed=3, scale=FX / (12 * 12.0)))],
        objects=[
            SpriteSpec(
                size=(2.0, 1.6),
                positions=((-BASELINE, 0.0, 5.0), (0.0, 0.0, 5.0), (BASELINE, 0.0, 5.0)),
                texture=TextureSpec(seed=7, scale=1.5, octaves=2),
            )
        ],
    )


@pytest.fixture
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(FX, FX, (WIDTH - 1) / 2, (HEIGHT - 1) / 2, WIDTH, HEIGHT)


@pytest.fixture
def static_spec() -> SceneSpec:
    return static_plane_spec()


@pytest.fixture
def sprite_spec() -> SceneSpec:
    return moving_sprite_spec()


@pytest.fixture
def static_triplet(static_spec):
    return render(static_spec)


@pytest.fixture
def sprite_triplet(sprite_spec):
    return render(sprite_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def interior(shape, margin: int) -> np.ndarray:
    mask = np.zeros(shape, bool)
    mask[margin:-margin, margin:-margin] = True
    return mask
