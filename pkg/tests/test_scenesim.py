import numpy as np
import pytest
from pydantic import ValidationError

from src.domd_bench.errors import ParameterError, SpecInvalidError
from src.domd_bench.geometry import DepthMap, ImageBuffer, RigidPose, warp_image
from src.domd_bench.scenesim import (
    CUR,
    NEXT,
    PREV,
    EgoStep,
    FrameTriplet,
    PoseNoiseSpec,
    PriorMode,
    PriorSpec,
    SceneSpec,
    TextureSpec,
    make_prior,
    make_suite,
    parse_prior_flag,
    perturb_pose,
    render,
    render_frame,
    with_pose_noise,
)
from src.domd_bench.solver import SolverConfig
from tests.conftest import interior, moving_sprite_spec, static_plane_spec


def test_render_is_deterministic(sprite_spec):
    first, second = render(sprite_spec), render(sprite_spec)
    for a, b in zip(first.images, second.images):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(first.masks, second.masks):
        assert np.array_equal(a, b)


def test_static_plane_has_constant_depth_and_no_objects(static_triplet):
    for depth, mask in zip(static_triplet.gt_depths, static_triplet.masks):
        assert depth.valid.all()
        assert np.allclose(depth.depth, 10.0, atol=1e-12)
        assert not mask.any()


def test_static_plane_poses(static_triplet):
    assert static_triplet.pose_to_prev.allclose(RigidPose.from_translation([0.5, 0.0, 0.0]))
    assert static_triplet.pose_to_next.allclose(RigidPose.from_translation([-0.5, 0.0, 0.0]))


def test_sprite_moving_with_camera_is_still_in_raw_frames(sprite_triplet):
    masks = sprite_triplet.masks
    # 2 m wide at 5 m with fx 60: columns 36..59
    assert np.flatnonzero(masks[CUR].any(axis=0)).tolist() == list(range(36, 60))
    assert np.array_equal(masks[PREV], masks[CUR])
    assert np.array_equal(masks[NEXT], masks[CUR])
    sprite = masks[CUR]
    assert np.allclose(
        sprite_triplet.images[PREV].data[sprite], sprite_triplet.images[CUR].data[sprite], atol=1e-9
    )
    assert np.allclose(sprite_triplet.gt_depths[CUR].depth[sprite], 5.0)


def test_objects_at_reference_time_shift_by_camera_parallax(sprite_spec, sprite_triplet):
    _, _, mask = render_frame(sprite_spec, -1, 0)
    assert np.array_equal(mask, np.roll(sprite_triplet.masks[CUR], 6, axis=1))


def test_yawed_ego_motion_is_consistent_with_poses():
    spec = static_plane_spec()
    camera = spec.camera.model_copy(
        update={"ego_prev": EgoStep(translation=(0.4, 0.0, 0.1), yaw_deg=2.0)}
    )
    triplet = render(spec.model_copy(update={"camera": camera}))
    warped, valid = warp_image(
        triplet.images[PREV], triplet.gt_depths[CUR], triplet.pose_to_prev, triplet.intrinsics
    )
    region = interior(triplet.shape, 8) & valid
    error = np.abs(warped.data - triplet.images[CUR].data).mean(axis=2)
    assert region.sum() > 0
    assert error[region].mean() < 3e-2


def test_scene_spec_rejects_unknown_version_and_keys(sprite_spec):
    data = sprite_spec.model_dump()
    with pytest.raises(ValidationError):
        SceneSpec.model_validate({**data, "spec_version": 2})
    with pytest.raises(ValidationError):
        SceneSpec.model_validate({**data, "colour": "red"})


def test_scene_spec_rejects_object_behind_background():
    data = moving_sprite_spec().model_dump()
    data["objects"][0]["positions"] = [(0.0, 0.0, 15.0)] * 3
    with pytest.raises(ValidationError, match="not in front of the background"):
        SceneSpec.model_validate(data)


@pytest.mark.parametrize("kwargs", [{"contrast": 0.0}, {"mean": 0.9, "contrast": 0.4}])
def test_texture_must_be_matchable(kwargs):
    with pytest.raises(ValidationError):
        TextureSpec(**kwargs)


def test_triplet_rejects_mismatched_buffers(static_triplet):
    small = ImageBuffer.constant(8, 8, 0.5)
    with pytest.raises(SpecInvalidError):
        FrameTriplet(
            images=(small,) + static_triplet.images[1:],
            gt_depths=static_triplet.gt_depths,
            masks=static_triplet.masks,
            pose_to_prev=static_triplet.pose_to_prev,
            pose_to_next=static_triplet.pose_to_next,
            intrinsics=static_triplet.intrinsics,
        )


def test_make_prior_modes(rng):
    gt = DepthMap(rng.uniform(2.0, 30.0, size=(16, 20)), np.ones((16, 20), bool))
    exact = make_prior(gt)
    assert np.array_equal(exact.depth, gt.depth)
    assert exact.depth is not gt.depth

    biased = make_prior(gt, PriorMode.BIAS, beta=0.1)
    assert np.allclose(biased.depth, gt.depth * 1.1)

    noisy = make_prior(gt, PriorMode.NOISE, sigma=0.05, seed=3)
    ratio = np.log(noisy.depth / gt.depth)
    assert np.all(np.abs(ratio) <= 0.05 + 1e-12)
    assert np.array_equal(noisy.depth, make_prior(gt, "noise", sigma=0.05, seed=3).depth)
    assert not np.array_equal(noisy.depth, make_prior(gt, "noise", sigma=0.05, seed=4).depth)


def test_make_prior_rejects_bad_amounts():
    gt = DepthMap.constant(4, 4, 5.0)
    with pytest.raises(ParameterError):
        make_prior(gt, PriorMode.BIAS, beta=-1.0)
    with pytest.raises(ParameterError):
        make_prior(gt, PriorMode.NOISE, sigma=-0.1)
    with pytest.raises(ParameterError):
        make_prior(DepthMap.from_array(np.array([[1.0, 0.0], [1.0, 1.0]])))


def test_parse_prior_flag():
    assert parse_prior_flag("exact") == PriorSpec()
    assert parse_prior_flag("noise:0.05") == PriorSpec(mode=PriorMode.NOISE, sigma=0.05)
    assert parse_prior_flag("bias:-0.2").beta == -0.2
    with pytest.raises(ParameterError):
        parse_prior_flag("bias:lots")
    with pytest.raises(ParameterError):
        parse_prior_flag("guess:0.1")


def test_pose_noise_is_seeded():
    pose = RigidPose.from_translation([0.5, 0.0, 0.0])
    assert perturb_pose(pose, PoseNoiseSpec()) is pose
    noise = PoseNoiseSpec(translation=0.01, rotation_deg=0.2, seed=5)
    a = perturb_pose(pose, noise)
    assert a.allclose(perturb_pose(pose, noise), atol=0.0)
    assert not a.allclose(pose, atol=1e-6)
    assert not a.allclose(perturb_pose(pose, noise, stream=1), atol=1e-9)
    assert np.max(np.abs(a.translation - pose.translation)) < 0.05


def test_with_pose_noise_keeps_frames(static_triplet):
    noisy = with_pose_noise(static_triplet, PoseNoiseSpec(translation=0.01, seed=1))
    assert noisy.images is static_triplet.images
    assert not noisy.pose_to_prev.allclose(static_triplet.pose_to_prev, atol=1e-6)


def test_suite_depths_are_hypotheses_with_whole_pixel_parallax():
    grid = SolverConfig().depth_hypotheses()
    scenes = make_suite(count=6, seed=2)
    assert len({scene.name for scene in scenes}) == 6
    for index, scene in enumerate(scenes):
        camera = scene.camera
        fx_baseline = camera.fx * camera.ego_prev.translation[0]
        assert fx_baseline == pytest.approx(30.0)
        for depth in (scene.objects[0].positions[1][2], scene.background[0].depth):
            assert np.min(np.abs(grid.values - depth)) < 1e-9
            shift = fx_baseline / depth
            assert shift == pytest.approx(round(shift), abs=1e-9)
        positions = np.array(scene.objects[0].positions)
        step = positions[1] - positions[0]
        if index % 3 == 2:
            assert step[0] == 0.0 and step[1] > 0
        else:
            assert step[1] == 0.0 and abs(step[0]) == camera.ego_prev.translation[0]

    triplet = render(scenes[0])
    assert triplet.masks[CUR].any()
    assert triplet.shape == (64, 96)
    for index in (PREV, CUR, NEXT):
        assert triplet.masks[index].sum() == triplet.masks[CUR].sum()
