import math

import numpy as np
import pytest
from PIL import Image

from modules.sim2d import (
    ObjectSpec,
    SceneConfig,
    Sim2DEnv,
    TaskSpec,
    make_env,
    save_observation_png,
    task_reward,
    task_success,
)
from utils.errors import ConfigurationError, ContractError, ProtocolError


def block_scene(**kwargs):
    values = {"preset": "red_block", "image_size": 16, "episode_length": 30}
    values.update(kwargs)
    return SceneConfig.from_dict(values)


def run_actions(env, actions):
    reward = None
    for action in actions:
        _, reward, _, _, _ = env.step(action)
    return reward


def test_reset_returns_observation_and_info():
    env = Sim2DEnv(block_scene())
    observation, info = env.reset(seed=0)
    assert observation.image.shape == (16, 16, 3)
    assert observation.image.dtype == np.float32
    assert observation.proprio.shape == (5,)
    assert observation.segmask.shape == (16, 16)
    assert set(info) >= {"contacts", "poses", "grasped", "step", "success"}
    assert info["step"] == 0
    assert info["success"] is False


def test_depth_channel_is_appended():
    env = Sim2DEnv(block_scene(depth=True))
    observation, _ = env.reset(seed=0)
    assert observation.image.shape == (16, 16, 4)
    assert observation.image[..., 3].max() == pytest.approx(1.0)


def test_step_before_reset_is_rejected():
    env = Sim2DEnv(block_scene())
    with pytest.raises(ProtocolError):
        env.step(np.zeros(3))


def test_step_after_episode_end_is_rejected():
    env = Sim2DEnv(block_scene(episode_length=2))
    env.reset(seed=0)
    env.step(np.zeros(3))
    _, _, terminated, truncated, _ = env.step(np.zeros(3))
    assert truncated and not terminated
    with pytest.raises(ProtocolError):
        env.step(np.zeros(3))


def test_action_shape_is_checked():
    env = Sim2DEnv(block_scene())
    env.reset(seed=0)
    with pytest.raises(ContractError):
        env.step(np.zeros(2))


def test_same_seed_and_actions_render_identically():
    actions = np.random.default_rng(0).uniform(-1, 1, size=(10, 3))
    frames = []
    for _ in range(2):
        env = Sim2DEnv(block_scene(init_jitter=0.1))
        env.reset(seed=7)
        for action in actions:
            observation, *_ = env.step(action)
        frames.append(observation.image)
    np.testing.assert_array_equal(frames[0], frames[1])


def test_segmask_partitions_background_and_block():
    env = Sim2DEnv(block_scene())
    observation, _ = env.reset(seed=0)
    labels = np.unique(observation.segmask)
    assert set(labels.tolist()) == {0, 1}
    red = np.array([200, 30, 30]) / 255.0
    block_pixels = observation.image[observation.segmask == 1]
    np.testing.assert_allclose(block_pixels, np.broadcast_to(red, block_pixels.shape), atol=1e-6)


def test_open_gripper_pushes_block_forward():
    env = Sim2DEnv(block_scene())
    env.reset(seed=0)
    run_actions(env, [np.array([0.0, 1.0, -1.0])] * 15)
    assert env.state.poses[0, 1] == pytest.approx(0.4, abs=1e-9)
    assert env.state.poses[0, 0] == pytest.approx(0.0)


def test_grasped_block_is_carried_into_the_right_band():
    scene = SceneConfig(objects=block_scene().objects, image_size=16, episode_length=30, gripper_start=(0.0, -0.15))
    env = Sim2DEnv(scene, TaskSpec(task="push-sparse", direction="right"))
    env.reset(seed=0)
    reward = run_actions(env, [np.array([1.0, 0.0, 1.0])] * 6)
    assert env.state.grasped == 1
    assert env.state.poses[0, 0] == pytest.approx(0.3)
    assert reward == 1.0
    assert task_success(env.task, env.state, env.areas)


def test_lift_requires_grasp():
    scene = SceneConfig(objects=block_scene().objects, image_size=16, episode_length=30, gripper_start=(0.0, -0.15))
    env = Sim2DEnv(scene, TaskSpec.from_dict({"task": "lift-sparse"}))
    env.reset(seed=0)
    assert run_actions(env, [np.array([0.0, 1.0, 1.0])] * 2) == 1.0
    # Releasing drops the grasp, so the lift predicate no longer holds
    assert run_actions(env, [np.array([0.0, 0.0, -1.0])]) == 0.0


def test_faucet_turns_with_tangential_motion():
    faucet = SceneConfig.from_dict({"preset": "faucet", "image_size": 16, "episode_length": 30})
    scene = SceneConfig(objects=faucet.objects, image_size=16, episode_length=30, gripper_start=(0.2, 0.2))
    env = Sim2DEnv(scene, TaskSpec.from_dict({"task": "turn-sparse", "direction": "ccw"}))
    env.reset(seed=0)
    assert run_actions(env, [np.array([0.0, 1.0, -1.0])] * 2) == 0.0
    assert run_actions(env, [np.array([0.0, 1.0, -1.0])]) == 1.0
    assert env.state.poses[0, 2] == pytest.approx(0.25 + 0.01 / 0.0425 + 0.01 / 0.05)


def test_dense_reward_is_bounded_and_one_on_success():
    env = make_env({"preset": "red_block", "image_size": 16, "episode_length": 40}, {"task": "push-dense"})
    env.reset(seed=0)
    rng = np.random.default_rng(1)
    for _ in range(40):
        _, reward, *_ = env.step(rng.uniform(-1, 1, size=3))
        assert -1.0 <= reward <= 1.0
    state = env.state.copy()
    state.poses[0, :2] = state.initial_poses[0, :2] + np.array([0.3, 0.0])
    assert task_reward(env.task, state) == 1.0


def test_contacts_follow_the_contact_radius():
    scene = SceneConfig(objects=block_scene().objects, image_size=16, gripper_start=(0.0, -0.17))
    env = Sim2DEnv(scene)
    _, info = env.reset(seed=0)
    assert info["contacts"].tolist() == [True]
    scene = SceneConfig(objects=block_scene().objects, image_size=16, gripper_start=(0.0, -0.5))
    _, info = Sim2DEnv(scene).reset(seed=0)
    assert info["contacts"].tolist() == [False]


def test_overlapping_objects_are_rejected():
    objects = [
        ObjectSpec(1, "block", (255, 0, 0), 0.1, (0.0, 0.0, 0.0)),
        ObjectSpec(2, "block", (0, 255, 0), 0.1, (0.05, 0.0, 0.0)),
    ]
    with pytest.raises(ConfigurationError):
        SceneConfig(objects=objects)


@pytest.mark.parametrize(
    "task",
    [
        {"task": "turn-sparse"},
        {"task": "push-sparse", "object_id": 3},
        {"task": "push-sparse", "direction": "up"},
        {"task": "spin-sparse"},
    ],
)
def test_invalid_tasks_are_rejected(task):
    with pytest.raises(ConfigurationError):
        Sim2DEnv(block_scene(), TaskSpec.from_dict(task))


def test_scene_file_values_win_over_section_defaults(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text('{"preset": "faucet", "objects": [{"id": 1, "kind": "block", "color": [1, 2, 3], '
                    '"half_extent": 0.2}], "image_size": 32}')
    scene = SceneConfig.from_section({"file": str(path), "image_size": 64, "episode_length": 7})
    assert scene.image_size == 32
    assert scene.episode_length == 7
    assert scene.objects[0].color == (1, 2, 3)


def test_missing_scene_file_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        SceneConfig.from_file(tmp_path / "missing.json")


def test_save_observation_png(tmp_path):
    scene = block_scene()
    observation, _ = Sim2DEnv(scene).reset(seed=0)
    image_path, mask_path = save_observation_png(observation, tmp_path / "frame", scene)
    assert Image.open(image_path).size == (16, 16)
    mask = Image.open(mask_path)
    assert mask.mode == "P"
    np.testing.assert_array_equal(np.asarray(mask), observation.segmask)


def test_wrapped_turn_progress_counts_clockwise():
    faucet = SceneConfig.from_dict({"preset": "faucet", "image_size": 16})
    env = Sim2DEnv(faucet, TaskSpec.from_dict({"task": "turn-sparse", "direction": "cw"}))
    env.reset(seed=0)
    state = env.state.copy()
    state.poses[0, 2] = -0.6
    assert task_reward(env.task, state) == 1.0
    state.poses[0, 2] = 2 * math.pi - 0.6
    assert task_reward(env.task, state) == 1.0


def test_two_object_segmask_shows_both_labels():
    scene = SceneConfig.from_dict({"preset": "red_green_blocks", "image_size": 16})
    observation, _ = Sim2DEnv(scene).reset(seed=0)
    assert set(np.unique(observation.segmask).tolist()) == {0, 1, 2}


@pytest.mark.parametrize("task", ["push-dense", "lift-dense"])
def test_success_flag_marks_the_steps_a_sparse_task_pays(task):
    env = make_env({"preset": "red_block", "image_size": 16, "episode_length": 300,
                    "gripper_start": [0.0, -0.15]}, {"task": task})
    env.reset(seed=0)
    rng = np.random.default_rng(3)
    for _ in range(300):
        _, reward, _, _, info = env.step(rng.choice([-1.0, 1.0], size=3))
        assert info["success"] == (reward == 1.0)


@pytest.mark.parametrize("preset", ["red_block", "red_green_blocks", "faucet"])
def test_random_saturated_actions_keep_containment_and_grasp_consistency(preset):
    steps = 2000
    scene = SceneConfig.from_dict({"preset": preset, "image_size": 16, "episode_length": steps})
    env = Sim2DEnv(scene)
    env.reset(seed=0)
    rng = np.random.default_rng(11)
    kinds = [spec.kind for spec in scene.objects]
    for _ in range(steps):
        gripper, poses = env.state.gripper.copy(), env.state.poses.copy()
        _, _, _, _, info = env.step(rng.choice([-1.0, 1.0], size=3))
        state = env.state

        assert np.all(np.abs(state.gripper) <= 1.0)
        assert np.all(np.abs(state.poses[:, :2]) <= 1.0)
        assert info["grasped"].sum() <= 1
        assert info["grasped"].tolist() == [state.grasped == spec.id for spec in scene.objects]
        if state.grasped is None:
            continue
        assert state.grip
        assert kinds[state.grasped - 1] == "block"
        moved = state.poses[state.grasped - 1, :2] - poses[state.grasped - 1, :2]
        np.testing.assert_allclose(moved, state.gripper - gripper, atol=1e-12)
