"""
Planar manipulation simulator
A point gripper with a grip flag pushes, carries and turns flat objects
inside the [-1, 1]^2 workspace and renders small images with exact masks.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import gymnasium as gym
import numpy as np
from gymnasium import spaces
from numpy.typing import NDArray
from PIL import Image

from modules.metrics import WorkspaceAreas, wrap_angle
from utils.errors import ConfigurationError, ContractError, ProtocolError

# Configure logger
logger = logging.getLogger(__name__)

OBJECT_KINDS = ("block", "faucet")
TASKS = ("push-dense", "push-sparse", "lift-dense", "lift-sparse", "turn-dense", "turn-sparse")
PUSH_DIRECTIONS = ("right", "left", "far", "close")
TURN_DIRECTIONS = ("ccw", "cw")
WORKSPACE_DIAGONAL = 2.0 * math.sqrt(2.0)

BACKGROUND_TILES = ((214, 208, 196), (198, 192, 180))
GRIPPER_OPEN_COLOR = (40, 40, 48)
GRIPPER_CLOSED_COLOR = (90, 20, 110)
GRIPPER_RADIUS = 0.06


@dataclass(frozen=True)
class ObjectSpec:
    """One object of the scene; id 0 is reserved for the background"""

    id: int
    kind: str
    color: tuple[int, int, int]
    half_extent: float
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ObjectSpec":
        return cls(
            id=int(values["id"]),
            kind=values["kind"],
            color=tuple(int(c) for c in values["color"]),
            half_extent=float(values["half_extent"]),
            pose=tuple(float(p) for p in values.get("pose", (0.0, 0.0, 0.0))),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind,
            "color": list(self.color),
            "half_extent": self.half_extent,
            "pose": list(self.pose),
        }


SCENE_PRESETS = {
    "red_block": [
        {"id": 1, "kind": "block", "color": [200, 30, 30], "half_extent": 0.12, "pose": [0.0, 0.0, 0.0]},
    ],
    "red_green_blocks": [
        {"id": 1, "kind": "block", "color": [200, 30, 30], "half_extent": 0.12, "pose": [-0.3, 0.0, 0.0]},
        {"id": 2, "kind": "block", "color": [30, 170, 40], "half_extent": 0.12, "pose": [0.3, 0.0, 0.0]},
    ],
    "faucet": [
        {"id": 1, "kind": "faucet", "color": [40, 90, 200], "half_extent": 0.25, "pose": [0.0, 0.2, 0.0]},
    ],
}


@dataclass
class SceneConfig:
    """Objects, rendering and kinematics settings of one scene"""

    objects: list[ObjectSpec]
    image_size: int = 64
    depth: bool = False
    episode_length: int = 200
    step_size: float = 0.05
    radius_scale: float = 1.5
    gripper_start: tuple[float, float] = (0.0, -0.5)
    init_jitter: float = 0.0

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "SceneConfig":
        """Build a scene from a config section; 'objects' wins over 'preset'"""
        objects = values.get("objects")
        if objects is None:
            preset = values.get("preset", "red_block")
            if preset not in SCENE_PRESETS:
                raise ConfigurationError(f"unknown scene preset {preset!r}")
            objects = SCENE_PRESETS[preset]
        try:
            specs = [ObjectSpec.from_dict(o) for o in objects]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"malformed object entry: {e}")
        return cls(
            objects=specs,
            image_size=int(values.get("image_size", 64)),
            depth=bool(values.get("depth", False)),
            episode_length=int(values.get("episode_length", 200)),
            step_size=float(values.get("step_size", 0.05)),
            radius_scale=float(values.get("radius_scale", 1.5)),
            gripper_start=tuple(values.get("gripper_start", (0.0, -0.5))),
            init_jitter=float(values.get("init_jitter", 0.0)),
        )

    @classmethod
    def from_file(cls, path: str | Path, defaults: dict[str, Any] | None = None) -> "SceneConfig":
        """Load a scene description from a JSON file; keys it omits come from defaults"""
        try:
            with open(path, "r") as f:
                values = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read scene file {path}: {e}")
        merged = dict(defaults or {})
        merged.update(values)
        return cls.from_dict(merged)

    @classmethod
    def from_section(cls, section: dict[str, Any]) -> "SceneConfig":
        """Build from the experiment config's scene section"""
        if section.get("file"):
            defaults = {k: v for k, v in section.items() if k not in ("file", "preset")}
            return cls.from_file(section["file"], defaults)
        return cls.from_dict(section)

    def to_dict(self) -> dict[str, Any]:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "image_size": self.image_size,
            "depth": self.depth,
            "episode_length": self.episode_length,
            "step_size": self.step_size,
            "radius_scale": self.radius_scale,
            "gripper_start": list(self.gripper_start),
            "init_jitter": self.init_jitter,
        }

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def channels(self) -> int:
        return 4 if self.depth else 3

    @property
    def proprio_dim(self) -> int:
        return 5

    def contact_radius(self, spec: ObjectSpec) -> float:
        return self.radius_scale * spec.half_extent

    def validate(self):
        """Raise ConfigurationError on inconsistent scenes"""
        ids = [o.id for o in self.objects]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigurationError(f"object ids must be 1..N in order, got {ids}")
        for spec in self.objects:
            if spec.kind not in OBJECT_KINDS:
                raise ConfigurationError(f"object {spec.id}: unknown kind {spec.kind!r}")
            if not 0.0 < spec.half_extent < 1.0:
                raise ConfigurationError(f"object {spec.id}: half_extent out of range")
            if any(c < 0 or c > 255 for c in spec.color) or len(spec.color) != 3:
                raise ConfigurationError(f"object {spec.id}: color must be an RGB triple in 0..255")
            if max(abs(spec.pose[0]), abs(spec.pose[1])) > 1.0:
                raise ConfigurationError(f"object {spec.id}: initial pose outside the workspace")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                reach = a.half_extent + b.half_extent
                if abs(a.pose[0] - b.pose[0]) < reach and abs(a.pose[1] - b.pose[1]) < reach:
                    raise ConfigurationError(f"objects {a.id} and {b.id} overlap at their initial poses")
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise ConfigurationError(f"image_size must be a power of two >= 8, got {self.image_size}")
        if self.episode_length <= 0:
            raise ConfigurationError("episode_length must be positive")
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")


@dataclass(frozen=True)
class TaskSpec:
    """Task reward definition"""

    task: str = "push-sparse"
    object_id: int = 1
    direction: str = "right"
    turn_threshold: float = 0.5

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TaskSpec":
        task = values.get("task", "push-sparse")
        default_direction = {"push": "right", "lift": "up", "turn": "ccw"}.get(task.split("-")[0], "right")
        return cls(
            task=task,
            object_id=int(values.get("object_id", 1)),
            direction=values.get("direction") or default_direction,
            turn_threshold=float(values.get("turn_threshold", 0.5)),
        )

    @property
    def kind(self) -> str:
        return self.task.split("-")[0]

    @property
    def sparse(self) -> bool:
        return self.task.endswith("sparse")

    def validate(self, kinds: tuple[str, ...]):
        """Check the task against the object kinds of a scene"""
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not 1 <= self.object_id <= len(kinds):
            raise ConfigurationError(f"task refers to unknown object id {self.object_id}")
        kind = kinds[self.object_id - 1]
        if self.kind == "turn":
            if kind != "faucet":
                raise ConfigurationError("turn tasks need a faucet object")
            if self.direction not in TURN_DIRECTIONS:
                raise ConfigurationError(f"turn direction must be one of {TURN_DIRECTIONS}")
            if self.turn_threshold <= 0:
                raise ConfigurationError("turn_threshold must be positive")
        else:
            if kind != "block":
                raise ConfigurationError(f"{self.kind} tasks need a movable block")
            if self.kind == "push" and self.direction not in PUSH_DIRECTIONS:
                raise ConfigurationError(f"push direction must be one of {PUSH_DIRECTIONS}")


@dataclass
class SimState:
    """Full simulator state"""

    gripper: NDArray[np.float64]
    grip: bool
    poses: NDArray[np.float64]
    grasped: int | None
    step: int
    initial_poses: NDArray[np.float64]
    kinds: tuple[str, ...]

    def copy(self) -> "SimState":
        return replace(self, gripper=self.gripper.copy(), poses=self.poses.copy(),
                       initial_poses=self.initial_poses.copy())


@dataclass
class Observation:
    """Rendered frame, proprioception, segmentation mask and contact info"""

    image: NDArray[np.float32]
    proprio: NDArray[np.float32]
    segmask: NDArray[np.int64]
    info: dict[str, Any] = field(default_factory=dict)


def _pixel_centers(size: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """World coordinates of pixel centers; row 0 is the top of the workspace"""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xs, ys = np.meshgrid(coords, -coords)
    return xs, ys


def object_footprint(spec: ObjectSpec, pose, xs, ys) -> NDArray[np.bool_]:
    """Pixels covered by an object; blocks are squares, faucets are bars"""
    x, y, theta = pose
    dx, dy = xs - x, ys - y
    c, s = math.cos(theta), math.sin(theta)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    width = spec.half_extent if spec.kind == "block" else spec.half_extent / 3.0
    return (np.abs(lx) <= spec.half_extent) & (np.abs(ly) <= width)


def task_success(task: TaskSpec, state: SimState, areas: WorkspaceAreas | None = None) -> bool:
    """Success predicate of a task; the sparse variant pays 1 exactly when it holds"""
    areas = areas or WorkspaceAreas()
    task.validate(state.kinds)
    idx = task.object_id - 1
    pose = state.poses[idx]
    origin = state.initial_poses[idx]
    if task.kind == "turn":
        sign = 1.0 if task.direction == "ccw" else -1.0
        return sign * wrap_angle(pose[2] - origin[2]) >= task.turn_threshold
    direction = "up" if task.kind == "lift" else task.direction
    return areas.contains(direction, pose[:2] - origin[:2], state.grasped == task.object_id)


def task_reward(task: TaskSpec, state: SimState, areas: WorkspaceAreas | None = None) -> float:
    """Task reward for a state; sparse in {0, 1}, dense in [-1, 1]"""
    areas = areas or WorkspaceAreas()
    if task_success(task, state, areas):
        return 1.0
    if task.sparse:
        return 0.0

    idx = task.object_id - 1
    pose = state.poses[idx]
    origin = state.initial_poses[idx]
    grasped = state.grasped == task.object_id
    reach = float(np.linalg.norm(state.gripper - pose[:2])) / WORKSPACE_DIAGONAL

    if task.kind == "turn":
        sign = 1.0 if task.direction == "ccw" else -1.0
        progress = sign * wrap_angle(pose[2] - origin[2])
        shortfall = min(1.0, (task.turn_threshold - progress) / (math.pi + task.turn_threshold))
        return -0.5 * reach - 0.5 * shortfall

    offset = pose[:2] - origin[:2]
    direction = "up" if task.kind == "lift" else task.direction

    if task.kind == "lift":
        if not grasped:
            return -0.5 * reach - 0.5
        shortfall = max(0.0, areas.up_min - offset[1]) / areas.up_min
        return -0.5 * reach - 0.5 * min(1.0, shortfall)

    goal = origin[:2] + areas.unit_vector(direction) * areas.band_center()
    distance = float(np.linalg.norm(pose[:2] - goal)) / WORKSPACE_DIAGONAL
    return -0.5 * reach - 0.5 * distance


class Sim2DEnv(gym.Env):
    """Deterministic planar manipulation environment"""

    metadata = {"render_modes": ["rgb_array"], "render_fps": 10}

    def __init__(self, scene: SceneConfig, task: TaskSpec | None = None, areas: WorkspaceAreas | None = None):
        """Initialize the environment"""
        self.scene = scene
        self.task = task
        self.areas = areas or WorkspaceAreas()
        self.kinds = tuple(o.kind for o in scene.objects)
        if task is not None:
            task.validate(self.kinds)

        size, channels = scene.image_size, scene.channels
        self.observation_space = spaces.Dict({
            "image": spaces.Box(0.0, 1.0, shape=(size, size, channels), dtype=np.float32),
            "proprio": spaces.Box(-np.inf, np.inf, shape=(scene.proprio_dim,), dtype=np.float32),
            "segmask": spaces.Box(0, scene.num_objects, shape=(size, size), dtype=np.int64),
        })
        self.action_space = spaces.Box(-1.0, 1.0, shape=(3,), dtype=np.float32)

        self._xs, self._ys = _pixel_centers(size)
        self._background = self._render_background()
        self.state: SimState | None = None
        self._done = False
        self._last_delta = np.zeros(2)

        logger.info(
            f"Sim2D initialized with {scene.num_objects} object(s) {list(self.kinds)}, "
            f"{size}x{size}x{channels}, episode length {scene.episode_length}"
        )

    def _render_background(self) -> NDArray[np.uint8]:
        """Checkerboard table texture"""
        size = self.scene.image_size
        tile = max(1, size // 8)
        rows, cols = np.indices((size, size)) // tile
        checker = (rows + cols) % 2
        background = np.empty((size, size, 3), dtype=np.uint8)
        background[checker == 0] = BACKGROUND_TILES[0]
        background[checker == 1] = BACKGROUND_TILES[1]
        return background

    def reset(self, *, seed: int | None = None, options: dict | None = None):
        """Place objects at their configured poses and render the first frame"""
        if seed is not None:
            seed = int(seed) % (2 ** 64)
        super().reset(seed=seed)

        poses = np.array([o.pose for o in self.scene.objects], dtype=np.float64).reshape(-1, 3)
        if self.scene.init_jitter > 0:
            jitter = self.np_random.uniform(-self.scene.init_jitter, self.scene.init_jitter, size=(len(poses), 2))
            movable = np.array([k == "block" for k in self.kinds])
            poses[movable, :2] = np.clip(poses[movable, :2] + jitter[movable], -1.0, 1.0)

        self.state = SimState(
            gripper=np.array(self.scene.gripper_start, dtype=np.float64),
            grip=False,
            poses=poses,
            grasped=None,
            step=0,
            initial_poses=poses.copy(),
            kinds=self.kinds,
        )
        self._done = False
        self._last_delta = np.zeros(2)
        observation = self._observe()
        return observation, observation.info

    def step(self, action):
        """Advance one step; returns (observation, reward, terminated, truncated, info)"""
        if self.state is None:
            raise ProtocolError("step called before reset")
        if self._done:
            raise ProtocolError("step called after the episode ended; call reset")

        action = np.asarray(action, dtype=np.float64)
        if action.shape != (3,):
            raise ContractError(f"action must have shape (3,), got {action.shape}")
        action = np.clip(action, -1.0, 1.0)

        state = self.state
        previous = state.gripper.copy()
        target = np.clip(previous + action[:2] * self.scene.step_size, -1.0, 1.0)
        delta = target - previous

        # Grip flag: release on open, grasp the nearest block in reach on close
        state.grip = bool(action[2] > 0)
        if not state.grip:
            state.grasped = None
        elif state.grasped is None:
            state.grasped = self._nearest_graspable(previous)

        if state.grasped is not None:
            idx = state.grasped - 1
            carried = np.clip(state.poses[idx, :2] + delta, -1.0, 1.0)
            delta = carried - state.poses[idx, :2]
            state.poses[idx, :2] = carried
            state.gripper = previous + delta
        else:
            state.gripper = target
            self._push_blocks(previous, delta)

        self._turn_faucets(previous, delta)

        state.step += 1
        self._last_delta = delta
        self._done = state.step >= self.scene.episode_length

        observation = self._observe()
        reward = task_reward(self.task, state, self.areas) if self.task is not None else 0.0
        logger.debug(f"step {state.step}: gripper {state.gripper}, grasped {state.grasped}, reward {reward}")
        return observation, float(reward), False, self._done, observation.info

    def _nearest_graspable(self, position) -> int | None:
        best, best_distance = None, math.inf
        for spec in self.scene.objects:
            if spec.kind != "block":
                continue
            distance = float(np.linalg.norm(self.state.poses[spec.id - 1, :2] - position))
            if distance <= self.scene.contact_radius(spec) and distance < best_distance:
                best, best_distance = spec.id, distance
        return best

    def _push_blocks(self, previous, delta):
        """An open gripper moving into a block translates it"""
        if not np.any(delta):
            return
        gx, gy = self.state.gripper
        for spec in self.scene.objects:
            if spec.kind != "block":
                continue
            pose = self.state.poses[spec.id - 1]
            inside = object_footprint(spec, pose, np.array([gx]), np.array([gy]))[0]
            towards = float(np.dot(delta, pose[:2] - previous)) > 0.0
            if inside and towards:
                pose[:2] = np.clip(pose[:2] + delta, -1.0, 1.0)

    def _turn_faucets(self, previous, delta):
        """Tangential gripper motion near a faucet rotates it about its fixed base"""
        for spec in self.scene.objects:
            if spec.kind != "faucet":
                continue
            pose = self.state.poses[spec.id - 1]
            lever = previous - pose[:2]
            distance_sq = float(np.dot(lever, lever))
            if distance_sq < 1e-12 or math.sqrt(distance_sq) > self.scene.contact_radius(spec):
                continue
            torque = lever[0] * delta[1] - lever[1] * delta[0]
            pose[2] = wrap_angle(pose[2] + torque / distance_sq)

    def contacts(self) -> NDArray[np.bool_]:
        """Contact flag per object: gripper within the contact radius"""
        flags = []
        for spec in self.scene.objects:
            distance = float(np.linalg.norm(self.state.gripper - self.state.poses[spec.id - 1, :2]))
            flags.append(distance <= self.scene.contact_radius(spec))
        return np.array(flags, dtype=bool)

    def render_arrays(self) -> tuple[NDArray[np.uint8], NDArray[np.int64], NDArray[np.uint8]]:
        """Rasterize the current state: (rgb, segmask, depth), colors and depth as uint8"""
        size = self.scene.image_size
        rgb = self._background.copy()
        segmask = np.zeros((size, size), dtype=np.int64)
        depth = np.zeros((size, size), dtype=np.uint8)
        n = max(1, self.scene.num_objects)

        # Higher ids are drawn on top
        for spec in self.scene.objects:
            covered = object_footprint(spec, self.state.poses[spec.id - 1], self._xs, self._ys)
            rgb[covered] = spec.color
            segmask[covered] = spec.id
            depth[covered] = round(255 * spec.id / n)

        gx, gy = self.state.gripper
        gripper = (self._xs - gx) ** 2 + (self._ys - gy) ** 2 <= GRIPPER_RADIUS ** 2
        rgb[gripper] = GRIPPER_CLOSED_COLOR if self.state.grip else GRIPPER_OPEN_COLOR
        segmask[gripper] = 0
        depth[gripper] = 0
        return rgb, segmask, depth

    def render(self):
        rgb, _, _ = self.render_arrays()
        return rgb

    def _observe(self) -> Observation:
        rgb, segmask, depth = self.render_arrays()
        image = rgb.astype(np.float32) / 255.0
        if self.scene.depth:
            image = np.concatenate([image, depth[..., None].astype(np.float32) / 255.0], axis=-1)

        state = self.state
        proprio = np.array(
            [state.gripper[0], state.gripper[1], 1.0 if state.grip else 0.0,
             self._last_delta[0], self._last_delta[1]],
            dtype=np.float32,
        )
        grasp_flags = np.array([state.grasped == spec.id for spec in self.scene.objects], dtype=bool)
        info = {
            "contacts": self.contacts(),
            "poses": state.poses.copy(),
            "grasped": grasp_flags,
            "step": state.step,
            "success": self.task is not None and task_success(self.task, state, self.areas),
        }
        return Observation(image=image, proprio=proprio, segmask=segmask, info=info)


def make_env(scene_section: dict[str, Any], task_section: dict[str, Any] | None = None,
             areas: WorkspaceAreas | None = None) -> Sim2DEnv:
    """Build an environment from experiment config sections"""
    scene = SceneConfig.from_section(scene_section)
    task = TaskSpec.from_dict(task_section) if task_section else None
    return Sim2DEnv(scene, task, areas)


def mask_palette(scene: SceneConfig) -> list[int]:
    """Flat 256-entry PNG palette: background grey, then object colors"""
    palette = [120, 120, 120]
    for spec in scene.objects:
        palette.extend(spec.color)
    palette.extend([0, 0, 0] * (256 - len(palette) // 3))
    return palette


def save_observation_png(observation: Observation, prefix: str | Path, scene: SceneConfig) -> tuple[Path, Path]:
    """Write the RGB image and a paletted mask next to each other"""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    image_path = prefix.with_name(prefix.name + "_image.png")
    mask_path = prefix.with_name(prefix.name + "_mask.png")

    rgb = np.round(observation.image[..., :3] * 255.0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(image_path)

    mask = Image.fromarray(observation.segmask.astype(np.uint8), mode="P")
    mask.putpalette(mask_palette(scene))
    mask.save(mask_path)
    logger.debug(f"Saved observation to {image_path} and {mask_path}")
    return image_path, mask_path
