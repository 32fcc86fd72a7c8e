"""
Exploration metrics: contact fraction, object displacement and placements
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from utils.errors import ContractError

# Configure logger
logger = logging.getLogger(__name__)

DIRECTIONS = ("up", "far", "close", "left", "right")
METRIC_COLUMNS = ["step", "contact_frac", "pos_disp", "ang_disp", *DIRECTIONS, "rewards_found"]

_UNIT_VECTORS = {
    "right": np.array([1.0, 0.0]),
    "left": np.array([-1.0, 0.0]),
    "far": np.array([0.0, 1.0]),
    "close": np.array([0.0, -1.0]),
    "up": np.array([0.0, 1.0]),
}


def wrap_angle(angle):
    """Wrap an angle (or array of angles) to (-pi, pi]"""
    wrapped = math.pi - np.mod(math.pi - np.asarray(angle, dtype=np.float64), 2.0 * math.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class WorkspaceAreas:
    """Directional placement bands, measured from each object's origin"""

    band_min: float = 0.25
    band_max: float = 0.4
    up_min: float = 0.05
    origin: tuple[float, float] | None = None

    @classmethod
    def preset(cls, name: str) -> "WorkspaceAreas":
        """'default' keeps the tabletop thresholds, 'large' the wider workspace ones"""
        if name == "default":
            return cls()
        if name == "large":
            return cls(band_min=0.4, band_max=0.5, up_min=0.1)
        raise ContractError(f"unknown placement area preset {name!r}")

    def validate(self):
        if not 0.0 < self.band_min < self.band_max:
            raise ContractError(f"malformed placement band [{self.band_min}, {self.band_max}]")
        if self.up_min <= 0.0:
            raise ContractError(f"up threshold must be positive, got {self.up_min}")

    def unit_vector(self, direction: str) -> NDArray[np.float64]:
        if direction not in _UNIT_VECTORS:
            raise ContractError(f"unknown direction {direction!r}")
        return _UNIT_VECTORS[direction]

    def band_center(self) -> float:
        return 0.5 * (self.band_min + self.band_max)

    def contains(self, direction: str, offset, grasped: bool = False) -> bool:
        """Placement predicate for one displacement from the origin"""
        along = float(np.dot(self.unit_vector(direction), np.asarray(offset, dtype=np.float64)[:2]))
        if direction == "up":
            return bool(grasped) and along >= self.up_min
        return self.band_min <= along <= self.band_max


@dataclass
class EpisodeLog:
    """Per-step object poses, contact, grasp and task-success flags of one episode"""

    poses: NDArray[np.float64]
    contacts: NDArray[np.bool_]
    grasped: NDArray[np.bool_] | None = None
    env_step: int = 0
    episode_reward: float = 0.0
    successes: NDArray[np.bool_] | None = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.contacts = np.asarray(self.contacts, dtype=bool)
        if self.grasped is None:
            self.grasped = np.zeros(self.contacts.shape, dtype=bool)
        self.grasped = np.asarray(self.grasped, dtype=bool)
        if self.successes is None:
            self.successes = np.zeros(self.contacts.shape[:1], dtype=bool)
        self.successes = np.asarray(self.successes, dtype=bool)

    @property
    def length(self) -> int:
        return int(self.poses.shape[0]) if self.poses.ndim == 3 else 0

    def validate(self):
        if self.poses.ndim != 3 or self.poses.shape[0] == 0 or self.poses.shape[2] != 3:
            raise ContractError("episode log needs poses of shape (T > 0, N, 3)")
        if self.contacts.shape != self.poses.shape[:2] or self.grasped.shape != self.poses.shape[:2]:
            raise ContractError("contact/grasp flags are not aligned with the pose array")
        if self.successes.shape != self.poses.shape[:1]:
            raise ContractError("success flags are not aligned with the pose array")

    @classmethod
    def from_infos(cls, infos: list[dict], env_step: int = 0, episode_reward: float = 0.0) -> "EpisodeLog":
        """Collect the info dicts emitted by the simulator"""
        if not infos:
            raise ContractError("cannot build an episode log from zero steps")
        return cls(
            poses=np.stack([info["poses"] for info in infos]),
            contacts=np.stack([info["contacts"] for info in infos]),
            grasped=np.stack([info["grasped"] for info in infos]),
            successes=np.array([bool(info.get("success", False)) for info in infos]),
            env_step=env_step,
            episode_reward=episode_reward,
        )


def contact_fraction(log: EpisodeLog) -> float:
    """Fraction of steps in which the gripper touches any object"""
    log.validate()
    return float(np.any(log.contacts, axis=1).sum()) / log.length


def displacement(log: EpisodeLog) -> tuple[float, float]:
    """Cumulative positional and (wrapped) angular displacement of all objects"""
    log.validate()
    steps = np.diff(log.poses, axis=0)
    if steps.shape[0] == 0:
        return 0.0, 0.0
    pos = float(np.linalg.norm(steps[..., :2], axis=-1).sum())
    ang = float(np.abs(wrap_angle(steps[..., 2])).sum())
    return pos, ang


def placement_counts(log: EpisodeLog, areas: WorkspaceAreas | None = None) -> dict[str, int]:
    """Rising-edge counts of each directional placement predicate"""
    areas = areas or WorkspaceAreas()
    areas.validate()
    log.validate()

    origins = log.poses[0, :, :2] if areas.origin is None else np.broadcast_to(areas.origin, log.poses[0, :, :2].shape)
    offsets = log.poses[..., :2] - origins[None]
    counts = {}
    for direction in DIRECTIONS:
        along = offsets @ areas.unit_vector(direction)
        if direction == "up":
            inside = log.grasped & (along >= areas.up_min)
        else:
            inside = (along >= areas.band_min) & (along <= areas.band_max)
        previous = np.vstack([np.zeros((1, inside.shape[1]), dtype=bool), inside[:-1]])
        counts[direction] = int((inside & ~previous).sum())
    return counts


def rewards_found(log: EpisodeLog) -> int:
    """Steps whose sparse task reward was positive; the reset frame earns none"""
    log.validate()
    return int(log.successes[1:].sum())


def episode_metrics(log: EpisodeLog, areas: WorkspaceAreas | None = None) -> dict[str, float]:
    """One metrics.csv row"""
    pos, ang = displacement(log)
    row = {
        "step": log.env_step,
        "contact_frac": contact_fraction(log),
        "pos_disp": pos,
        "ang_disp": ang,
    }
    row.update(placement_counts(log, areas))
    row["rewards_found"] = rewards_found(log)
    return row

