"""
Episode replay buffer
Stores whole episodes and samples fixed-length windows that never cross an
episode boundary.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from utils.errors import ContractError, NotReadyError

# Configure logger
logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EPISODE_KEYS = ("image", "proprio", "segmask", "action", "reward", "done")


def build_episode(observations: Sequence, actions: Sequence, rewards: Sequence[float]) -> dict[str, np.ndarray]:
    """Pack T + 1 observations (reset frame first), T actions and T rewards

    Step t holds o_t, the action that produced it (zeros at t = 0) and the
    reward received on arrival (0 at t = 0).
    """
    if len(observations) != len(actions) + 1 or len(actions) != len(rewards):
        raise ContractError("an episode needs T + 1 observations, T actions and T rewards")
    action_dim = len(actions[0]) if actions else 3
    images = np.stack([obs.image for obs in observations])
    return {
        "image": np.round(images * 255.0).astype(np.uint8),
        "proprio": np.stack([obs.proprio for obs in observations]).astype(np.float32),
        "segmask": np.stack([obs.segmask for obs in observations]).astype(np.uint8),
        "action": np.concatenate([np.zeros((1, action_dim)), np.asarray(actions, dtype=np.float64).reshape(-1, action_dim)])
        .astype(np.float32),
        "reward": np.concatenate([[0.0], np.asarray(rewards, dtype=np.float64)]).astype(np.float32),
        "done": np.arange(len(observations)) == len(observations) - 1,
    }


def episode_length(episode: dict[str, np.ndarray]) -> int:
    return int(episode["reward"].shape[0])


class ReplayBuffer:
    """FIFO episode store measured in steps, one writer and one reader"""

    def __init__(self, capacity: int = 100000, seq_len: int = 32, seed: int | None = None):
        """Initialize the replay buffer"""
        if capacity <= 0 or seq_len <= 0:
            raise ContractError("capacity and sequence length must be positive")
        self.capacity = capacity
        self.seq_len = seq_len
        self.episodes: deque[dict[str, np.ndarray]] = deque()
        self.episode_ids: deque[int] = deque()
        self.num_steps = 0
        self.total_episodes = 0
        self.rng = np.random.default_rng(seed)
        self.lock = threading.Lock()
        logger.info(f"Replay buffer initialized with capacity {capacity} steps, window {seq_len}")

    def __len__(self) -> int:
        return self.num_steps

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    def append_episode(self, episode: dict[str, np.ndarray]):
        """Add one complete episode, evicting the oldest ones past capacity"""
        missing = [k for k in EPISODE_KEYS if k not in episode]
        if missing:
            raise ContractError(f"episode is missing {', '.join(missing)}")
        length = episode_length(episode)
        if any(episode[k].shape[0] != length for k in EPISODE_KEYS):
            raise ContractError("episode arrays have different lengths")
        if length > self.capacity:
            raise ContractError(f"episode of {length} steps exceeds the capacity of {self.capacity}")

        with self.lock:
            while self.num_steps + length > self.capacity:
                evicted = self.episodes.popleft()
                evicted_id = self.episode_ids.popleft()
                self.num_steps -= episode_length(evicted)
                logger.debug(f"Evicted episode {evicted_id}")
            self.episodes.append(episode)
            self.episode_ids.append(self.total_episodes)
            self.num_steps += length
            self.total_episodes += 1
        logger.debug(f"Stored episode of {length} steps, buffer holds {self.num_steps}")

    def _window_counts(self, length: int) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
        with self.lock:
            episodes = list(self.episodes)
        counts = np.array([max(0, episode_length(e) - length + 1) for e in episodes], dtype=np.int64)
        return episodes, counts

    def sample_starts(self, count: int, length: int | None = None,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Episode positions and start indices drawn uniformly over all valid windows"""
        length = length or self.seq_len
        _, counts = self._window_counts(length)
        return self._draw(counts, count, length, rng)

    def _draw(self, counts: np.ndarray, count: int, length: int,
              rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
        total = int(counts.sum())
        if total == 0:
            raise NotReadyError(f"no episode holds a window of {length} steps yet")
        rng = rng if rng is not None else self.rng
        flat = rng.integers(0, total, size=count)
        offsets = np.cumsum(counts)
        episode_index = np.searchsorted(offsets, flat, side="right")
        starts = flat - (offsets[episode_index] - counts[episode_index])
        return episode_index, starts

    def sample_batch(self, batch_size: int = 32, length: int | None = None, seed: int | None = None,
                     rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
        """B windows of L consecutive steps; images as float32 in [0, 1]"""
        length = length or self.seq_len
        if seed is not None:
            rng = np.random.default_rng(seed)
        episodes, counts = self._window_counts(length)
        episode_index, starts = self._draw(counts, batch_size, length, rng)

        batch = {key: [] for key in EPISODE_KEYS}
        for i, start in zip(episode_index, starts):
            episode = episodes[i]
            for key in EPISODE_KEYS:
                batch[key].append(episode[key][start:start + length])
        stacked = {key: np.stack(values) for key, values in batch.items()}
        stacked["image"] = stacked["image"].astype(np.float32) / 255.0
        stacked["segmask"] = stacked["segmask"].astype(np.int64)
        return stacked

    def latest_episode(self) -> dict[str, np.ndarray]:
        with self.lock:
            if not self.episodes:
                raise NotReadyError("replay buffer is empty")
            return self.episodes[-1]

    def save(self, directory: str | Path) -> Path:
        """Write every stored episode as .npz plus a manifest"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self.lock:
            entries = list(zip(self.episode_ids, self.episodes))
        records = []
        for episode_id, episode in entries:
            name = f"episode_{episode_id:06d}.npz"
            path = directory / name
            if not path.exists():
                np.savez_compressed(path, **episode)
            records.append({"file": name, "length": episode_length(episode)})
        manifest = {
            "capacity": self.capacity,
            "seq_len": self.seq_len,
            "total_episodes": self.total_episodes,
            "episodes": records,
        }
        with open(directory / MANIFEST_NAME, "w") as f:
            json.dump(manifest, f, indent=4)
        logger.info(f"Saved {len(records)} episodes to {directory}")
        return directory

    @classmethod
    def load(cls, directory: str | Path, capacity: int | None = None, seed: int | None = None) -> "ReplayBuffer":
        """Rebuild a buffer from a saved directory"""
        directory = Path(directory)
        try:
            with open(directory / MANIFEST_NAME, "r") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error reading replay manifest in {directory}: {str(e)}")
            raise ContractError(f"cannot read replay directory {directory}: {e}")

        buffer = cls(capacity or manifest["capacity"], manifest["seq_len"], seed)
        for record in manifest["episodes"]:
            episode = load_episode(directory / record["file"])
            buffer.append_episode(episode)
            buffer.episode_ids[-1] = int(record["file"][len("episode_"):-len(".npz")])
        buffer.total_episodes = int(manifest.get("total_episodes", buffer.total_episodes))
        logger.info(f"Loaded {buffer.num_episodes} episodes ({buffer.num_steps} steps) from {directory}")
        return buffer


def load_episode(path: str | Path) -> dict[str, Any]:
    """Read one saved episode file"""
    try:
        with np.load(path) as data:
            episode = {key: data[key] for key in EPISODE_KEYS}
    except (OSError, KeyError, ValueError) as e:
        raise ContractError(f"cannot read episode file {path}: {e}")
    return episode
