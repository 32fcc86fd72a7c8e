"""
Stage runners
Exploration, adaptation and dense-task stages: alternate environment
collection with training steps and record per-episode metrics and curves.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import psutil
import torch

from modules.metrics import EpisodeLog, WorkspaceAreas, episode_metrics
from modules.replay_buffer import ReplayBuffer, build_episode
from modules.sim2d import Sim2DEnv
from modules.trainer import ACTION_DIM, Trainer, read_checkpoint, require_task_head
from utils.errors import ContractError, NotReadyError

# Configure logger
logger = logging.getLogger(__name__)


class RandomPolicy:
    """Uniform actions over the action box"""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def reset(self):
        pass

    def act(self, observation) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=ACTION_DIM)


class LatentPolicy:
    """Filters observations through the world model and acts with one actor"""

    def __init__(self, trainer: Trainer, head: str, noise: float = 0.0, deterministic: bool = False):
        self.trainer = trainer
        self.world_model = trainer.world_model
        self.actor = trainer.heads[head].actor
        self.noise = noise
        self.deterministic = deterministic
        self.state = None
        self.prev_action = None

    def reset(self):
        self.state = self.world_model.initial_state(1, self.trainer.device)
        self.prev_action = torch.zeros(1, ACTION_DIM, dtype=self.trainer.dtype, device=self.trainer.device)

    @torch.no_grad()
    def act(self, observation) -> np.ndarray:
        wm, dtype, device = self.world_model, self.trainer.dtype, self.trainer.device
        image = torch.as_tensor(observation.image, dtype=dtype, device=device)[None]
        proprio = torch.as_tensor(observation.proprio, dtype=dtype, device=device)[None]
        self.state, _ = wm.posterior_step(self.state, self.prev_action, wm.encode(image, proprio))

        feature = self.state.feature()
        if self.deterministic:
            action = self.actor.mode(feature)
        else:
            action = self.actor(feature).sample()
        action = action[0].cpu().double().numpy()
        if self.noise > 0:
            action = action + self.trainer.np_rng.normal(0.0, self.noise, size=action.shape)
        action = np.clip(action, -1.0, 1.0)
        self.prev_action = torch.as_tensor(action, dtype=dtype, device=device)[None]
        return action


@dataclass
class CollectedEpisode:
    """One rollout packed for replay plus its metric log"""

    episode: dict[str, np.ndarray]
    log: EpisodeLog
    reward: float
    length: int


def collect_episode(env: Sim2DEnv, policy, seed: int | None = None) -> CollectedEpisode:
    """Run one full episode with the given policy"""
    observation, info = env.reset(seed=seed)
    policy.reset()
    observations, actions, rewards, infos = [observation], [], [], [info]
    done = False
    while not done:
        action = policy.act(observation)
        observation, reward, terminated, truncated, info = env.step(action)
        observations.append(observation)
        actions.append(np.asarray(action, dtype=np.float64))
        rewards.append(reward)
        infos.append(info)
        done = terminated or truncated
    total = float(np.sum(rewards))
    return CollectedEpisode(
        episode=build_episode(observations, actions, rewards),
        log=EpisodeLog.from_infos(infos, episode_reward=total),
        reward=total,
        length=len(actions),
    )


@dataclass
class StageResult:
    """Metrics rows and curve records produced by a stage"""

    stage: str
    metrics: list[dict[str, float]] = field(default_factory=list)
    curve: list[dict[str, Any]] = field(default_factory=list)


class StageRunner:
    """Drives one stage for one seed"""

    def __init__(self, trainer: Trainer, env: Sim2DEnv, replay: ReplayBuffer, areas: WorkspaceAreas | None = None,
                 on_episode: Callable[[dict[str, float], dict[str, Any]], None] | None = None,
                 on_checkpoint: Callable[[], None] | None = None):
        """Initialize the stage runner"""
        self.trainer = trainer
        self.env = env
        self.replay = replay
        self.areas = areas or WorkspaceAreas()
        self.on_episode = on_episode
        self.on_checkpoint = on_checkpoint
        self.config = trainer.config
        self.agent = trainer.agent_settings
        self.process = psutil.Process()
        logger.info(
            f"Stage runner ready: method {trainer.method}, replay {replay.num_episodes} episodes, "
            f"progress {trainer.progress}"
        )

    def _noise(self, env_steps: int, budget: int) -> float:
        start, end = self.agent["noise_start"], self.agent["noise_end"]
        fraction = min(1.0, env_steps / budget) if budget > 0 else 1.0
        return start + (end - start) * fraction

    def _episode_seed(self) -> int:
        return int(self.trainer.np_rng.integers(0, 2 ** 31 - 1))

    def _train(self, new_steps: int, heads: tuple[str, ...]) -> list[dict[str, float]]:
        """Gradient steps owed for the newly collected environment steps"""
        if self.replay.num_episodes < self.agent["prefill_episodes"]:
            return []
        progress = self.trainer.progress
        pending = progress.get("pending_updates", 0.0) + new_steps / self.agent["train_every"]
        batch_size = self.config.get("replay.batch_size")
        records = []
        while pending >= 1.0:
            try:
                batch = self.replay.sample_batch(batch_size, rng=self.trainer.np_rng)
            except NotReadyError as e:
                logger.debug(f"Skipping update: {str(e)}")
                break
            records.append(self.trainer.train_step(batch, heads))
            pending -= 1.0
        progress["pending_updates"] = pending
        return records

    def _finish_episode(self, stage: str, collected: CollectedEpisode, updates: list[dict[str, float]],
                        result: StageResult, started: float):
        progress = self.trainer.progress
        progress["episodes"] += 1
        collected.log.env_step = progress["env_steps"]

        row = episode_metrics(collected.log, self.areas)
        record: dict[str, Any] = {
            "stage": stage,
            "step": progress["env_steps"],
            "episode": progress["episodes"],
            "episode_reward": collected.reward,
            "updates": len(updates),
            "wall_time": time.time() - started,
        }
        if updates:
            keys = updates[0].keys()
            record.update({k: float(np.mean([u[k] for u in updates if k in u])) for k in keys})
        result.metrics.append(row)
        result.curve.append(record)

        rss = self.process.memory_info().rss / 2 ** 20
        logger.info(
            f"[{stage}] episode {progress['episodes']} step {progress['env_steps']}: "
            f"reward {collected.reward:.3f}, contact {row['contact_frac']:.3f}, "
            f"pos_disp {row['pos_disp']:.3f}, rewards found {row['rewards_found']}, "
            f"{len(updates)} updates, rss {rss:.0f} MiB"
        )
        if self.on_episode:
            self.on_episode(row, record)
        every = self.config.get("trainer.checkpoint_every")
        if self.on_checkpoint and every and progress["episodes"] % every == 0:
            self.on_checkpoint()

    def _run(self, stage: str, budget: int, policy_for: Callable[[float], Any],
             heads: tuple[str, ...], train: bool = True) -> StageResult:
        if budget <= 0:
            raise ContractError(f"stage budget must be positive, got {budget}")
        result = StageResult(stage)
        started = time.time()
        progress = self.trainer.progress
        while progress["env_steps"] < budget:
            policy = policy_for(self._noise(progress["env_steps"], budget))
            collected = collect_episode(self.env, policy, self._episode_seed())
            self.replay.append_episode(collected.episode)
            progress["env_steps"] += collected.length
            updates = self._train(collected.length, heads) if train else []
            self._finish_episode(stage, collected, updates, result, started)
        logger.info(f"[{stage}] finished after {progress['env_steps']} environment steps")
        return result

    def run_exploration_stage(self, budget: int) -> StageResult:
        """Collect with the method's exploration behaviour and train everything"""
        method = self.trainer.method
        if method == "random":
            policy = RandomPolicy(self.trainer.np_rng)
            return self._run("explore", budget, lambda noise: policy, (), train=False)
        head = "task" if method == "dreamer-monolithic" else "exploration"
        return self._run(
            "explore", budget, lambda noise: LatentPolicy(self.trainer, head, noise), ("exploration", "task")
        )

    def evaluate(self, head: str = "task", seed: int | None = None) -> CollectedEpisode:
        """One noiseless episode with the mode of a head's actor"""
        return collect_episode(self.env, LatentPolicy(self.trainer, head, deterministic=True),
                               seed if seed is not None else self._episode_seed())

    def run_adaptation_stage(self, checkpoint: str | Path | None, budget: int) -> StageResult:
        """Fine-tune the pre-trained task head on the environment's task reward

        A zero budget only evaluates the pre-trained task head.
        """
        if checkpoint is not None:
            payload = read_checkpoint(checkpoint)
            require_task_head(payload)
            self.trainer.load_checkpoint(checkpoint, restore_rng=False)
            self.trainer.progress = {"env_steps": 0, "episodes": 0}
        if budget < 0:
            raise ContractError(f"stage budget must be non-negative, got {budget}")
        if budget == 0:
            result = StageResult("adapt")
            collected = self.evaluate("task")
            self.trainer.progress["episodes"] += 1
            result.metrics.append(episode_metrics(collected.log, self.areas))
            result.curve.append({"stage": "adapt", "step": 0, "episode": 1,
                                 "episode_reward": collected.reward, "updates": 0})
            if self.on_episode:
                self.on_episode(result.metrics[-1], result.curve[-1])
            logger.info(f"[adapt] zero budget, pre-trained task head scores {collected.reward:.3f}")
            return result
        return self._run("adapt", budget, lambda noise: LatentPolicy(self.trainer, "task", noise), ("task",))

    def run_task_stage(self, budget: int) -> StageResult:
        """Train the task head from scratch on a dense task reward"""
        return self._run("dense-task", budget, lambda noise: LatentPolicy(self.trainer, "task", noise), ("task",))
