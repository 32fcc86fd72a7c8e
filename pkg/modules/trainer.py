"""
Trainer
Owns the world model, the behaviour heads, their optimizers and the
intrinsic-reward normalizer; performs gradient steps and checkpointing.
"""

from __future__ import annotations

import logging
import random
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from modules.agent import BehaviorHeads, FreezeParameters, imagine, update_behavior
from modules.explore import RunningMeanStd, apt_baseline_reward, focus_exploration_reward
from modules.sim2d import SceneConfig
from modules.world_model import WorldModelConfig, build_world_model
from utils.config import Config
from utils.errors import CheckpointError, ContractError, NumericalFailure

# Configure logger
logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ACTION_DIM = 3


def seed_everything(seed: int):
    """Seed python, numpy and torch global generators"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def clip_gradients(parameters: Iterable[torch.Tensor], max_norm: float, component: str = "gradients") -> float:
    """Scale gradients to a global norm of at most max_norm; returns the norm before clipping"""
    params = [p for p in parameters if p.grad is not None]
    if not params:
        return 0.0
    norm = nn.utils.clip_grad_norm_(params, max_norm, norm_type=2.0)
    if not torch.isfinite(norm):
        raise NumericalFailure(component)
    return float(norm)


def exploration_source(method: str) -> str | None:
    """Name of the intrinsic reward a method trains its exploration head on"""
    return {"focus": "focus", "apt-baseline": "apt"}.get(method)


class Trainer:
    """World model plus behaviour heads and their optimizers"""

    def __init__(self, config: Config, scene: SceneConfig, seed: int = 0):
        """Initialize the trainer"""
        self.config = config
        self.scene = scene
        self.method = config.get("experiment.method")
        self.device = torch.device(config.get("trainer.device", "cpu"))
        self.agent_settings = config.section("agent")
        self.explore_settings = config.section("explore")

        self.model_config = WorldModelConfig.from_sections(config.section("model"), scene)
        self.dtype = self.model_config.torch_dtype
        self.world_model = build_world_model(self.model_config, self.method).to(self.device)

        trainer = config.section("trainer")
        self.grad_clip = trainer["grad_clip"]
        self.optimizer = torch.optim.Adam(
            self.world_model.parameters(), lr=trainer["lr"], betas=tuple(trainer["betas"]), eps=trainer["eps"]
        )
        self.heads = BehaviorHeads(self.model_config.feature_dim, ACTION_DIM, self.agent_settings, self.dtype)
        for head in self.heads.heads.values():
            head.to(device=self.device)
        self.normalizer = RunningMeanStd()
        self.np_rng = np.random.default_rng(seed)
        self.seed = seed
        self.gradient_steps = 0
        self.progress: dict[str, Any] = {"env_steps": 0, "episodes": 0}

        logger.info(
            f"Trainer ready: method {self.method}, {self.world_model.kind} world model, "
            f"device {self.device}, dtype {self.dtype}"
        )

    # Batches -----------------------------------------------------------------

    def to_tensors(self, batch: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
        tensors = {}
        for key, value in batch.items():
            tensor = torch.as_tensor(value, device=self.device)
            if tensor.is_floating_point():
                tensor = tensor.to(self.dtype)
            tensors[key] = tensor
        return tensors

    # Updates -----------------------------------------------------------------

    def world_model_step(self, batch: dict[str, torch.Tensor]):
        """One world-model update; returns the loss breakdown and detached posteriors"""
        self.optimizer.zero_grad(set_to_none=True)
        try:
            breakdown, posts = self.world_model.loss(batch)
        except NumericalFailure as e:
            logger.error(f"World model update failed: {str(e)}")
            raise
        breakdown.total.backward()
        clip_gradients(self.world_model.parameters(), self.grad_clip, "world model gradients")
        self.optimizer.step()
        return breakdown, posts.detach()

    def imagination_starts(self, posts):
        """Flatten the posteriors and keep a random subset of them as rollout starts"""
        flat = posts.flatten()
        limit = self.agent_settings["imagine_starts"]
        count = flat.h.shape[0]
        if limit and count > limit:
            index = torch.randperm(count, device=flat.h.device)[:limit]
            flat = flat[index]
        return flat

    def intrinsic_reward(self, states) -> torch.Tensor:
        """Standardized intrinsic reward of imagined states"""
        k, eps = self.explore_settings["k"], self.explore_settings["epsilon"]
        if exploration_source(self.method) == "focus":
            raw = focus_exploration_reward(states, self.world_model, k, eps,
                                           self.explore_settings["include_background"])
        else:
            raw = apt_baseline_reward(states, k, eps)
        if not self.explore_settings["normalize"]:
            return raw
        self.normalizer.update(raw)
        return self.normalizer.normalize(raw)

    def behavior_step(self, starts, source: str) -> dict[str, float]:
        """Imagine from the starts with one head's actor and update that head"""
        head = self.heads[source]
        horizon = self.agent_settings["horizon"]
        with FreezeParameters([self.world_model]):
            trajectory = imagine(starts, head.actor, self.world_model, horizon)
            future = trajectory.states[1:]
            if source == "exploration":
                rewards = self.intrinsic_reward(future)
            else:
                rewards = self.world_model.predict_reward(future)
            losses = update_behavior(self.heads, trajectory, source, rewards)
        losses[f"{source}_reward"] = float(rewards.detach().mean())
        return losses

    def train_step(self, batch: dict[str, np.ndarray | torch.Tensor],
                   heads: Sequence[str] = ("exploration", "task")) -> dict[str, float]:
        """World-model update followed by one update per requested behaviour head"""
        tensors = self.to_tensors(batch)
        breakdown, posts = self.world_model_step(tensors)
        starts = self.imagination_starts(posts)

        record = breakdown.as_floats()
        for source in heads:
            if source == "exploration" and exploration_source(self.method) is None:
                continue
            record.update(self.behavior_step(starts, source))
        self.gradient_steps += 1
        record["gradient_steps"] = self.gradient_steps
        return record

    # Acting ------------------------------------------------------------------

    def parameters_snapshot(self) -> dict[str, torch.Tensor]:
        """Copies of every trainable parameter, keyed by owner"""
        snapshot = {f"world_model.{k}": v.detach().clone() for k, v in self.world_model.state_dict().items()}
        for name, head in self.heads.heads.items():
            for part in ("actor", "critic"):
                module = getattr(head, part)
                snapshot.update({f"{name}.{part}.{k}": v.detach().clone() for k, v in module.state_dict().items()})
        return snapshot

    # Checkpoints -------------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        """Write parameters, optimizer state, RNG state and progress counters"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": self.config.model_hash(),
            "config": self.config.config,
            "method": self.method,
            "world_model_kind": self.world_model.kind,
            "world_model": self.world_model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "heads": self.heads.state_dict(),
            "normalizer": self.normalizer.state_dict(),
            "rng": {
                "torch": torch.get_rng_state(),
                "numpy": self.np_rng.bit_generator.state,
                "python": random.getstate(),
            },
            "gradient_steps": self.gradient_steps,
            "progress": dict(self.progress),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        logger.info(f"Checkpoint saved to {path} (step {self.gradient_steps})")
        return path

    def load_checkpoint(self, path: str | Path, restore_rng: bool = True, require_hash: bool = True):
        """Restore a checkpoint written by save_checkpoint"""
        payload = read_checkpoint(path)
        if require_hash and payload["config_hash"] != self.config.model_hash():
            logger.error(f"Checkpoint {path} was written for a different model configuration")
            raise CheckpointError(f"config hash mismatch for {path}")
        if payload["world_model_kind"] != self.world_model.kind:
            raise CheckpointError(f"checkpoint holds a {payload['world_model_kind']} world model")

        try:
            self.world_model.load_state_dict(payload["world_model"])
            self.optimizer.load_state_dict(payload["optimizer"])
        except (RuntimeError, KeyError, ValueError) as e:
            logger.error(f"Error restoring world model from {path}: {str(e)}")
            raise CheckpointError(f"cannot restore world model from {path}: {e}")
        self.heads.load_state_dict(payload["heads"])
        self.normalizer.load_state_dict(payload["normalizer"])
        self.gradient_steps = int(payload["gradient_steps"])
        self.progress = dict(payload["progress"])

        if restore_rng:
            rng = payload["rng"]
            torch.set_rng_state(rng["torch"])
            self.np_rng.bit_generator.state = rng["numpy"]
            random.setstate(rng["python"])
        logger.info(f"Checkpoint loaded from {path} (step {self.gradient_steps})")
        return payload


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    """Load and version-check a checkpoint container"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        logger.error(f"Error reading checkpoint {path}: {str(e)}")
        raise CheckpointError(f"corrupt checkpoint {path}: {e}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['format_version']} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def require_task_head(payload: dict[str, Any]):
    """Adaptation needs a pre-trained task head"""
    if "task" not in payload.get("heads", {}):
        raise ContractError("checkpoint has no task head to adapt")
