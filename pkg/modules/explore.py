"""
Intrinsic rewards
K-nearest-neighbour particle entropy over object latents (object-centric
exploration) or over the full latent state (APT-style baseline).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch

from utils.errors import ContractError

# Configure logger
logger = logging.getLogger(__name__)

DEFAULT_K = 12
DEFAULT_EPSILON = 1e-3
QUERY_CHUNK = 1024


@dataclass
class ParticleSet:
    """M latent vectors of one object group and the neighbour count K"""

    points: torch.Tensor
    k: int = DEFAULT_K

    def validate(self):
        if self.points.dim() != 2:
            raise ContractError(f"particles must be an (M, D) matrix, got shape {tuple(self.points.shape)}")
        if self.k < 1:
            raise ContractError(f"K must be >= 1, got {self.k}")
        if self.points.shape[0] <= self.k:
            raise ContractError(f"need more than K={self.k} particles, got {self.points.shape[0]}")
        if not torch.isfinite(self.points).all():
            raise ContractError("particles contain non-finite values")

    @property
    def size(self) -> int:
        return int(self.points.shape[0])


def knn_entropy_reward(points: torch.Tensor | ParticleSet, k: int = DEFAULT_K, eps: float = DEFAULT_EPSILON,
                       query_indices: torch.Tensor | None = None) -> torch.Tensor:
    """Mean log distance (plus eps) to the K nearest other members of the set

    Returns one reward per query index (all points by default).
    """
    particles = points if isinstance(points, ParticleSet) else ParticleSet(points, k)
    particles.validate()
    x = particles.points
    if query_indices is None:
        query_indices = torch.arange(particles.size, device=x.device)
    query_indices = torch.as_tensor(query_indices, dtype=torch.long, device=x.device)
    if query_indices.numel() and (query_indices.min() < 0 or query_indices.max() >= particles.size):
        raise ContractError("query indices must refer to members of the particle set")

    rewards = []
    for chunk in query_indices.split(QUERY_CHUNK):
        distances = torch.cdist(x[chunk], x, compute_mode="donot_use_mm_for_euclid_dist")
        # Exclude each query point itself, duplicates still count
        is_self = torch.zeros_like(distances, dtype=torch.bool)
        is_self[torch.arange(chunk.numel(), device=x.device), chunk] = True
        distances = distances.masked_fill(is_self, float("inf"))
        nearest = distances.topk(particles.k, dim=-1, largest=False).values
        rewards.append(torch.log(nearest + eps).mean(-1))
    if not rewards:
        return x.new_zeros(0)
    return torch.cat(rewards)


def object_entropy_reward(object_latents: Sequence[torch.Tensor], k: int = DEFAULT_K,
                          eps: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Sum over object groups of the per-group KNN reward; each group is (M, D)"""
    if not object_latents:
        raise ContractError("no object groups to compute a reward over")
    total = knn_entropy_reward(object_latents[0], k, eps)
    for latents in object_latents[1:]:
        if latents.shape[0] != object_latents[0].shape[0]:
            raise ContractError("object groups hold different numbers of states")
        total = total + knn_entropy_reward(latents, k, eps)
    return total


def focus_exploration_reward(states, world_model, k: int = DEFAULT_K, eps: float = DEFAULT_EPSILON,
                             include_background: bool = False,
                             object_ids: Sequence[int] | None = None) -> torch.Tensor:
    """Object-centric exploration reward for a batch of latent states

    Neighbours are searched among the object latents of the same object id
    in this batch only. The background slot (id 0) is skipped unless asked for.
    The reward is differentiable with respect to the states.
    """
    if object_ids is None:
        first = 0 if include_background else 1
        object_ids = range(first, world_model.config.num_slots)
    object_ids = list(object_ids)
    if not object_ids:
        raise ContractError("the scene has no objects to explore")

    batch_shape = states.batch_shape
    flat = states.flatten()
    latents = world_model.all_object_latents(flat)
    groups = [latents[:, i] for i in object_ids]
    return object_entropy_reward(groups, k, eps).reshape(batch_shape)


def apt_baseline_reward(states, k: int = DEFAULT_K, eps: float = DEFAULT_EPSILON) -> torch.Tensor:
    """KNN reward on the full latent (h and z probabilities)"""
    batch_shape = states.batch_shape
    points = states.flatten().prob_feature()
    return knn_entropy_reward(points, k, eps).reshape(batch_shape)


class RunningMeanStd:
    """Running mean/variance used to standardize intrinsic rewards"""

    def __init__(self, epsilon: float = 1e-4):
        self.mean = 0.0
        self.var = 1.0
        self.count = epsilon

    def update(self, values: torch.Tensor):
        values = values.detach().double().flatten()
        if values.numel() == 0:
            return
        batch_mean = float(values.mean())
        batch_var = float(values.var(unbiased=False))
        batch_count = values.numel()

        delta = batch_mean - self.mean
        total = self.count + batch_count
        self.mean += delta * batch_count / total
        m2 = self.var * self.count + batch_var * batch_count + delta ** 2 * self.count * batch_count / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> float:
        return max(self.var, 1e-8) ** 0.5

    def normalize(self, values: torch.Tensor) -> torch.Tensor:
        return (values - self.mean) / self.std

    def state_dict(self) -> dict[str, float]:
        return {"mean": self.mean, "var": self.var, "count": self.count}

    def load_state_dict(self, state: dict[str, float]):
        self.mean = float(state["mean"])
        self.var = float(state["var"])
        self.count = float(state["count"])
