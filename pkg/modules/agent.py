"""
Actor-critic behaviour learning in imagination
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Any, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions import Independent, Normal, TanhTransform, TransformedDistribution

from modules.networks import mlp, zero_init_output
from modules.world_model import LatentState
from utils.errors import ContractError, NumericalFailure

# Configure logger
logger = logging.getLogger(__name__)

HEAD_NAMES = ("exploration", "task")


class FreezeParameters:
    """Context manager that turns off requires_grad for the given modules"""

    def __init__(self, modules: Iterable[nn.Module]):
        self.modules = list(modules)
        self.params = [p for m in self.modules for p in m.parameters()]
        self.states = []

    def __enter__(self):
        self.states = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        for p, state in zip(self.params, self.states):
            p.requires_grad_(state)
        return False


class Actor(nn.Module):
    """Tanh-squashed Gaussian policy over the action box"""

    def __init__(self, feature_dim: int, action_dim: int, hidden: int, layers: int, min_std: float = 0.1):
        super().__init__()
        self.action_dim = action_dim
        self.min_std = min_std
        self.net = mlp(feature_dim, 2 * action_dim, hidden, layers)

    def forward(self, feature: torch.Tensor) -> TransformedDistribution:
        mean, raw_std = self.net(feature).chunk(2, dim=-1)
        std = F.softplus(raw_std) + self.min_std
        base = Independent(Normal(mean, std), 1)
        return TransformedDistribution(base, [TanhTransform(cache_size=1)])

    def mode(self, feature: torch.Tensor) -> torch.Tensor:
        mean, _ = self.net(feature).chunk(2, dim=-1)
        return torch.tanh(mean)


class Critic(nn.Module):
    """State value with a zero-initialized output layer"""

    def __init__(self, feature_dim: int, hidden: int, layers: int):
        super().__init__()
        self.net = zero_init_output(mlp(feature_dim, 1, hidden, layers))

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.net(feature).squeeze(-1)


@dataclass
class ImaginedTrajectory:
    """States s_0..s_H, actions a_0..a_{H-1} and the policy entropy estimate per action"""

    states: LatentState
    actions: torch.Tensor
    entropy: torch.Tensor

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[0])

    @property
    def features(self) -> torch.Tensor:
        return self.states.feature()


def imagine(start: LatentState, actor: Actor, world_model, horizon: int) -> ImaginedTrajectory:
    """Open-loop rollout through the prior, with actions sampled from the actor"""
    if horizon < 1:
        raise ContractError(f"imagination horizon must be >= 1, got {horizon}")
    state = start
    states, actions, entropies = [start], [], []
    for _ in range(horizon):
        dist = actor(state.feature().detach())
        action = dist.rsample()
        entropies.append(-dist.log_prob(action))
        state, _ = world_model.prior_step(state, action)
        if not torch.isfinite(state.h).all():
            raise NumericalFailure("imagined states")
        states.append(state)
        actions.append(action)
    return ImaginedTrajectory(LatentState.stack(states), torch.stack(actions), torch.stack(entropies))


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor, gamma: float, lam: float) -> torch.Tensor:
    """λ-returns R_0..R_{H-1}; rewards[t] is r_{t+1}, values has H + 1 entries"""
    if not 0.0 <= gamma <= 1.0 or not 0.0 <= lam <= 1.0:
        raise ContractError(f"gamma and lambda must lie in [0, 1], got {gamma}, {lam}")
    if values.shape[0] != rewards.shape[0] + 1:
        raise ContractError("values must have one more step than rewards")
    horizon = rewards.shape[0]
    ret = values[horizon]
    returns = []
    for t in reversed(range(horizon)):
        bootstrap = (1.0 - lam) * values[t + 1] + lam * ret
        ret = rewards[t] + gamma * bootstrap
        returns.append(ret)
    returns.reverse()
    return torch.stack(returns)


class ActorCritic:
    """One actor/critic pair with its optimizers and slow target critic"""

    def __init__(self, name: str, feature_dim: int, action_dim: int, settings: dict[str, Any]):
        self.name = name
        self.gamma = settings["gamma"]
        self.lam = settings["lam"]
        self.entropy_coef = settings["entropy_coef"]
        self.grad_clip = settings["grad_clip"]
        self.target_update = settings["target_update"]

        self.actor = Actor(feature_dim, action_dim, settings["hidden"], settings["layers"], settings["min_std"])
        self.critic = Critic(feature_dim, settings["hidden"], settings["layers"])
        self.target_critic = copy.deepcopy(self.critic)
        self.target_critic.requires_grad_(False)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=settings["actor_lr"])
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=settings["critic_lr"])
        self.updates = 0

    def to(self, dtype=None, device=None) -> "ActorCritic":
        for module in (self.actor, self.critic, self.target_critic):
            module.to(device=device, dtype=dtype)
        return self

    def parameters(self):
        return list(self.actor.parameters()) + list(self.critic.parameters())

    def sync_target(self):
        self.target_critic.load_state_dict(self.critic.state_dict())

    def _step(self, optimizer, loss: torch.Tensor, params, component: str):
        if not torch.isfinite(loss):
            raise NumericalFailure(component)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grads = [p.grad for p in params if p.grad is not None]
        if grads and not all(torch.isfinite(g).all() for g in grads):
            raise NumericalFailure(f"{component} gradients")
        nn.utils.clip_grad_norm_(params, self.grad_clip)
        optimizer.step()

    def update(self, trajectory: ImaginedTrajectory, rewards: torch.Tensor) -> dict[str, float]:
        """Critic regression on stopped λ-returns, actor ascent through the dynamics"""
        if self.updates % self.target_update == 0:
            self.sync_target()

        features = trajectory.features
        with FreezeParameters([self.target_critic]):
            target_values = self.target_critic(features)
        returns = lambda_returns(rewards, target_values, self.gamma, self.lam)

        entropy = trajectory.entropy.mean()
        actor_loss = -returns.mean() - self.entropy_coef * entropy
        self._step(self.actor_opt, actor_loss, list(self.actor.parameters()), f"{self.name} actor loss")

        values = self.critic(features[:-1].detach())
        critic_loss = 0.5 * (values - returns.detach()).pow(2).mean()
        self._step(self.critic_opt, critic_loss, list(self.critic.parameters()), f"{self.name} critic loss")

        self.updates += 1
        return {
            f"{self.name}_actor_loss": float(actor_loss.detach()),
            f"{self.name}_critic_loss": float(critic_loss.detach()),
            f"{self.name}_entropy": float(entropy.detach()),
            f"{self.name}_return": float(returns.detach().mean()),
        }

    def state_dict(self) -> dict[str, Any]:
        return {
            "actor": self.actor.state_dict(),
            "critic": self.critic.state_dict(),
            "target_critic": self.target_critic.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "updates": self.updates,
        }

    def load_state_dict(self, state: dict[str, Any]):
        self.actor.load_state_dict(state["actor"])
        self.critic.load_state_dict(state["critic"])
        self.target_critic.load_state_dict(state["target_critic"])
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.updates = int(state["updates"])


class BehaviorHeads:
    """Exploration and task actor-critic pairs"""

    def __init__(self, feature_dim: int, action_dim: int, settings: dict[str, Any], dtype=torch.float32):
        self.heads = {name: ActorCritic(name, feature_dim, action_dim, settings).to(dtype) for name in HEAD_NAMES}
        logger.info(f"Behavior heads ready: {', '.join(HEAD_NAMES)} (feature dim {feature_dim})")

    def __getitem__(self, name: str) -> ActorCritic:
        if name not in self.heads:
            raise ContractError(f"unknown behavior head {name!r}")
        return self.heads[name]

    @property
    def exploration(self) -> ActorCritic:
        return self.heads["exploration"]

    @property
    def task(self) -> ActorCritic:
        return self.heads["task"]

    def state_dict(self) -> dict[str, Any]:
        return {name: head.state_dict() for name, head in self.heads.items()}

    def load_state_dict(self, state: dict[str, Any]):
        missing = [name for name in HEAD_NAMES if name not in state]
        if missing:
            raise ContractError(f"checkpoint lacks behavior head(s): {', '.join(missing)}")
        for name, head in self.heads.items():
            head.load_state_dict(state[name])


def update_behavior(heads: BehaviorHeads, trajectory: ImaginedTrajectory, source: str,
                    rewards: torch.Tensor) -> dict[str, float]:
    """Update the head that matches the reward source ('exploration' or 'task')"""
    if rewards.shape != trajectory.actions.shape[:-1]:
        raise ContractError(
            f"rewards shape {tuple(rewards.shape)} does not match the trajectory {tuple(trajectory.actions.shape[:-1])}"
        )
    return heads[source].update(trajectory, rewards)
