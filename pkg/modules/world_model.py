"""
World models
A recurrent state-space model with categorical latents, trained either with
the object-centric decoder (object latent extractor + per-object decoder with
mask competition) or with a monolithic image decoder as the baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Any, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions import OneHotCategoricalStraightThrough

from modules.networks import ConvDecoder, ImageEncoder, count_parameters, mlp
from utils.errors import ContractError, NumericalFailure

# Configure logger
logger = logging.getLogger(__name__)

HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class WorldModelConfig:
    """Sizes and loss settings of a world model"""

    image_size: int = 64
    channels: int = 3
    proprio_dim: int = 5
    action_dim: int = 3
    num_objects: int = 1
    deter: int = 200
    stoch_factors: int = 32
    stoch_classes: int = 32
    hidden: int = 400
    mlp_layers: int = 4
    image_feat: int = 1024
    proprio_feat: int = 400
    cnn_depth: int = 48
    object_latent: int = 128
    extractor_width: int = 512
    extractor_layers: int = 3
    object_depth: int = 72
    monolithic_depth: int | None = None
    kl_balance: float | None = 0.8
    free_bits: float = 1.0
    sample_latents: bool = True
    dtype: str = "float32"

    @classmethod
    def from_sections(cls, model: dict[str, Any], scene) -> "WorldModelConfig":
        """Combine the model config section with a SceneConfig"""
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in model.items() if k in names}
        values.update(
            image_size=scene.image_size,
            channels=scene.channels,
            proprio_dim=scene.proprio_dim,
            num_objects=scene.num_objects,
        )
        return cls(**values)

    @property
    def num_slots(self) -> int:
        return self.num_objects + 1

    @property
    def stoch_dim(self) -> int:
        return self.stoch_factors * self.stoch_classes

    @property
    def feature_dim(self) -> int:
        return self.deter + self.stoch_dim

    @property
    def embed_dim(self) -> int:
        return self.image_feat + self.proprio_feat

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LatentState:
    """Deterministic recurrent vector h plus categorical latent z (one-hot per factor)"""

    h: torch.Tensor
    z: torch.Tensor
    logits: torch.Tensor

    @property
    def batch_shape(self) -> torch.Size:
        return self.h.shape[:-1]

    def feature(self) -> torch.Tensor:
        return torch.cat([self.h, self.z.flatten(-2)], dim=-1)

    def prob_feature(self) -> torch.Tensor:
        """h concatenated with the factor probabilities"""
        return torch.cat([self.h, F.softmax(self.logits, dim=-1).flatten(-2)], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z.detach(), self.logits.detach())

    def flatten(self) -> "LatentState":
        """Merge all batch dimensions into one"""
        return LatentState(
            self.h.reshape(-1, self.h.shape[-1]),
            self.z.reshape(-1, *self.z.shape[-2:]),
            self.logits.reshape(-1, *self.logits.shape[-2:]),
        )

    def __getitem__(self, index) -> "LatentState":
        return LatentState(self.h[index], self.z[index], self.logits[index])

    @staticmethod
    def stack(states: Sequence["LatentState"], dim: int = 0) -> "LatentState":
        return LatentState(
            torch.stack([s.h for s in states], dim=dim),
            torch.stack([s.z for s in states], dim=dim),
            torch.stack([s.logits for s in states], dim=dim),
        )


@dataclass
class DecoderOutputs:
    """Per-slot reconstructions, weight maps, the composed mask and the vector heads"""

    object_images: torch.Tensor | None
    weights: torch.Tensor | None
    mask: torch.Tensor | None
    proprio: torch.Tensor
    reward: torch.Tensor
    image: torch.Tensor


@dataclass
class LossBreakdown:
    """World-model loss and its components (scalars)"""

    total: torch.Tensor
    dyn: torch.Tensor
    kl: torch.Tensor
    proprio: torch.Tensor
    obj: torch.Tensor
    obj_mask: torch.Tensor
    obj_recon: torch.Tensor
    rew: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f"wm_{f.name}": float(getattr(self, f.name).detach()) for f in fields(self)}


def gaussian_nll(mean: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise negative log-likelihood of a unit-variance Gaussian"""
    return 0.5 * (target - mean) ** 2 + HALF_LOG_TWO_PI


def categorical_kl(post_logits: torch.Tensor, prior_logits: torch.Tensor) -> torch.Tensor:
    """KL(post || prior) per categorical factor, shape (..., F)"""
    post_log = F.log_softmax(post_logits, dim=-1)
    prior_log = F.log_softmax(prior_logits, dim=-1)
    return (post_log.exp() * (post_log - prior_log)).sum(-1)


def kl_balance_loss(post_logits: torch.Tensor, prior_logits: torch.Tensor,
                    balance: float | None = 0.8, free_bits: float = 1.0) -> torch.Tensor:
    """Balanced KL with per-state free bits; `balance` is the weight on training the prior

    With `balance=None` the plain KL is used, so the gradient is the gradient of the reported value.
    """
    if balance is None:
        kl = categorical_kl(post_logits, prior_logits).sum(-1)
        return kl.clamp(min=free_bits).mean() if free_bits > 0 else kl.mean()
    prior_term = categorical_kl(post_logits.detach(), prior_logits).sum(-1)
    post_term = categorical_kl(post_logits, prior_logits.detach()).sum(-1)
    if free_bits > 0:
        prior_term = prior_term.clamp(min=free_bits)
        post_term = post_term.clamp(min=free_bits)
    return balance * prior_term.mean() + (1.0 - balance) * post_term.mean()


def compose_mask(weights: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax across slots; a sequence of (..., H, W) maps or a tensor with slots last"""
    if isinstance(weights, torch.Tensor):
        stacked = weights
    else:
        weights = list(weights)
        if not weights:
            raise ContractError("compose_mask needs at least one weight map")
        shape = weights[0].shape
        if any(w.shape != shape for w in weights):
            raise ContractError(f"weight maps differ in shape: {[tuple(w.shape) for w in weights]}")
        stacked = torch.stack(weights, dim=-1)
    return F.softmax(stacked, dim=-1)


def hard_assignment(mask: torch.Tensor) -> torch.Tensor:
    """Slot index claimed by each pixel"""
    return mask.argmax(dim=-1)


def mask_loss(mask_log_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-pixel categorical cross-entropy; log-probs have the slot dimension last"""
    picked = torch.gather(mask_log_probs, -1, labels.long().unsqueeze(-1)).squeeze(-1)
    return -picked.mean()


def masked_reconstruction_loss(recons: torch.Tensor, target: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Gaussian NLL of slot reconstructions restricted to each slot's ground-truth pixels

    recons: (..., S, H, W, C), target: (..., H, W, C), labels: (..., H, W).
    Each slot is averaged over its own pixels and channels, slots are summed,
    and the result is averaged over the batch dimensions.
    """
    slots, channels = recons.shape[-4], recons.shape[-1]
    masks = F.one_hot(labels.long(), slots).movedim(-1, -3).bool()
    nll = gaussian_nll(recons, target.unsqueeze(-4)).sum(-1)
    nll = torch.where(masks, nll, torch.zeros_like(nll))
    counts = masks.sum(dim=(-2, -1)).to(nll.dtype) * channels
    per_slot = nll.sum(dim=(-2, -1)) / counts.clamp(min=1.0)
    return per_slot.sum(-1).mean()


def _check_finite(tensor: torch.Tensor, component: str):
    if not torch.isfinite(tensor).all():
        raise NumericalFailure(component)


class WorldModel(nn.Module):
    """Encoder, RSSM dynamics and the vector decoders shared by both variants"""

    kind = "base"

    def __init__(self, config: WorldModelConfig):
        super().__init__()
        self.config = config
        c = config

        self.image_encoder = ImageEncoder(c.channels, c.image_size, c.cnn_depth, c.image_feat)
        self.proprio_encoder = mlp(c.proprio_dim, c.proprio_feat, c.hidden, c.mlp_layers)

        self.dynamics_in = nn.Sequential(nn.Linear(c.stoch_dim + c.action_dim, c.hidden), nn.ELU())
        self.gru = nn.GRUCell(c.hidden, c.deter)
        self.prior_net = mlp(c.deter, c.stoch_dim, c.hidden, 2)
        self.posterior_net = mlp(c.deter + c.embed_dim, c.stoch_dim, c.hidden, 2)

        self.proprio_decoder = mlp(c.feature_dim, c.proprio_dim, c.hidden, c.mlp_layers)
        self.reward_head = mlp(c.feature_dim, 1, c.hidden, c.mlp_layers)

    # Encoder -----------------------------------------------------------------

    def encode(self, image: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        """Concatenate the CNN image features and the MLP proprio features"""
        c = self.config
        expected = (c.image_size, c.image_size, c.channels)
        if tuple(image.shape[-3:]) != expected:
            raise ContractError(f"image shape {tuple(image.shape[-3:])} does not match {expected}")
        if proprio.shape[-1] != c.proprio_dim:
            raise ContractError(f"proprio has {proprio.shape[-1]} dims, expected {c.proprio_dim}")
        if image.shape[:-3] != proprio.shape[:-1]:
            raise ContractError("image and proprio batch shapes differ")
        return torch.cat([self.image_encoder(image), self.proprio_encoder(proprio)], dim=-1)

    # Dynamics ----------------------------------------------------------------

    def initial_state(self, batch_size: int, device=None) -> LatentState:
        c = self.config
        dtype = c.torch_dtype
        return LatentState(
            torch.zeros(batch_size, c.deter, device=device, dtype=dtype),
            torch.zeros(batch_size, c.stoch_factors, c.stoch_classes, device=device, dtype=dtype),
            torch.zeros(batch_size, c.stoch_factors, c.stoch_classes, device=device, dtype=dtype),
        )

    def _recurrent(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        x = self.dynamics_in(torch.cat([prev.z.flatten(-2), action], dim=-1))
        return self.gru(x, prev.h)

    def _latent(self, h: torch.Tensor, logits: torch.Tensor) -> LatentState:
        if self.config.sample_latents:
            z = OneHotCategoricalStraightThrough(logits=logits).rsample()
        else:
            z = F.softmax(logits, dim=-1)
        return LatentState(h, z, logits)

    def _factor_logits(self, net: nn.Module, x: torch.Tensor, component: str) -> torch.Tensor:
        logits = net(x).reshape(*x.shape[:-1], self.config.stoch_factors, self.config.stoch_classes)
        _check_finite(logits, component)
        return logits

    def prior_step(self, prev: LatentState, action: torch.Tensor) -> tuple[LatentState, torch.Tensor]:
        """Next state without an observation"""
        h = self._recurrent(prev, action)
        logits = self._factor_logits(self.prior_net, h, "prior logits")
        return self._latent(h, logits), logits

    def posterior_step(self, prev: LatentState, action: torch.Tensor,
                       embed: torch.Tensor) -> tuple[LatentState, torch.Tensor]:
        """Next state filtered with the next observation's embedding"""
        h = self._recurrent(prev, action)
        logits = self._factor_logits(self.posterior_net, torch.cat([h, embed], dim=-1), "posterior logits")
        return self._latent(h, logits), logits

    def observe(self, embeds: torch.Tensor, actions: torch.Tensor,
                state: LatentState | None = None) -> tuple[LatentState, torch.Tensor, torch.Tensor]:
        """Filter a (B, L) sequence; returns posterior states and both logit sequences"""
        batch, length = embeds.shape[:2]
        state = state or self.initial_state(batch, embeds.device)
        posts, post_logits, prior_logits = [], [], []
        for t in range(length):
            h = self._recurrent(state, actions[:, t])
            prior = self._factor_logits(self.prior_net, h, "prior logits")
            post = self._factor_logits(self.posterior_net, torch.cat([h, embeds[:, t]], dim=-1), "posterior logits")
            state = self._latent(h, post)
            posts.append(state)
            post_logits.append(post)
            prior_logits.append(prior)
        return LatentState.stack(posts, dim=1), torch.stack(post_logits, 1), torch.stack(prior_logits, 1)

    # Vector heads ------------------------------------------------------------

    def decode_proprio(self, state: LatentState) -> torch.Tensor:
        """Mean of the unit-variance Gaussian over proprioception"""
        return self.proprio_decoder(state.feature())

    def predict_reward(self, state: LatentState) -> torch.Tensor:
        """Mean of the unit-variance Gaussian over the reward"""
        return self.reward_head(state.feature()).squeeze(-1)

    # Loss --------------------------------------------------------------------

    def image_loss(self, posts: LatentState, images: torch.Tensor,
                   segmask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(mask term, reconstruction term) of the visual loss"""
        raise NotImplementedError

    def reconstruct(self, states: LatentState) -> torch.Tensor:
        """Composed image reconstruction"""
        raise NotImplementedError

    def loss(self, batch: dict[str, torch.Tensor]) -> tuple[LossBreakdown, LatentState]:
        """World-model loss on a (B, L) batch; also returns the posterior states"""
        c = self.config
        embeds = self.encode(batch["image"], batch["proprio"])
        posts, post_logits, prior_logits = self.observe(embeds, batch["action"])

        kl = categorical_kl(post_logits, prior_logits).sum(-1).mean()
        dyn = kl_balance_loss(post_logits, prior_logits, c.kl_balance, c.free_bits)
        proprio = gaussian_nll(self.decode_proprio(posts), batch["proprio"]).sum(-1).mean()
        rew = gaussian_nll(self.predict_reward(posts), batch["reward"]).mean()
        obj_mask, obj_recon = self.image_loss(posts, batch["image"], batch["segmask"])
        obj = obj_mask + obj_recon
        total = dyn + proprio + obj + rew

        breakdown = LossBreakdown(total=total, dyn=dyn, kl=kl, proprio=proprio, obj=obj,
                                  obj_mask=obj_mask, obj_recon=obj_recon, rew=rew)
        # Components before the total
        names = [f.name for f in fields(breakdown) if f.name != "total"] + ["total"]
        for name in names:
            _check_finite(getattr(breakdown, name), f"world model loss ({name})")
        return breakdown, posts

    def parameter_count(self) -> int:
        return count_parameters(self)


class ObjectCentricWorldModel(WorldModel):
    """World model whose visual decoder works per object slot"""

    kind = "object-centric"

    def __init__(self, config: WorldModelConfig):
        super().__init__(config)
        c = config
        self.extractor = mlp(c.feature_dim + c.num_slots, c.object_latent, c.extractor_width, c.extractor_layers)
        self.object_decoder = ConvDecoder(c.object_latent, c.channels + 1, c.image_size, c.object_depth)
        logger.info(
            f"Object-centric world model: {c.num_slots} slots, h={c.deter}, z={c.stoch_factors}x{c.stoch_classes}, "
            f"{self.parameter_count()} parameters"
        )

    def object_ids(self, dtype=None, device=None) -> torch.Tensor:
        """One-hot ids of all slots, background first"""
        return torch.eye(self.config.num_slots, dtype=dtype or self.config.torch_dtype, device=device)

    def _check_object_id(self, c: torch.Tensor):
        if c.shape[-1] != self.config.num_slots:
            raise ContractError(f"object id has length {c.shape[-1]}, expected {self.config.num_slots}")
        binary = ((c == 0) | (c == 1)).all()
        if not binary or not (c.sum(-1) == 1).all():
            raise ContractError("object id must be a one-hot vector")

    def extract_object_latent(self, state: LatentState, c: torch.Tensor) -> torch.Tensor:
        """Object latent for the slot identified by the one-hot vector c"""
        self._check_object_id(c)
        feature = state.feature()
        c = c.to(feature.dtype).expand(*feature.shape[:-1], c.shape[-1])
        return self.extractor(torch.cat([feature, c], dim=-1))

    def all_object_latents(self, state: LatentState) -> torch.Tensor:
        """Object latents of every slot, shape (..., S, D)"""
        feature = state.feature()
        ids = self.object_ids(feature.dtype, feature.device)
        feature = feature.unsqueeze(-2).expand(*feature.shape[:-1], ids.shape[0], feature.shape[-1])
        ids = ids.expand(*feature.shape[:-1], ids.shape[-1])
        return self.extractor(torch.cat([feature, ids], dim=-1))

    def decode_object(self, s_obj: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Masked-observation reconstruction and unnormalized weight map of one slot"""
        out = self.object_decoder(s_obj)
        return out[..., :-1], out[..., -1]

    def decode(self, state: LatentState) -> DecoderOutputs:
        """Decode every slot and compose the mask"""
        images, weights = self.decode_object(self.all_object_latents(state))
        # (..., S, H, W) -> (..., H, W, S)
        mask = compose_mask(weights.movedim(-3, -1))
        composed = self._stitch(images, mask)
        return DecoderOutputs(
            object_images=images,
            weights=weights,
            mask=mask,
            proprio=self.decode_proprio(state),
            reward=self.predict_reward(state),
            image=composed,
        )

    @staticmethod
    def _stitch(images: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Take each pixel from the slot with the highest mask probability"""
        winner = hard_assignment(mask)
        index = winner.unsqueeze(-3).unsqueeze(-1).expand(*images.shape[:-4], 1, *images.shape[-3:])
        return torch.gather(images, -4, index).squeeze(-4)

    def reconstruct(self, states: LatentState) -> torch.Tensor:
        return self.decode(states).image

    def image_loss(self, posts, images, segmask):
        recons, weights = self.decode_object(self.all_object_latents(posts))
        mask_log_probs = F.log_softmax(weights.movedim(-3, -1), dim=-1)
        return mask_loss(mask_log_probs, segmask), masked_reconstruction_loss(recons, images, segmask)


class MonolithicWorldModel(WorldModel):
    """Baseline world model with a single full-frame image decoder"""

    kind = "monolithic"

    def __init__(self, config: WorldModelConfig):
        super().__init__(config)
        c = config
        depth = c.monolithic_depth or matched_monolithic_depth(c)
        self.decoder_depth = depth
        self.image_decoder = ConvDecoder(c.feature_dim, c.channels, c.image_size, depth)
        logger.info(f"Monolithic world model: decoder depth {depth}, {self.parameter_count()} parameters")

    def reconstruct(self, states: LatentState) -> torch.Tensor:
        return self.image_decoder(states.feature())

    def decode(self, state: LatentState) -> DecoderOutputs:
        return DecoderOutputs(
            object_images=None,
            weights=None,
            mask=None,
            proprio=self.decode_proprio(state),
            reward=self.predict_reward(state),
            image=self.reconstruct(state),
        )

    def image_loss(self, posts, images, segmask):
        recon = gaussian_nll(self.reconstruct(posts), images).mean()
        return torch.zeros((), dtype=recon.dtype, device=recon.device), recon


def matched_monolithic_depth(config: WorldModelConfig) -> int:
    """Decoder depth whose parameter count best matches the object-centric visual decoder"""
    c = config
    extractor = sum(
        layer.in_features * layer.out_features + layer.out_features
        for layer in mlp(c.feature_dim + c.num_slots, c.object_latent, c.extractor_width, c.extractor_layers)
        if isinstance(layer, nn.Linear)
    )
    target = extractor + ConvDecoder.count_parameters(c.object_latent, c.channels + 1, c.image_size, c.object_depth)

    best, best_gap = 1, math.inf
    depth = 1
    while True:
        count = ConvDecoder.count_parameters(c.feature_dim, c.channels, c.image_size, depth)
        gap = abs(count - target)
        if gap < best_gap:
            best, best_gap = depth, gap
        if count >= target:
            return best
        depth += 1


def build_world_model(config: WorldModelConfig, method: str) -> WorldModel:
    """Object-centric model for every method except the monolithic Dreamer and APT baselines"""
    if method in ("dreamer-monolithic", "apt-baseline"):
        model = MonolithicWorldModel(config)
    else:
        model = ObjectCentricWorldModel(config)
    return model.to(config.torch_dtype)
