import math
from dataclasses import replace

import pytest
import torch
import torch.nn.functional as F

from modules.networks import ConvDecoder, count_parameters, mlp
from modules.world_model import (
    HALF_LOG_TWO_PI,
    LatentState,
    MonolithicWorldModel,
    ObjectCentricWorldModel,
    WorldModelConfig,
    build_world_model,
    categorical_kl,
    compose_mask,
    gaussian_nll,
    hard_assignment,
    kl_balance_loss,
    mask_loss,
    masked_reconstruction_loss,
    matched_monolithic_depth,
)
from utils.errors import ContractError, NumericalFailure


@pytest.fixture
def model(micro_model_config):
    torch.manual_seed(0)
    return build_world_model(micro_model_config, "focus")


@pytest.fixture
def states(model, micro_batch):
    with torch.no_grad():
        embeds = model.encode(micro_batch["image"], micro_batch["proprio"])
        posts, _, _ = model.observe(embeds, micro_batch["action"])
    return posts


# Mask composition ------------------------------------------------------------


def test_compose_mask_values():
    zeros = torch.zeros(2, 2, dtype=torch.float64)
    mask = compose_mask([zeros, zeros])
    assert mask.shape == (2, 2, 2)
    assert torch.allclose(mask, torch.full_like(mask, 0.5))

    mask = compose_mask([torch.full((1, 1), 2.0), torch.zeros(1, 1)])
    assert mask[0, 0, 0].item() == pytest.approx(0.8808, abs=1e-4)
    assert mask[0, 0, 1].item() == pytest.approx(0.1192, abs=1e-4)

    mask = compose_mask([torch.full((1, 1), 10.0, dtype=torch.float64), torch.full((1, 1), -10.0, dtype=torch.float64)])
    assert hard_assignment(mask).item() == 0
    assert mask[0, 0, 0].item() > 1 - 1e-8


def test_compose_mask_sums_to_one():
    weights = torch.randn(3, 5, 8, 8, generator=torch.Generator().manual_seed(0))
    mask = compose_mask(weights.movedim(1, -1))
    assert torch.allclose(mask.sum(-1), torch.ones(3, 8, 8), atol=1e-6)


def test_compose_mask_rejects_mismatched_maps():
    with pytest.raises(ContractError):
        compose_mask([torch.zeros(4, 4), torch.zeros(4, 5)])
    with pytest.raises(ContractError):
        compose_mask([])


# Loss terms ------------------------------------------------------------------


def test_kl_one_hot_against_uniform():
    post = torch.full((1, 32), -100.0, dtype=torch.float64)
    post[0, 0] = 100.0
    prior = torch.zeros(1, 32, dtype=torch.float64)
    assert categorical_kl(post, prior).item() == pytest.approx(math.log(32), abs=1e-6)


def test_kl_of_identical_logits_is_exactly_zero():
    logits = torch.randn(4, 6, 8, 8, dtype=torch.float64)
    assert kl_balance_loss(logits, logits.clone(), balance=0.8, free_bits=0.0).item() == 0.0


def test_free_bits_clamp_the_balanced_kl():
    logits = torch.randn(4, 6, 8, 8)
    assert kl_balance_loss(logits, logits.clone(), free_bits=1.0).item() == pytest.approx(1.0)


def test_kl_balance_splits_gradients():
    post = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    prior = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    kl_balance_loss(post, prior, balance=1.0, free_bits=0.0).backward()
    assert torch.count_nonzero(post.grad) == 0
    assert torch.count_nonzero(prior.grad) > 0


def test_plain_kl_mode_differentiates_the_reported_value():
    post = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    prior = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    plain = kl_balance_loss(post, prior, balance=None, free_bits=0.0)
    balanced = kl_balance_loss(post, prior, balance=0.8, free_bits=0.0)
    assert plain.item() == pytest.approx(balanced.item(), rel=1e-12)

    plain.backward()
    expected_post, expected_prior = torch.autograd.grad(
        categorical_kl(post, prior).sum(-1).mean(), (post, prior))
    torch.testing.assert_close(post.grad, expected_post)
    torch.testing.assert_close(prior.grad, expected_prior)
    assert kl_balance_loss(post, post.detach().clone(), balance=None, free_bits=1.0).item() == pytest.approx(1.0)


def test_mask_loss_is_zero_for_exact_masks():
    labels = torch.tensor([[0, 1], [2, 1]])
    log_probs = torch.log(F.one_hot(labels, 3).double())
    assert mask_loss(log_probs, labels).item() == 0.0


def test_one_object_mask_driven_to_zero_recovers_the_partition(micro_batch):
    labels = micro_batch["segmask"]
    assert set(labels.unique().tolist()) == {0, 1}
    torch.manual_seed(0)
    weights = torch.randn(*labels.shape, 2, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.Adam([weights], lr=0.5)
    for _ in range(500):
        optimizer.zero_grad()
        loss = mask_loss(F.log_softmax(weights, dim=-1), labels)
        loss.backward()
        optimizer.step()

    assert loss.item() < 1e-3
    assignment = hard_assignment(compose_mask(weights.detach()))
    assert torch.equal(assignment, labels.long())


def test_gaussian_nll_at_zero_error():
    x = torch.randn(10, dtype=torch.float64)
    assert torch.allclose(gaussian_nll(x, x), torch.full_like(x, 0.9189385332046727))
    assert HALF_LOG_TWO_PI == pytest.approx(0.9189, abs=1e-4)


def test_masked_reconstruction_perfect_single_slot():
    target = torch.rand(2, 4, 4, 3, dtype=torch.float64)
    labels = torch.zeros(2, 4, 4, dtype=torch.long)
    loss = masked_reconstruction_loss(target.unsqueeze(-4), target, labels)
    assert loss.item() == pytest.approx(HALF_LOG_TWO_PI, abs=1e-12)


def test_masked_reconstruction_normalizes_per_slot():
    target = torch.zeros(1, 4, 4, 1, dtype=torch.float64)
    labels = torch.zeros(1, 4, 4, dtype=torch.long)
    labels[0, 0, 0] = 1
    recons = torch.zeros(1, 2, 4, 4, 1, dtype=torch.float64)
    # A unit error on the one pixel of slot 1 weighs as much as a unit error on all 15 pixels of slot 0
    small = recons.clone()
    small[0, 1, 0, 0] = 1.0
    large = recons.clone()
    large[0, 0] = 1.0
    base = masked_reconstruction_loss(recons, target, labels)
    assert (masked_reconstruction_loss(small, target, labels) - base).item() == pytest.approx(0.5)
    assert (masked_reconstruction_loss(large, target, labels) - base).item() == pytest.approx(0.5)


def test_masked_reconstruction_ignores_other_slots_pixels():
    generator = torch.Generator().manual_seed(1)
    target = torch.rand(2, 4, 4, 3, dtype=torch.float64, generator=generator)
    labels = torch.randint(0, 3, (2, 4, 4), generator=generator)
    recons = torch.rand(2, 3, 4, 4, 3, dtype=torch.float64, generator=generator)
    edited = recons.clone()
    outside = labels != 1
    edited[:, 1][outside] = 100.0
    assert torch.equal(masked_reconstruction_loss(recons, target, labels),
                       masked_reconstruction_loss(edited, target, labels))


# Encoder and dynamics --------------------------------------------------------


def test_embedding_size_follows_config():
    config = WorldModelConfig(image_size=16, channels=3, proprio_dim=4, image_feat=64, proprio_feat=16,
                              deter=16, stoch_factors=4, stoch_classes=4, hidden=16, mlp_layers=2,
                              cnn_depth=4, object_latent=8, extractor_width=16, extractor_layers=2, object_depth=4)
    wm = ObjectCentricWorldModel(config)
    embed = wm.encode(torch.rand(5, 16, 16, 3), torch.rand(5, 4))
    assert embed.shape == (5, 80)


def test_encode_rejects_bad_shapes(model):
    with pytest.raises(ContractError):
        model.encode(torch.rand(2, 16, 16, 3, dtype=torch.float64), torch.rand(2, 5, dtype=torch.float64))
    with pytest.raises(ContractError):
        model.encode(torch.rand(2, 8, 8, 3, dtype=torch.float64), torch.rand(2, 4, dtype=torch.float64))
    with pytest.raises(ContractError):
        model.encode(torch.rand(2, 8, 8, 3, dtype=torch.float64), torch.rand(3, 5, dtype=torch.float64))


def test_encode_is_deterministic_and_batch_consistent(model, micro_batch):
    image, proprio = micro_batch["image"][:, 0], micro_batch["proprio"][:, 0]
    with torch.no_grad():
        batched = model.encode(image, proprio)
        assert torch.equal(batched, model.encode(image, proprio))
        single = torch.cat([model.encode(image[i:i + 1], proprio[i:i + 1]) for i in range(image.shape[0])])
    assert torch.allclose(batched, single, atol=1e-12)


def test_prior_and_posterior_share_the_recurrent_state(model, micro_batch):
    prev = model.initial_state(2)
    action = micro_batch["action"][:, 1]
    with torch.no_grad():
        embed = model.encode(micro_batch["image"][:, 1], micro_batch["proprio"][:, 1])
        prior, _ = model.prior_step(prev, action)
        post, _ = model.posterior_step(prev, action, embed)
    assert torch.equal(prior.h, post.h)
    assert not torch.equal(prior.logits, post.logits)


def test_sampled_latents_are_one_hot_and_seeded(micro_model_config, micro_batch):
    torch.manual_seed(0)
    wm = build_world_model(replace(micro_model_config, sample_latents=True), "focus")
    embeds = wm.encode(micro_batch["image"], micro_batch["proprio"])
    torch.manual_seed(5)
    first, _, _ = wm.observe(embeds, micro_batch["action"])
    torch.manual_seed(5)
    second, _, _ = wm.observe(embeds, micro_batch["action"])
    assert torch.equal(first.z, second.z)
    assert torch.equal(first.z.sum(-1), torch.ones_like(first.z.sum(-1)))
    assert set(first.z.unique().tolist()) <= {0.0, 1.0}


def test_observe_shapes(model, micro_model_config, states):
    c = micro_model_config
    assert states.batch_shape == (2, 6)
    assert states.z.shape == (2, 6, c.stoch_factors, c.stoch_classes)
    assert states.feature().shape == (2, 6, c.feature_dim)
    assert states.flatten().batch_shape == (12,)
    assert torch.equal(LatentState.stack([states[:, 0], states[:, 1]], dim=1).h, states.h[:, :2])


def test_non_finite_logits_raise(model):
    with torch.no_grad():
        model.prior_net[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericalFailure):
        model.prior_step(model.initial_state(1), torch.zeros(1, 3, dtype=torch.float64))


def test_vector_heads(model, states):
    with torch.no_grad():
        assert model.decode_proprio(states).shape == (2, 6, 5)
        assert model.predict_reward(states).shape == (2, 6)
        assert torch.equal(model.predict_reward(states), model.predict_reward(states))


# Object decoding -------------------------------------------------------------


def test_extract_object_latent_checks_the_id(model, states):
    with pytest.raises(ContractError):
        model.extract_object_latent(states, torch.tensor([1.0, 1.0], dtype=torch.float64))
    with pytest.raises(ContractError):
        model.extract_object_latent(states, torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    with pytest.raises(ContractError):
        model.extract_object_latent(states, torch.tensor([0.5, 0.5], dtype=torch.float64))


def test_object_latents_differ_per_slot(model, states):
    ids = model.object_ids()
    with torch.no_grad():
        background = model.extract_object_latent(states, ids[0])
        block = model.extract_object_latent(states, ids[1])
        every = model.all_object_latents(states)
    assert not torch.allclose(background, block)
    assert torch.allclose(every[..., 0, :], background, atol=1e-12)
    assert torch.allclose(every[..., 1, :], block, atol=1e-12)
    assert torch.equal(block, model.extract_object_latent(states, ids[1]))


def test_decode_shapes_and_composition(model, states, micro_model_config):
    c = micro_model_config
    with torch.no_grad():
        out = model.decode(states)
    assert out.object_images.shape == (2, 6, c.num_slots, 8, 8, 3)
    assert out.weights.shape == (2, 6, c.num_slots, 8, 8)
    assert out.mask.shape == (2, 6, 8, 8, c.num_slots)
    assert torch.allclose(out.mask.sum(-1), torch.ones(2, 6, 8, 8, dtype=torch.float64))
    assert out.image.shape == (2, 6, 8, 8, 3)

    winner = hard_assignment(out.mask)
    for slot in range(c.num_slots):
        chosen = winner == slot
        assert torch.equal(out.image[chosen], out.object_images[:, :, slot][chosen])


def test_monolithic_decoder_has_no_mask(micro_model_config, micro_batch):
    torch.manual_seed(0)
    wm = build_world_model(micro_model_config, "dreamer-monolithic")
    assert isinstance(wm, MonolithicWorldModel)
    breakdown, _ = wm.loss(micro_batch)
    assert breakdown.obj_mask.item() == 0.0
    assert breakdown.obj.item() == pytest.approx(breakdown.obj_recon.item())
    assert wm.decode(wm.initial_state(3)).image.shape == (3, 8, 8, 3)


def test_apt_uses_the_monolithic_model(micro_model_config):
    assert build_world_model(micro_model_config, "apt-baseline").kind == "monolithic"
    assert build_world_model(micro_model_config, "random").kind == "object-centric"


# Full loss -------------------------------------------------------------------


def test_loss_is_the_sum_of_its_components(model, micro_batch):
    breakdown, posts = model.loss(micro_batch)
    parts = breakdown.dyn + breakdown.proprio + breakdown.obj_mask + breakdown.obj_recon + breakdown.rew
    assert breakdown.total.item() == pytest.approx(parts.item(), rel=1e-12)
    assert posts.batch_shape == (2, 6)
    assert set(breakdown.as_floats()) == {"wm_total", "wm_dyn", "wm_kl", "wm_proprio", "wm_obj",
                                          "wm_obj_mask", "wm_obj_recon", "wm_rew"}


def test_loss_reaches_every_parameter(model, micro_batch):
    breakdown, _ = model.loss(micro_batch)
    breakdown.total.backward()
    missing = [name for name, p in model.named_parameters() if p.grad is None or not torch.isfinite(p.grad).all()]
    assert missing == []


def sample_coordinates(model, count, seed=0):
    """(name, flat index) pairs: a uniformly drawn parameter tensor, then a uniform entry of it"""
    named = list(model.named_parameters())
    generator = torch.Generator().manual_seed(seed)
    owners = torch.randint(len(named), (count,), generator=generator)
    coordinates = []
    for owner in owners.tolist():
        name, param = named[owner]
        index = int(torch.randint(param.numel(), (1,), generator=generator))
        coordinates.append((name, index))
    return coordinates


def test_loss_gradients_match_finite_differences(model, micro_batch):
    breakdown, _ = model.loss(micro_batch)
    breakdown.total.backward()
    params = dict(model.named_parameters())
    coordinates = sample_coordinates(model, 100)
    assert len({name.split(".")[0] for name, _ in coordinates}) > 5

    eps = 1e-5
    failures = []
    with torch.no_grad():
        for name, index in coordinates:
            flat = params[name].view(-1)
            original = flat[index].item()
            flat[index] = original + eps
            upper = model.loss(micro_batch)[0].total.item()
            flat[index] = original - eps
            lower = model.loss(micro_batch)[0].total.item()
            flat[index] = original
            numerical = (upper - lower) / (2 * eps)
            analytical = params[name].grad.view(-1)[index].item()
            scale = max(abs(numerical), abs(analytical))
            # near-zero coordinates fall back to an absolute bound
            if abs(numerical - analytical) > max(1e-4 * scale, 1e-8):
                failures.append((name, index, numerical, analytical))
    assert failures == []


# Baseline sizing -------------------------------------------------------------


def test_monolithic_decoder_matches_object_decoder_size():
    config = WorldModelConfig()
    depth = matched_monolithic_depth(config)
    extractor = mlp(config.feature_dim + config.num_slots, config.object_latent,
                    config.extractor_width, config.extractor_layers)
    target = count_parameters(extractor) + ConvDecoder.count_parameters(
        config.object_latent, config.channels + 1, config.image_size, config.object_depth)
    baseline = ConvDecoder.count_parameters(config.feature_dim, config.channels, config.image_size, depth)
    assert abs(baseline - target) / target < 0.1


def test_decoder_parameter_formula_matches_the_module():
    decoder = ConvDecoder(24, 4, 16, 6)
    assert ConvDecoder.count_parameters(24, 4, 16, 6) == count_parameters(decoder)
