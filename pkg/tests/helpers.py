"""Shared test utilities: tiny fixtures and the finite-difference oracle."""

import numpy as np
import torch
import torch.nn.functional as F

from scmseg import SyntheticSpec, ToyBackbone, ToyBackboneConfig, generate_synthetic_episode


def tiny_backbone(seed=7):
    """Two-level backbone for fast tests; 16x16 input gives 8x8 and 4x4."""
    return ToyBackbone(ToyBackboneConfig(stages=2, channels=(6, 12), strides=(2, 2), seed=seed))


def small_spec(seed=9, noise=0.03):
    return SyntheticSpec(
        canvas=(16, 16),
        classes=("circle", "square", "triangle", "diamond"),
        distractors=(0, 1),
        noise=noise,
        seed=seed,
    )


def small_episode(seed=9, class_id=0, k=1, noise=0.03):
    return generate_synthetic_episode(small_spec(seed=seed, noise=noise), class_id, k)


def random_mask(rng, h, w):
    return (rng.random((h, w)) < rng.uniform(0.05, 0.95)).astype(np.uint8)


def episode_loss(model, stacks, target):
    logits = model(stacks)
    full = F.interpolate(
        logits.unsqueeze(0), size=target.shape, mode="bilinear", align_corners=False
    ).squeeze(0)
    return F.cross_entropy(full.unsqueeze(0), target.unsqueeze(0))


def fd_max_rel_err(model, stacks, target, h=1e-6):
    """Central finite differences over every parameter element.

    Returns the worst relative error between the finite-difference
    derivative and the analytic gradient, plus the element count checked.
    The model and stacks must be double precision.
    """
    loss = episode_loss(model, stacks, target)
    model.zero_grad()
    loss.backward()
    worst, count = 0.0, 0
    for _, p in model.named_parameters():
        grad = p.grad.reshape(-1).clone()
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            lp = episode_loss(model, stacks, target).item()
            flat[i] = orig - h
            lm = episode_loss(model, stacks, target).item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            ag = grad[i].item()
            worst = max(worst, abs(fd - ag) / max(abs(fd), abs(ag), 1e-8))
            count += 1
    return worst, count


def random_stacks(channels, shapes, seed=42, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand((channels, h, w, h, w), generator=g, dtype=dtype) for h, w in shapes]
