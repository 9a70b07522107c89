"""Multi-layer feature extraction.

A backbone turns an RGB image into a pyramid of feature tensors, one per
tapped stage, shallow to deep. The package ships a small seeded
convolutional backbone; external feature extractors plug in through the
adapter registry (see ``register_backbone_adapter``).

Feature taps are the pre-activation stage outputs, so values are
sign-carrying. Backbone weights are frozen: extraction never tracks
gradients.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class FeaturePyramid:
    """Ordered per-stage feature tensors, each of shape (c_i, h_i, w_i)."""

    levels: list
    role: str = "?"  # which image produced it: S, T, Q, or FM

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("feature pyramid needs at least one level")
        prev = None
        for i, level in enumerate(self.levels):
            if level.dim() != 3:
                raise ValueError(f"level {i} must be (c, h, w), got {tuple(level.shape)}")
            if not torch.isfinite(level).all():
                raise ValueError(f"level {i} contains non-finite values")
            area = level.shape[1] * level.shape[2]
            if prev is not None and area > prev:
                raise ValueError(f"level {i} spatial area grows ({area} > {prev})")
            prev = area

    @property
    def num_levels(self):
        return len(self.levels)

    def level_shapes(self):
        return [tuple(level.shape) for level in self.levels]


def flatten_support(level):
    """(c, h, w) -> (h*w, c) with row-major spatial order (index = y*w + x)."""
    c = level.shape[0]
    return level.reshape(c, -1).T


def flatten_query(level):
    """(c, h, w) -> (c, h*w) with row-major spatial order (index = y*w + x)."""
    c = level.shape[0]
    return level.reshape(c, -1)


def unflatten_support(mat, height, width):
    """(h*w, c) -> (c, h, w); exact inverse of :func:`flatten_support`."""
    return mat.T.reshape(-1, height, width)


def unflatten_query(mat, height, width):
    """(c, h*w) -> (c, h, w); exact inverse of :func:`flatten_query`."""
    return mat.reshape(-1, height, width)


@dataclass(frozen=True)
class ToyBackboneConfig:
    stages: int = 3
    channels: tuple = (12, 24, 36)
    strides: tuple = (2, 2, 2)
    seed: int = 0

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError("need at least 2 stages")
        if len(self.channels) != self.stages or len(self.strides) != self.stages:
            raise ValueError("channels and strides must list one entry per stage")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be >= 1")


class ToyBackbone:
    """Stacked stride-s 3x3 convolutions with seeded orthogonal-style init.

    Each stage's pre-ReLU output is one pyramid level. Replicate padding
    keeps constant inputs constant, so a zero image yields spatially
    uniform features at every level.
    """

    KERNEL = 3

    def __init__(self, config: ToyBackboneConfig):
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.weights = []
        in_c = 3
        for stage, out_c in enumerate(config.channels):
            fan_in = in_c * self.KERNEL * self.KERNEL
            if out_c > fan_in:
                raise ValueError(f"stage width {out_c} exceeds fan-in {fan_in}")
            a = torch.randn(fan_in, out_c, generator=gen, dtype=torch.float64)
            if stage == 0:
                # lead the first stage's basis with per-channel box filters so
                # colour-mean features exist at level 0 under every seed; QR
                # below orthonormalizes the random columns against them
                k2 = self.KERNEL * self.KERNEL
                for ch in range(min(in_c, out_c)):
                    col = torch.zeros(fan_in, dtype=torch.float64)
                    col[ch * k2:(ch + 1) * k2] = 1.0
                    a[:, ch] = col
            q, r = torch.linalg.qr(a)
            q = q * torch.sign(torch.diagonal(r))  # fix QR sign ambiguity
            w = (q.T * math.sqrt(2.0)).reshape(out_c, in_c, self.KERNEL, self.KERNEL)
            b = torch.rand(out_c, generator=gen, dtype=torch.float64) * 0.4 - 0.2
            self.weights.append((w.float(), b.float()))
            in_c = out_c

    @property
    def num_levels(self):
        return self.config.stages

    def level_dims(self, height, width):
        """Spatial dims of each level for a given input size."""
        dims = []
        for s in self.config.strides:
            if height % s or width % s:
                raise ValueError(
                    f"image dims must be divisible by the cumulative stride "
                    f"{int(np.prod(self.config.strides))}, got remainder at ({height}, {width})"
                )
            height, width = height // s, width // s
            dims.append((height, width))
        return dims

    def extract(self, image, role="?"):
        x = _to_tensor(image)
        self.level_dims(x.shape[1], x.shape[2])  # dim check up front
        levels = []
        with torch.no_grad():
            for (w, b), stride in zip(self.weights, self.config.strides):
                x = F.pad(x.unsqueeze(0), (1, 1, 1, 1), mode="replicate")
                tap = F.conv2d(x, w, b, stride=stride).squeeze(0)
                levels.append(tap)
                x = torch.relu(tap)
        return FeaturePyramid(levels=levels, role=role)


def _to_tensor(image):
    if isinstance(image, torch.Tensor):
        t = image.float()
    else:
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    if t.dim() != 3 or t.shape[0] != 3:
        raise ValueError(f"image must have shape (3, h, w), got {tuple(t.shape)}")
    return t


def extract_pyramid(image, backbone, role="?"):
    """Run a backbone (built-in or adapter) and validate the result."""
    out = backbone.extract(image, role) if _accepts_role(backbone) else backbone.extract(image)
    if isinstance(out, FeaturePyramid):
        return out
    return FeaturePyramid(levels=list(out), role=role)


def _accepts_role(backbone):
    try:
        import inspect

        return "role" in inspect.signature(backbone.extract).parameters
    except (TypeError, ValueError):
        return False


_ADAPTERS = {}


def register_backbone_adapter(name, factory):
    """Register a backbone factory under a config-selectable name.

    ``factory(config_dict)`` must return an object with ``extract(image)``
    yielding a FeaturePyramid (or a list of (c, h, w) tensors) and a
    ``num_levels`` attribute.
    """
    if name in _ADAPTERS:
        raise ValueError(f"backbone adapter {name!r} is already registered")
    _ADAPTERS[name] = factory


def registered_backbones():
    return tuple(sorted(_ADAPTERS))


def create_backbone(config):
    """Instantiate a backbone from a config dict with a ``name`` key."""
    cfg = dict(config)
    name = cfg.pop("name", None)
    if name not in _ADAPTERS:
        raise ValueError(f"unknown backbone {name!r}; registered: {registered_backbones()}")
    return _ADAPTERS[name](cfg)


def _toy_factory(cfg):
    channels = tuple(cfg.get("channels", (12, 24, 36)))
    strides = tuple(cfg.get("strides", (2, 2, 2)))
    return ToyBackbone(
        ToyBackboneConfig(
            stages=int(cfg.get("stages", len(channels))),
            channels=channels,
            strides=strides,
            seed=int(cfg.get("seed", 0)),
        )
    )


register_backbone_adapter("toy", _toy_factory)
