"""Trainable head that turns correlation stacks into query masks.

The encoder first collapses the two support spatial axes of each level by
a parameter-free pooled contraction (mean and max per channel), leaving a
dense query-resolution plane stack. Per-level convolutions and a
coarse-to-fine merge then produce two-class logits at the finest level,
which are upsampled to image resolution for the loss and the predicted
mask. Activations are tanh so the whole head is smooth in its parameters,
which keeps finite-difference gradient validation clean.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import evaluation
from .correlation import FEATURE_ROWS, PipelineSpec, build_inputs, canonical_row
from .backbone import extract_pyramid
from .errors import ConfigError, NanLossError


@dataclass
class SegmenterConfig:
    hidden: int = 8
    lr: float = 0.2
    steps: int = 500
    threshold: float = 0.5  # foreground probability cutoff
    seed: int = 0
    val_every: int = 50
    val_episodes: int = 12

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.steps < 1:
            raise ValueError("step budget must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    val_miou: float = None
    wallclock_ms: float = 0.0


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def append(self, step, loss, val_miou=None, wallclock_ms=0.0):
        if self.entries and step <= self.entries[-1].step:
            raise ValueError(f"step {step} does not increase past {self.entries[-1].step}")
        self.entries.append(TrainLogEntry(step, float(loss), val_miou, float(wallclock_ms)))

    def losses(self):
        return [e.loss for e in self.entries]

    def validations(self):
        return [(e.step, e.val_miou, e.wallclock_ms) for e in self.entries
                if e.val_miou is not None]

    def to_csv(self, path):
        lines = ["step,loss,val_miou,wallclock_ms"]
        for e in self.entries:
            val = repr(e.val_miou) if e.val_miou is not None else ""
            lines.append(f"{e.step},{e.loss!r},{val},{e.wallclock_ms:.3f}")
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "step,loss,val_miou,wallclock_ms":
                raise ValueError(f"unexpected training-log header: {header!r}")
            for line in fh:
                step, loss, val, wall = line.rstrip("\n").split(",")
                log.append(int(step), float(loss), float(val) if val else None, float(wall))
        return log


class CorrelationSegmenter(nn.Module):
    """Encoder/decoder head over per-level correlation stacks.

    ``stack_channels`` is the declared input channel count (2 for the
    default two-source concat, 1 for single-source or pre-fused rows, 3
    for the three-way row); the first layer's width follows it. With
    ``fusion="attention"`` the model owns one sigmoid gate per level and
    blends the two input channels into one before encoding.
    """

    def __init__(self, num_levels, stack_channels, hidden=8, fusion="concat", seed=0):
        super().__init__()
        if num_levels < 1:
            raise ValueError("need at least one pyramid level")
        self.num_levels = num_levels
        self.stack_channels = stack_channels
        self.hidden = hidden
        self.fusion = fusion
        c_eff = 1 if fusion == "attention" else stack_channels
        # mean + max contraction doubles the plane count entering each conv
        self.level_convs = nn.ModuleList(
            nn.Conv2d(2 * c_eff, hidden, 3, padding=1, padding_mode="replicate")
            for _ in range(num_levels)
        )
        self.merge_convs = nn.ModuleList(
            nn.Conv2d(2 * hidden, hidden, 3, padding=1, padding_mode="replicate")
            for _ in range(num_levels - 1)
        )
        self.out_conv = nn.Conv2d(hidden, 2, 1)
        if fusion == "attention":
            self.gates = nn.Parameter(torch.zeros(num_levels))
        self._seed_parameters(seed)

    @property
    def in_channels(self):
        return self.stack_channels

    def _seed_parameters(self, seed):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in [*self.level_convs, *self.merge_convs, self.out_conv]:
                fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in)
                )
                conv.bias.zero_()

    def encode(self, stacks):
        """Contract support axes and merge levels coarse-to-fine.

        Returns a feature map at the finest level's query resolution.
        """
        if len(stacks) != self.num_levels:
            raise ValueError(f"model expects {self.num_levels} levels, got {len(stacks)}")
        feats = []
        for i, t in enumerate(stacks):
            if t.shape[0] != self.stack_channels:
                raise ValueError(
                    f"level {i}: model expects {self.stack_channels} channels, "
                    f"got {t.shape[0]}"
                )
            if self.fusion == "attention":
                g = torch.sigmoid(self.gates[i])
                t = g * t[0:1] + (1.0 - g) * t[1:2]
            planes = torch.cat([t.mean(dim=(1, 2)), t.amax(dim=(1, 2))], dim=0)
            # raw correlations cluster tightly near their plane mean; rescale
            # contrast per plane so the convolutions see a usable dynamic range
            mu = planes.mean(dim=(1, 2), keepdim=True)
            sd = planes.std(dim=(1, 2), unbiased=False, keepdim=True)
            planes = (planes - mu) / (sd + 1e-6)
            feats.append(torch.tanh(self.level_convs[i](planes.unsqueeze(0))))
        x = feats[-1]
        for i in range(self.num_levels - 2, -1, -1):
            x = F.interpolate(x, size=feats[i].shape[-2:], mode="nearest")
            x = torch.tanh(self.merge_convs[i](torch.cat([x, feats[i]], dim=1)))
        return x.squeeze(0)

    def forward(self, stacks):
        """Two-class logits at the finest level's query resolution."""
        return self.out_conv(self.encode(stacks).unsqueeze(0)).squeeze(0)


def build_segmenter(num_levels, spec, config):
    return CorrelationSegmenter(
        num_levels=num_levels,
        stack_channels=spec.stack_channels,
        hidden=config.hidden,
        fusion=spec.fusion,
        seed=config.seed,
    )


def _upsampled_logits(model, stacks, out_hw):
    logits = model(stacks)
    return F.interpolate(
        logits.unsqueeze(0), size=out_hw, mode="bilinear", align_corners=False
    ).squeeze(0)


def _episode_stacks(episode, spec, backbone):
    """Per-shot input stacks, with the query pyramid shared across shots."""
    with torch.no_grad():
        query_pyr = extract_pyramid(episode.query_image, backbone, role="Q")
        return [
            build_inputs(spec, img, mask, episode.query_image, backbone,
                         query_pyramid=query_pyr)
            for img, mask in zip(episode.support_images, episode.support_masks)
        ]


def predict(episode, model, backbone, threshold=0.5, return_soft=True):
    """Predict the query mask for an episode.

    Each shot yields a foreground-probability map; shots are averaged and
    the mean map is thresholded. Returns (mask uint8, soft float32).
    """
    out_hw = episode.query_mask.shape
    spec = model.pipeline_spec
    probs = []
    with torch.no_grad():
        for stack in _episode_stacks(episode, spec, backbone):
            logits = _upsampled_logits(model, stack.levels, out_hw)
            probs.append(torch.softmax(logits, dim=0)[1])
        soft = torch.stack(probs).mean(dim=0)
    mask = (soft >= threshold).to(torch.uint8).numpy()
    if return_soft:
        return mask, soft.numpy().astype(np.float32)
    return mask


def attach_pipeline(model, spec):
    """Record which input pipeline the model was built for."""
    model.pipeline_spec = spec
    return model


def _episode_loss(model, episode, spec, backbone):
    out_hw = episode.query_mask.shape
    gt = torch.from_numpy(episode.query_mask.astype(np.int64))
    losses = []
    for stack in _episode_stacks(episode, spec, backbone):
        logits = _upsampled_logits(model, stack.levels, out_hw)
        losses.append(F.cross_entropy(logits.unsqueeze(0), gt.unsqueeze(0)))
    return torch.stack(losses).mean()


def _validation_miou(model, cached, threshold):
    results = []
    with torch.no_grad():
        for episode, stacks in cached:
            out_hw = episode.query_mask.shape
            probs = [
                torch.softmax(_upsampled_logits(model, s.levels, out_hw), dim=0)[1]
                for s in stacks
            ]
            soft = torch.stack(probs).mean(dim=0)
            pred = (soft >= threshold).to(torch.uint8).numpy()
            results.append(evaluation.iou(pred, episode.query_mask))
    return float(np.mean(results))


def fit(train_sampler, val_sampler, config, backbone, spec, model=None):
    """Train a segmenter on episodes by plain SGD over pixel cross-entropy.

    Deterministic given the config seed and the samplers' own seeds.
    Validation episodes are drawn once from ``val_sampler`` and their
    input stacks cached (the backbone is frozen, so they never change).
    Raises NanLossError with a diagnostic snapshot if the loss leaves the
    reals.
    """
    if model is None:
        model = build_segmenter(backbone.num_levels, spec, config)
    attach_pipeline(model, spec)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr)
    log = TrainLog()

    val_cached = []
    for i in range(config.val_episodes):
        episode = val_sampler(i)
        val_cached.append((episode, _episode_stacks(episode, spec, backbone)))

    start = time.perf_counter()
    recent = []
    for step in range(1, config.steps + 1):
        episode = train_sampler(step - 1)
        loss = _episode_loss(model, episode, spec, backbone)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise NanLossError(
                f"non-finite loss {loss_val} at step {step}",
                snapshot={
                    "step": step,
                    "loss": loss_val,
                    "class_id": episode.class_id,
                    "recent_losses": recent[-10:],
                    "lr": config.lr,
                },
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        recent.append(loss_val)

        val = None
        if config.val_episodes and (step % config.val_every == 0 or step == config.steps):
            val = _validation_miou(model, val_cached, config.threshold)
        log.append(step, loss_val, val, (time.perf_counter() - start) * 1000.0)
    return model, log


def ablation_forward(row, episode, model, backbone, threshold=0.5):
    """Run one feature-combination row of the ablation matrix.

    The model must have been built for that row; channel counts are the
    row's size, so a mismatched model is rejected.
    """
    row = canonical_row(tuple(row))
    if row not in FEATURE_ROWS:
        raise ValueError(f"unknown ablation row {row}; valid rows: {FEATURE_ROWS}")
    spec = model.pipeline_spec
    if spec.fusion != "concat" or spec.row != row:
        raise ValueError(f"model was built for {spec.name!r}, not row {'+'.join(row)!r}")
    return predict(episode, model, backbone, threshold=threshold)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "scmseg-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, backbone_config=None, segmenter_config=None):
    """Versioned JSON checkpoint: config echo plus ordered flat parameters."""
    import json

    spec = model.pipeline_spec
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": {
            "num_levels": model.num_levels,
            "stack_channels": model.stack_channels,
            "hidden": model.hidden,
            "fusion": model.fusion,
        },
        "pipeline": {"row": list(spec.row), "fusion": spec.fusion, "eps": spec.eps},
        "backbone": backbone_config,
        "segmenter": segmenter_config,
        "parameters": [
            {
                "name": name,
                "shape": list(p.shape),
                "values": [float(v) for v in p.detach().reshape(-1)],
            }
            for name, p in model.named_parameters()
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, metadata dict)."""
    import json

    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a segmenter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    m = payload["model"]
    model = CorrelationSegmenter(
        num_levels=m["num_levels"],
        stack_channels=m["stack_channels"],
        hidden=m["hidden"],
        fusion=m["fusion"],
    )
    params = dict(model.named_parameters())
    stored = payload["parameters"]
    if set(params) != {p["name"] for p in stored}:
        raise ConfigError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for entry in stored:
            p = params[entry["name"]]
            if list(p.shape) != entry["shape"]:
                raise ConfigError(
                    f"checkpoint shape {entry['shape']} does not match "
                    f"{entry['name']} {list(p.shape)}"
                )
            p.copy_(torch.tensor(entry["values"], dtype=p.dtype).reshape(p.shape))
    pl = payload["pipeline"]
    attach_pipeline(model, PipelineSpec(row=tuple(pl["row"]), fusion=pl["fusion"],
                                        eps=pl["eps"]))
    return model, payload
