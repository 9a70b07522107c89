"""Cosine-similarity correlation pyramids and super correlation maps.

For each pyramid level, every support-position feature vector is compared
against every query-position feature vector by ReLU-clamped cosine
similarity, giving a 4-D tensor of shape (1, h_s, w_s, h_q, w_q). Two such
pyramids are built per episode: one from the full support image (SIF) and
one from the input-masked support image (STF). Stacking them channel-wise
gives the super correlation maps consumed by the segmenter.

Axis convention, frozen so golden files are possible:
(channel, support-y, support-x, query-y, query-x), with channel 0 holding
the SIF-based map and channel 1 the STF-based map. Spatial flattening is
row-major (flat index = y * w + x).
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .backbone import FeaturePyramid, extract_pyramid, flatten_query, flatten_support
from .masking import mask_features, mask_image

DEFAULT_EPS = 1e-8

# correlation channel sources, in canonical stacking order; "sif" before
# "stf" keeps the default two-channel stack aligned with its (C, S) layout
SOURCE_ORDER = ("sif", "stf", "fm")

# the seven feature-combination rows of the ablation matrix: every
# non-empty subset of {sif, stf, fm}
FEATURE_ROWS = (
    ("sif",),
    ("stf",),
    ("fm",),
    ("sif", "stf"),
    ("sif", "fm"),
    ("stf", "fm"),
    ("sif", "stf", "fm"),
)

FUSION_MODES = ("feature_add", "correlation_add", "attention", "concat")

DEFAULT_ROW = ("sif", "stf")


def cosine_correlation(support, query, support_hw, query_hw, eps=DEFAULT_EPS):
    """ReLU-clamped all-pairs cosine similarity between feature matrices.

    ``support`` is (h_s*w_s, c), ``query`` is (c, h_q*w_q); the result is
    reshaped to (1, h_s, w_s, h_q, w_q). Norms are floored at ``eps`` so
    zero vectors correlate to 0 rather than dividing by zero.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if support.shape[1] != query.shape[0]:
        raise ValueError(
            f"channel mismatch: support has {support.shape[1]}, query has {query.shape[0]}"
        )
    hs, ws = support_hw
    hq, wq = query_hw
    if support.shape[0] != hs * ws or query.shape[1] != hq * wq:
        raise ValueError("flattened sizes disagree with the declared spatial dims")
    num = support @ query  # (P, Q)
    sn = torch.linalg.vector_norm(support, dim=1).clamp_min(eps)
    qn = torch.linalg.vector_norm(query, dim=0).clamp_min(eps)
    corr = (num / (sn[:, None] * qn[None, :])).clamp(0.0, 1.0)
    return corr.reshape(1, hs, ws, hq, wq)


def oracle_correlation(support, query, support_hw, query_hw, eps=DEFAULT_EPS):
    """Explicit per-pair loop reference for :func:`cosine_correlation`.

    Kept deliberately naive (never optimized) so it stays an independent
    check on the vectorized path.
    """
    s = [[float(v) for v in row] for row in support]
    q_cols = list(zip(*[[float(v) for v in row] for row in query]))
    hs, ws = support_hw
    hq, wq = query_hw
    out = torch.empty((1, hs, ws, hq, wq), dtype=torch.float64)
    for p in range(hs * ws):
        fp = s[p]
        np_ = max(math.sqrt(sum(v * v for v in fp)), eps)
        for q in range(hq * wq):
            gq = q_cols[q]
            nq = max(math.sqrt(sum(v * v for v in gq)), eps)
            dot = sum(a * b for a, b in zip(fp, gq))
            val = dot / (np_ * nq)
            out[0, p // ws, p % ws, q // wq, q % wq] = val if val > 0.0 else 0.0
    return out


def correlate_levels(support_level, query_level, eps=DEFAULT_EPS):
    """Correlate one pyramid level pair: (c, h, w) x (c, h, w) -> 5-D tensor."""
    _, hs, ws = support_level.shape
    _, hq, wq = query_level.shape
    return cosine_correlation(
        flatten_support(support_level), flatten_query(query_level), (hs, ws), (hq, wq), eps
    )


@dataclass
class CorrelationPyramid:
    """Per-level 4-D correlation tensors with a source tag (sif/stf/fm)."""

    levels: list
    source: str = "?"

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("correlation pyramid needs at least one level")
        for i, level in enumerate(self.levels):
            if level.dim() != 5 or level.shape[0] != 1:
                raise ValueError(f"level {i} must be (1, h, w, h, w), got {tuple(level.shape)}")
            if not torch.isfinite(level).all():
                raise ValueError(f"level {i} contains non-finite values")
            lo, hi = level.min().item(), level.max().item()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"level {i} outside [0, 1]: min {lo}, max {hi}")

    @property
    def num_levels(self):
        return len(self.levels)


def correlate_pyramids(support, query, source, eps=DEFAULT_EPS):
    """Correlate two feature pyramids level by level."""
    if support.num_levels != query.num_levels:
        raise ValueError("pyramids have different level counts")
    levels = [correlate_levels(s, q, eps) for s, q in zip(support.levels, query.levels)]
    return CorrelationPyramid(levels=levels, source=source)


@dataclass
class CorrelationStack:
    """Channel-stacked correlation maps; level i is (k, h_i, w_i, h_i, w_i)."""

    levels: list
    sources: tuple

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("correlation stack needs at least one level")
        k = len(self.sources)
        for i, level in enumerate(self.levels):
            if level.dim() != 5 or level.shape[0] != k:
                raise ValueError(
                    f"level {i}: expected {k} channels, got shape {tuple(level.shape)}"
                )
            if not torch.isfinite(level).all():
                raise ValueError(f"level {i} contains non-finite values")

    @property
    def num_levels(self):
        return len(self.levels)

    @property
    def channels(self):
        return len(self.sources)


def stack_pyramids(pyramids):
    """Concatenate correlation pyramids along the channel axis, per level."""
    if not pyramids:
        raise ValueError("need at least one pyramid to stack")
    n = pyramids[0].num_levels
    for p in pyramids[1:]:
        if p.num_levels != n:
            raise ValueError("pyramids have different level counts")
    levels = []
    for i in range(n):
        shapes = {tuple(p.levels[i].shape) for p in pyramids}
        if len(shapes) > 1:
            raise ValueError(f"level {i}: shape mismatch across pyramids: {sorted(shapes)}")
        levels.append(torch.cat([p.levels[i] for p in pyramids], dim=0))
    return CorrelationStack(levels=levels, sources=tuple(p.source for p in pyramids))


def build_scm(sif_corr, stf_corr):
    """Stack the SIF-based and STF-based pyramids into 2-channel maps.

    Channel 0 is the full-support-image map, channel 1 the masked-support
    map; values are concatenated untouched.
    """
    return stack_pyramids([sif_corr, stf_corr])


@dataclass(frozen=True)
class PipelineSpec:
    """Which correlation channels feed the segmenter, and how they fuse.

    ``fusion="concat"`` stacks the correlation maps named by ``row``
    (any non-empty subset of sif/stf/fm). The other fusion modes are
    defined on the (sif, stf) pair only.
    """

    row: tuple = DEFAULT_ROW
    fusion: str = "concat"
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; valid: {FUSION_MODES}")
        row = tuple(self.row)
        if not row or len(set(row)) != len(row):
            raise ValueError(f"row must be a non-empty set of sources, got {row}")
        for src in row:
            if src not in SOURCE_ORDER:
                raise ValueError(f"unknown source {src!r}; valid: {SOURCE_ORDER}")
        canon = canonical_row(row)
        object.__setattr__(self, "row", canon)
        if self.fusion != "concat" and canon != DEFAULT_ROW:
            raise ValueError(f"fusion {self.fusion!r} is defined on row {DEFAULT_ROW} only")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    @property
    def stack_channels(self):
        """Channel count of the stack handed to the segmenter."""
        if self.fusion in ("concat", "attention"):
            return len(self.row)
        return 1

    @property
    def name(self):
        if self.fusion == "concat":
            return "+".join(self.row)
        return self.fusion


def canonical_row(row):
    return tuple(src for src in SOURCE_ORDER if src in row)


def fuse(mode, *, sif_corr=None, stf_corr=None, sif_feats=None, stf_feats=None,
         query_feats=None, gate=None, eps=DEFAULT_EPS):
    """Combine the two correlation sources per the requested fusion mode.

    - ``concat``: channel-stack the two maps (2 channels, values in [0, 1]).
    - ``correlation_add``: element-wise sum, values in [0, 2], not
      renormalized.
    - ``attention``: convex blend gate*C + (1-gate)*S with gate in [0, 1],
      scalar or one value per level.
    - ``feature_add``: add the SIF and STF feature pyramids element-wise
      *before* correlating against the query features (1 channel).
    """
    if mode == "concat":
        _need(sif_corr is not None and stf_corr is not None, mode, "sif_corr/stf_corr")
        return build_scm(sif_corr, stf_corr)
    if mode == "correlation_add":
        _need(sif_corr is not None and stf_corr is not None, mode, "sif_corr/stf_corr")
        _check_same_shape(sif_corr, stf_corr)
        levels = [c + s for c, s in zip(sif_corr.levels, stf_corr.levels)]
        return CorrelationStack(levels=levels, sources=("sif+stf",))
    if mode == "attention":
        _need(sif_corr is not None and stf_corr is not None, mode, "sif_corr/stf_corr")
        _check_same_shape(sif_corr, stf_corr)
        n = sif_corr.num_levels
        gates = _per_level_gates(gate, n)
        levels = [g * c + (1.0 - g) * s
                  for g, c, s in zip(gates, sif_corr.levels, stf_corr.levels)]
        return CorrelationStack(levels=levels, sources=("gated",))
    if mode == "feature_add":
        _need(
            sif_feats is not None and stf_feats is not None and query_feats is not None,
            mode, "sif_feats/stf_feats/query_feats",
        )
        summed = FeaturePyramid(
            levels=[a + b for a, b in zip(sif_feats.levels, stf_feats.levels)], role="S+T"
        )
        pyr = correlate_pyramids(summed, query_feats, source="sif+stf", eps=eps)
        return CorrelationStack(levels=pyr.levels, sources=("sif+stf",))
    raise ValueError(f"unknown fusion mode {mode!r}; valid: {FUSION_MODES}")


def _need(ok, mode, what):
    if not ok:
        raise ValueError(f"fusion {mode!r} requires {what}")


def _check_same_shape(a, b):
    if a.num_levels != b.num_levels:
        raise ValueError("pyramids have different level counts")
    for i, (la, lb) in enumerate(zip(a.levels, b.levels)):
        if la.shape != lb.shape:
            raise ValueError(
                f"level {i}: shape {tuple(la.shape)} vs {tuple(lb.shape)}"
            )


def _per_level_gates(gate, n):
    if gate is None:
        raise ValueError("fusion 'attention' requires a gate")
    if isinstance(gate, (int, float)):
        gates = [float(gate)] * n
    elif isinstance(gate, torch.Tensor) and gate.dim() == 0:
        gates = [gate] * n
    else:
        gates = list(gate)
        if len(gates) != n:
            raise ValueError(f"need one gate per level ({n}), got {len(gates)}")
    for g in gates:
        val = float(g) if not isinstance(g, torch.Tensor) else float(g.detach())
        if val < 0.0 or val > 1.0:
            raise ValueError(f"gate must lie in [0, 1], got {val}")
    return gates


def episode_pyramids(support_image, support_mask, query_image, backbone, sources,
                     eps=DEFAULT_EPS, query_pyramid=None):
    """Extract features and build the correlation pyramid for each source."""
    if query_pyramid is None:
        query_pyramid = extract_pyramid(query_image, backbone, role="Q")
    support_pyr = extract_pyramid(support_image, backbone, role="S")
    out = {}
    for src in sources:
        if src == "sif":
            feats = support_pyr
        elif src == "stf":
            feats = extract_pyramid(mask_image(support_image, support_mask), backbone, role="T")
        elif src == "fm":
            feats = mask_features(support_pyr, support_mask)
        else:
            raise ValueError(f"unknown source {src!r}; valid: {SOURCE_ORDER}")
        out[src] = correlate_pyramids(feats, query_pyramid, source=src, eps=eps)
    return out, support_pyr, query_pyramid


def build_inputs(spec, support_image, support_mask, query_image, backbone,
                 query_pyramid=None):
    """Build the per-level input stack for one (support, query) pairing.

    Routes the episode through the feature/fusion combination declared by
    ``spec``. Attention fusion returns the raw 2-channel stack; the
    segmenter applies its learnable gates itself.
    """
    eps = spec.eps
    if spec.fusion == "concat":
        pyrs, _, _ = episode_pyramids(
            support_image, support_mask, query_image, backbone, spec.row, eps, query_pyramid
        )
        return stack_pyramids([pyrs[src] for src in spec.row])
    if spec.fusion == "attention":
        pyrs, _, _ = episode_pyramids(
            support_image, support_mask, query_image, backbone, DEFAULT_ROW, eps, query_pyramid
        )
        return stack_pyramids([pyrs["sif"], pyrs["stf"]])
    if spec.fusion == "correlation_add":
        pyrs, _, _ = episode_pyramids(
            support_image, support_mask, query_image, backbone, DEFAULT_ROW, eps, query_pyramid
        )
        return fuse("correlation_add", sif_corr=pyrs["sif"], stf_corr=pyrs["stf"], eps=eps)
    # feature_add: sum the two support pyramids before correlating
    if query_pyramid is None:
        query_pyramid = extract_pyramid(query_image, backbone, role="Q")
    sif_feats = extract_pyramid(support_image, backbone, role="S")
    stf_feats = extract_pyramid(mask_image(support_image, support_mask), backbone, role="T")
    return fuse(
        "feature_add",
        sif_feats=sif_feats, stf_feats=stf_feats, query_feats=query_pyramid, eps=eps,
    )


def super_correlation_maps(support_image, support_mask, query_image, backbone,
                           eps=DEFAULT_EPS):
    """Full default pipeline: mask, extract, correlate twice, stack.

    Channel 0 correlates the unmasked support image against the query;
    channel 1 correlates the input-masked support image against the query.
    """
    return build_inputs(
        PipelineSpec(row=DEFAULT_ROW, fusion="concat", eps=eps),
        support_image, support_mask, query_image, backbone,
    )


# ---------------------------------------------------------------------------
# correlation-map export
# ---------------------------------------------------------------------------

MAGIC = b"MSICORR1"


def write_correlation_dump(stack, path):
    """Write a stack as raw little-endian float32 with a fixed header.

    Layout: 8-byte magic, then uint32 LE values [N, C, h_1, w_1, ...,
    h_N, w_N], then each level's (C, h, w, h, w) data as float32 LE in C
    order. Levels must have matching support/query dims.
    """
    dims = []
    for i, level in enumerate(stack.levels):
        _, hs, ws, hq, wq = level.shape
        if (hs, ws) != (hq, wq):
            raise ValueError(f"level {i}: export requires equal support/query dims")
        dims.extend((hs, ws))
    header = np.array([stack.num_levels, stack.channels] + dims, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.tobytes())
        for level in stack.levels:
            fh.write(level.detach().cpu().numpy().astype("<f4").tobytes())


def read_correlation_dump(path):
    """Inverse of :func:`write_correlation_dump`; returns numpy arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        meta = np.frombuffer(fh.read(8), dtype="<u4")
        n, c = int(meta[0]), int(meta[1])
        dims = np.frombuffer(fh.read(8 * n), dtype="<u4").reshape(n, 2)
        levels = []
        for h, w in dims:
            h, w = int(h), int(w)
            count = c * h * w * h * w
            buf = np.frombuffer(fh.read(4 * count), dtype="<f4")
            if buf.size != count:
                raise ValueError(f"truncated dump {path}")
            levels.append(buf.reshape(c, h, w, h, w).copy())
    return levels


def level_mosaic(level_channel):
    """Tile a (h_s, w_s, h_q, w_q) tensor into a (h_s*h_q, w_s*w_q) image.

    The tile at grid cell (sy, sx) is that support position's correlation
    map over query positions.
    """
    arr = level_channel.detach().cpu().numpy()
    hs, ws, hq, wq = arr.shape
    return arr.transpose(0, 2, 1, 3).reshape(hs * hq, ws * wq)


def export_level_pngs(stack, out_dir, prefix="corr"):
    """Write one grayscale mosaic PNG per (level, channel); returns paths."""
    from pathlib import Path

    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, level in enumerate(stack.levels):
        for ch, src in enumerate(stack.sources):
            mosaic = level_mosaic(level[ch])
            img = np.clip(np.round(mosaic * 255.0), 0, 255).astype(np.uint8)
            p = out_dir / f"{prefix}_level{i}_{src}.png"
            Image.fromarray(img, mode="L").save(p)
            paths.append(p)
    return paths
