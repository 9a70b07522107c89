import numpy as np
import pytest
import torch

from scmseg import (
    CorrelationPyramid,
    build_scm,
    cosine_correlation,
    fuse,
    oracle_correlation,
    super_correlation_maps,
)
from scmseg.backbone import flatten_query, flatten_support
from scmseg.correlation import (
    FEATURE_ROWS,
    CorrelationStack,
    PipelineSpec,
    build_inputs,
    canonical_row,
    correlate_levels,
    correlate_pyramids,
    export_level_pngs,
    level_mosaic,
    read_correlation_dump,
    write_correlation_dump,
)

import helpers


def test_orthonormal_rows_give_identity_pattern():
    # support positions carry orthonormal feature vectors; query equals support
    eye = torch.eye(4, dtype=torch.float64)
    corr = cosine_correlation(eye, eye.T, (2, 2), (2, 2))
    assert corr.shape == (1, 2, 2, 2, 2)
    flat = corr.reshape(4, 4)
    assert torch.allclose(flat, torch.eye(4, dtype=torch.float64))


def test_antipodal_vectors_clamp_to_zero():
    support = torch.tensor([[1.0, 2.0]])
    query = -support.T
    corr = cosine_correlation(support, query, (1, 1), (1, 1))
    assert corr.item() == 0.0


def test_matches_loop_oracle():
    g = torch.Generator().manual_seed(123)
    support = torch.randn(16, 3, generator=g, dtype=torch.float64)
    query = torch.randn(3, 16, generator=g, dtype=torch.float64)
    fast = cosine_correlation(support, query, (4, 4), (4, 4))
    slow = oracle_correlation(support, query, (4, 4), (4, 4))
    assert (fast - slow).abs().max().item() < 1e-6


def test_matches_loop_oracle_float32():
    g = torch.Generator().manual_seed(7)
    support = torch.randn(12, 5, generator=g)
    query = torch.randn(5, 12, generator=g)
    fast = cosine_correlation(support, query, (4, 3), (3, 4))
    slow = oracle_correlation(support, query, (4, 3), (3, 4))
    assert (fast.double() - slow).abs().max().item() < 1e-5


def test_oracle_symmetric_when_support_equals_query():
    g = torch.Generator().manual_seed(5)
    level = torch.randn(3, 3, 3, generator=g, dtype=torch.float64)
    corr = oracle_correlation(
        flatten_support(level), flatten_query(level), (3, 3), (3, 3)
    ).reshape(9, 9)
    assert torch.allclose(corr, corr.T)


def test_vectorized_symmetric_when_support_equals_query():
    g = torch.Generator().manual_seed(8)
    level = torch.randn(4, 3, 2, generator=g, dtype=torch.float64)
    corr = correlate_levels(level, level).reshape(6, 6)
    assert torch.allclose(corr, corr.T)


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channel mismatch"):
        cosine_correlation(torch.zeros(4, 3), torch.zeros(2, 4), (2, 2), (2, 2))


def test_zero_vectors_yield_zero_correlation():
    support = torch.zeros(4, 3, dtype=torch.float64)
    query = torch.ones(3, 4, dtype=torch.float64)
    corr = cosine_correlation(support, query, (2, 2), (2, 2))
    assert not corr.any()


def test_positive_scale_invariance():
    g = torch.Generator().manual_seed(21)
    level = torch.randn(6, 4, 4, generator=g, dtype=torch.float64)
    query = torch.randn(6, 4, 4, generator=g, dtype=torch.float64)
    base = correlate_levels(level, query)
    for pos, lam in [((0, 0), 0.1), ((1, 3), 10.0), ((2, 2), 3.5)]:
        scaled = level.clone()
        scaled[:, pos[0], pos[1]] *= lam
        out = correlate_levels(scaled, query)
        assert (out - base).abs().max().item() < 1e-6


def test_permutation_equivariance():
    g = torch.Generator().manual_seed(31)
    level = torch.randn(5, 2, 3, generator=g, dtype=torch.float64)
    query = torch.randn(5, 2, 3, generator=g, dtype=torch.float64)
    base = correlate_levels(level, query).reshape(6, 6)
    perm = torch.randperm(6, generator=g)
    shuffled = flatten_support(level)[perm]
    out = cosine_correlation(shuffled, flatten_query(query), (2, 3), (2, 3)).reshape(6, 6)
    assert torch.equal(out, base[perm])


def test_build_scm_shape_and_channel_order():
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode()
    sif = correlate_pyramids(
        backbone.extract(ep.support_images[0]), backbone.extract(ep.query_image), "sif"
    )
    stf = correlate_pyramids(
        backbone.extract(ep.support_images[0]), backbone.extract(ep.query_image), "stf"
    )
    scm = build_scm(sif, stf)
    assert scm.sources == ("sif", "stf")
    for level, (h, w) in zip(scm.levels, [(8, 8), (4, 4)]):
        assert tuple(level.shape) == (2, h, w, h, w)
    # swapping arguments swaps channels exactly
    swapped = build_scm(stf, sif)
    for a, b in zip(scm.levels, swapped.levels):
        assert torch.equal(a[0], b[1]) and torch.equal(a[1], b[0])


def test_build_scm_rejects_level_shape_mismatch():
    a = CorrelationPyramid(levels=[torch.zeros(1, 2, 2, 2, 2)], source="sif")
    b = CorrelationPyramid(levels=[torch.zeros(1, 3, 3, 3, 3)], source="stf")
    with pytest.raises(ValueError, match="level 0"):
        build_scm(a, b)


def test_full_mask_makes_channels_identical():
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode()
    ones = np.ones(ep.query_mask.shape, dtype=np.uint8)
    scm = super_correlation_maps(ep.support_images[0], ones, ep.query_image, backbone)
    for level in scm.levels:
        assert torch.equal(level[0], level[1])


def test_zero_mask_gives_support_uniform_stf_channel():
    # a zero support image has spatially uniform features, so every query
    # position sees the same correlation from all support positions
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode()
    zeros = np.zeros(ep.query_mask.shape, dtype=np.uint8)
    scm = super_correlation_maps(ep.support_images[0], zeros, ep.query_image, backbone)
    for level in scm.levels:
        stf = level[1]  # (hs, ws, hq, wq)
        flat = stf.reshape(-1, *stf.shape[2:])
        assert torch.allclose(flat, flat[0].expand_as(flat), atol=1e-6)


def test_scm_range_and_finiteness():
    backbone = helpers.tiny_backbone()
    for seed in range(5):
        ep = helpers.small_episode(seed=seed, class_id=seed % 4)
        scm = super_correlation_maps(
            ep.support_images[0], ep.support_masks[0], ep.query_image, backbone
        )
        for level in scm.levels:
            assert torch.isfinite(level).all()
            assert level.min().item() >= 0.0
            assert level.max().item() <= 1.0


def test_fuse_correlation_add_doubles_equal_inputs():
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode()
    sif = correlate_pyramids(
        backbone.extract(ep.support_images[0]), backbone.extract(ep.query_image), "sif"
    )
    out = fuse("correlation_add", sif_corr=sif, stf_corr=sif)
    assert out.sources == ("sif+stf",)
    for level, base in zip(out.levels, sif.levels):
        assert torch.allclose(level, 2.0 * base)
        assert level.max().item() <= 2.0


def test_fuse_attention_endpoints():
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode(seed=2)
    pyr_s = backbone.extract(ep.support_images[0])
    pyr_q = backbone.extract(ep.query_image)
    sif = correlate_pyramids(pyr_s, pyr_q, "sif")
    stf = correlate_pyramids(pyr_s, pyr_q, "stf", eps=1e-6)
    at_one = fuse("attention", sif_corr=sif, stf_corr=stf, gate=1.0)
    for level, base in zip(at_one.levels, sif.levels):
        assert torch.equal(level, base)
    at_zero = fuse("attention", sif_corr=sif, stf_corr=stf, gate=0.0)
    for level, base in zip(at_zero.levels, stf.levels):
        assert torch.equal(level, base)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        fuse("attention", sif_corr=sif, stf_corr=stf, gate=1.5)


def test_fuse_feature_add_with_zero_second_pyramid():
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode(seed=3)
    feats = backbone.extract(ep.support_images[0])
    query = backbone.extract(ep.query_image)
    from scmseg.backbone import FeaturePyramid

    zeros = FeaturePyramid(levels=[torch.zeros_like(l) for l in feats.levels], role="T")
    out = fuse("feature_add", sif_feats=feats, stf_feats=zeros, query_feats=query)
    base = correlate_pyramids(feats, query, "sif")
    for a, b in zip(out.levels, base.levels):
        assert torch.allclose(a, b)


def test_fuse_unknown_mode_lists_valid_ones():
    with pytest.raises(ValueError, match="feature_add"):
        fuse("blend")


def test_pipeline_spec_validation():
    assert PipelineSpec(row=("stf", "sif")).row == ("sif", "stf")  # canonicalized
    assert PipelineSpec(row=("fm",)).stack_channels == 1
    assert PipelineSpec(row=("sif", "stf", "fm")).stack_channels == 3
    assert PipelineSpec(fusion="attention").stack_channels == 2
    assert PipelineSpec(fusion="correlation_add").stack_channels == 1
    with pytest.raises(ValueError, match="unknown fusion"):
        PipelineSpec(fusion="blend")
    with pytest.raises(ValueError, match="unknown source"):
        PipelineSpec(row=("qf",))
    with pytest.raises(ValueError, match="defined on row"):
        PipelineSpec(row=("fm",), fusion="attention")


def test_feature_rows_enumerate_all_seven_subsets():
    assert len(FEATURE_ROWS) == 7
    assert len(set(FEATURE_ROWS)) == 7
    for row in FEATURE_ROWS:
        assert row == canonical_row(row)
    names = {"+".join(r) for r in FEATURE_ROWS}
    assert "sif+stf" in names and "sif+stf+fm" in names


def test_build_inputs_channel_counts():
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode(seed=6)
    for spec in [PipelineSpec(row=("fm",)), PipelineSpec(row=("sif", "stf", "fm")),
                 PipelineSpec(fusion="correlation_add"), PipelineSpec(fusion="feature_add")]:
        stack = build_inputs(spec, ep.support_images[0], ep.support_masks[0],
                             ep.query_image, backbone)
        assert stack.channels == spec.stack_channels


def test_dump_roundtrip_and_mosaic(tmp_path):
    backbone = helpers.tiny_backbone()
    ep = helpers.small_episode(seed=1)
    scm = super_correlation_maps(ep.support_images[0], ep.support_masks[0],
                                 ep.query_image, backbone)
    path = tmp_path / "corr.bin"
    write_correlation_dump(scm, path)
    raw = path.read_bytes()
    assert raw[:8] == b"MSICORR1"
    header = np.frombuffer(raw[8:40], dtype="<u4")
    assert list(header) == [2, 2, 8, 8, 4, 4]  # N, C, then (h, w) per level
    levels = read_correlation_dump(path)
    assert len(levels) == scm.num_levels
    for loaded, level in zip(levels, scm.levels):
        assert np.allclose(loaded, level.numpy())

    pngs = export_level_pngs(scm, tmp_path)
    assert len(pngs) == scm.num_levels * scm.channels

    mosaic = level_mosaic(scm.levels[1][0])
    assert mosaic.shape == (16, 16)  # (h_s*h_q, w_s*w_q) at the 4x4 level
    assert mosaic[0, 0] == scm.levels[1][0, 0, 0, 0, 0].item()
    assert mosaic[1, 2] == scm.levels[1][0, 0, 0, 1, 2].item()
    assert mosaic[4, 8] == scm.levels[1][0, 1, 2, 0, 0].item()
