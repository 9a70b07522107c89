import json

import numpy as np
import pytest

from scmseg import (
    Episode,
    EpisodeFormatError,
    FoldSpec,
    block_shift_permutation,
    generate_synthetic_episode,
    load_episode_dir,
    remap_classes,
    sample_episode,
    save_episode_dir,
    split_folds,
)
from scmseg.episodes import DirectorySampler, SyntheticSampler, load_episode_dirs
from scmseg.errors import ConfigError

import helpers


def test_split_20_classes_4_folds_fold0():
    train, test = split_folds(FoldSpec(num_classes=20, num_folds=4, fold_index=0))
    assert test == set(range(5))
    assert train == set(range(5, 20))


@pytest.mark.parametrize("fold_index", range(4))
def test_split_partition_sizes(fold_index):
    fold = FoldSpec(num_classes=20, num_folds=4, fold_index=fold_index)
    train, test = split_folds(fold)
    assert len(test) == 5 and len(train) == 15
    assert not train & test
    assert train | test == set(range(20))


def test_split_block_rule_100_classes():
    # block size 100/4 = 25, fold 2 covers ids 50..74
    train, test = split_folds(FoldSpec(num_classes=100, num_folds=4, fold_index=2))
    assert test == set(range(50, 75))


def test_split_indivisible_is_config_error():
    with pytest.raises(ConfigError, match="divisible"):
        FoldSpec(num_classes=10, num_folds=4, fold_index=0)


def test_remap_identity_keeps_folds():
    fold = FoldSpec(num_classes=20, num_folds=4, fold_index=1)
    remapped = remap_classes(fold, tuple(range(20)))
    assert split_folds(remapped) == split_folds(fold)


def test_remap_reversal_fold0():
    fold = FoldSpec(num_classes=20, num_folds=4, fold_index=0)
    remapped = remap_classes(fold, tuple(reversed(range(20))))
    _, test = split_folds(remapped)
    assert test == {19, 18, 17, 16, 15}


def test_remap_rejects_duplicate_targets():
    fold = FoldSpec(num_classes=4, num_folds=2, fold_index=0)
    with pytest.raises(ValueError, match="bijection"):
        remap_classes(fold, (0, 1, 1, 3))


def test_block_shift_permutation_moves_test_block():
    fold = FoldSpec(num_classes=20, num_folds=4, fold_index=0,
                    permutation=block_shift_permutation(20, 4))
    _, test = split_folds(fold)
    assert test == set(range(5, 10))


def _toy_pool(n, h=4, w=4):
    rng = np.random.default_rng(0)
    items = []
    for _ in range(n):
        img = rng.random((3, h, w)).astype(np.float32)
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[0, 0] = 1
        items.append((img, mask))
    return {3: items}


def test_sample_episode_support_query_disjoint():
    pool = _toy_pool(6)
    ep = sample_episode(pool, 3, 5, seed=7)
    assert ep.k == 5
    for img in ep.support_images:
        assert not np.array_equal(img, ep.query_image)


def test_sample_episode_deterministic():
    pool = _toy_pool(6)
    a = sample_episode(pool, 3, 2, seed=11)
    b = sample_episode(pool, 3, 2, seed=11)
    assert np.array_equal(a.query_image, b.query_image)
    for x, y in zip(a.support_images, b.support_images):
        assert np.array_equal(x, y)


def test_sample_episode_two_item_pool_covers_both_assignments():
    pool = _toy_pool(2)
    seen = set()
    for seed in range(20):
        ep = sample_episode(pool, 3, 1, seed=seed)
        # which of the two items became the query
        seen.add(int(np.array_equal(ep.query_image, pool[3][0][0])))
    assert seen == {0, 1}


def test_sample_episode_insufficient_names_class():
    with pytest.raises(ValueError, match="class 3"):
        sample_episode(_toy_pool(2), 3, 2, seed=0)


def test_synthetic_deterministic_and_nonempty():
    spec = helpers.small_spec()
    a = generate_synthetic_episode(spec, 1, 2)
    b = generate_synthetic_episode(spec, 1, 2)
    assert np.array_equal(a.query_image, b.query_image)
    assert np.array_equal(a.query_mask, b.query_mask)
    for x, y in zip(a.support_images, b.support_images):
        assert np.array_equal(x, y)
    assert a.query_mask.sum() >= 1
    for m in a.support_masks:
        assert m.sum() >= 1


def test_synthetic_seed_sensitivity():
    from dataclasses import replace

    spec = helpers.small_spec()
    a = generate_synthetic_episode(spec, 0, 1)
    b = generate_synthetic_episode(replace(spec, seed=spec.seed + 1), 0, 1)
    assert not np.array_equal(a.query_image, b.query_image)


def test_synthetic_exact_mask_without_noise_or_distractors():
    from dataclasses import replace

    spec = replace(helpers.small_spec(), noise=0.0, distractors=(0, 0))
    ep = generate_synthetic_episode(spec, 0, 1)
    # with no distractors and no noise, every mask pixel holds the shape
    # colour and everything else is smooth background; the painted region
    # is exactly the mask
    img = ep.query_image
    inside = img[:, ep.query_mask == 1]
    assert (np.ptp(inside, axis=1) < 1e-6).all()


def test_synthetic_rejects_unknown_class():
    with pytest.raises(ValueError, match="outside vocabulary"):
        generate_synthetic_episode(helpers.small_spec(), 9, 1)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError, match="16x16"):
        helpers.small_spec().__class__(canvas=(8, 8))
    with pytest.raises(ValueError, match="unknown shape"):
        helpers.small_spec().__class__(classes=("blob",))


def test_episode_invariants():
    ep = helpers.small_episode()
    with pytest.raises(ValueError, match="support images"):
        Episode(ep.support_images, [], ep.query_image, ep.query_mask, 0, 1)
    bad_mask = np.zeros((4, 4), dtype=np.uint8)
    with pytest.raises(ValueError, match="does not match"):
        Episode(ep.support_images, [bad_mask], ep.query_image, ep.query_mask, 0, 1)


def test_save_load_roundtrip(tmp_path):
    ep = generate_synthetic_episode(helpers.small_spec(), 2, 3)
    save_episode_dir(ep, tmp_path / "ep")
    loaded = load_episode_dir(tmp_path / "ep")
    assert loaded.class_id == ep.class_id and loaded.k == ep.k
    assert np.array_equal(loaded.query_mask, ep.query_mask)
    assert np.array_equal(loaded.query_image, ep.query_image)
    for a, b in zip(loaded.support_images, ep.support_images):
        assert np.array_equal(a, b)
    for a, b in zip(loaded.support_masks, ep.support_masks):
        assert np.array_equal(a, b)


def test_load_rejects_non_binary_mask(tmp_path):
    from PIL import Image

    ep = generate_synthetic_episode(helpers.small_spec(), 0, 1)
    save_episode_dir(ep, tmp_path / "ep")
    bad = np.full((16, 16), 128, dtype=np.uint8)
    Image.fromarray(bad, mode="L").save(tmp_path / "ep" / "query_mask.png")
    with pytest.raises(EpisodeFormatError, match="0 or 255"):
        load_episode_dir(tmp_path / "ep")


def test_load_rejects_missing_file_and_bad_k(tmp_path):
    ep = generate_synthetic_episode(helpers.small_spec(), 0, 2)
    save_episode_dir(ep, tmp_path / "ep")
    (tmp_path / "ep" / "support_mask_01.png").unlink()
    with pytest.raises(EpisodeFormatError, match="missing mask file"):
        load_episode_dir(tmp_path / "ep")

    manifest = json.loads((tmp_path / "ep" / "manifest.json").read_text())
    manifest["files"]["support_masks"] = manifest["files"]["support_masks"][:1]
    (tmp_path / "ep" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(EpisodeFormatError, match="k=2"):
        load_episode_dir(tmp_path / "ep")


def test_load_rejects_dimension_mismatch(tmp_path):
    ep = generate_synthetic_episode(helpers.small_spec(), 0, 1)
    save_episode_dir(ep, tmp_path / "ep")
    manifest = json.loads((tmp_path / "ep" / "manifest.json").read_text())
    manifest["width"] = 99
    (tmp_path / "ep" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(EpisodeFormatError, match="manifest says"):
        load_episode_dir(tmp_path / "ep")


def test_samplers_deterministic(tmp_path):
    spec = helpers.small_spec()
    s = SyntheticSampler(spec, [0, 1, 2], k=1, seed=5)
    a, b = s(3), s(3)
    assert np.array_equal(a.query_image, b.query_image)
    assert not np.array_equal(s(3).query_image, s(4).query_image)

    for i in range(4):
        save_episode_dir(generate_synthetic_episode(spec, i % 2, 1), tmp_path / f"ep{i}")
    assert len(load_episode_dirs(tmp_path)) == 4
    d = DirectorySampler(tmp_path, {0}, seed=1)
    assert d(0).class_id == 0
    assert np.array_equal(d(2).query_image, d(2).query_image)
