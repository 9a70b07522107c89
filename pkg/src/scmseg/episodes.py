"""Episodes, fold splits, the on-disk episode format, and synthetic data.

An episode is one few-shot segmentation task: k annotated support
(image, mask) pairs plus a query image with its ground-truth mask, all
from a single class. Images are float32 (3, h, w) in [0, 1]; masks are
uint8 (h, w) in {0, 1}.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EpisodeFormatError
from .masking import validate_mask


@dataclass
class Episode:
    support_images: list
    support_masks: list
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("shot count k must be >= 1")
        if len(self.support_images) != self.k or len(self.support_masks) != self.k:
            raise ValueError(
                f"expected {self.k} support images and masks, got "
                f"{len(self.support_images)} and {len(self.support_masks)}"
            )
        for img, mask in zip(
            self.support_images + [self.query_image], self.support_masks + [self.query_mask]
        ):
            if img.ndim != 3 or img.shape[0] != 3:
                raise ValueError(f"image must be (3, h, w), got {img.shape}")
            validate_mask(mask)
            if mask.shape != img.shape[1:]:
                raise ValueError(f"mask {mask.shape} does not match image {img.shape[1:]}")


@dataclass(frozen=True)
class FoldSpec:
    """A class partition for cross-validation.

    Test classes are a contiguous block of (optionally permuted) class
    ids; the permutation hook supports the train-on-one-benchmark,
    test-on-another generalization protocol, where class order is
    remapped per fold to avoid overlap.
    """

    num_classes: int
    num_folds: int
    fold_index: int
    permutation: tuple = None

    def __post_init__(self):
        if self.num_folds < 1 or self.num_classes < 1:
            raise ValueError("num_classes and num_folds must be >= 1")
        if not 0 <= self.fold_index < self.num_folds:
            raise ValueError(f"fold_index {self.fold_index} not in [0, {self.num_folds})")
        if self.num_classes % self.num_folds:
            from .errors import ConfigError

            raise ConfigError(
                f"{self.num_classes} classes are not divisible into {self.num_folds} folds"
            )
        if self.permutation is not None:
            object.__setattr__(self, "permutation", tuple(self.permutation))
            _check_bijection(self.permutation, self.num_classes)


def _check_bijection(perm, n):
    if len(perm) != n or sorted(perm) != list(range(n)):
        raise ValueError(f"permutation must be a bijection over 0..{n - 1}")


def split_folds(fold):
    """Partition class ids into (train, test) sets for one fold.

    The test block is [fold_index*b, (fold_index+1)*b) with
    b = num_classes / num_folds, taken through the permutation when one
    is installed.
    """
    b = fold.num_classes // fold.num_folds
    block = range(fold.fold_index * b, (fold.fold_index + 1) * b)
    perm = fold.permutation or tuple(range(fold.num_classes))
    test = {perm[i] for i in block}
    train = set(range(fold.num_classes)) - test
    return train, test


def remap_classes(fold, permutation):
    """Install a class-order permutation; later splits follow it."""
    permutation = tuple(permutation)
    _check_bijection(permutation, fold.num_classes)
    return replace(fold, permutation=permutation)


def block_shift_permutation(num_classes, num_folds):
    """Default remap for the generalization test: rotate by one block."""
    if num_classes % num_folds:
        raise ValueError("num_classes must be divisible by num_folds")
    b = num_classes // num_folds
    return tuple((i + b) % num_classes for i in range(num_classes))


def sample_episode(pool, class_id, k, seed):
    """Draw k support items plus one distinct query item of a class.

    ``pool`` maps class id to a sequence of (image, mask) pairs. Sampling
    is without replacement and fully determined by ``seed``.
    """
    items = pool.get(class_id, ())
    if len(items) < k + 1:
        raise ValueError(
            f"class {class_id}: need at least {k + 1} items to sample a "
            f"{k}-shot episode, pool has {len(items)}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(items), size=k + 1, replace=False)
    support = [items[i] for i in idx[:k]]
    query = items[idx[k]]
    return Episode(
        support_images=[img for img, _ in support],
        support_masks=[m for _, m in support],
        query_image=query[0],
        query_mask=query[1],
        class_id=class_id,
        k=k,
    )


# ---------------------------------------------------------------------------
# synthetic shape episodes
# ---------------------------------------------------------------------------

SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "ring", "cross")

# one base colour per shape class, spread out in RGB
_PALETTE = (
    (0.85, 0.20, 0.20),
    (0.15, 0.75, 0.25),
    (0.20, 0.35, 0.90),
    (0.92, 0.80, 0.15),
    (0.80, 0.20, 0.80),
    (0.10, 0.80, 0.80),
)


@dataclass(frozen=True)
class SyntheticSpec:
    canvas: tuple = (32, 32)  # (height, width)
    classes: tuple = ("circle", "square", "triangle", "diamond")
    distractors: tuple = (0, 2)  # inclusive count range
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.canvas
        if h < 16 or w < 16:
            raise ValueError(f"canvas must be at least 16x16, got {self.canvas}")
        object.__setattr__(self, "canvas", (int(h), int(w)))
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ValueError("shape vocabulary is empty")
        for name in self.classes:
            if name not in SHAPE_NAMES:
                raise ValueError(f"unknown shape {name!r}; known: {SHAPE_NAMES}")
        lo, hi = self.distractors
        if lo < 0 or hi < lo:
            raise ValueError(f"bad distractor range {self.distractors}")
        object.__setattr__(self, "distractors", (int(lo), int(hi)))
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")


def _shape_predicate(name, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if name == "circle":
        return dy * dy + dx * dx <= r * r
    if name == "square":
        half = max(2, int(round(r * 0.8)))
        return np.maximum(np.abs(dy), np.abs(dx)) <= half
    if name == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if name == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        arm = max(1, int(round(r * 0.35)))
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        )
    raise ValueError(f"unknown shape {name!r}")


def _boxes_overlap(a, b):
    return not (a[1] < b[0] or b[1] < a[0] or a[3] < b[2] or b[3] < a[2])


def _place(rng, h, w, r, taken, attempts=25):
    for _ in range(attempts):
        cy = int(rng.integers(r + 1, h - r - 1))
        cx = int(rng.integers(r + 1, w - r - 1))
        box = (cy - r - 1, cy + r + 1, cx - r - 1, cx + r + 1)
        if all(not _boxes_overlap(box, t) for t in taken):
            return cy, cx, box
    return None


def _render_scene(spec, class_id, rng):
    h, w = spec.canvas
    yy, xx = np.ogrid[0:h, 0:w]
    rmin = max(3, min(h, w) // 10)
    rmax = max(rmin, min(h, w) // 5)

    base = 0.40 + 0.25 * rng.random()
    slope_y, slope_x = rng.uniform(-0.25, 0.25, size=2)
    plane = base + slope_y * (yy / h - 0.5) + slope_x * (xx / w - 0.5)
    tint = rng.uniform(-0.05, 0.05, size=3)
    image = np.stack([plane + t for t in tint]).astype(np.float64)

    # target goes in first so distractor placement must avoid it, but it is
    # painted last so its pixels are never occluded and the mask stays exact
    r = int(rng.integers(rmin, rmax + 1))
    cy, cx, box = _place(rng, h, w, r, [])
    taken = [box]

    others = [c for c in range(len(spec.classes)) if c != class_id]
    lo, hi = spec.distractors
    n_distractors = int(rng.integers(lo, hi + 1)) if others else 0
    for _ in range(n_distractors):
        dr = int(rng.integers(rmin, rmax + 1))
        spot = _place(rng, h, w, dr, taken)
        if spot is None:
            continue  # crowded canvas; skip this distractor
        dcy, dcx, dbox = spot
        taken.append(dbox)
        dcls = int(rng.choice(others))
        pred = _shape_predicate(spec.classes[dcls], yy, xx, dcy, dcx, dr)
        image[:, pred] = _instance_color(dcls, rng)[:, None]

    mask = _shape_predicate(spec.classes[class_id], yy, xx, cy, cx, r)
    image[:, mask] = _instance_color(class_id, rng)[:, None]

    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0  # 8-bit grid so PNG round-trips exactly

    mask = mask.astype(np.uint8)
    assert mask.sum() >= 1
    return image.astype(np.float32), mask


def _instance_color(class_id, rng):
    color = np.array(_PALETTE[class_id % len(_PALETTE)])
    return np.clip(color + rng.uniform(-0.08, 0.08, size=3), 0.05, 0.95)


def generate_synthetic_episode(spec, class_id, k):
    """Render a k-shot episode of procedural shapes, deterministic per seed.

    Scene i of the episode draws from rng stream (spec.seed, class_id, i);
    the query is the final scene. Every scene contains exactly one target
    shape (so masks are never empty) plus distractors of other classes.
    """
    if not 0 <= class_id < len(spec.classes):
        raise ValueError(
            f"class {class_id} outside vocabulary of {len(spec.classes)} classes"
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    scenes = [
        _render_scene(spec, class_id, np.random.default_rng([spec.seed, class_id, i]))
        for i in range(k + 1)
    ]
    return Episode(
        support_images=[img for img, _ in scenes[:k]],
        support_masks=[m for _, m in scenes[:k]],
        query_image=scenes[k][0],
        query_mask=scenes[k][1],
        class_id=class_id,
        k=k,
    )


# ---------------------------------------------------------------------------
# on-disk episode format
# ---------------------------------------------------------------------------


def save_episode_dir(episode, path):
    """Write an episode directory: manifest.json plus 8-bit PNGs.

    Images are RGB PNGs; masks are grayscale PNGs with values exactly
    {0, 255} (255 = foreground).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = episode.query_mask.shape
    files = {"support_images": [], "support_masks": []}
    for i, (img, mask) in enumerate(zip(episode.support_images, episode.support_masks)):
        files["support_images"].append(f"support_image_{i:02d}.png")
        files["support_masks"].append(f"support_mask_{i:02d}.png")
        _save_image(img, path / files["support_images"][-1])
        _save_mask(mask, path / files["support_masks"][-1])
    files["query_image"] = "query_image.png"
    files["query_mask"] = "query_mask.png"
    _save_image(episode.query_image, path / files["query_image"])
    _save_mask(episode.query_mask, path / files["query_mask"])
    manifest = {
        "class_id": int(episode.class_id),
        "k": int(episode.k),
        "width": int(w),
        "height": int(h),
        "files": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_episode_dir(path):
    """Read an episode directory; inverse of :func:`save_episode_dir`."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise EpisodeFormatError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    try:
        k = int(manifest["k"])
        class_id = int(manifest["class_id"])
        height, width = int(manifest["height"]), int(manifest["width"])
        files = manifest["files"]
        sup_imgs, sup_masks = files["support_images"], files["support_masks"]
        query_image, query_mask = files["query_image"], files["query_mask"]
    except (KeyError, TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"bad manifest {manifest_path}: {exc}") from exc
    if len(sup_imgs) != k or len(sup_masks) != k:
        raise EpisodeFormatError(
            f"{path}: manifest declares k={k} but lists {len(sup_imgs)} images "
            f"and {len(sup_masks)} masks"
        )
    images = [_load_image(path / name, height, width) for name in sup_imgs]
    masks = [_load_mask(path / name, height, width) for name in sup_masks]
    try:
        return Episode(
            support_images=images,
            support_masks=masks,
            query_image=_load_image(path / query_image, height, width),
            query_mask=_load_mask(path / query_mask, height, width),
            class_id=class_id,
            k=k,
        )
    except ValueError as exc:
        raise EpisodeFormatError(f"{path}: {exc}") from exc


def _save_image(img, path):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _save_mask(mask, path):
    arr = (validate_mask(mask) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _load_image(path, height, width):
    if not Path(path).is_file():
        raise EpisodeFormatError(f"missing image file: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    if arr.shape[:2] != (height, width):
        raise EpisodeFormatError(
            f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, manifest says {width}x{height}"
        )
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _load_mask(path, height, width):
    if not Path(path).is_file():
        raise EpisodeFormatError(f"missing mask file: {path}")
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    if arr.shape != (height, width):
        raise EpisodeFormatError(
            f"{path}: mask is {arr.shape[1]}x{arr.shape[0]}, manifest says {width}x{height}"
        )
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        raise EpisodeFormatError(
            f"{path}: mask values must be exactly 0 or 255, found {values[:8]}"
        )
    return (arr // 255).astype(np.uint8)


def load_episode_dirs(root):
    """Load every episode directory under root, sorted by directory name."""
    root = Path(root)
    episodes = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if (sub / "manifest.json").is_file():
            episodes.append(load_episode_dir(sub))
    return episodes


# ---------------------------------------------------------------------------
# deterministic episode streams
# ---------------------------------------------------------------------------


class SyntheticSampler:
    """Indexable stream of synthetic episodes over a fixed class set.

    ``sampler(i)`` is fully determined by (stream seed, i) and independent
    of call order, so concurrent workers and repeated runs agree.
    """

    def __init__(self, spec, class_ids, k, seed):
        if not class_ids:
            raise ValueError("class_ids is empty")
        self.spec = spec
        self.class_ids = sorted(class_ids)
        self.k = k
        self.seed = seed

    def __call__(self, index):
        rng = np.random.default_rng([self.seed, index])
        class_id = self.class_ids[int(rng.integers(len(self.class_ids)))]
        ep_spec = replace(self.spec, seed=int(rng.integers(2**31 - 1)))
        return generate_synthetic_episode(ep_spec, class_id, self.k)


class DirectorySampler:
    """Indexable stream over stored episode directories, filtered by class."""

    def __init__(self, root, class_ids, seed):
        self.episodes = [ep for ep in load_episode_dirs(root) if ep.class_id in class_ids]
        if not self.episodes:
            raise ValueError(f"no episodes under {root} for classes {sorted(class_ids)}")
        self.seed = seed

    def __call__(self, index):
        rng = np.random.default_rng([self.seed, index])
        return self.episodes[int(rng.integers(len(self.episodes)))]
