"""Binary mask manipulation.

Masks are numpy uint8 arrays of shape (h, w) with values in {0, 1}.
Images are numpy float32 arrays of shape (3, h, w) with values in [0, 1].
Resizing always uses nearest-neighbour sampling so masks stay strictly
binary.
"""

import numpy as np


def validate_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"mask must be binary, found values {values[:8]}")
    return mask.astype(np.uint8, copy=False)


def _nearest_indices(src, dst):
    # top-left convention: sample index i maps to floor(i * src / dst);
    # integer arithmetic, so identical dims give the identity map and the
    # sample grid lands on stride-2 conv centres at every pyramid level
    return (np.arange(dst) * src) // dst


def resize_mask(mask, height, width):
    """Nearest-neighbour resample of a binary mask to (height, width)."""
    mask = validate_mask(mask)
    if height < 1 or width < 1:
        raise ValueError(f"target dims must be >= 1, got ({height}, {width})")
    h, w = mask.shape
    if (h, w) == (height, width):
        return mask.copy()
    rows = _nearest_indices(h, height)
    cols = _nearest_indices(w, width)
    return mask[np.ix_(rows, cols)]


def mask_image(image, mask):
    """Zero out image pixels outside the mask (per-pixel product).

    The mask is resized to the image's spatial dims first; all three
    channels share the same mask.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must have shape (3, h, w), got {image.shape}")
    m = resize_mask(mask, image.shape[1], image.shape[2])
    return (image * m[None].astype(np.float32)).astype(np.float32)


def mask_features(pyramid, mask):
    """Multiply every channel of every pyramid level by the downsampled mask.

    This is the feature-masking (FM) baseline path: background feature
    columns are zeroed at each level's own resolution.
    """
    import torch

    from .backbone import FeaturePyramid

    mask = validate_mask(mask)
    levels = []
    for level in pyramid.levels:
        _, h, w = level.shape
        m = torch.from_numpy(resize_mask(mask, h, w)).to(level.dtype)
        levels.append(level * m)
    return FeaturePyramid(levels=levels, role="FM")


def mask_area_fraction(mask):
    """Foreground pixel count divided by total pixel count."""
    mask = validate_mask(mask)
    return float(mask.sum()) / mask.size
