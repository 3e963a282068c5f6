"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import ValidationError


def check_image(image, *, dtype=np.float32, allow_batch=False):
    """Return ``image`` as a float array of shape (H, W, 3), or (N, H, W, 3) if ``allow_batch``.

    Integer inputs are assumed 8-bit and rescaled to [0, 1].
    """
    arr = np.asarray(image)
    if arr.dtype.kind in "ui":
        arr = arr.astype(np.float64) / 255.0
    arr = arr.astype(dtype, copy=False)
    ndim = (3, 4) if allow_batch else (3,)
    if arr.ndim not in ndim or arr.shape[-1] != 3:
        raise ValidationError(f"expected image(s) with trailing 3 channels, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError("image intensities must lie in [0, 1]")
    return arr


def check_mask(mask, *, allow_empty=True, allow_batch=False):
    """Return ``mask`` as a uint8 array with values in {0, 1}."""
    arr = np.asarray(mask)
    ndim = (2, 3) if allow_batch else (2,)
    if arr.ndim not in ndim:
        raise ValidationError(f"expected 2-D mask(s), got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    values = np.unique(arr)
    if not np.isin(values, (0, 1)).all():
        raise ValidationError(f"mask is not binary, found values {values[:8].tolist()}")
    if not allow_empty and not arr.any():
        raise ValidationError("mask has no foreground pixels")
    return arr.astype(np.uint8, copy=False)


def check_same_shape(a, b, what="arrays"):
    if np.shape(a) != np.shape(b):
        raise ValidationError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_class_id(class_id, num_classes):
    """Validate a 1-based class index."""
    if isinstance(class_id, (bool, np.bool_)) or not isinstance(class_id, (int, np.integer)):
        raise ValidationError(f"class id must be an integer, got {class_id!r}")
    if not 1 <= int(class_id) <= num_classes:
        raise ValidationError(f"class id {class_id} out of range [1, {num_classes}]")
    return int(class_id)


def check_spacing(spacing_um):
    spacing = float(spacing_um)
    if not np.isfinite(spacing) or spacing <= 0:
        raise ValidationError(f"spacing must be a positive finite number of microns, got {spacing_um!r}")
    return spacing


def check_divisible(size, factor):
    if size % factor:
        raise ValidationError(
            f"spatial size {size} must be divisible by {factor} (2**(depth-1)) for the encoder"
        )
