"""Input validation helpers shared by the estimators."""

import numpy as np

from ldprecon.exceptions import DomainError, ShapeError


def as_float_array(x, *, ndim=None, name="array", allow_empty=False):
    """Convert to a contiguous float64 array and check finiteness."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise ShapeError(f"{name} must have ndim {ndim}, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_images(x, name="images"):
    """Validate a B x C x H x W batch of images."""
    arr = as_float_array(x, ndim=4, name=name)
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has a zero-sized dimension: {arr.shape}")
    return arr


def check_image(x, name="image"):
    """Validate a single C x H x W image."""
    arr = as_float_array(x, ndim=3, name=name)
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has a zero-sized dimension: {arr.shape}")
    return arr


def check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise DomainError(f"{name} must be positive, got {value!r}")
    return float(value)
