"""Input validation helpers and the package's exception types."""

from __future__ import annotations

import numbers

import numpy as np

IGNORE_INDEX = 255


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ContractViolation(RuntimeError):
    """Raised when an operation is called in a state it does not support."""


class UnusableFrameError(ValueError):
    """Raised when a frame has no valid pixels for a geometric loss."""


def check_image(image, name="image", channels=None):
    """Return ``image`` as a float64 ``(H, W, C)`` array with values in [0, 1].

    Two-dimensional inputs are treated as single-channel images.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"{name} must be a non-empty (H, W, C) array, got shape {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise InvalidInputError(f"{name} must have 1 or 3 channels, got {arr.shape[2]}")
    if channels is not None and arr.shape[2] != channels:
        raise InvalidInputError(f"{name} must have {channels} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_label_map(labels, name="labels", shape=None):
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.size and (not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0):
        raise InvalidInputError(f"{name} must hold non-negative integer ids")
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidInputError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.astype(np.int64, copy=False)


def check_depth_map(depth, name="depth", shape=None):
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidInputError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite and non-negative (0 marks invalid)")
    return arr


def check_fraction(value, name, low_open=True, high_open=False):
    """Check ``value`` lies in the unit interval with the given openness."""
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidInputError(f"{name} must be a finite real, got {value!r}")
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        raise InvalidInputError(f"{name}={value} outside its allowed range")
    return float(value)


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise InvalidInputError(f"{name} must be a finite positive real, got {value!r}")
    return float(value)


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise InvalidInputError(f"cannot build a random generator from {seed!r}")
