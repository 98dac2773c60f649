"""Input validation helpers used at the public API boundaries."""
from __future__ import annotations

import numpy as np


class PodError(Exception):
    """Base class for package errors."""


class LabelFormatError(PodError, ValueError):
    """A label file line could not be parsed; message names file and line."""


class DivergedTrainingError(PodError, RuntimeError):
    """Training produced a non-finite loss; message names epoch and batch."""


class NonFiniteOutputError(PodError, RuntimeError):
    """Model emitted non-finite predictions, usually after diverged training."""


def check_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    """Coerce ``None`` / int / Generator into a numpy Generator."""
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng))
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected None, int, or numpy Generator, got {type(rng).__name__}")


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a single-channel intensity image: 2D, finite, in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D (h, w), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have h >= 1 and w >= 1, got {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{lo}, {hi}]")
    return arr


def check_fraction_range(value: tuple[float, float], name: str) -> tuple[float, float]:
    lo, hi = float(value[0]), float(value[1])
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"{name} must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")
    return lo, hi


def check_count_range(value: tuple[int, int], name: str) -> tuple[int, int]:
    lo, hi = int(value[0]), int(value[1])
    if lo < 0 or hi < lo:
        raise ValueError(f"{name} must satisfy 0 <= min <= max, got ({lo}, {hi})")
    return lo, hi
