"""Random patch-occlusion augmentation with optional patch-class labels.

Training images get N square patches at random sizes and positions. Each
patch either erases the region (zeros), color-inverts it, or fills it with
uniform noise; an externally supplied payload (e.g. an optimized adversarial
patch) can be pasted instead. When label emission is on, every applied patch
also appends one class-1 box covering its rectangle exactly, teaching the
detector to localize occlusions as well as people.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .data import PATCH_CLASS, BBox
from .utils import resize_bilinear
from .validation import check_count_range, check_fraction_range, check_image, check_rng

PATCH_TYPES = ("erase", "invert", "noise")
EXTERNAL_TYPE = "external"


@dataclass(frozen=True)
class PatchPixels:
    """A square patch payload in [0, 1].

    ``mask`` restricts the patch to a subset of its square (used by
    shape-optimized binary patches); ``None`` means the full square.
    """

    values: np.ndarray
    patch_type: str
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.patch_type not in PATCH_TYPES + (EXTERNAL_TYPE,):
            raise ValueError(f"unknown patch_type: {self.patch_type!r}")
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError(f"patch values must be square l x l with l >= 1, got {v.shape}")
        if float(v.min()) < 0.0 or float(v.max()) > 1.0:
            raise ValueError("patch values must lie in [0, 1]")
        if self.patch_type == "erase" and float(np.abs(v).max()) != 0.0:
            raise ValueError("erase patches must be all zeros")
        if self.mask is not None and (self.mask.shape != v.shape or self.mask.dtype != bool):
            raise ValueError("mask must be a boolean array with the same shape as values")

    @property
    def side(self) -> int:
        return self.values.shape[0]


def make_patch(
    patch_type: str,
    side: int,
    source_region: np.ndarray | None = None,
    rng: np.random.Generator | int | None = None,
) -> PatchPixels:
    """Build one of the three random patch types.

    erase: all zeros. invert: 1 - source_region (the image pixels the patch
    will cover). noise: i.i.d. Uniform[0, 1] per pixel.
    """
    side = int(side)
    if side < 1:
        raise ValueError(f"patch side must be >= 1, got {side}")
    if patch_type == "erase":
        values = np.zeros((side, side), dtype=np.float32)
    elif patch_type == "invert":
        if source_region is None:
            raise ValueError("invert patches require the source_region they will cover")
        region = np.asarray(source_region, dtype=np.float32)
        if region.shape != (side, side):
            raise ValueError(f"source_region must be {side}x{side}, got {region.shape}")
        values = 1.0 - region
    elif patch_type == "noise":
        values = check_rng(rng).random((side, side), dtype=np.float32)
    else:
        raise ValueError(f"unknown patch_type: {patch_type!r}")
    return PatchPixels(values=values, patch_type=patch_type)


def apply_patch(image: np.ndarray, patch: PatchPixels, x0: int, y0: int) -> np.ndarray:
    """Paste ``patch`` with its top-left corner at (x0, y0); pure function."""
    h, w = image.shape
    side = patch.side
    if not (0 <= x0 <= w - side and 0 <= y0 <= h - side):
        raise ValueError(
            f"patch of side {side} at ({x0}, {y0}) leaves the {w}x{h} image bounds"
        )
    out = np.array(image, dtype=np.float32, copy=True)
    region = out[y0 : y0 + side, x0 : x0 + side]
    if patch.mask is None:
        region[...] = patch.values
    else:
        region[patch.mask] = patch.values[patch.mask]
    return out


class PatchAugmenter(BaseEstimator):
    """Occlusion augmenter applying N random square patches per image.

    Parameters
    ----------
    count_range : inclusive (min, max) for the number of patches N.
    size_fraction_range : patch side as a fraction of min(h, w).
    type_weights : sampling weight per patch type, default uniform over
        erase/invert/noise. Ignored when external payloads are set.
    emit_patch_labels : append one class-1 box per applied patch.
    external_patches : optional payload pool; when set, each patch is a
        randomly chosen payload resized to the sampled side.
    """

    def __init__(
        self,
        count_range: tuple[int, int] = (1, 3),
        size_fraction_range: tuple[float, float] = (0.1, 0.4),
        type_weights: dict[str, float] | None = None,
        emit_patch_labels: bool = True,
        external_patches: list[np.ndarray] | None = None,
    ):
        self.count_range = count_range
        self.size_fraction_range = size_fraction_range
        self.type_weights = type_weights
        self.emit_patch_labels = emit_patch_labels
        self.external_patches = external_patches

    def _resolve(self) -> tuple[tuple[int, int], tuple[float, float], np.ndarray]:
        count_range = check_count_range(self.count_range, "count_range")
        size_range = check_fraction_range(self.size_fraction_range, "size_fraction_range")
        weights = self.type_weights or {t: 1.0 for t in PATCH_TYPES}
        probs = np.array([float(weights.get(t, 0.0)) for t in PATCH_TYPES])
        if (probs < 0).any() or probs.sum() <= 0:
            raise ValueError(f"type_weights must be nonnegative with positive sum: {weights}")
        return count_range, size_range, probs / probs.sum()

    def transform(
        self,
        image: np.ndarray,
        boxes: tuple[BBox, ...] | list[BBox],
        rng: np.random.Generator | int | None = None,
        return_records: bool = False,
    ):
        """Apply the augmentation to one sample.

        Returns ``(image, boxes)``, or ``(image, boxes, records)`` with
        ``records`` the list of applied ``(patch, x0, y0)`` in order when
        ``return_records`` is true. Input image and boxes are not mutated;
        human labels pass through unchanged.
        """
        rng = check_rng(rng)
        (n_lo, n_hi), (f_lo, f_hi), probs = self._resolve()
        image = check_image(image)
        h, w = image.shape

        out = np.array(image, copy=True)
        out_boxes = list(boxes)
        records: list[tuple[PatchPixels, int, int]] = []
        n_patches = int(rng.integers(n_lo, n_hi + 1))
        for _ in range(n_patches):
            side = int(round(rng.uniform(f_lo, f_hi) * min(h, w)))
            side = max(1, min(side, h, w))
            x0 = int(rng.integers(0, w - side + 1))
            y0 = int(rng.integers(0, h - side + 1))
            if self.external_patches:
                payload = self.external_patches[int(rng.integers(len(self.external_patches)))]
                patch = PatchPixels(
                    values=resize_bilinear(payload, side, side), patch_type=EXTERNAL_TYPE
                )
            else:
                patch_type = str(rng.choice(PATCH_TYPES, p=probs))
                patch = make_patch(
                    patch_type,
                    side,
                    source_region=out[y0 : y0 + side, x0 : x0 + side],
                    rng=rng,
                )
            out[y0 : y0 + side, x0 : x0 + side] = patch.values
            if self.emit_patch_labels:
                out_boxes.append(
                    BBox.from_pixel_rect(PATCH_CLASS, x0, y0, x0 + side, y0 + side, h, w)
                )
            records.append((patch, x0, y0))

        if return_records:
            return out, out_boxes, records
        return out, out_boxes
