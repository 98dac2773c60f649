"""Dataset types, disk IO, person-size filtering, and synthetic infrared scenes.

Disk layout (shared by every command that reads or writes a corpus)::

    <root>/<split>/images/<stem>.png     8-bit grayscale PNG or PGM
    <root>/<split>/labels/<stem>.txt     one box per line: "class cx cy bw bh"

Box geometry is normalized to [0, 1] relative to image width/height and uses
class 0 for humans and class 1 for occlusion patches.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .utils import derive_seed
from .validation import LabelFormatError, check_image, check_rng

logger = logging.getLogger(__name__)

HUMAN_CLASS = 0
PATCH_CLASS = 1

IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, center/size normalized to the unit square."""

    class_id: int
    cx: float
    cy: float
    bw: float
    bh: float

    def __post_init__(self) -> None:
        if self.class_id not in (HUMAN_CLASS, PATCH_CLASS):
            raise ValueError(f"class_id must be 0 or 1, got {self.class_id}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside unit square: ({self.cx}, {self.cy})")
        if not (0.0 < self.bw <= 1.0 and 0.0 < self.bh <= 1.0):
            raise ValueError(f"box size must lie in (0, 1]: ({self.bw}, {self.bh})")

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.bw / 2.0,
            self.cy - self.bh / 2.0,
            self.cx + self.bw / 2.0,
            self.cy + self.bh / 2.0,
        )

    def to_pixel_rect(self, height: int, width: int) -> tuple[int, int, int, int]:
        """Half-open pixel rectangle (x0, y0, x1, y1)."""
        x0 = int(round(self.cx * width - self.bw * width / 2.0))
        y0 = int(round(self.cy * height - self.bh * height / 2.0))
        x1 = x0 + int(round(self.bw * width))
        y1 = y0 + int(round(self.bh * height))
        return x0, y0, x1, y1

    @classmethod
    def from_pixel_rect(
        cls, class_id: int, x0: int, y0: int, x1: int, y1: int, height: int, width: int
    ) -> "BBox":
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValueError(f"pixel rect ({x0},{y0},{x1},{y1}) outside {width}x{height} image")
        return cls(
            class_id=class_id,
            cx=(x0 + x1) / 2.0 / width,
            cy=(y0 + y1) / 2.0 / height,
            bw=(x1 - x0) / width,
            bh=(y1 - y0) / height,
        )

    def max_pixel_side(self, height: int, width: int) -> float:
        return max(self.bw * width, self.bh * height)


@dataclass(frozen=True)
class Detection:
    """Predicted box with a confidence score."""

    class_id: int
    cx: float
    cy: float
    bw: float
    bh: float
    confidence: float

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.bw / 2.0,
            self.cy - self.bh / 2.0,
            self.cx + self.bw / 2.0,
            self.cy + self.bh / 2.0,
        )


@dataclass
class Sample:
    """One image with its ground-truth boxes.

    ``patch_rects`` carries the pixel rectangles of attack patches applied by
    a scenario builder.  They are bookkeeping for diagnostics, not labels.
    """

    image: np.ndarray
    boxes: tuple[BBox, ...]
    stem: str
    patch_rects: tuple[tuple[int, int, int, int], ...] = ()


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    split_name: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def num_boxes(self, class_id: int | None = None) -> int:
        return sum(
            sum(1 for b in s.boxes if class_id is None or b.class_id == class_id)
            for s in self.samples
        )


def _clamp_unit(value: float) -> float:
    return min(1.0, max(0.0, value))


def parse_label_line(line: str, path: Path, lineno: int) -> BBox:
    """Parse one "class cx cy bw bh" line, clamping the box into the unit square."""
    parts = line.split()
    if len(parts) != 5:
        raise LabelFormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}: {line!r}")
    try:
        class_id = int(parts[0])
        cx, cy, bw, bh = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise LabelFormatError(f"{path}:{lineno}: {exc}") from exc
    # Clamp at ingestion: shift the box fully inside the unit square, then
    # clip the center. Degenerate sizes are rejected by the BBox invariant.
    x0, y0 = cx - bw / 2.0, cy - bh / 2.0
    x1, y1 = cx + bw / 2.0, cy + bh / 2.0
    x0, x1 = _clamp_unit(x0), _clamp_unit(x1)
    y0, y1 = _clamp_unit(y0), _clamp_unit(y1)
    try:
        return BBox(
            class_id=class_id,
            cx=(x0 + x1) / 2.0,
            cy=(y0 + y1) / 2.0,
            bw=x1 - x0,
            bh=y1 - y0,
        )
    except ValueError as exc:
        raise LabelFormatError(f"{path}:{lineno}: {exc}") from exc


def load_image_file(path: Path) -> np.ndarray:
    """Read an 8-bit grayscale image and map intensity linearly to [0, 1]."""
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_image_file(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_dataset(root: str | Path, split: str) -> Dataset:
    """Load one split from the directory layout described in the module docstring."""
    root = Path(root)
    images_dir = root / split / "images"
    labels_dir = root / split / "labels"
    for d in (images_dir, labels_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing dataset directory: {d}")

    samples: list[Sample] = []
    image_paths = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    for img_path in image_paths:
        image = check_image(load_image_file(img_path), name=img_path.name)
        label_path = labels_dir / (img_path.stem + ".txt")
        boxes: list[BBox] = []
        if label_path.exists():
            for lineno, line in enumerate(label_path.read_text().splitlines(), start=1):
                if not line.strip():
                    continue
                boxes.append(parse_label_line(line, label_path, lineno))
        samples.append(Sample(image=image, boxes=tuple(boxes), stem=img_path.stem))
    return Dataset(samples=samples, split_name=split)


def save_dataset(dataset: Dataset, root: str | Path, split: str | None = None) -> Path:
    """Write a dataset in the on-disk layout; returns the split directory."""
    split = split if split is not None else (dataset.split_name or "data")
    split_dir = Path(root) / split
    images_dir = split_dir / "images"
    labels_dir = split_dir / "labels"
    images_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(dataset.samples):
        stem = sample.stem or f"img_{i:05d}"
        save_image_file(sample.image, images_dir / f"{stem}.png")
        lines = [
            f"{b.class_id} {b.cx:.10f} {b.cy:.10f} {b.bw:.10f} {b.bh:.10f}"
            for b in sample.boxes
        ]
        (labels_dir / f"{stem}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return split_dir


def filter_persons(dataset: Dataset, min_size_px: float) -> Dataset:
    """Keep human boxes whose larger pixel side exceeds ``min_size_px``.

    Patch-class boxes are dropped, and images left without any box are
    removed. Safe to apply repeatedly (idempotent).
    """
    if min_size_px < 0:
        raise ValueError(f"min_size_px must be >= 0, got {min_size_px}")
    kept: list[Sample] = []
    for sample in dataset.samples:
        h, w = sample.image.shape
        boxes = tuple(
            b
            for b in sample.boxes
            if b.class_id == HUMAN_CLASS and b.max_pixel_side(h, w) > min_size_px
        )
        if boxes:
            kept.append(dataclasses.replace(sample, boxes=boxes))
    logger.info(
        "filter_persons(min_size_px=%s): kept %d/%d images, %d/%d labels",
        min_size_px,
        len(kept),
        len(dataset.samples),
        sum(len(s.boxes) for s in kept),
        dataset.num_boxes(),
    )
    return Dataset(samples=kept, split_name=dataset.split_name)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic infrared scene generator.

    Scenes are dark speckled backgrounds with bright elliptical person blobs
    (warm body on a cool background) plus optional dimmer distractor blobs
    that carry no label.
    """

    image_size: int = 128
    persons_per_image: tuple[int, int] = (1, 3)
    person_size_range: tuple[int, int] = (18, 44)
    blob_intensity: tuple[float, float] = (0.60, 0.95)
    background_noise_level: float = 0.03
    distractors_per_image: tuple[int, int] = (0, 2)
    distractor_intensity: tuple[float, float] = (0.20, 0.40)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        lo, hi = self.persons_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"persons_per_image range invalid: {self.persons_per_image}")
        ilo, ihi = self.blob_intensity
        if not (0.0 <= ilo <= ihi <= 1.0):
            raise ValueError(f"blob_intensity must lie within [0, 1]: {self.blob_intensity}")


_PLACEMENT_TRIES = 40


def _place_blob(
    rng: np.random.Generator,
    size: int,
    size_range: tuple[int, int],
    occupied: list[tuple[float, float, float, float]],
) -> tuple[float, float, float, float] | None:
    """Sample (cx, cy, ax, ay) for an ellipse that does not crowd existing ones."""
    min_side, max_side = size_range
    max_side = min(max_side, size - 4)
    for _ in range(_PLACEMENT_TRIES):
        body_h = rng.uniform(min_side, max_side)
        aspect = rng.uniform(0.45, 0.75)
        ay = body_h / 2.0
        ax = body_h * aspect / 2.0
        cx = rng.uniform(ax + 1.0, size - ax - 1.0)
        cy = rng.uniform(ay + 1.0, size - ay - 1.0)
        crowded = any(
            abs(cx - ox) < (ax + oax) and abs(cy - oy) < (ay + oay)
            for ox, oy, oax, oay in occupied
        )
        if not crowded:
            return cx, cy, ax, ay
    return None


def _render_blob(
    image: np.ndarray, cx: float, cy: float, ax: float, ay: float, peak: float
) -> None:
    h, w = image.shape
    yy, xx = np.ogrid[:h, :w]
    r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    blob = peak * np.clip(1.0 - r2, 0.0, 1.0) ** 0.6
    np.maximum(image, blob.astype(np.float32), out=image)


def synth_scene(
    config: SynthConfig, rng: np.random.Generator | int | None = None
) -> tuple[np.ndarray, list[BBox]]:
    """Generate one scene and its ground-truth human boxes.

    Deterministic given the rng state. If placement keeps colliding, the
    scene is emitted with fewer persons and the shortfall is logged.
    """
    rng = check_rng(rng)
    size = config.image_size
    base = rng.uniform(0.06, 0.14)
    image = base + config.background_noise_level * rng.standard_normal((size, size))
    # Mild vertical thermal gradient for background variety.
    gradient = rng.uniform(-0.03, 0.03) * np.linspace(-1.0, 1.0, size)[:, None]
    image = np.clip(image + gradient, 0.0, 1.0).astype(np.float32)

    occupied: list[tuple[float, float, float, float]] = []
    boxes: list[BBox] = []
    lo, hi = config.persons_per_image
    n_persons = int(rng.integers(lo, hi + 1))
    for _ in range(n_persons):
        placement = _place_blob(rng, size, config.person_size_range, occupied)
        if placement is None:
            continue
        cx, cy, ax, ay = placement
        occupied.append(placement)
        peak = rng.uniform(*config.blob_intensity)
        _render_blob(image, cx, cy, ax, ay, peak)
        # Tightest integer rect containing every blob pixel (indices j with
        # |j - c| <= axis are exactly ceil(c-a) .. floor(c+a)).
        x0 = max(0, int(np.ceil(cx - ax)))
        y0 = max(0, int(np.ceil(cy - ay)))
        x1 = min(size, int(np.floor(cx + ax)) + 1)
        y1 = min(size, int(np.floor(cy + ay)) + 1)
        boxes.append(BBox.from_pixel_rect(HUMAN_CLASS, x0, y0, x1, y1, size, size))
    if len(boxes) < n_persons:
        logger.debug("scene placed %d/%d persons after retries", len(boxes), n_persons)

    dlo, dhi = config.distractors_per_image
    for _ in range(int(rng.integers(dlo, dhi + 1))):
        placement = _place_blob(rng, size, config.person_size_range, occupied)
        if placement is None:
            continue
        cx, cy, ax, ay = placement
        occupied.append(placement)
        peak = rng.uniform(*config.distractor_intensity)
        _render_blob(image, cx, cy, ax, ay, peak)

    return np.clip(image, 0.0, 1.0, out=image), boxes


def make_synth_dataset(config: SynthConfig, n_images: int, split_name: str) -> Dataset:
    """Generate a deterministic corpus; per-image streams derive from config.seed."""
    samples = []
    for i in range(n_images):
        rng = np.random.default_rng(derive_seed(config.seed, "scene", split_name, i))
        image, boxes = synth_scene(config, rng)
        samples.append(Sample(image=image, boxes=tuple(boxes), stem=f"{split_name}_{i:05d}"))
    return Dataset(samples=samples, split_name=split_name)
