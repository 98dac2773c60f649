"""Digital-space adversarial patch generators and scenario application.

Four attack families:

- ``noise``: a uniform-noise square, the weakest occlusion baseline.
- ``universal``: one scene-agnostic patch optimized by projected gradient
  ascent on the detection loss over the whole dataset.
- ``hcb``: a physically-plausible 3x3 grid of binary (hot/cold) cells,
  searched exhaustively over all 512 patterns at a coarse grid of positions
  on the target person.
- ``shapeloc``: an image-dependent binary patch built greedily as a union of
  axis-aligned rectangles under an area budget, optimizing both shape and
  location.

Per-image attacks score candidates by the *fall* in the maximum human-class
confidence overlapping the target person box. Scenario application pastes
patches onto copies of the images and never touches ground-truth labels.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .augment import PatchPixels, apply_patch, make_patch
from .data import HUMAN_CLASS, BBox, Dataset, Sample, load_image_file, save_image_file
from .detector import GridDetector, decode_raw, detection_loss
from .utils import resize_bilinear, torch_generator
from .validation import PodError, check_rng

ATTACK_KINDS = ("noise", "universal", "hcb", "shapeloc", "clean")


@dataclass(frozen=True)
class AttackConfig:
    """Declarative description of one evaluation scenario.

    ``patch_fraction`` scales the patch side against the target person box
    (``fixed_on_person`` policy) or against min(h, w) (``random`` policy).
    Fields beyond a given ``kind``'s needs are ignored by it.
    """

    kind: str
    name: str | None = None
    patch_fraction: float = 0.3
    steps: int = 200
    step_size: float = 0.02
    batch_size: int = 8
    patch_size: int = 32
    location_policy: str = "fixed_on_person"
    size_fraction_range: tuple[float, float] = (0.1, 0.4)
    location_grid: int = 5
    max_rects: int = 3
    area_budget: float = 0.15

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not (0.0 < self.patch_fraction <= 1.0):
            raise ValueError(f"patch_fraction must lie in (0, 1], got {self.patch_fraction}")
        if self.location_policy not in ("fixed_on_person", "random"):
            raise ValueError(f"unknown location_policy: {self.location_policy!r}")

    @property
    def display_name(self) -> str:
        return self.name or self.kind


@dataclass
class PlacedPatch:
    """A patch pinned to pixel coordinates in a specific image."""

    patch: PatchPixels
    x0: int
    y0: int
    per_image: bool = True
    objective: float | None = None
    objective_trace: tuple[float, ...] = ()


def noise_patch(side: int, rng: np.random.Generator | int | None = None) -> PatchPixels:
    """Uniform[0, 1] noise square; same contract as the augmentation type."""
    return make_patch("noise", side, rng=check_rng(rng))


def _person_boxes(boxes) -> list[BBox]:
    return [b for b in boxes if b.class_id == HUMAN_CLASS]


def _largest_person(boxes, height: int, width: int) -> BBox:
    persons = _person_boxes(boxes)
    if not persons:
        raise ValueError("attack requires at least one human box")
    areas = [b.bw * width * b.bh * height for b in persons]
    return persons[int(np.argmax(areas))]


def _side_for_person(person: BBox, height: int, width: int, fraction: float) -> int:
    side = int(round(fraction * person.max_pixel_side(height, width)))
    return max(1, min(side, height, width))


def _centered_on(person: BBox, side: int, height: int, width: int) -> tuple[int, int]:
    x0 = int(round(person.cx * width - side / 2.0))
    y0 = int(round(person.cy * height - side / 2.0))
    return (
        max(0, min(x0, width - side)),
        max(0, min(y0, height - side)),
    )


def _sample_placement(
    config: AttackConfig,
    boxes,
    height: int,
    width: int,
    rng: np.random.Generator,
) -> tuple[int, int, int]:
    """Draw (side, x0, y0) for one image under the configured policy."""
    persons = _person_boxes(boxes)
    if config.location_policy == "fixed_on_person" and persons:
        person = persons[int(rng.integers(len(persons)))]
        side = _side_for_person(person, height, width, config.patch_fraction)
        x0, y0 = _centered_on(person, side, height, width)
        return side, x0, y0
    side = max(1, min(int(round(config.patch_fraction * min(height, width))), height, width))
    x0 = int(rng.integers(0, width - side + 1))
    y0 = int(rng.integers(0, height - side + 1))
    return side, x0, y0


def _max_person_conf(
    detector: GridDetector, images: np.ndarray, target: BBox, chunk: int = 128
) -> np.ndarray:
    """Max human-class confidence overlapping the target box, per image.

    ``images`` is (B, h, w); returns (B,). Cells whose decoded box does not
    intersect the target contribute nothing; no overlap at all scores 0.
    """
    tx0, ty0, tx1, ty1 = target.to_xyxy()
    out = np.zeros(images.shape[0], dtype=np.float64)
    for start in range(0, images.shape[0], chunk):
        batch = [images[i] for i in range(start, min(start + chunk, images.shape[0]))]
        obj, cls, boxes = decode_raw(detector.forward_raw(batch))
        conf = obj * cls[:, :, HUMAN_CLASS]
        iw = torch.minimum(boxes[:, :, 2], torch.tensor(tx1)) - torch.maximum(
            boxes[:, :, 0], torch.tensor(tx0)
        )
        ih = torch.minimum(boxes[:, :, 3], torch.tensor(ty1)) - torch.maximum(
            boxes[:, :, 1], torch.tensor(ty0)
        )
        overlapping = (iw > 0) & (ih > 0)
        masked = torch.where(overlapping, conf, torch.zeros_like(conf))
        out[start : start + len(batch)] = masked.max(dim=1).values.numpy()
    return out


class UniversalPatchAttack(BaseEstimator):
    """Scene-agnostic patch optimized by projected gradient ascent.

    Maximizes the detection loss over the dataset: at each step a mini-batch
    is sampled, the patch is pasted per the location policy (resized with
    the shared bilinear resampler), and the patch takes a sign-gradient
    ascent step, projected back into [0, 1]. ``steps=0`` returns the
    Uniform[0, 1] initialization untouched.
    """

    def __init__(
        self,
        patch_size: int = 32,
        steps: int = 200,
        step_size: float = 0.02,
        batch_size: int = 8,
        patch_fraction: float = 0.3,
        location_policy: str = "fixed_on_person",
        size_fraction_range: tuple[float, float] = (0.1, 0.4),
        seed: int = 0,
    ):
        self.patch_size = patch_size
        self.steps = steps
        self.step_size = step_size
        self.batch_size = batch_size
        self.patch_fraction = patch_fraction
        self.location_policy = location_policy
        self.size_fraction_range = size_fraction_range
        self.seed = seed

    def _placements(
        self, boxes_list, side: int, rng: np.random.Generator, indices
    ) -> list[tuple[int, int, int]]:
        lo, hi = self.size_fraction_range
        placements = []
        for i in indices:
            boxes = boxes_list[i]
            persons = _person_boxes(boxes)
            if self.location_policy == "fixed_on_person" and persons:
                person = persons[int(rng.integers(len(persons)))]
                l = _side_for_person(person, side, side, self.patch_fraction)
                x0, y0 = _centered_on(person, l, side, side)
            else:
                l = max(1, min(int(round(rng.uniform(lo, hi) * side)), side))
                x0 = int(rng.integers(0, side - l + 1))
                y0 = int(rng.integers(0, side - l + 1))
            placements.append((l, x0, y0))
        return placements

    def fit(self, detector: GridDetector, dataset: Dataset) -> "UniversalPatchAttack":
        """Optimize the patch against a fitted detector on this dataset."""
        detector._check_fitted()
        side = detector.image_size
        images = detector._prepare_images(dataset)
        boxes_list = [s.boxes for s in dataset.samples]
        stack = torch.from_numpy(np.stack(images)).unsqueeze(1)
        n = len(images)

        rng = check_rng(int(self.seed))
        gen = torch_generator(int(self.seed))
        patch = torch.rand((self.patch_size, self.patch_size), generator=gen)

        net = detector.net_
        net.eval()
        for step in range(self.steps):
            idx = [int(i) for i in rng.choice(n, size=min(self.batch_size, n), replace=False)]
            placements = self._placements(boxes_list, side, rng, idx)
            patch_var = patch.clone().requires_grad_(True)
            x = stack[idx].clone()
            for bi, (l, x0, y0) in enumerate(placements):
                resized = torch.nn.functional.interpolate(
                    patch_var.view(1, 1, self.patch_size, self.patch_size),
                    size=(l, l),
                    mode="bilinear",
                    align_corners=False,
                ).clamp(0.0, 1.0)
                x[bi, 0, y0 : y0 + l, x0 : x0 + l] = resized[0, 0]
            loss = detection_loss(
                net(x), [boxes_list[i] for i in idx], tuple(detector.class_weights),
                detector.box_weight,
            )
            grad = torch.autograd.grad(loss, patch_var)[0]
            if not torch.isfinite(grad).all():
                raise PodError(f"non-finite patch gradient at iteration {step}")
            patch = (patch + self.step_size * torch.sign(grad)).clamp_(0.0, 1.0)

        self.patch_ = PatchPixels(values=patch.numpy().astype(np.float32), patch_type="external")
        self.objective_ = float(
            self.surrogate_objective(detector, dataset, self.patch_.values)
        )
        return self

    def surrogate_objective(
        self,
        detector: GridDetector,
        dataset: Dataset,
        payload: np.ndarray,
        max_images: int = 64,
    ) -> float:
        """Mean detection loss with the patch applied at seed-derived placements."""
        side = detector.image_size
        images = detector._prepare_images(dataset)[:max_images]
        boxes_list = [s.boxes for s in dataset.samples][:max_images]
        rng = check_rng(int(self.seed) + 1)
        placements = self._placements(boxes_list, side, rng, range(len(images)))
        total = 0.0
        for img, boxes, (l, x0, y0) in zip(images, boxes_list, placements):
            patched = apply_patch(
                img, PatchPixels(resize_bilinear(payload, l, l), "external"), x0, y0
            )
            x = torch.from_numpy(patched).view(1, 1, side, side)
            with torch.no_grad():
                total += float(
                    detection_loss(
                        detector.net_(x), [boxes], tuple(detector.class_weights),
                        detector.box_weight,
                    )
                )
        return total / max(1, len(images))


def _binary_patterns() -> np.ndarray:
    """All 512 binary 3x3 cell patterns, index i encoding bits of i."""
    bits = (np.arange(512)[:, None] >> np.arange(9)) & 1
    return bits.reshape(512, 3, 3).astype(np.float32)


class HotColdBlockAttack(BaseEstimator):
    """Exhaustive binary 3x3-grid patch search over a coarse location grid.

    All 512 cell patterns are scored at ``location_grid**2`` candidate
    positions spanning the target person box; the exact argmax over the
    searched set is returned.
    """

    def __init__(self, patch_fraction: float = 0.35, location_grid: int = 5, chunk: int = 128):
        self.patch_fraction = patch_fraction
        self.location_grid = location_grid
        self.chunk = chunk

    def _candidate_positions(
        self, person: BBox, side: int, height: int, width: int
    ) -> list[tuple[int, int]]:
        px0, py0, px1, py1 = person.to_pixel_rect(height, width)
        g = self.location_grid
        xs = np.unique(np.round(np.linspace(px0, max(px0, px1 - side), g)).astype(int))
        ys = np.unique(np.round(np.linspace(py0, max(py0, py1 - side), g)).astype(int))
        xs = np.clip(xs, 0, width - side)
        ys = np.clip(ys, 0, height - side)
        return [(int(x), int(y)) for y in np.unique(ys) for x in np.unique(xs)]

    def attack(self, detector: GridDetector, image: np.ndarray, boxes) -> PlacedPatch:
        h, w = image.shape
        target = _largest_person(boxes, h, w)
        side = _side_for_person(target, h, w, self.patch_fraction)
        side = max(3, (side // 3) * 3)
        side = min(side, (min(h, w) // 3) * 3)
        cell = side // 3

        patterns = _binary_patterns()
        tiles = np.kron(patterns, np.ones((cell, cell), dtype=np.float32))
        clean_conf = float(_max_person_conf(detector, image[None], target, self.chunk)[0])

        best_fall, best_tile, best_pos = -np.inf, None, (0, 0)
        for x0, y0 in self._candidate_positions(target, side, h, w):
            batch = np.repeat(image[None], 512, axis=0)
            batch[:, y0 : y0 + side, x0 : x0 + side] = tiles
            confs = _max_person_conf(detector, batch, target, self.chunk)
            idx = int(np.argmin(confs))
            fall = clean_conf - float(confs[idx])
            if fall > best_fall:
                best_fall, best_tile, best_pos = fall, tiles[idx], (x0, y0)
        patch = PatchPixels(values=best_tile, patch_type="external")
        return PlacedPatch(
            patch=patch, x0=best_pos[0], y0=best_pos[1], per_image=True, objective=best_fall
        )


class ShapeLocAttack(BaseEstimator):
    """Greedy shape/location search for a binary patch under an area budget.

    The patch is a union of up to ``max_rects`` axis-aligned constant-value
    (0 or 1) rectangles inside the target person box. Rectangles are added
    one at a time, each the candidate that most increases the confidence
    fall; the search stops when no candidate improves or the budget is hit.
    """

    def __init__(
        self,
        max_rects: int = 3,
        area_budget: float = 0.15,
        position_grid: int = 4,
        rect_shapes: tuple[tuple[float, float], ...] = ((0.45, 0.18), (0.18, 0.45), (0.30, 0.30)),
        chunk: int = 128,
    ):
        self.max_rects = max_rects
        self.area_budget = area_budget
        self.position_grid = position_grid
        self.rect_shapes = rect_shapes
        self.chunk = chunk

    def _candidates(
        self, person: BBox, height: int, width: int
    ) -> list[tuple[int, int, int, int, float]]:
        px0, py0, px1, py1 = person.to_pixel_rect(height, width)
        px0, py0 = max(0, px0), max(0, py0)
        px1, py1 = min(width, px1), min(height, py1)
        rw, rh = px1 - px0, py1 - py0
        cands = []
        g = self.position_grid
        for fw, fh in self.rect_shapes:
            cw = max(1, min(int(round(fw * rw)), rw))
            ch = max(1, min(int(round(fh * rh)), rh))
            xs = np.unique(np.round(np.linspace(px0, px1 - cw, g)).astype(int))
            ys = np.unique(np.round(np.linspace(py0, py1 - ch, g)).astype(int))
            for y in ys:
                for x in xs:
                    for value in (0.0, 1.0):
                        cands.append((int(x), int(y), cw, ch, value))
        return list(dict.fromkeys(cands))

    def attack(self, detector: GridDetector, image: np.ndarray, boxes) -> PlacedPatch:
        h, w = image.shape
        target = _largest_person(boxes, h, w)
        px0, py0, px1, py1 = target.to_pixel_rect(h, w)
        budget = self.area_budget * max(1, (px1 - px0)) * max(1, (py1 - py0))
        candidates = self._candidates(target, h, w)

        clean_conf = float(_max_person_conf(detector, image[None], target, self.chunk)[0])
        mask = np.zeros((h, w), dtype=bool)
        values = np.zeros((h, w), dtype=np.float32)
        current = image.copy()
        best_fall = 0.0
        trace = [0.0]

        for _ in range(self.max_rects):
            feasible = []
            for (x, y, cw, ch, value) in candidates:
                new_area = int((~mask[y : y + ch, x : x + cw]).sum())
                if mask.sum() + new_area <= budget:
                    feasible.append((x, y, cw, ch, value))
            if not feasible:
                break
            batch = np.repeat(current[None], len(feasible), axis=0)
            for ci, (x, y, cw, ch, value) in enumerate(feasible):
                batch[ci, y : y + ch, x : x + cw] = value
            confs = _max_person_conf(detector, batch, target, self.chunk)
            falls = clean_conf - confs
            ci = int(np.argmax(falls))
            if falls[ci] <= best_fall + 1e-9:
                break
            x, y, cw, ch, value = feasible[ci]
            mask[y : y + ch, x : x + cw] = True
            values[y : y + ch, x : x + cw] = value
            current[y : y + ch, x : x + cw] = value
            best_fall = float(falls[ci])
            trace.append(best_fall)

        return self._to_placed(mask, values, h, w, best_fall, trace)

    @staticmethod
    def _to_placed(
        mask: np.ndarray, values: np.ndarray, h: int, w: int, fall: float, trace: list[float]
    ) -> PlacedPatch:
        if not mask.any():
            empty = PatchPixels(
                values=np.zeros((1, 1), dtype=np.float32),
                patch_type="external",
                mask=np.zeros((1, 1), dtype=bool),
            )
            return PlacedPatch(empty, 0, 0, per_image=True, objective=fall,
                               objective_trace=tuple(trace))
        ys, xs = np.nonzero(mask)
        my0, my1 = int(ys.min()), int(ys.max()) + 1
        mx0, mx1 = int(xs.min()), int(xs.max()) + 1
        side = min(max(my1 - my0, mx1 - mx0), h, w)
        x0 = min(mx0, w - side)
        y0 = min(my0, h - side)
        patch = PatchPixels(
            values=values[y0 : y0 + side, x0 : x0 + side].copy(),
            patch_type="external",
            mask=mask[y0 : y0 + side, x0 : x0 + side].copy(),
        )
        return PlacedPatch(patch, x0, y0, per_image=True, objective=fall,
                           objective_trace=tuple(trace))


def apply_attack_scenario(
    detector: GridDetector,
    dataset: Dataset,
    config: AttackConfig,
    rng: np.random.Generator | int | None = None,
) -> Dataset:
    """Build the attacked copy of a dataset for one scenario.

    Each image receives one patch (optimized per image for hcb/shapeloc, the
    shared optimized patch for universal, fresh noise for noise). Ground
    truth is passed through unchanged; applied patch rectangles are recorded
    in ``Sample.patch_rects`` for diagnostics only. The input dataset is
    never mutated.
    """
    rng = check_rng(rng)
    if config.kind == "clean":
        samples = [dataclasses.replace(s, image=s.image.copy()) for s in dataset.samples]
        return Dataset(samples=samples, split_name=dataset.split_name)

    payload: np.ndarray | None = None
    if config.kind == "universal":
        attack = UniversalPatchAttack(
            patch_size=config.patch_size,
            steps=config.steps,
            step_size=config.step_size,
            batch_size=config.batch_size,
            patch_fraction=config.patch_fraction,
            location_policy=config.location_policy,
            size_fraction_range=config.size_fraction_range,
            seed=int(rng.integers(2**62)),
        )
        attack.fit(detector, dataset)
        payload = attack.patch_.values

    new_samples: list[Sample] = []
    for sample in dataset.samples:
        h, w = sample.image.shape
        if config.kind == "noise":
            side, x0, y0 = _sample_placement(config, sample.boxes, h, w, rng)
            placed = PlacedPatch(noise_patch(side, rng), x0, y0)
        elif config.kind == "universal":
            side, x0, y0 = _sample_placement(config, sample.boxes, h, w, rng)
            placed = PlacedPatch(
                PatchPixels(resize_bilinear(payload, side, side), "external"), x0, y0
            )
        elif config.kind == "hcb":
            placed = HotColdBlockAttack(
                patch_fraction=config.patch_fraction, location_grid=config.location_grid
            ).attack(detector, sample.image, sample.boxes)
        elif config.kind == "shapeloc":
            placed = ShapeLocAttack(
                max_rects=config.max_rects,
                area_budget=config.area_budget,
                position_grid=config.location_grid,
            ).attack(detector, sample.image, sample.boxes)
        else:
            raise ValueError(f"unsupported attack kind: {config.kind!r}")
        image = apply_patch(sample.image, placed.patch, placed.x0, placed.y0)
        rect = (
            placed.x0,
            placed.y0,
            placed.x0 + placed.patch.side,
            placed.y0 + placed.patch.side,
        )
        new_samples.append(
            Sample(image=image, boxes=sample.boxes, stem=sample.stem, patch_rects=(rect,))
        )
    return Dataset(samples=new_samples, split_name=dataset.split_name)


def save_patch(patch: PatchPixels, base: str | Path, metadata: dict | None = None) -> Path:
    """Archive a patch as PNG plus a key=value text sidecar; returns the PNG path."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    png = base.with_suffix(".png")
    save_image_file(patch.values, png)
    if patch.mask is not None:
        save_image_file(patch.mask.astype(np.float32), base.parent / (base.name + "_mask.png"))
    meta = {"kind": patch.patch_type, "side": patch.side}
    meta.update(metadata or {})
    lines = [f"{k}={v}" for k, v in meta.items()]
    base.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return png


def load_patch(base: str | Path) -> tuple[PatchPixels, dict]:
    """Reload an archived patch (8-bit quantized) and its metadata."""
    base = Path(base)
    values = load_image_file(base.with_suffix(".png")).astype(np.float32)
    mask_path = base.parent / (base.name + "_mask.png")
    mask = load_image_file(mask_path) > 0.5 if mask_path.exists() else None
    meta: dict = {}
    for line in base.with_suffix(".txt").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
    return PatchPixels(values=values, patch_type=meta.get("kind", "external"), mask=mask), meta
