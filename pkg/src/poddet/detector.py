"""A small differentiable single-scale grid detector and its training modes.

The network is four stride-2 conv blocks from a square single-channel image
down to a g x g grid (g = image_size / 16) with a per-cell head of
(objectness logit, 2 class logits, 4 box parameters). Class 0 is "human",
class 1 is "patch". The loss combines objectness BCE over all cells, squared
error on matched-cell box parameters, and a per-cell class cross-entropy
weighted 0.9 / 0.1 by target class to prioritize humans over patches. Class
probabilities are independent sigmoids (not a softmax), so patch evidence in
a cell does not eat into human confidence; a person center under a patch can
legitimately score high on both.

Training modes:

- ``std``: plain training on clean samples, no patch class targets.
- ``pod`` / ``pod_nodet``: every sample is patch-augmented; only ``pod``
  emits class-1 labels for the applied patches.
- ``advpod`` / ``advpod_nodet``: patches are adversarially optimized against
  the current model on a schedule and accumulated in a history; each sample
  gets one history patch pasted with the same random size/location policy as
  the random modes (random patches fill in before the first generation).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .augment import PatchAugmenter, PatchPixels
from .data import BBox, Dataset, Detection
from .utils import derive_seed, resize_bilinear, rng_from, torch_generator
from .validation import DivergedTrainingError, NonFiniteOutputError, check_image

CHECKPOINT_FORMAT = "podmodel-v1"
MODES = ("std", "pod", "pod_nodet", "advpod", "advpod_nodet")

_TUPLE_PARAMS = {"class_weights", "count_range", "size_fraction_range", "channels"}


class GridNet(nn.Module):
    """Conv backbone with one detection head cell per 16x16 input region."""

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 64), num_classes: int = 2):
        super().__init__()
        if len(channels) != 4:
            raise ValueError(f"expected 4 downsampling blocks, got {len(channels)}")
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch in channels:
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, 1 + num_classes + 4, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def init_parameters(net: nn.Module, gen: torch.Generator) -> None:
    """Kaiming-uniform init drawn from an explicit generator, in module order."""
    for module in net.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = float(np.sqrt(6.0 / fan_in))
            module.weight.data.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                b = 1.0 / float(np.sqrt(fan_in))
                module.bias.data.uniform_(-b, b, generator=gen)
    # Start the objectness channel pessimistic so early detections are sparse.
    if isinstance(net, GridNet):
        net.head.bias.data[0] = -3.0


def encode_targets(
    targets: Sequence[Sequence[BBox]],
    grid_size: int,
    dtype: torch.dtype = torch.float32,
) -> dict[str, torch.Tensor]:
    """Assign boxes to grid cells by center; first box per cell wins.

    Returns objectness map, matched mask, per-cell class ids, and box
    parameter targets (cell-relative center offsets and image-relative
    sizes, all living in [0, 1] to pair with sigmoid outputs).
    """
    g = grid_size
    b = len(targets)
    obj = torch.zeros((b, g, g), dtype=dtype)
    matched = torch.zeros((b, g, g), dtype=torch.bool)
    cls = torch.zeros((b, g, g), dtype=torch.long)
    box = torch.zeros((b, 4, g, g), dtype=dtype)
    for bi, boxes in enumerate(targets):
        for bb in boxes:
            if bb.class_id not in (0, 1):
                raise ValueError(f"target class must be 0 or 1, got {bb.class_id}")
            j = min(int(bb.cx * g), g - 1)
            i = min(int(bb.cy * g), g - 1)
            if matched[bi, i, j]:
                continue
            matched[bi, i, j] = True
            obj[bi, i, j] = 1.0
            cls[bi, i, j] = bb.class_id
            box[bi, 0, i, j] = bb.cx * g - j
            box[bi, 1, i, j] = bb.cy * g - i
            box[bi, 2, i, j] = bb.bw
            box[bi, 3, i, j] = bb.bh
    return {"obj": obj, "matched": matched, "cls": cls, "box": box}


def detection_loss_terms(
    raw: torch.Tensor,
    targets: Sequence[Sequence[BBox]],
    class_weights: tuple[float, float] = (0.9, 0.1),
    box_weight: float = 5.0,
) -> dict[str, torch.Tensor]:
    """The three loss components, each averaged over the batch dimension.

    ``raw`` is the head output, shape (B, 7, g, g) with channels
    (objectness, class 0, class 1, tx, ty, tw, th).
    """
    if raw.ndim != 4 or raw.shape[1] != 7:
        raise ValueError(f"raw predictions must have shape (B, 7, g, g), got {tuple(raw.shape)}")
    if len(targets) != raw.shape[0]:
        raise ValueError(f"{len(targets)} target lists for a batch of {raw.shape[0]}")
    enc = encode_targets(targets, raw.shape[-1], dtype=raw.dtype)
    device = raw.device
    obj_t = enc["obj"].to(device)
    matched = enc["matched"].to(device)
    batch = raw.shape[0]

    obj_loss = F.binary_cross_entropy_with_logits(raw[:, 0], obj_t, reduction="sum") / batch

    if bool(matched.any()):
        box_pred = torch.sigmoid(raw[:, 3:7])
        box_err = (box_pred - enc["box"].to(device)) ** 2
        box_loss = box_weight * box_err[matched.unsqueeze(1).expand_as(box_err)].sum() / batch
        # Per-cell class cross-entropy against one-hot targets on independent
        # sigmoid channels, weighted by the cell's target class.
        cls_ids = enc["cls"].to(device)[matched]
        cls_logits = raw[:, 1:3].permute(0, 2, 3, 1)[matched]
        one_hot = F.one_hot(cls_ids, num_classes=2).to(raw.dtype)
        per_cell = F.binary_cross_entropy_with_logits(
            cls_logits, one_hot, reduction="none"
        ).sum(dim=1)
        weight = torch.tensor(class_weights, dtype=raw.dtype, device=device)
        cls_loss = (per_cell * weight[cls_ids]).sum() / batch
    else:
        box_loss = raw.sum() * 0.0
        cls_loss = raw.sum() * 0.0
    return {"objectness": obj_loss, "box": box_loss, "class": cls_loss}


def detection_loss(
    raw: torch.Tensor,
    targets: Sequence[Sequence[BBox]],
    class_weights: tuple[float, float] = (0.9, 0.1),
    box_weight: float = 5.0,
) -> torch.Tensor:
    terms = detection_loss_terms(raw, targets, class_weights, box_weight)
    return terms["objectness"] + terms["box"] + terms["class"]


def decode_raw(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Decode head output into per-cell probabilities and normalized boxes.

    Returns (obj_prob (B, G), cls_prob (B, G, 2), boxes_xyxy (B, G, 4)) with
    G = g*g cells; fully differentiable.
    """
    b, _, g, _ = raw.shape
    obj = torch.sigmoid(raw[:, 0])
    cls = torch.sigmoid(raw[:, 1:3])
    tx, ty = torch.sigmoid(raw[:, 3]), torch.sigmoid(raw[:, 4])
    tw, th = torch.sigmoid(raw[:, 5]), torch.sigmoid(raw[:, 6])
    jj = torch.arange(g, dtype=raw.dtype, device=raw.device).view(1, 1, g)
    ii = torch.arange(g, dtype=raw.dtype, device=raw.device).view(1, g, 1)
    cx = (jj + tx) / g
    cy = (ii + ty) / g
    boxes = torch.stack((cx - tw / 2, cy - th / 2, cx + tw / 2, cy + th / 2), dim=-1)
    return obj.reshape(b, -1), cls.permute(0, 2, 3, 1).reshape(b, -1, 2), boxes.reshape(b, -1, 4)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS; keeps the highest-scoring box, drops overlaps above the threshold."""
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = np.maximum(0.0, x1 - x0) * np.maximum(0.0, y1 - y0)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.maximum(0.0, iw) * np.maximum(0.0, ih)
        union = areas[i] + areas[rest] - inter
        overlap = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
        order = rest[overlap <= iou_threshold]
    return keep


@dataclass
class PatchHistory:
    """Adversarial patches accumulated over a training run; never pruned."""

    patches: list[PatchPixels] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)

    def append(self, patch: PatchPixels, epoch: int) -> None:
        self.patches.append(patch)
        self.epochs.append(epoch)

    def payloads(self) -> list[np.ndarray]:
        return [p.values for p in self.patches]

    def __len__(self) -> int:
        return len(self.patches)


class GridDetector(BaseEstimator):
    """Trainable grid detector with occlusion-aware training modes.

    Parameters
    ----------
    mode : one of ``std``, ``pod``, ``pod_nodet``, ``advpod``, ``advpod_nodet``.
    image_size : square input side in pixels; must be a multiple of 16.
    channels : widths of the four conv blocks.
    class_weights : (human, patch) class loss weights.
    augment : optional PatchAugmenter supplying patch count/size/type
        settings; label emission is overridden per mode. ``None`` uses the
        augmenter defaults.
    adv_start_epoch / adv_period / adv_steps / adv_step_size / adv_patch_size :
        adversarial patch generation schedule and inner attack budget for the
        ``advpod*`` modes.
    """

    def __init__(
        self,
        mode: str = "std",
        epochs: int = 20,
        batch_size: int = 8,
        learning_rate: float = 2e-3,
        class_weights: tuple[float, float] = (0.9, 0.1),
        box_weight: float = 5.0,
        image_size: int = 128,
        channels: tuple[int, ...] = (16, 32, 64, 64),
        conf_threshold: float = 0.05,
        nms_iou: float = 0.5,
        augment: PatchAugmenter | None = None,
        adv_start_epoch: int = 5,
        adv_period: int = 15,
        adv_steps: int = 200,
        adv_step_size: float = 0.02,
        adv_patch_size: int = 32,
        seed: int = 0,
    ):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.class_weights = class_weights
        self.box_weight = box_weight
        self.image_size = image_size
        self.channels = channels
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.augment = augment
        self.adv_start_epoch = adv_start_epoch
        self.adv_period = adv_period
        self.adv_steps = adv_steps
        self.adv_step_size = adv_step_size
        self.adv_patch_size = adv_patch_size
        self.seed = seed

    @property
    def grid_size(self) -> int:
        return int(self.image_size) // 16

    def _check_config(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_size % 16 != 0 or self.image_size < 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        w_h, w_p = self.class_weights
        if w_h < 0 or w_p < 0:
            raise ValueError(f"class weights must be nonnegative, got {self.class_weights}")

    def _emits_patch_labels(self) -> bool:
        return self.mode in ("pod", "advpod")

    def _base_augmenter(self, external: list[np.ndarray] | None = None) -> PatchAugmenter:
        src = self.augment if self.augment is not None else PatchAugmenter()
        return PatchAugmenter(
            count_range=(1, 1) if external else src.count_range,
            size_fraction_range=src.size_fraction_range,
            type_weights=src.type_weights,
            emit_patch_labels=self._emits_patch_labels(),
            external_patches=external,
        )

    def _prepare_images(self, dataset: Dataset) -> list[np.ndarray]:
        side = self.image_size
        images = []
        for sample in dataset.samples:
            img = check_image(sample.image, name=f"sample {sample.stem!r}")
            if img.shape != (side, side):
                img = resize_bilinear(img, side, side)
            images.append(img)
        return images

    def _generation_epochs(self) -> list[int]:
        if not self.mode.startswith("advpod"):
            return []
        return [
            e
            for e in range(self.epochs)
            if e >= self.adv_start_epoch and (e - self.adv_start_epoch) % self.adv_period == 0
        ]

    def fit(self, dataset: Dataset, y=None) -> "GridDetector":
        """Train on a dataset of human-labeled samples; returns self.

        Populates ``net_``, ``history_``, ``train_seconds_``, ``train_log_``
        and ``fit_stats_``.
        """
        self._check_config()
        if len(dataset) == 0:
            raise ValueError("cannot fit on an empty dataset")
        t0 = time.perf_counter()

        net = GridNet(channels=tuple(self.channels))
        init_parameters(net, torch_generator(derive_seed(self.seed, "init")))
        net.train()
        self.net_ = net
        self.history_ = PatchHistory()
        self.train_log_ = []
        self.fit_stats_ = {"class1_targets": 0, "steps": 0, "generation_epochs": []}

        images = self._prepare_images(dataset)
        boxes = [s.boxes for s in dataset.samples]
        optimizer = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        augmenter = None if self.mode == "std" else self._base_augmenter()
        generation_epochs = set(self._generation_epochs())

        n = len(images)
        for epoch in range(self.epochs):
            epoch_t0 = time.perf_counter()
            if epoch in generation_epochs:
                self._generate_adv_patch(dataset, epoch)
                augmenter = self._base_augmenter(external=self.history_.payloads())
            epoch_rng = rng_from(self.seed, "epoch", epoch)
            order = epoch_rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                batch_images, batch_targets = [], []
                for i in idx:
                    img, tgt = images[i], list(boxes[i])
                    if augmenter is not None:
                        img, tgt = augmenter.transform(img, tgt, epoch_rng)
                    batch_images.append(img)
                    batch_targets.append(tgt)
                x = torch.from_numpy(np.stack(batch_images)).unsqueeze(1)
                raw = net(x)
                loss = detection_loss(
                    raw, batch_targets, tuple(self.class_weights), self.box_weight
                )
                if not torch.isfinite(loss):
                    raise DivergedTrainingError(
                        f"non-finite loss at epoch={epoch} batch={start // self.batch_size}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
                self.fit_stats_["steps"] += 1
                self.fit_stats_["class1_targets"] += sum(
                    1 for tgt in batch_targets for b in tgt if b.class_id == 1
                )
            self.train_log_.append(
                f"epoch={epoch} mean_loss={float(np.mean(epoch_losses)):.6f} "
                f"wall_s={time.perf_counter() - epoch_t0:.3f}"
            )

        net.eval()
        self.train_seconds_ = time.perf_counter() - t0
        self.fit_stats_["final_loss"] = (
            float(np.mean(epoch_losses)) if self.epochs > 0 else None
        )
        return self

    def _generate_adv_patch(self, dataset: Dataset, epoch: int) -> None:
        from .attacks import UniversalPatchAttack

        src = self.augment if self.augment is not None else PatchAugmenter()
        attack = UniversalPatchAttack(
            patch_size=self.adv_patch_size,
            steps=self.adv_steps,
            step_size=self.adv_step_size,
            batch_size=self.batch_size,
            location_policy="random",
            size_fraction_range=src.size_fraction_range,
            seed=derive_seed(self.seed, "advgen", epoch),
        )
        attack.fit(self, dataset)
        self.history_.append(attack.patch_, epoch)
        self.fit_stats_["generation_epochs"].append(epoch)
        self.train_log_.append(
            f"epoch={epoch} event=adv_patch_generated history_len={len(self.history_)}"
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "net_"):
            raise NotFittedError("GridDetector is not fitted; call fit() or load a checkpoint")

    def forward_raw(self, images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
        """Raw head outputs for a batch of images (no grad); resamples inputs."""
        self._check_fitted()
        if isinstance(images, np.ndarray) and images.ndim == 2:
            images = [images]
        side = self.image_size
        prepared = [
            img if img.shape == (side, side) else resize_bilinear(img, side, side)
            for img in (np.asarray(im, dtype=np.float32) for im in images)
        ]
        x = torch.from_numpy(np.stack(prepared)).unsqueeze(1)
        with torch.no_grad():
            raw = self.net_(x)
        if not torch.isfinite(raw).all():
            raise NonFiniteOutputError("model produced non-finite predictions")
        return raw

    def predict(
        self,
        images: np.ndarray | Sequence[np.ndarray] | Dataset,
        conf_threshold: float | None = None,
        nms_iou: float | None = None,
    ) -> list[Detection] | list[list[Detection]]:
        """Decode detections for one image or a batch.

        A single 2D array yields a flat list; a Dataset or sequence yields
        one list per image. Detections are per-class NMS survivors at or
        above the confidence threshold, sorted by descending confidence.
        """
        single = isinstance(images, np.ndarray) and images.ndim == 2
        if isinstance(images, Dataset):
            images = [s.image for s in images.samples]
        if single:
            images = [images]
        conf_thr = self.conf_threshold if conf_threshold is None else conf_threshold
        iou_thr = self.nms_iou if nms_iou is None else nms_iou

        results: list[list[Detection]] = []
        chunk = 64
        for start in range(0, len(images), chunk):
            raw = self.forward_raw(images[start : start + chunk])
            obj, cls, boxes = decode_raw(raw)
            obj_np = obj.numpy()
            cls_np = cls.numpy()
            boxes_np = boxes.numpy()
            for bi in range(raw.shape[0]):
                results.append(
                    self._decode_single(obj_np[bi], cls_np[bi], boxes_np[bi], conf_thr, iou_thr)
                )
        return results[0] if single else results

    @staticmethod
    def _decode_single(
        obj: np.ndarray, cls: np.ndarray, boxes: np.ndarray, conf_thr: float, iou_thr: float
    ) -> list[Detection]:
        detections: list[Detection] = []
        for class_id in (0, 1):
            conf = obj * cls[:, class_id]
            keep = np.flatnonzero(conf >= conf_thr)
            if keep.size == 0:
                continue
            kept_boxes = np.clip(boxes[keep], 0.0, 1.0)
            kept_conf = conf[keep]
            for k in nms(kept_boxes, kept_conf, iou_thr):
                x0, y0, x1, y1 = kept_boxes[k]
                if x1 - x0 <= 0 or y1 - y0 <= 0:
                    continue
                detections.append(
                    Detection(
                        class_id=class_id,
                        cx=float((x0 + x1) / 2),
                        cy=float((y0 + y1) / 2),
                        bw=float(x1 - x0),
                        bh=float(y1 - y0),
                        confidence=float(kept_conf[k]),
                    )
                )
        detections.sort(key=lambda d: -d.confidence)
        return detections

    def save(self, path: str | Path) -> None:
        """Write a single-file checkpoint (format header ``podmodel-v1``)."""
        self._check_fitted()
        params = self.get_params(deep=False)
        aug = params.pop("augment")
        payload = {
            "format": CHECKPOINT_FORMAT,
            "arch": {
                "image_size": int(self.image_size),
                "channels": list(self.channels),
                "num_classes": 2,
            },
            "state": self.net_.state_dict(),
            "params": _params_to_plain(params),
            "augment_params": None if aug is None else _params_to_plain(aug.get_params()),
            "train_seconds": float(getattr(self, "train_seconds_", 0.0)),
            "fit_stats": dict(getattr(self, "fit_stats_", {})),
            "train_log": list(getattr(self, "train_log_", [])),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "GridDetector":
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"unsupported checkpoint format {payload.get('format')!r} in {path}"
            )
        params = _params_from_plain(payload["params"])
        aug_params = payload.get("augment_params")
        if aug_params is not None:
            aug_params.pop("external_patches", None)
            params["augment"] = PatchAugmenter(**_params_from_plain(aug_params))
        detector = cls(**params)
        net = GridNet(channels=tuple(payload["arch"]["channels"]))
        net.load_state_dict(payload["state"])
        net.eval()
        detector.net_ = net
        detector.history_ = PatchHistory()
        detector.train_seconds_ = float(payload.get("train_seconds", 0.0))
        detector.fit_stats_ = dict(payload.get("fit_stats", {}))
        detector.train_log_ = list(payload.get("train_log", []))
        return detector


def _params_to_plain(params: dict) -> dict:
    plain = {}
    for key, value in params.items():
        if key == "external_patches":
            plain[key] = None
        elif isinstance(value, tuple):
            plain[key] = list(value)
        else:
            plain[key] = value
    return plain


def _params_from_plain(params: dict) -> dict:
    return {
        key: tuple(value) if key in _TUPLE_PARAMS and isinstance(value, list) else value
        for key, value in params.items()
    }
