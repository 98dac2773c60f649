"""IoU, average precision at IoU 0.5, and the scenario evaluation matrix.

AP follows the all-points convention: detections are sorted by confidence,
greedily matched per image to the highest-IoU unmatched ground truth at the
IoU threshold, and the area under the precision envelope of the resulting
PR curve is integrated over recall.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .data import HUMAN_CLASS, PATCH_CLASS, BBox, Dataset, Detection
from .utils import rng_from

if TYPE_CHECKING:
    from .attacks import AttackConfig
    from .detector import GridDetector

Box = tuple[float, float, float, float]


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; 0 for empty union."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(0.0, iw) * max(0.0, ih)
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def match_detections(
    detections: Sequence[tuple[Detection, object]],
    ground_truths: Sequence[tuple[BBox, object]],
    iou_threshold: float = 0.5,
) -> np.ndarray:
    """Label each detection TP/FP by greedy per-image matching.

    Detections are processed in descending confidence (stable on ties); each
    one matches the unmatched ground truth of its image with the highest IoU
    at or above the threshold (IoU ties keep the earliest ground truth).
    Returns a boolean TP array aligned with the confidence-sorted order.
    """
    order = np.argsort([-d.confidence for d, _ in detections], kind="stable")
    gt_by_image: dict[object, list[int]] = {}
    for gi, (_, img_id) in enumerate(ground_truths):
        gt_by_image.setdefault(img_id, []).append(gi)
    matched: set[int] = set()
    tp = np.zeros(len(order), dtype=bool)
    for rank, di in enumerate(order):
        det, img_id = detections[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(img_id, ()):
            if gi in matched:
                continue
            overlap = iou(det.to_xyxy(), ground_truths[gi][0].to_xyxy())
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0:
            matched.add(best_gi)
            tp[rank] = True
    return tp


def average_precision(
    detections: Sequence[tuple[Detection, object]],
    ground_truths: Sequence[tuple[BBox, object]],
    class_id: int = HUMAN_CLASS,
    iou_threshold: float = 0.5,
) -> float:
    """All-points AP for one class over (detection, image id) pairs.

    Conventions: no ground truths and no detections is vacuously 1.0;
    no ground truths with detections is 0.0; no detections is 0.0.
    """
    dets = [(d, i) for d, i in detections if d.class_id == class_id]
    gts = [(b, i) for b, i in ground_truths if b.class_id == class_id]
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0

    tp = match_detections(dets, gts, iou_threshold)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / len(gts)
    precision = tp_cum / (tp_cum + fp_cum)

    # Precision envelope (running max from the right), integrated over recall.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * envelope))


@dataclass
class EvalRow:
    mode: str
    scenario: str
    ap_mean: float
    ap_std: float
    repeats: int
    train_seconds: float
    aps: list[float] = field(default_factory=list)
    patch_ap_mean: float | None = None


@dataclass
class EvalReport:
    """Per (training mode, scenario) AP summary plus run metadata."""

    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, mode: str, scenario: str) -> EvalRow:
        for r in self.rows:
            if r.mode == mode and r.scenario == scenario:
                return r
        raise KeyError(f"no report row for mode={mode!r} scenario={scenario!r}")

    def to_csv_text(self) -> str:
        lines = ["mode,scenario,ap_mean,ap_std,repeats,wall_time_s"]
        for r in self.rows:
            lines.append(
                f"{r.mode},{r.scenario},{r.ap_mean:.6f},{r.ap_std:.6f},"
                f"{r.repeats},{r.train_seconds:.3f}"
            )
        return "\n".join(lines) + "\n"

    def to_markdown_text(self) -> str:
        scenarios = list(dict.fromkeys(r.scenario for r in self.rows))
        modes = list(dict.fromkeys(r.mode for r in self.rows))
        header = "| Mode | " + " | ".join(scenarios) + " | Train time (min) |"
        rule = "|" + "---|" * (len(scenarios) + 2)
        lines = [header, rule]
        for mode in modes:
            cells = []
            train_minutes = 0.0
            for scenario in scenarios:
                r = self.row(mode, scenario)
                cells.append(f"{r.ap_mean:.4f} ± {r.ap_std:.4f}")
                train_minutes = r.train_seconds / 60.0
            lines.append(f"| {mode} | " + " | ".join(cells) + f" | {train_minutes:.2f} |")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {
                    "mode": r.mode,
                    "scenario": r.scenario,
                    "ap_mean": r.ap_mean,
                    "ap_std": r.ap_std,
                    "repeats": r.repeats,
                    "train_seconds": r.train_seconds,
                    "aps": r.aps,
                    "patch_ap_mean": r.patch_ap_mean,
                }
                for r in self.rows
            ],
            "metadata": self.metadata,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        payload = json.loads(Path(path).read_text())
        rows = [
            EvalRow(
                mode=r["mode"],
                scenario=r["scenario"],
                ap_mean=r["ap_mean"],
                ap_std=r["ap_std"],
                repeats=r["repeats"],
                train_seconds=r["train_seconds"],
                aps=list(r.get("aps", [])),
                patch_ap_mean=r.get("patch_ap_mean"),
            )
            for r in payload["rows"]
        ]
        return cls(rows=rows, metadata=payload.get("metadata", {}))


def _collect_predictions(
    detector: "GridDetector", dataset: Dataset
) -> tuple[list[tuple[Detection, int]], list[tuple[BBox, int]]]:
    dets: list[tuple[Detection, int]] = []
    gts: list[tuple[BBox, int]] = []
    for i, sample in enumerate(dataset.samples):
        for det in detector.predict(sample.image):
            dets.append((det, i))
        for box in sample.boxes:
            gts.append((box, i))
    return dets, gts


def _patch_pseudo_gts(dataset: Dataset) -> list[tuple[BBox, int]]:
    """Applied attack rectangles as class-1 pseudo ground truths (diagnostic)."""
    gts: list[tuple[BBox, int]] = []
    for i, sample in enumerate(dataset.samples):
        h, w = sample.image.shape
        for (x0, y0, x1, y1) in sample.patch_rects:
            gts.append((BBox.from_pixel_rect(PATCH_CLASS, x0, y0, x1, y1, h, w), i))
    return gts


def evaluate_scenarios(
    models: dict[str, "GridDetector"],
    dataset: Dataset,
    scenarios: Sequence["AttackConfig"],
    repeats: int = 5,
    base_seed: int = 0,
    retrain: dict[str, Callable[[int], "GridDetector"]] | None = None,
) -> EvalReport:
    """Evaluate every (mode, scenario) cell with repeat-specific attack seeds.

    The clean scenario is always included first. Per cell, the attacked
    dataset is rebuilt for each repeat and human AP@0.5 is averaged; std is
    the sample standard deviation (0 for a single repeat). When ``retrain``
    provides a factory for a mode, a fresh model is fit per repeat instead
    of reusing the fitted one (the expensive protocol variant).
    """
    from .attacks import apply_attack_scenario

    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    t_start = time.perf_counter()
    report = EvalReport()
    scenario_list = [None] + list(scenarios)
    for mode, model in models.items():
        for scenario in scenario_list:
            name = "clean" if scenario is None else scenario.display_name
            aps: list[float] = []
            patch_aps: list[float] = []
            train_secs: list[float] = []
            for rep in range(repeats):
                det = model
                if retrain is not None and mode in retrain:
                    det = retrain[mode](rep)
                train_secs.append(float(getattr(det, "train_seconds_", 0.0)))
                if scenario is None:
                    ds = dataset
                else:
                    rng = rng_from(base_seed, "eval", mode, name, rep)
                    ds = apply_attack_scenario(det, dataset, scenario, rng)
                dets, gts = _collect_predictions(det, ds)
                aps.append(average_precision(dets, gts, class_id=HUMAN_CLASS))
                pseudo = _patch_pseudo_gts(ds)
                if pseudo:
                    patch_aps.append(average_precision(dets, pseudo, class_id=PATCH_CLASS))
            arr = np.array(aps, dtype=np.float64)
            report.rows.append(
                EvalRow(
                    mode=mode,
                    scenario=name,
                    ap_mean=float(arr.mean()),
                    ap_std=float(arr.std(ddof=1)) if repeats > 1 else 0.0,
                    repeats=repeats,
                    train_seconds=float(np.mean(train_secs)),
                    aps=[float(a) for a in aps],
                    patch_ap_mean=float(np.mean(patch_aps)) if patch_aps else None,
                )
            )
    report.metadata = {
        "base_seed": base_seed,
        "repeats": repeats,
        "n_images": len(dataset),
        "eval_wall_seconds": time.perf_counter() - t_start,
    }
    return report
