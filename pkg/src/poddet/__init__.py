"""Occlusion-aware infrared human detection with adversarial patch evaluation."""

from .augment import PatchAugmenter, PatchPixels, apply_patch, make_patch
from .attacks import (
    AttackConfig,
    HotColdBlockAttack,
    PlacedPatch,
    ShapeLocAttack,
    UniversalPatchAttack,
    apply_attack_scenario,
    noise_patch,
)
from .data import (
    BBox,
    Dataset,
    Detection,
    Sample,
    SynthConfig,
    filter_persons,
    load_dataset,
    make_synth_dataset,
    save_dataset,
    synth_scene,
)
from .detector import (
    GridDetector,
    GridNet,
    PatchHistory,
    detection_loss,
    detection_loss_terms,
)
from .evaluation import EvalReport, average_precision, evaluate_scenarios, iou

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "BBox",
    "Dataset",
    "Detection",
    "EvalReport",
    "GridDetector",
    "GridNet",
    "HotColdBlockAttack",
    "PatchAugmenter",
    "PatchHistory",
    "PatchPixels",
    "PlacedPatch",
    "Sample",
    "ShapeLocAttack",
    "SynthConfig",
    "UniversalPatchAttack",
    "apply_attack_scenario",
    "apply_patch",
    "average_precision",
    "detection_loss",
    "detection_loss_terms",
    "evaluate_scenarios",
    "filter_persons",
    "iou",
    "load_dataset",
    "make_patch",
    "make_synth_dataset",
    "noise_patch",
    "save_dataset",
    "synth_scene",
]
