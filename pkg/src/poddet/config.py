"""Run configuration: defaults, JSON loading, validation, and object builders.

A run file is a JSON object; unset keys take the defaults below. Every CLI
command materializes the fully resolved configuration into ``run.lock``
inside the output directory, and a lock file is itself a valid run file, so
any run can be replayed exactly from its lock.

The global ``seed`` fans out to per-component streams through
:func:`poddet.utils.derive_seed` keyed by string labels (component, mode,
scenario, repeat), so adding one scenario or mode never perturbs the
randomness of the others.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .attacks import AttackConfig
from .augment import PatchAugmenter
from .data import SynthConfig
from .detector import MODES, GridDetector
from .utils import derive_seed

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/run",
    "threads": 1,
    "dataset": {
        "kind": "synthetic",
        "root": None,
        "min_person_px": 0.0,
        "image_size": 128,
        "train_images": 64,
        "test_images": 16,
        "synthetic": {
            "persons_per_image": [1, 2],
            "person_size_range": [18, 44],
            "blob_intensity": [0.60, 0.95],
            "background_noise_level": 0.03,
            "distractors_per_image": [0, 2],
            "distractor_intensity": [0.20, 0.40],
        },
    },
    "train": {
        "modes": ["std", "pod"],
        "epochs": 20,
        "batch_size": 8,
        "learning_rate": 2e-3,
        "class_weights": [0.9, 0.1],
        "box_weight": 5.0,
        "image_size": 128,
        "channels": [16, 32, 64, 64],
        "conf_threshold": 0.05,
        "nms_iou": 0.5,
        "augment": {
            "count_range": [1, 3],
            "size_fraction_range": [0.1, 0.4],
            "type_weights": None,
        },
        "adv": {
            "start_epoch": 5,
            "period": 15,
            "steps": 200,
            "step_size": 0.02,
            "patch_size": 32,
        },
    },
    "attacks": [
        {"kind": "noise", "patch_fraction": 0.5},
        {"kind": "universal", "patch_fraction": 0.5},
    ],
    "eval": {
        "repeats": 5,
        "retrain_per_repeat": False,
        "thresholds": [],
    },
}

_ATTACK_FIELDS = {
    "kind", "name", "patch_fraction", "steps", "step_size", "batch_size",
    "patch_size", "location_policy", "size_fraction_range", "location_grid",
    "max_rects", "area_budget",
}
_THRESHOLD_FIELDS = {"mode", "scenario", "min_ap", "max_ap"}


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field path."""


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults and path in ("", "dataset", "train", "eval",
                                            "dataset.synthetic", "train.augment", "train.adv"):
            raise ConfigError(f"{here}: unknown configuration key")
        if isinstance(value, dict) and isinstance(defaults.get(key), dict):
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge user config over defaults, then apply CLI/environment overrides."""
    cfg = _merge(DEFAULTS, user or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    def fail(path: str, msg: str) -> None:
        raise ConfigError(f"{path}: {msg}")

    if not isinstance(cfg.get("seed"), int):
        fail("seed", "must be an integer")
    ds = cfg["dataset"]
    if ds["kind"] not in ("synthetic", "files"):
        fail("dataset.kind", f"must be 'synthetic' or 'files', got {ds['kind']!r}")
    if ds["kind"] == "files" and not ds.get("root"):
        fail("dataset.root", "required when dataset.kind is 'files'")
    if ds["min_person_px"] < 0:
        fail("dataset.min_person_px", "must be >= 0")
    tr = cfg["train"]
    for mode in tr["modes"]:
        if mode not in MODES:
            fail("train.modes", f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    if tr["epochs"] < 0:
        fail("train.epochs", "must be >= 0")
    if tr["image_size"] % 16 != 0:
        fail("train.image_size", "must be a multiple of 16")
    for i, spec in enumerate(cfg["attacks"]):
        unknown = set(spec) - _ATTACK_FIELDS
        if unknown:
            fail(f"attacks[{i}]", f"unknown attack keys: {sorted(unknown)}")
        try:
            attack_config_from(spec)
        except ValueError as exc:
            fail(f"attacks[{i}]", str(exc))
    ev = cfg["eval"]
    if ev["repeats"] < 1:
        fail("eval.repeats", "must be >= 1")
    for i, th in enumerate(ev["thresholds"]):
        unknown = set(th) - _THRESHOLD_FIELDS
        if unknown:
            fail(f"eval.thresholds[{i}]", f"unknown keys: {sorted(unknown)}")
        if "mode" not in th or "scenario" not in th:
            fail(f"eval.thresholds[{i}]", "requires 'mode' and 'scenario'")
        if "min_ap" not in th and "max_ap" not in th:
            fail(f"eval.thresholds[{i}]", "requires 'min_ap' and/or 'max_ap'")


def write_lock(cfg: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "run.lock"
    lock.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return lock


def synth_config_from(cfg: dict, split: str) -> SynthConfig:
    ds = cfg["dataset"]
    syn = ds["synthetic"]
    return SynthConfig(
        image_size=int(ds["image_size"]),
        persons_per_image=tuple(syn["persons_per_image"]),
        person_size_range=tuple(syn["person_size_range"]),
        blob_intensity=tuple(syn["blob_intensity"]),
        background_noise_level=float(syn["background_noise_level"]),
        distractors_per_image=tuple(syn["distractors_per_image"]),
        distractor_intensity=tuple(syn["distractor_intensity"]),
        seed=derive_seed(cfg["seed"], "data", split),
    )


def augmenter_from(cfg: dict) -> PatchAugmenter:
    aug = cfg["train"]["augment"]
    return PatchAugmenter(
        count_range=tuple(aug["count_range"]),
        size_fraction_range=tuple(aug["size_fraction_range"]),
        type_weights=aug["type_weights"],
    )


def detector_from(cfg: dict, mode: str, seed: int | None = None) -> GridDetector:
    tr = cfg["train"]
    adv = tr["adv"]
    return GridDetector(
        mode=mode,
        epochs=int(tr["epochs"]),
        batch_size=int(tr["batch_size"]),
        learning_rate=float(tr["learning_rate"]),
        class_weights=tuple(tr["class_weights"]),
        box_weight=float(tr["box_weight"]),
        image_size=int(tr["image_size"]),
        channels=tuple(tr["channels"]),
        conf_threshold=float(tr["conf_threshold"]),
        nms_iou=float(tr["nms_iou"]),
        augment=augmenter_from(cfg),
        adv_start_epoch=int(adv["start_epoch"]),
        adv_period=int(adv["period"]),
        adv_steps=int(adv["steps"]),
        adv_step_size=float(adv["step_size"]),
        adv_patch_size=int(adv["patch_size"]),
        seed=derive_seed(cfg["seed"], "train", mode) if seed is None else seed,
    )


def attack_config_from(spec: dict) -> AttackConfig:
    kwargs = dict(spec)
    if "size_fraction_range" in kwargs:
        kwargs["size_fraction_range"] = tuple(kwargs["size_fraction_range"])
    return AttackConfig(**kwargs)


def attack_configs_from(cfg: dict) -> list[AttackConfig]:
    return [attack_config_from(spec) for spec in cfg["attacks"]]
