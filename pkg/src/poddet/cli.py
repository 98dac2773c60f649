"""Command-line entry point wiring data, training, attacks, and evaluation.

Subcommands::

    poddet prepare  --config run.json [--out DIR]
    poddet train    --config run.json --mode pod [--dump-augmented N]
    poddet attack   --config run.json --kind universal [--model-mode std]
    poddet evaluate --config run.json
    poddet report   --config run.json

Outputs live under the output directory: ``dataset/``, ``checkpoints/``,
``logs/``, ``patches/``, ``attacked/``, ``reports/``, plus ``run.lock``, a
snapshot of the fully resolved configuration. Replaying a command from its
lock file reproduces the outputs (reports byte-for-byte in single-threaded
mode). The ``POD_SEED`` environment variable overrides the configured seed;
an explicit ``--seed`` flag overrides both.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .attacks import apply_attack_scenario, save_patch
from .data import Dataset, filter_persons, load_dataset, make_synth_dataset, save_dataset
from .detector import GridDetector
from .evaluation import EvalReport, evaluate_scenarios
from .utils import derive_seed, rng_from
from .validation import PodError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="run configuration JSON")
    parser.add_argument("--out", type=Path, default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--threads", type=int, default=None, help="torch thread count")


def _resolve(args: argparse.Namespace) -> dict:
    user = cfgmod.load_config(args.config) if args.config else {}
    seed = args.seed
    if seed is None and os.environ.get("POD_SEED"):
        seed = int(os.environ["POD_SEED"])
    overrides = {
        "out": str(args.out) if args.out is not None else None,
        "seed": seed,
        "threads": args.threads,
    }
    cfg = cfgmod.resolve_config(user, overrides)
    torch.set_num_threads(int(cfg["threads"]))
    cfgmod.write_lock(cfg, cfg["out"])
    return cfg


def _dataset_dir(cfg: dict) -> Path:
    return Path(cfg["out"]) / "dataset"


def _load_split(cfg: dict, split: str) -> Dataset:
    root = _dataset_dir(cfg)
    if not (root / split).is_dir():
        raise FileNotFoundError(
            f"missing prepared dataset split: {root / split} (run `poddet prepare` first)"
        )
    return load_dataset(root, split)


def _checkpoint_path(cfg: dict, mode: str) -> Path:
    return Path(cfg["out"]) / "checkpoints" / f"{mode}.pt"


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    ds_cfg = cfg["dataset"]
    out_root = _dataset_dir(cfg)
    for split, n_key in (("train", "train_images"), ("test", "test_images")):
        if ds_cfg["kind"] == "synthetic":
            dataset = make_synth_dataset(
                cfgmod.synth_config_from(cfg, split), int(ds_cfg[n_key]), split
            )
        else:
            dataset = load_dataset(ds_cfg["root"], split)
        if ds_cfg["min_person_px"] > 0:
            dataset = filter_persons(dataset, float(ds_cfg["min_person_px"]))
        save_dataset(dataset, out_root, split)
        print(
            f"prepare: split={split} images={len(dataset)} "
            f"labels={dataset.num_boxes()} -> {out_root / split}"
        )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    mode = args.mode
    train_ds = _load_split(cfg, "train")
    detector = cfgmod.detector_from(cfg, mode)

    if args.dump_augmented:
        _dump_augmented(cfg, detector, train_ds, args.dump_augmented)

    detector.fit(train_ds)
    ckpt = _checkpoint_path(cfg, mode)
    detector.save(ckpt)

    log_dir = Path(cfg["out"]) / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    (log_dir / f"train_{mode}.log").write_text("\n".join(detector.train_log_) + "\n")

    for patch, epoch in zip(detector.history_.patches, detector.history_.epochs):
        save_patch(
            patch,
            Path(cfg["out"]) / "patches" / mode / f"patch_epoch{epoch:03d}",
            {"mode": mode, "epoch": epoch, "seed": cfg["seed"]},
        )
    print(
        f"train: mode={mode} epochs={detector.epochs} "
        f"wall_s={detector.train_seconds_:.1f} checkpoint={ckpt}"
    )
    return 0


def _dump_augmented(cfg: dict, detector: GridDetector, dataset: Dataset, count: int) -> None:
    """Write augmented previews (image + label pairs) for visual inspection."""
    augmenter = detector._base_augmenter()
    rng = rng_from(cfg["seed"], "dump-augmented", detector.mode)
    samples = []
    for i in range(min(count, len(dataset))):
        src = dataset.samples[i]
        image, boxes = augmenter.transform(src.image, src.boxes, rng)
        samples.append(type(src)(image=image, boxes=tuple(boxes), stem=f"aug_{src.stem}"))
    out = Path(cfg["out"]) / "debug_augmented"
    save_dataset(Dataset(samples=samples, split_name=detector.mode), out)
    print(f"train: dumped {len(samples)} augmented samples -> {out / detector.mode}")


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    specs = {a.display_name: a for a in cfgmod.attack_configs_from(cfg)}
    if args.kind in specs:
        attack = specs[args.kind]
    else:
        attack = cfgmod.attack_config_from({"kind": args.kind})
    ckpt = _checkpoint_path(cfg, args.model_mode)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint: {ckpt} (run `poddet train` first)")
    detector = GridDetector.load(ckpt)
    dataset = _load_split(cfg, args.split)

    rng = rng_from(cfg["seed"], "attack-cmd", attack.display_name, args.model_mode, args.split)
    attacked = apply_attack_scenario(detector, dataset, attack, rng)
    out_dir = Path(cfg["out"]) / "attacked" / attack.display_name
    save_dataset(attacked, out_dir, args.split)
    print(
        f"attack: kind={attack.kind} model={args.model_mode} images={len(attacked)} "
        f"-> {out_dir / args.split}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    modes = list(cfg["train"]["modes"])
    models: dict[str, GridDetector] = {}
    for mode in modes:
        ckpt = _checkpoint_path(cfg, mode)
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint: {ckpt} (run `poddet train --mode {mode}`)")
        models[mode] = GridDetector.load(ckpt)
    test_ds = _load_split(cfg, "test")
    scenarios = cfgmod.attack_configs_from(cfg)

    retrain = None
    if cfg["eval"]["retrain_per_repeat"]:
        train_ds = _load_split(cfg, "train")
        retrain = {
            mode: _retrain_factory(cfg, mode, train_ds) for mode in modes
        }

    report = evaluate_scenarios(
        models,
        test_ds,
        scenarios,
        repeats=int(cfg["eval"]["repeats"]),
        base_seed=int(cfg["seed"]),
        retrain=retrain,
    )
    _write_reports(cfg, report)
    return _apply_thresholds(cfg, report)


def _retrain_factory(cfg: dict, mode: str, train_ds: Dataset):
    def factory(repeat: int) -> GridDetector:
        seed = derive_seed(cfg["seed"], "retrain", mode, repeat)
        return cfgmod.detector_from(cfg, mode, seed=seed).fit(train_ds)

    return factory


def _write_reports(cfg: dict, report: EvalReport) -> None:
    reports_dir = Path(cfg["out"]) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "report.csv").write_text(report.to_csv_text())
    (reports_dir / "report.md").write_text(report.to_markdown_text())
    report.save_json(reports_dir / "eval_results.json")
    print(f"evaluate: wrote {reports_dir / 'report.csv'}")
    print(report.to_markdown_text(), end="")


def _apply_thresholds(cfg: dict, report: EvalReport) -> int:
    failures = 0
    for th in cfg["eval"]["thresholds"]:
        try:
            row = report.row(th["mode"], th["scenario"])
        except KeyError as exc:
            print(f"threshold ERROR: {exc}", file=sys.stderr)
            failures += 1
            continue
        ok = True
        if "min_ap" in th and row.ap_mean < float(th["min_ap"]):
            ok = False
        if "max_ap" in th and row.ap_mean > float(th["max_ap"]):
            ok = False
        status = "PASS" if ok else "FAIL"
        print(
            f"threshold {status}: mode={th['mode']} scenario={th['scenario']} "
            f"ap={row.ap_mean:.4f} bounds=[{th.get('min_ap', '-')}, {th.get('max_ap', '-')}]"
        )
        if not ok:
            failures += 1
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    reports_dir = Path(cfg["out"]) / "reports"
    json_path = reports_dir / "eval_results.json"
    if not json_path.exists():
        raise FileNotFoundError(f"missing evaluation results: {json_path} (run `poddet evaluate`)")
    report = EvalReport.from_json(json_path)
    (reports_dir / "report.csv").write_text(report.to_csv_text())
    (reports_dir / "report.md").write_text(report.to_markdown_text())
    print(report.to_markdown_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poddet",
        description="Occlusion-aware human detection: prepare data, train, attack, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate or filter the dataset")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one detector mode")
    _add_common(p)
    p.add_argument("--mode", required=True, help="std | pod | pod_nodet | advpod | advpod_nodet")
    p.add_argument(
        "--dump-augmented", type=int, default=0, metavar="N",
        help="write N augmented samples for visual inspection",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="emit an attacked copy of a dataset split")
    _add_common(p)
    p.add_argument("--kind", required=True, help="noise | universal | hcb | shapeloc or a configured scenario name")
    p.add_argument("--model-mode", default="std", help="checkpoint to attack (default: std)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="run the scenario evaluation matrix")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render reports from saved results")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PodError, cfgmod.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
