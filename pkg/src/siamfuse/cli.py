"""Command-line front end: synthesize data, train, track, evaluate, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The environment variable ``DAST_SEED`` supplies the seed when no flag or
config value gives one. Config files hold one ``section.key = value`` pair
per line ('#' starts a comment, values are JSON); precedence is
flags > config file > defaults, and unknown keys are rejected by name.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .data_synth import (
    ATTRIBUTES,
    DataError,
    SequenceRecord,
    SequenceSpec,
    generate_sequence,
    load_sequence_dir,
    write_sequence_dir,
)
from .metrics import (
    RunResult,
    ablation_report,
    aggregate_curves,
    attribute_breakdown,
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    read_result_boxes,
    report_rows,
    write_confidences,
    write_curve_csv,
    write_report,
    write_result_boxes,
)
from .model import ModelConfig, TrackerModel
from .tensor import ContractError, NumericsError, load_checkpoint
from .tracker import TrackerConfig, track_sequence
from .training import TrainConfig, train

# Every tunable the config file accepts, with its expected type.
KNOWN_KEYS: dict[str, type | tuple] = {
    "model.preset": str,
    "model.use_fusion": bool,
    "model.use_augmentation": bool,
    "model.augment_filter_depth": int,
    "model.attention_bias": bool,
    "model.ratios": list,
    "model.anchor_scale": (int, float),
    "train.schedule": str,
    "train.epochs": int,
    "train.freeze_backbone_epochs": int,
    "train.batch_size": int,
    "train.steps_per_epoch": int,
    "train.assign": str,
    "train.center_distance_threshold": (int, float),
    "train.iou_pos_threshold": (int, float),
    "train.iou_neg_threshold": (int, float),
    "train.lr_start": (int, float),
    "train.lr_end": (int, float),
    "train.momentum": (int, float),
    "train.max_grad_norm": (int, float),
    "train.seed": int,
    "loss.pair_weight": (int, float),
    "loss.cls_weight": (int, float),
    "loss.class_balanced": bool,
    "triplet.window": int,
    "triplet.noise_sigma": (int, float),
    "triplet.noise_prob": (int, float),
    "triplet.search_from_successor": bool,
    "triplet.center_jitter": (int, float),
    "tracker.update_threshold": (int, float),
    "tracker.pair_weight": (int, float),
    "tracker.binary_weight": (int, float),
    "tracker.window_influence": (int, float),
    "tracker.penalty_k": (int, float),
    "tracker.box_smoothing": (int, float),
    "tracker.update_score": str,
    "tracker.allow_updates": bool,
    "tracker.min_box_size": (int, float),
}

MODULE_CHOICES = ("none", "fusion", "augment", "both")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse "key = json-value" lines; '#' comments; unknown keys rejected."""
    conf: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KNOWN_KEYS:
            raise ContractError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            stripped = value.split("#", 1)[0].strip()
            try:
                parsed = json.loads(stripped)
            except json.JSONDecodeError:
                raise ContractError(
                    f"{source}:{lineno}: value for {key!r} is not valid JSON: {value!r}"
                ) from None
        expected = KNOWN_KEYS[key]
        if expected is bool:
            if not isinstance(parsed, bool):
                raise ContractError(f"{source}:{lineno}: {key!r} expects true/false")
        elif not isinstance(parsed, expected) or isinstance(parsed, bool):
            name = expected.__name__ if isinstance(expected, type) else "number"
            raise ContractError(f"{source}:{lineno}: {key!r} expects {name}, got {parsed!r}")
        conf[key] = parsed
    return conf


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def resolve_seed(flag_value, file_value=None, default: int = 0) -> int:
    """Flag beats file beats the DAST_SEED environment variable beats default."""
    if flag_value is not None:
        return int(flag_value)
    if file_value is not None:
        return int(file_value)
    env = os.environ.get("DAST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ContractError(f"DAST_SEED must be an integer, got {env!r}") from None
    return default


def module_gates(choice: str) -> tuple[bool, bool]:
    return {
        "none": (False, False),
        "fusion": (True, False),
        "augment": (False, True),
        "both": (True, True),
    }[choice]


def build_model_config(conf: dict, preset: str | None, modules: str | None) -> ModelConfig:
    preset = preset or conf.get("model.preset", "desk")
    if preset not in ("desk", "full"):
        raise ContractError(f"model preset must be 'desk' or 'full', got {preset!r}")
    cfg = ModelConfig.desk() if preset == "desk" else ModelConfig()
    updates: dict = {}
    for field_name in ("use_fusion", "use_augmentation", "augment_filter_depth", "attention_bias"):
        key = f"model.{field_name}"
        if key in conf:
            updates[field_name] = conf[key]
    if "model.ratios" in conf:
        try:
            updates["ratios"] = tuple(float(r) for r in conf["model.ratios"])
        except (TypeError, ValueError):
            raise ContractError(f"model.ratios must be numbers, got {conf['model.ratios']!r}") from None
    if "model.anchor_scale" in conf:
        updates["anchor_scale"] = float(conf["model.anchor_scale"])
    if modules is not None:
        use_fusion, use_augmentation = module_gates(modules)
        updates["use_fusion"] = use_fusion
        updates["use_augmentation"] = use_augmentation
    cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def build_train_config(conf: dict, args) -> TrainConfig:
    schedule = getattr(args, "schedule", None) or conf.get("train.schedule", "desk")
    if schedule not in ("desk", "full"):
        raise ContractError(f"train schedule must be 'desk' or 'full', got {schedule!r}")
    cfg = TrainConfig.desk() if schedule == "desk" else TrainConfig()
    updates: dict = {}
    for field_name in (
        "epochs",
        "freeze_backbone_epochs",
        "batch_size",
        "steps_per_epoch",
        "assign",
        "center_distance_threshold",
        "iou_pos_threshold",
        "iou_neg_threshold",
        "lr_start",
        "lr_end",
        "momentum",
        "max_grad_norm",
    ):
        key = f"train.{field_name}"
        if key in conf:
            updates[field_name] = conf[key]
    loss_updates: dict = {}
    if "loss.pair_weight" in conf:
        loss_updates["pair_weight"] = float(conf["loss.pair_weight"])
    if "loss.cls_weight" in conf:
        loss_updates["cls_weight"] = float(conf["loss.cls_weight"])
    if loss_updates:
        updates["loss_weights"] = dataclasses.replace(cfg.loss_weights, **loss_updates)
    if "loss.class_balanced" in conf:
        updates["class_balanced"] = conf["loss.class_balanced"]
    triplet_updates: dict = {}
    for field_name in ("window", "noise_sigma", "noise_prob", "search_from_successor", "center_jitter"):
        key = f"triplet.{field_name}"
        if key in conf:
            triplet_updates[field_name] = conf[key]
    if triplet_updates:
        updates["triplet"] = dataclasses.replace(cfg.triplet, **triplet_updates)
    for flag in ("epochs", "batch_size", "steps_per_epoch", "assign"):
        value = getattr(args, flag, None)
        if value is not None:
            updates[flag] = value
    updates["seed"] = resolve_seed(getattr(args, "seed", None), conf.get("train.seed"))
    cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def build_tracker_config(conf: dict, args) -> TrackerConfig:
    cfg = TrackerConfig()
    updates: dict = {}
    for field_name in (
        "update_threshold",
        "pair_weight",
        "binary_weight",
        "window_influence",
        "penalty_k",
        "box_smoothing",
        "update_score",
        "allow_updates",
        "min_box_size",
    ):
        key = f"tracker.{field_name}"
        if key in conf:
            updates[field_name] = conf[key]
    if getattr(args, "no_update", False):
        updates["allow_updates"] = False
    cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


def load_dataset(path) -> list[SequenceRecord]:
    """A single sequence directory, or a root holding several of them."""
    root = Path(path)
    if not root.exists():
        raise DataError(f"dataset path not found: {root}")
    if (root / "img").is_dir():
        return [load_sequence_dir(root)]
    records = []
    for child in sorted(root.iterdir()):
        if (child / "img").is_dir():
            records.append(load_sequence_dir(child))
    if not records:
        raise DataError(f"no sequence directories under {root}")
    return records


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    if args.name and args.num != 1:
        raise ContractError("--name only applies to a single sequence; drop it or use --num 1")
    out = Path(args.out)
    names = []
    for i in range(args.num):
        spec = SequenceSpec(
            length=args.length,
            height=args.height,
            width=args.width,
            seed=seed + i,
            attributes=tuple(args.attr),
            speed=args.speed,
            name=args.name,
        )
        spec.validate()
        record = generate_sequence(spec)
        write_sequence_dir(record, out)
        names.append(record.name)
    print(f"wrote {len(names)} sequence(s) under {out}: {', '.join(names)}")
    return 0


def cmd_train(args) -> int:
    conf = load_config_file(args.config) if args.config else {}
    records = load_dataset(args.data)
    train_cfg = build_train_config(conf, args)
    resume_state = None
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.is_file():
            raise DataError(f"checkpoint not found: {ckpt}")
        if args.modules is not None or args.preset is not None:
            raise ContractError("--modules/--preset cannot change a resumed model; edit before training instead")
        model = TrackerModel.load(ckpt)
        _, meta = load_checkpoint(ckpt)
        if "train_state" not in meta:
            raise DataError(f"{ckpt} has no train_state block; it cannot seed a resume")
        resume_state = meta["train_state"]
    else:
        model_cfg = build_model_config(conf, args.preset, args.modules)
        model = TrackerModel.initialize(model_cfg, seed=train_cfg.seed)
    report = train(model, records, train_cfg, out_dir=args.out, resume_state=resume_state)
    print(
        f"trained {train_cfg.epochs} epoch(s) on {len(records)} sequence(s); "
        f"final loss {report.final_loss:.4f}; artifacts in {args.out}"
    )
    return 0


def _track_one(model: TrackerModel, record: SequenceRecord, tracker_cfg: TrackerConfig, out: Path):
    run = track_sequence(model, record.frames, record.boxes[0], tracker_cfg)
    write_result_boxes(out / f"{record.name}.txt", run.boxes_xywh)
    write_confidences(out / f"{record.name}_confidence.txt", run.confidences)
    return record.name, run


def cmd_track(args) -> int:
    conf = load_config_file(args.config) if args.config else {}
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    model = TrackerModel.load(ckpt)
    if args.modules is not None:
        use_fusion, use_augmentation = module_gates(args.modules)
        cfg = dataclasses.replace(
            model.cfg, use_fusion=use_fusion, use_augmentation=use_augmentation
        )
        model = TrackerModel(
            cfg=cfg,
            backbone_params=model.backbone_params,
            fusion_params=model.fusion_params,
            augment_params=model.augment_params,
            head_params=model.head_params,
        )
    tracker_cfg = build_tracker_config(conf, args)
    records = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(
                pool.map(lambda r: _track_one(model, r, tracker_cfg, out), records)
            )
    else:
        results = [_track_one(model, r, tracker_cfg, out) for r in records]
    for name, run in sorted(results):
        updates = int(run.updated.sum())
        print(f"{name}: {run.num_frames} frames, {updates} template update(s)")
    return 0


def _load_runs(results_dir: Path, records: list[SequenceRecord], jobs: int = 1) -> list[RunResult]:
    def load_one(record: SequenceRecord) -> RunResult:
        path = results_dir / f"{record.name}.txt"
        if not path.is_file():
            raise DataError(f"missing results file {path}")
        boxes = read_result_boxes(path)
        if boxes.shape[0] != len(record.frames):
            raise DataError(
                f"{record.name}: results have {boxes.shape[0]} rows "
                f"but ground truth has {len(record.frames)}"
            )
        return RunResult.from_boxes(record.name, boxes, record.boxes, record.attributes)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(load_one, records))
    return [load_one(r) for r in records]


def _write_eval_outputs(out: Path, config_name: str, runs: list[RunResult]) -> list[dict]:
    succ, prec = aggregate_curves(runs)
    prefix = f"{config_name}_" if config_name != "default" else ""
    write_curve_csv(out / f"{prefix}success_curve.csv", SUCCESS_THRESHOLDS, succ)
    write_curve_csv(out / f"{prefix}precision_curve.csv", PRECISION_THRESHOLDS, prec)
    breakdown = attribute_breakdown(runs)
    if breakdown:
        (out / f"{prefix}attributes.json").write_text(
            json.dumps(breakdown, indent=2, sort_keys=True) + "\n"
        )
    return report_rows(runs, config_name=config_name)


def cmd_eval(args) -> int:
    records = load_dataset(args.data)
    results_root = Path(args.results)
    if not results_root.is_dir():
        raise DataError(f"results path not found: {results_root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.ablate:
        names = [n.strip() for n in args.ablate.split(",") if n.strip()]
        runs_by_name: dict[str, list[RunResult]] = {}

        def load_config_runs(name: str) -> list[RunResult]:
            runs_by_name[name] = _load_runs(results_root / name, records, jobs=args.jobs)
            return runs_by_name[name]

        table = ablation_report([(name, name) for name in names], load_config_runs)
        rows: list[dict] = []
        for row in table.rows:
            if not row.failed:
                rows.extend(_write_eval_outputs(out, row.name, runs_by_name[row.name]))
        if rows:
            write_report(out / "metrics", rows)
        (out / "ablation.json").write_text(
            json.dumps(table.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
        (out / "ablation.csv").write_text("\n".join(table.to_csv_lines()) + "\n")
        for row in table.rows:
            status = f"FAILED ({row.error})" if row.failed else ", ".join(
                f"{k} {row.metrics[k]:.4f}" for k in ("success_auc", "precision", "ao")
            )
            print(f"{row.name}: {status}")
        return 0

    runs = _load_runs(results_root, records, jobs=args.jobs)
    rows = _write_eval_outputs(out, "default", runs)
    write_report(out / "metrics", rows)
    agg = rows[-1]
    print(
        f"{len(runs)} sequence(s): success_auc {agg['success_auc']:.4f}, "
        f"precision {agg['precision']:.4f}, ao {agg['ao']:.4f}"
    )
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siamfuse",
        description="Siamese tracker with attention template fusion: data, training, tracking, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic sequences in OTB layout")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="base seed (default: DAST_SEED or 0)")
    p.add_argument("--len", dest="length", type=int, default=100, help="frames per sequence")
    p.add_argument("--num", type=int, default=1, help="number of sequences (seeds seed..seed+n-1)")
    p.add_argument("--height", type=int, default=150)
    p.add_argument("--width", type=int, default=200)
    p.add_argument("--speed", type=float, default=2.0, help="target speed in px/frame")
    p.add_argument("--name", default="", help="sequence name (single sequence only)")
    p.add_argument(
        "--attr",
        action="append",
        default=[],
        metavar="TAG",
        help=f"attribute tag, repeatable; one of {', '.join(ATTRIBUTES)}",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a sequence dataset")
    p.add_argument("--data", required=True, help="dataset directory (OTB layout)")
    p.add_argument("--out", required=True, help="directory for checkpoints and loss history")
    p.add_argument("--config", default=None, help="config file path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--schedule", choices=("desk", "full"), default=None)
    p.add_argument("--preset", choices=("desk", "full"), default=None, help="model size preset")
    p.add_argument("--modules", choices=MODULE_CHOICES, default=None,
                   help="which attention blocks the model uses")
    p.add_argument("--assign", choices=("center_distance", "iou"), default=None,
                   help="anchor label assignment scheme")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sequence directory or dataset root")
    p.add_argument("--out", required=True, help="directory for result files")
    p.add_argument("--config", default=None)
    p.add_argument("--modules", choices=MODULE_CHOICES, default=None,
                   help="override the checkpoint's attention-block gates")
    p.add_argument("--no-update", dest="no_update", action="store_true",
                   help="disable template updates")
    p.add_argument("--jobs", type=int, default=1, help="sequence-level parallelism")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracking results against ground truth")
    p.add_argument("--results", required=True, help="directory of result files")
    p.add_argument("--data", required=True, help="dataset directory with ground truth")
    p.add_argument("--out", required=True, help="directory for metric reports")
    p.add_argument("--ablate", default=None, metavar="A,B,...",
                   help="compare named result subdirectories")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 1
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
