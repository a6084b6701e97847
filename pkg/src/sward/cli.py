"""Command-line entry points: synth, pretrain, finetune, eval, predict.

Run configuration comes from an optional JSON file with `model`, `augment`,
`contrastive`, `pretrain` and `finetune` sections; individual flags override
file values.  The fully resolved configuration is persisted next to every
training output.  stdout carries one machine-readable JSON document per
command; progress and diagnostics go to stderr.

Exit codes: 0 success, 2 bad input (missing or malformed file, bad
argument), 3 incompatible checkpoint, 4 empty selection.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .augment import AugmentPolicy
from .data import (
    ImageError,
    ManifestError,
    SCHEMAS,
    SOURCES,
    SPLITS,
    load_manifest,
    load_unlabeled,
    synth_dataset,
)
from .imix import ContrastiveConfig
from .metrics import (
    CompatibilityError,
    EmptySelectionError,
    check_compatible,
    dump_predictions_csv,
    predict_paths,
    predict_records,
    score_predictions,
    select_records,
)
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, TransferError, finetune, pretrain, resolved_config

__all__ = ["main"]

_CONFIG_SECTIONS = ("model", "augment", "contrastive", "pretrain", "finetune")
_TRAIN_FIELDS = ("epochs", "batch_size", "lr", "momentum", "weight_decay", "seed",
                 "composition_w", "mass_w", "height_w", "eval_every")
_PHASE_DEFAULTS = {"pretrain": {"epochs": 20}, "finetune": {"epochs": 40}}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_file_config(path: str | None) -> dict:
    if path is None:
        return {}
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config root must be a JSON object")
    unknown = set(raw) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return raw


def _model_config(file_cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**file_cfg.get("model", {}))
    except TypeError as exc:
        raise ValueError(f"bad model config: {exc}") from None


def _augment_policy(file_cfg: dict, model_cfg: ModelConfig) -> AugmentPolicy:
    section = dict(file_cfg.get("augment", {}))
    if "crop_scale_range" in section:
        section["crop_scale_range"] = tuple(section["crop_scale_range"])
    section.setdefault("output_size", model_cfg.input_size)
    try:
        return AugmentPolicy(**section)
    except TypeError as exc:
        raise ValueError(f"bad augment config: {exc}") from None


def _train_config(phase: str, file_cfg: dict, args: argparse.Namespace) -> TrainConfig:
    section = dict(_PHASE_DEFAULTS[phase])
    section.update(file_cfg.get(phase, {}))
    unknown = set(section) - set(_TRAIN_FIELDS)
    if unknown:
        raise ValueError(f"unknown {phase} config fields {sorted(unknown)}")
    for name in ("epochs", "batch_size", "lr", "momentum", "weight_decay", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            section[name] = value
    contrastive = dict(file_cfg.get("contrastive", {}))
    for name in ("temperature", "alpha"):
        value = getattr(args, name, None)
        if value is not None:
            contrastive[name] = value
    try:
        cc = ContrastiveConfig(**contrastive)
        return TrainConfig(phase=phase, contrastive=cc, **section)
    except TypeError as exc:
        raise ValueError(f"bad {phase} config: {exc}") from None


def _write_train_outputs(out: str, ckpt, log) -> dict:
    out_path = Path(out)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out_path)
    log_path = Path(str(out_path) + ".log.jsonl")
    log.save(log_path)
    cfg_path = Path(str(out_path) + ".config.json")
    cfg_path.write_text(json.dumps(log.config, sort_keys=True, indent=2) + "\n")
    return {"checkpoint": str(out_path), "log": str(log_path), "config": str(cfg_path)}


def _echo_entry(entry) -> None:
    val = "" if entry.val_loss is None else f" val_loss={entry.val_loss:.6f}"
    _log(f"epoch {entry.epoch}: train_loss={entry.train_loss:.6f}{val} ({entry.wall_time_s:.1f}s)")


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args: argparse.Namespace) -> int:
    manifest = synth_dataset(args.labeled, args.unlabeled, args.size, args.seed,
                             args.out, n_val=args.val, n_test=args.test, schema=args.schema)
    _emit({
        "manifest": str(Path(args.out) / "manifest.csv"),
        "unlabeled": str(Path(args.out) / "unlabeled.csv"),
        "labeled_images": len(manifest.records),
        "unlabeled_images": len(manifest.unlabeled_paths),
    })
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    file_cfg = _load_file_config(args.config)
    model_cfg = _model_config(file_cfg)
    policy = _augment_policy(file_cfg, model_cfg)
    train_cfg = _train_config("pretrain", file_cfg, args)
    paths = load_unlabeled(args.unlabeled)
    ckpt, log = pretrain(train_cfg, model_cfg, paths, policy, on_epoch=_echo_entry)
    payload = _write_train_outputs(args.out, ckpt, log)
    payload["final_train_loss"] = log.entries[-1].train_loss
    _emit(payload)
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    file_cfg = _load_file_config(args.config)
    model_cfg = _model_config(file_cfg)
    if model_cfg.n_species != len(SCHEMAS[args.schema]):
        model_cfg = ModelConfig(**{**asdict(model_cfg), "n_species": len(SCHEMAS[args.schema])})
    train_cfg = _train_config("finetune", file_cfg, args)
    manifest = load_manifest(args.manifest, args.schema)
    init = load_checkpoint(args.init) if args.init else None
    ckpt, log = finetune(train_cfg, model_cfg, manifest, init, on_epoch=_echo_entry)
    payload = _write_train_outputs(args.out, ckpt, log)
    payload["final_train_loss"] = log.entries[-1].train_loss
    val_losses = [e.val_loss for e in log.entries if e.val_loss is not None]
    payload["best_val_loss"] = min(val_losses) if val_losses else None
    _emit(payload)
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, args.schema)
    check_compatible(ckpt, args.schema)
    records = select_records(manifest, args.split, args.source)
    preds = predict_records(ckpt, records, batch_size=args.batch_size)
    report = score_predictions(preds, records, args.schema, args.split, args.source)
    stem = Path(args.report)
    if stem.parent != Path(""):
        stem.parent.mkdir(parents=True, exist_ok=True)
    json_path, md_path = report.save(stem)
    csv_path = stem.parent / (stem.name + "_predictions.csv")
    dump_predictions_csv(preds, csv_path, args.schema)
    _log(f"wrote {json_path}, {md_path}, {csv_path}")
    print(report.to_json(), end="")
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pred = predict_paths(ckpt, [args.image])[0]
    species = next(names for names in SCHEMAS.values() if len(names) == ckpt.config.n_species)
    _emit({
        "path": pred.path,
        "composition_pct": {name: float(f) * 100.0 for name, f in zip(species, pred.fractions)},
        "mass_kg_dm_ha": pred.total_mass,
        "height_cm": pred.height,
    })
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sward",
                                     description="Sward composition, herbage mass and height from canopy images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--labeled", type=int, default=52, help="train images")
    p.add_argument("--val", type=int, default=0, help="val images")
    p.add_argument("--test", type=int, default=0, help="test images")
    p.add_argument("--unlabeled", type=int, default=0, help="unlabeled images")
    p.add_argument("--size", type=int, default=32, help="image side in px")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", choices=sorted(SCHEMAS), default="irish3")
    p.set_defaults(func=_cmd_synth)

    def train_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)

    p = sub.add_parser("pretrain", help="contrastive pretraining on unlabeled images")
    p.add_argument("--unlabeled", required=True, help="unlabeled path CSV")
    p.add_argument("--out", required=True, help="checkpoint output path")
    train_flags(p)
    p.add_argument("--temperature", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning on a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--schema", choices=sorted(SCHEMAS), default="irish3")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--init", help="pretrained checkpoint to transfer from")
    train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--schema", choices=sorted(SCHEMAS), default="irish3")
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--source", choices=SOURCES, default=None,
                   help="restrict to one capture source")
    p.add_argument("--report", default="report", help="output stem for .json/.md/_predictions.csv")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict composition, mass and height for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=_cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EmptySelectionError as exc:
        _log(f"error: {exc}")
        return 4
    except (TransferError, CompatibilityError) as exc:
        _log(f"error: {exc}")
        return 3
    except (ManifestError, ImageError, CheckpointError, OSError,
            ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
