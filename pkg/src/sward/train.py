"""Training loops: contrastive pretraining, supervised fine-tuning, transfer.

Both phases share TrainConfig; `phase` picks the entry point.  Fine-tuning
minimizes a weighted sum of RMSE terms (composition fractions, normalized
mass, normalized height) and keeps the parameters from the best validation
epoch.  Epoch logs serialize to JSONL; wall-clock seconds are tracked in
memory but never written, so repeated runs produce byte-identical logs.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentPolicy, resize_bilinear
from .data import Manifest, SampleRecord, compute_norm_stats, decode_image, SCHEMAS
from .imix import ContrastiveConfig, pretrain_step
from .model import (
    Checkpoint,
    ModelConfig,
    build,
    composition_forward,
    scalars_forward,
    tensors_to_arrays,
    trunk_forward,
    trunk_param_names,
)
from .optim import SgdMomentum
from .rng import Rng
from .tensor import Tape, Tensor, add, backward, reduce_mean, scale, slice_cols, sqrt, sub, mul

__all__ = [
    "TrainConfig",
    "EpochEntry",
    "TrainLog",
    "TransferError",
    "rmse_objective",
    "transfer_weights",
    "pretrain",
    "finetune",
]

PHASES = ("pretrain", "finetune")


class TransferError(ValueError):
    """Trunk mismatch between a pretrained checkpoint and a target config."""

    def __init__(self, param: str, message: str):
        super().__init__(message)
        self.param = param


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    composition_w: float = 1.0
    mass_w: float = 1.0
    height_w: float = 1.0
    eval_every: int = 1

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.phase == "pretrain" and self.batch_size < 2:
            raise ValueError("pretraining needs batch_size >= 2")
        if min(self.composition_w, self.mass_w, self.height_w) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.composition_w + self.mass_w + self.height_w == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class EpochEntry:
    epoch: int
    train_loss: float
    val_loss: float | None
    wall_time_s: float
    seed: int
    config_hash: str


@dataclass
class TrainLog:
    config: dict
    config_hash: str
    entries: list[EpochEntry] = field(default_factory=list)

    def to_jsonl(self) -> str:
        # wall_time_s is deliberately left out so logs are byte-stable.
        lines = [json.dumps({"config": self.config, "config_hash": self.config_hash},
                            sort_keys=True, separators=(",", ":"))]
        for e in self.entries:
            lines.append(json.dumps(
                {"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss,
                 "seed": e.seed, "config_hash": e.config_hash},
                sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def resolved_config(train_cfg: TrainConfig, model_cfg: ModelConfig,
                    policy: AugmentPolicy | None = None) -> dict:
    cfg = asdict(train_cfg)
    cfg["model"] = asdict(model_cfg)
    if policy is not None:
        cfg["augment"] = asdict(policy)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# objectives


def rmse_objective(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    """Root mean square error over all entries of equally shaped tensors."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"rmse_objective: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = sub(pred, target, tape)
    return sqrt(reduce_mean(mul(diff, diff, tape), tape), tape)


# ---------------------------------------------------------------------------
# transfer


def transfer_weights(pretrained: Checkpoint, target_config: ModelConfig, seed: int) -> Checkpoint:
    """Carry the trunk over; drop the projection head; reseed other heads.

    Head arity changes (for example 4-species pretraining into 3-species
    fine-tuning) are handled by the reseeding.  Trunk parameters must match
    by name and shape; the first mismatch raises TransferError.
    """
    target = build(target_config, seed)
    trunk = set(trunk_param_names(target_config))
    params: dict[str, np.ndarray] = {}
    for name, fresh in target.params.items():
        if name.startswith("proj"):
            continue
        if name in trunk:
            if name not in pretrained.params:
                raise TransferError(name, f"pretrained checkpoint lacks trunk parameter {name!r}")
            have = pretrained.params[name]
            if have.shape != fresh.shape:
                raise TransferError(
                    name, f"trunk parameter {name!r}: pretrained shape {have.shape} vs target {fresh.shape}")
            params[name] = have.copy()
        else:
            params[name] = fresh
    return Checkpoint(config=target_config, params=params, provenance=pretrained.provenance,
                      seed=int(seed))


# ---------------------------------------------------------------------------
# pretraining


def _load_images(paths: Sequence[str], channels: int) -> list[np.ndarray]:
    images = []
    for p in paths:
        img = decode_image(p)
        if img.shape[0] != channels:
            raise ValueError(f"{p}: has {img.shape[0]} channels, model expects {channels}")
        images.append(img)
    return images


def pretrain(train_cfg: TrainConfig, model_cfg: ModelConfig, unlabeled_paths: Sequence[str],
             policy: AugmentPolicy | None = None,
             on_epoch: Callable[[EpochEntry], None] | None = None) -> tuple[Checkpoint, TrainLog]:
    """Contrastive pretraining of trunk + projection on unlabeled images.

    All images must share one resolution.  The step batch size comes from
    `train_cfg.batch_size`; trailing partial batches below 2 samples are
    skipped (mixing needs at least a pair).
    """
    if train_cfg.phase != "pretrain":
        raise ValueError(f"expected phase 'pretrain', got {train_cfg.phase!r}")
    if not unlabeled_paths:
        raise ValueError("no unlabeled images to pretrain on")
    if policy is None:
        policy = AugmentPolicy(output_size=model_cfg.input_size)
    if policy.output_size != model_cfg.input_size:
        raise ValueError(f"augment output_size {policy.output_size} != model input_size {model_cfg.input_size}")
    contrastive = replace(train_cfg.contrastive, batch_size=train_cfg.batch_size)

    images = _load_images(unlabeled_paths, model_cfg.input_channels)
    sizes = {img.shape[1:] for img in images}
    if len(sizes) > 1:
        raise ValueError(f"unlabeled images must share one resolution, got {sorted(sizes)}")

    init = build(model_cfg, train_cfg.seed)
    names = trunk_param_names(model_cfg) + ["proj1.weight", "proj1.bias", "proj2.weight", "proj2.bias"]
    params = {n: Tensor(init.params[n].copy(), requires_grad=True) for n in names}
    opt = SgdMomentum(params, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)

    cfg = resolved_config(train_cfg, model_cfg, policy)
    h = config_hash(cfg)
    log = TrainLog(config=cfg, config_hash=h)
    root = Rng(train_cfg.seed)
    n = len(images)
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.monotonic()
        order = root.child(1, epoch).permutation(n)
        losses: list[float] = []
        for step, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            if idx.size < 2:
                continue
            batch = np.stack([images[i] for i in idx])
            loss, _ = pretrain_step(params, batch, policy, contrastive, root.child(2, epoch, step))
            opt.step()
            losses.append(loss)
        entry = EpochEntry(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=None,
                           wall_time_s=time.monotonic() - t0, seed=train_cfg.seed, config_hash=h)
        log.entries.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    ckpt = Checkpoint(config=model_cfg, params=tensors_to_arrays(params),
                      provenance="imix_pretrained", seed=train_cfg.seed)
    return ckpt, log


# ---------------------------------------------------------------------------
# fine-tuning


def _load_batch_array(records: Sequence[SampleRecord], model_cfg: ModelConfig) -> np.ndarray:
    images = _load_images([r.image_path for r in records], model_cfg.input_channels)
    s = model_cfg.input_size
    return np.stack([img if img.shape[1:] == (s, s) else resize_bilinear(img, s, s) for img in images])


def _forward_loss(params: dict[str, Tensor], x: np.ndarray, frac_t: np.ndarray,
                  mass_t: np.ndarray | None, height_t: np.ndarray | None,
                  cfg: TrainConfig, tape: Tape | None) -> Tensor:
    emb = trunk_forward(params, Tensor(x), tape)
    frac = composition_forward(params, emb, tape)
    loss = scale(rmse_objective(frac, Tensor(frac_t), tape), cfg.composition_w, tape)
    if mass_t is not None or height_t is not None:
        sc = scalars_forward(params, emb, tape)
        if mass_t is not None:
            term = rmse_objective(slice_cols(sc, 0, 1, tape), Tensor(mass_t[:, None]), tape)
            loss = add(loss, scale(term, cfg.mass_w, tape), tape)
        if height_t is not None:
            term = rmse_objective(slice_cols(sc, 1, 2, tape), Tensor(height_t[:, None]), tape)
            loss = add(loss, scale(term, cfg.height_w, tape), tape)
    return loss


def finetune(train_cfg: TrainConfig, model_cfg: ModelConfig, manifest: Manifest,
             init: Checkpoint | None = None,
             on_epoch: Callable[[EpochEntry], None] | None = None) -> tuple[Checkpoint, TrainLog]:
    """Supervised fine-tuning against manifest targets.

    Starts from `init` (trunk transferred, heads reseeded) or from scratch.
    Scalar heads join the objective only when their loss weight is positive
    and the manifest provides mass/height; with both weights at zero the
    scalar head keeps its initialization bit for bit.  Returns the
    parameters of the best validation epoch (final epoch when there is no
    val split).
    """
    if train_cfg.phase != "finetune":
        raise ValueError(f"expected phase 'finetune', got {train_cfg.phase!r}")
    species = SCHEMAS[manifest.schema]
    if len(species) != model_cfg.n_species:
        raise ValueError(f"schema {manifest.schema!r} has {len(species)} species, model expects {model_cfg.n_species}")
    train_records = manifest.split("train")
    if not train_records:
        raise ValueError("empty train split")
    val_records = manifest.split("val")

    has_scalar_targets = all(r.mass is not None and r.height is not None for r in train_records)
    head_active = model_cfg.predict_scalars and (train_cfg.mass_w > 0 or train_cfg.height_w > 0)
    if head_active and not has_scalar_targets:
        raise ValueError("scalar loss weights are positive but the manifest lacks mass/height targets")
    stats = compute_norm_stats(manifest) if (model_cfg.predict_scalars and has_scalar_targets) else None

    start = transfer_weights(init, model_cfg, train_cfg.seed) if init is not None else build(model_cfg, train_cfg.seed)
    params = {n: Tensor(a.copy(), requires_grad=True) for n, a in start.params.items()
              if not n.startswith("proj")}
    trainable = {n: t for n, t in params.items() if head_active or not n.startswith("scalar")}
    opt = SgdMomentum(trainable, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)

    train_x = _load_batch_array(train_records, model_cfg)
    train_frac = np.stack([r.fractions for r in train_records]).astype(np.float32)
    mass_t = height_t = None
    if head_active:
        if train_cfg.mass_w > 0:
            mass_t = stats.normalize_mass([r.mass for r in train_records]).astype(np.float32)
        if train_cfg.height_w > 0:
            height_t = stats.normalize_height([r.height for r in train_records]).astype(np.float32)
    if val_records:
        val_x = _load_batch_array(val_records, model_cfg)
        val_frac = np.stack([r.fractions for r in val_records]).astype(np.float32)
        val_mass = stats.normalize_mass([r.mass for r in val_records]).astype(np.float32) \
            if mass_t is not None else None
        val_height = stats.normalize_height([r.height for r in val_records]).astype(np.float32) \
            if height_t is not None else None

    cfg = resolved_config(train_cfg, model_cfg)
    h = config_hash(cfg)
    log = TrainLog(config=cfg, config_hash=h)
    root = Rng(train_cfg.seed)
    n = len(train_records)
    best_val = np.inf
    best_params = tensors_to_arrays(params)
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.monotonic()
        order = root.child(1, epoch).permutation(n)
        losses: list[float] = []
        for start_i in range(0, n, train_cfg.batch_size):
            idx = order[start_i:start_i + train_cfg.batch_size]
            opt.zero_grad()
            tape = Tape()
            loss = _forward_loss(params, train_x[idx], train_frac[idx],
                                 None if mass_t is None else mass_t[idx],
                                 None if height_t is None else height_t[idx],
                                 train_cfg, tape)
            backward(loss, tape)
            opt.step()
            losses.append(loss.item())

        val_loss = None
        if val_records and (epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs):
            val_loss = _forward_loss(params, val_x, val_frac, val_mass, val_height,
                                     train_cfg, None).item()
            if val_loss < best_val:
                best_val = val_loss
                best_params = tensors_to_arrays(params)
        entry = EpochEntry(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss,
                           wall_time_s=time.monotonic() - t0, seed=train_cfg.seed, config_hash=h)
        log.entries.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    if not val_records:
        best_params = tensors_to_arrays(params)
    ckpt = Checkpoint(config=model_cfg, params=best_params, provenance="finetuned",
                      seed=train_cfg.seed, norm_stats=stats)
    return ckpt, log
