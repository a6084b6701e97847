"""Contrastive pretraining on unlabeled images with input mixing.

Each step draws two augmented views per image.  The first view-stream is
mixed across the batch (per-sample Beta weights over a random permutation)
and the second stays unmixed, serving as positives.  Anchor/positive
projections are compared with temperature-scaled inner products over the
whole batch, and the cross-entropy target for anchor i is its mixing
weights: `lam[i]` on column i and `1 - lam[i]` on column perm[i].  With all
weights at 1 this reduces to the plain N-pair loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import AugmentPolicy, mixup, two_views
from .model import project_forward, trunk_forward
from .rng import Rng
from .tensor import (
    Tape,
    Tensor,
    backward,
    log_softmax,
    matmul,
    mul,
    reduce_sum,
    scale,
    transpose,
)

__all__ = ["ContrastiveConfig", "npair_logits", "imix_loss", "pretrain_step"]


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.2
    alpha: float = 1.0
    batch_size: int = 16

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")


def npair_logits(anchors: Tensor, positives: Tensor, temperature: float,
                 tape: Tape | None = None) -> Tensor:
    """Pairwise similarity logits: ``anchors @ positives.T / temperature``.

    Both inputs must be row-normalized (checked to 1e-3); row i of the
    result scores anchor i against every positive in the batch.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if anchors.data.shape != positives.data.shape:
        raise ValueError(f"shape mismatch {anchors.data.shape} vs {positives.data.shape}")
    if anchors.data.ndim != 2 or anchors.data.shape[0] < 2:
        raise ValueError(f"expected (B >= 2, D) features, got {anchors.data.shape}")
    for name, t in (("anchors", anchors), ("positives", positives)):
        norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=1))
        worst = float(np.abs(norms - 1.0).max())
        if worst > 1e-3:
            raise ValueError(f"{name} rows are not unit-norm (max deviation {worst:.2e})")
    sims = matmul(anchors, transpose(positives, tape=tape), tape=tape)
    return scale(sims, 1.0 / float(temperature), tape=tape)


def imix_loss(logits: Tensor, virtual_labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean cross-entropy between row softmaxes and virtual label rows."""
    b, k = logits.data.shape
    labels = np.asarray(virtual_labels, dtype=np.float64)
    if labels.shape != (b, k):
        raise ValueError(f"virtual_labels shape {labels.shape} does not match logits {logits.data.shape}")
    row_sums = labels.sum(axis=1)
    worst = float(np.abs(row_sums - 1.0).max())
    if worst > 1e-4:
        raise ValueError(f"virtual label rows must sum to 1 (max deviation {worst:.2e})")
    log_probs = log_softmax(logits, tape=tape)
    weighted = mul(log_probs, Tensor(labels.astype(logits.data.dtype)), tape=tape)
    return scale(reduce_sum(weighted, tape=tape), -1.0 / b, tape=tape)


def pretrain_step(params: dict[str, Tensor], batch: np.ndarray, policy: AugmentPolicy,
                  config: ContrastiveConfig, rng: Rng) -> tuple[float, dict[str, np.ndarray]]:
    """One contrastive step over a raw image batch.

    `params` holds the trunk and projection tensors (every entry must take
    part in the loss).  Returns the loss value and fresh gradient arrays;
    the caller owns the update.  Augmentation and mixing randomness derive
    from per-sample children of `rng`, so results do not depend on how the
    batch was assembled.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[0] < 2:
        raise ValueError(f"expected a (B >= 2, C, H, W) batch, got {batch.shape}")

    firsts, seconds = [], []
    for i in range(batch.shape[0]):
        v1, v2 = two_views(batch[i], policy, rng.child(0, i))
        firsts.append(v1)
        seconds.append(v2)
    mix = mixup(np.stack(firsts), config.alpha, rng.child(1))

    for p in params.values():
        p.grad = None
    tape = Tape()
    anchors = project_forward(params, trunk_forward(params, Tensor(mix.mixed_batch), tape), tape)
    positives = project_forward(params, trunk_forward(params, Tensor(np.stack(seconds)), tape), tape)
    logits = npair_logits(anchors, positives, config.temperature, tape)
    loss = imix_loss(logits, mix.virtual_labels, tape)
    backward(loss, tape)

    grads = {name: p.grad for name, p in params.items()}
    missing = [name for name, g in grads.items() if g is None]
    if missing:
        raise ValueError(f"parameters did not receive gradients: {missing}")
    return loss.item(), grads
