"""Optimizers, MAE pretraining, and probe training (frozen or fine-tuned encoder)."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    MaskBatch,
    ModelParams,
    atomic_write_bytes,
    frozen_group,
    head_log_probs,
    make_mask_plan,
    pooled_features,
    reconstruction_loss,
)

log = logging.getLogger(__name__)


class OptimizerError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""


def _require_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            raise OptimizerError(f"missing gradient for parameter {p.name or p.shape}")
        if p.grad.shape != p.shape:
            raise OptimizerError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {p.name}")


@dataclass
class AdamState:
    """Adam with decoupled weight decay (applied before the moment update)."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    _require_grads(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise OptimizerError("parameter group changed size between steps")
    state.t += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - state.lr * state.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (state.lr / bc1) * m / denom


@dataclass
class SgdMomentumState:
    """SGD with momentum; weight decay is added to the gradient."""

    lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_momentum_step(params: Sequence[Tensor], state: SgdMomentumState) -> None:
    _require_grads(params)
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise OptimizerError("parameter group changed size between steps")
    for p, buf in zip(params, state.velocity):
        buf *= state.momentum
        buf += p.grad
        if state.weight_decay:
            buf += state.weight_decay * p.data
        p.data -= state.lr * buf


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    mask_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("pretraining steps must be >= 0 and batch_size/lr positive")


def write_loss_csv(path, losses: Sequence[float]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(losses, start=1):
        w.writerow([i, repr(float(v))])
    atomic_write_bytes(path, buf.getvalue().encode())


# --------------------------------------------------------------- pretraining


def pretrain_mae(corpus: Sequence[np.ndarray], params: ModelParams, cfg: PretrainConfig) -> list[float]:
    """Masked-reconstruction training of encoder and decoder with Adam.

    ``corpus`` holds patchified spectrograms of equal shape (P, patch_len).
    Each step draws a batch with replacement and a fresh mask per item. The
    head is never touched. Returns the per-step losses.
    """
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    data = np.stack([np.asarray(c) for c in corpus]).astype(params.encoder["patch_w"].dtype)
    rng = np.random.default_rng(cfg.seed)
    trainable = params.parameters("encoder", "decoder")
    model = params.with_groups(head=frozen_group(params.head))
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n_patches = data.shape[1]
    losses = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        plans = MaskBatch.stack([make_mask_plan(n_patches, cfg.mask_ratio, rng) for _ in idx])
        for p in trainable:
            p.grad = None
        with ad.Tape() as tape:
            loss = reconstruction_loss(data[idx], plans, model)
        tape.backward(loss)
        adam_step(trainable, state)
        losses.append(loss.item())
        if (step + 1) % 50 == 0:
            log.info("pretrain step %d loss %.4f", step + 1, losses[-1])
    return losses


# ------------------------------------------------------------ probe training


@dataclass
class ProbeResult:
    step_losses: list[float]
    epoch_losses: list[float]
    # how many training items of each group label went through a batch
    group_counts: Counter = field(default_factory=Counter)


def extract_features(patches: np.ndarray, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Pooled encoder features for (N, P, patch_len) inputs, no gradients."""
    enc_only = params.with_groups(encoder=frozen_group(params.encoder))
    dtype = params.encoder["patch_w"].dtype
    out = [pooled_features(patches[i:i + batch_size].astype(dtype, copy=False), enc_only).data
           for i in range(0, len(patches), batch_size)]
    return np.concatenate(out, axis=0)


def train_probe(
    patches: np.ndarray,
    labels: Sequence[int],
    params: ModelParams,
    cfg: TrainConfig = TrainConfig(),
    finetune_encoder: bool = False,
    groups: Sequence[Hashable] | None = None,
) -> ProbeResult:
    """Fit the classification head by NLL with Adam.

    With ``finetune_encoder`` false the encoder is a fixed feature extractor
    and its pooled features are computed once. The decoder is never updated.
    ``groups`` (e.g. speaker gender per item) feeds the audit counter in the
    result, which records every item that entered a training batch.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("probe training set is empty")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (healthy) or 1 (depressed)")
    labels = labels.astype(np.intp)
    patches = np.asarray(patches)
    if len(patches) != len(labels):
        raise ValueError(f"{len(patches)} inputs but {len(labels)} labels")
    if groups is not None and len(groups) != len(labels):
        raise ValueError("groups must align with labels")

    head_params = params.parameters("head")
    if finetune_encoder:
        trainable = params.parameters("encoder") + head_params
        model = params.with_groups(decoder=frozen_group(params.decoder))
        feats = None
    else:
        trainable = head_params
        model = params.with_groups(encoder=frozen_group(params.encoder), decoder=frozen_group(params.decoder))
        feats = extract_features(patches, params)

    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    dtype = params.encoder["patch_w"].dtype
    result = ProbeResult([], [])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if groups is not None:
                result.group_counts.update(groups[i] for i in idx)
            for p in trainable:
                p.grad = None
            with ad.Tape() as tape:
                if feats is None:
                    f = pooled_features(patches[idx].astype(dtype, copy=False), model)
                else:
                    f = Tensor(feats[idx])
                loss = ad.nll_loss(head_log_probs(f, model), labels[idx])
            tape.backward(loss)
            adam_step(trainable, state)
            result.step_losses.append(loss.item())
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)
        result.epoch_losses.append(epoch_loss / seen)
        log.info("probe epoch %d nll %.4f", epoch + 1, result.epoch_losses[-1])
    return result
