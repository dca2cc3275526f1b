"""Per-sample test-time training on masked reconstruction.

Each test spectrogram gets a private trainable copy of the encoder and a fresh
SGD-momentum state. The decoder and head are read through non-trainable
views, so the canonical parameters are never written during adaptation.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import DEPRESSED, Confusion, macro_f, majority_vote
from .model import (
    MaskBatch,
    ModelParams,
    classify_batch,
    frozen_group,
    make_mask_plan,
    private_group,
    reconstruction_loss,
)
from .training import SgdMomentumState, sgd_momentum_step


@dataclass(frozen=True)
class TttConfig:
    steps: int = 20
    views_per_batch: int = 128
    lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 0.2
    mask_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.views_per_batch < 1:
            raise ValueError("views_per_batch must be >= 1")


@dataclass
class AdaptationTrace:
    losses: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses)


def sample_seed(run_seed: int, sample_id: str) -> np.random.SeedSequence:
    """Per-sample RNG seed, independent of evaluation order."""
    return np.random.SeedSequence([int(run_seed) & 0xFFFFFFFF, zlib.crc32(sample_id.encode())])


def _adapt_iter(patches: np.ndarray, params: ModelParams, cfg: TttConfig,
                sample_id: str) -> Iterator[tuple[int, ModelParams, float | None]]:
    """Yield ``(step, adapted_model, loss)`` after every step, starting at step 0."""
    dtype = params.encoder["patch_w"].dtype
    x = np.asarray(patches, dtype=dtype)
    n_patches = x.shape[0]
    encoder = private_group(params.encoder)
    model = params.with_groups(encoder=encoder, decoder=frozen_group(params.decoder),
                               head=frozen_group(params.head))
    trainable = list(encoder.values())
    state = SgdMomentumState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(sample_seed(cfg.seed, sample_id))
    views = np.broadcast_to(x, (cfg.views_per_batch,) + x.shape)
    yield 0, model, None
    for step in range(1, cfg.steps + 1):
        plans = MaskBatch.stack([make_mask_plan(n_patches, cfg.mask_ratio, rng)
                                 for _ in range(cfg.views_per_batch)])
        for p in trainable:
            p.grad = None
        with ad.Tape() as tape:
            loss = reconstruction_loss(views, plans, model)
        tape.backward(loss)
        sgd_momentum_step(trainable, state)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite TTT loss at step {step} for sample {sample_id!r}")
        yield step, model, value


def ttt_adapt(patches: np.ndarray, params: ModelParams, cfg: TttConfig,
              sample_id: str = "") -> tuple[dict, AdaptationTrace]:
    """Adapt a private encoder copy on one sample.

    Returns the adapted encoder group and the per-step reconstruction loss
    (averaged over the mask views of that step).
    """
    trace = AdaptationTrace()
    model = None
    for _, model, loss in _adapt_iter(patches, params, cfg, sample_id):
        if loss is not None:
            trace.losses.append(loss)
    return model.encoder, trace


def ttt_predict(patches: np.ndarray, params: ModelParams, cfg: TttConfig,
                sample_id: str = "") -> tuple[np.ndarray, AdaptationTrace]:
    """Adapt, classify with the adapted encoder and original head, then discard
    the adapted weights. Returns class probabilities and the trace."""
    encoder, trace = ttt_adapt(patches, params, cfg, sample_id)
    model = params.with_groups(encoder=encoder)
    return classify_batch(patches, model)[0], trace


def ttt_predict_checkpoints(patches: np.ndarray, params: ModelParams, cfg: TttConfig,
                            checkpoints: Sequence[int],
                            sample_id: str = "") -> tuple[dict[int, np.ndarray], AdaptationTrace]:
    """One adaptation pass, classifying whenever the step count hits a checkpoint."""
    checkpoints = list(checkpoints)
    if checkpoints != sorted(checkpoints) or len(set(checkpoints)) != len(checkpoints):
        raise ValueError(f"checkpoints must be strictly ascending, got {checkpoints}")
    if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > cfg.steps):
        raise ValueError(f"checkpoints must lie in [0, {cfg.steps}]")
    wanted = set(checkpoints)
    last = checkpoints[-1] if checkpoints else 0
    run_cfg = TttConfig(**{**cfg.__dict__, "steps": last})
    probs: dict[int, np.ndarray] = {}
    trace = AdaptationTrace()
    for step, model, loss in _adapt_iter(patches, params, run_cfg, sample_id):
        if loss is not None:
            trace.losses.append(loss)
        if step in wanted:
            probs[step] = classify_batch(patches, model)[0]
    return probs, trace


@dataclass(frozen=True)
class TestRecording:
    __test__ = False  # not a pytest class despite the name

    id: str
    label: int
    segments: Sequence[np.ndarray]  # patchified spectrograms, one per segment


def segment_id(recording_id: str, k: int) -> str:
    return f"{recording_id}#{k}"


@dataclass(frozen=True)
class SweepRow:
    steps: int
    macro_f: float
    f1_healthy: float
    f1_depressed: float


def sweep_steps(test_set: Sequence[TestRecording], params: ModelParams, cfg: TttConfig,
                checkpoints: Sequence[int]) -> list[SweepRow]:
    """Macro-F of the TTT pipeline at each checkpoint step count.

    Every segment is adapted once up to the largest checkpoint; predictions
    are taken along the way and majority-voted per recording.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("no checkpoints given")
    if checkpoints != sorted(checkpoints):
        raise ValueError(f"checkpoints must be sorted ascending, got {checkpoints}")
    if checkpoints[-1] > cfg.steps:
        raise ValueError(f"checkpoint {checkpoints[-1]} exceeds cfg.steps={cfg.steps}")
    uniq = sorted(set(checkpoints))
    votes: dict[int, list[int]] = {c: [] for c in uniq}
    labels = []
    for rec in test_set:
        labels.append(rec.label)
        per_step: dict[int, list[np.ndarray]] = {c: [] for c in uniq}
        for k, seg in enumerate(rec.segments):
            probs, _ = ttt_predict_checkpoints(seg, params, cfg, uniq, segment_id(rec.id, k))
            for c in uniq:
                per_step[c].append(probs[c])
        for c in uniq:
            votes[c].append(vote_probs(per_step[c]))
    rows = []
    for c in checkpoints:
        m = macro_f(Confusion.from_pairs(labels, votes[c]))
        rows.append(SweepRow(c, m.macro_f, m.f1_healthy, m.f1_depressed))
    return rows


def vote_probs(segment_probs: Sequence[np.ndarray]) -> int:
    """Hard-label majority vote over per-segment probability vectors."""
    preds = [int(np.argmax(p)) for p in segment_probs]
    return majority_vote(preds, [float(p[DEPRESSED]) for p in segment_probs])
