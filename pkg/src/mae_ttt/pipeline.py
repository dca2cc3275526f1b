"""Stage functions shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import FrontendConfig
from .harness import (
    ManifestEntry,
    EvalReport,
    ProtocolResult,
    ShiftSpec,
    build_report,
    flatten_segments,
    load_recordings,
    normalization_stats,
    predict_recordings,
    run_protocol,
    split_groups,
)
from .model import ModelParams, PatchConfig
from .training import PretrainConfig, ProbeResult, TrainConfig, pretrain_mae, train_probe
from .ttt import SweepRow, TttConfig, sweep_steps

log = logging.getLogger(__name__)


@dataclass
class Pretrained:
    params: ModelParams
    frontend: FrontendConfig
    losses: list[float]


def pretrain_stage(entries: Sequence[ManifestEntry], root, frontend: FrontendConfig, patch: PatchConfig,
                   cfg: PretrainConfig, init_seed: int = 0) -> Pretrained:
    """Fit normalization statistics and pretrain the MAE on clean training audio."""
    train = [e for e in entries if e.split == "train"]
    if not train:
        raise ValueError("manifest has no training recordings")
    mean, std = normalization_stats(train, root, frontend)
    frontend = replace(frontend, norm_mean=mean, norm_std=std)
    recs = load_recordings(train, root, frontend, patch)
    x, _, _ = flatten_segments(recs)
    params = ModelParams.init(patch, seed=init_seed)
    losses = pretrain_mae(list(x), params, cfg)
    return Pretrained(params, frontend, losses)


def probe_stage(entries: Sequence[ManifestEntry], root, params: ModelParams, frontend: FrontendConfig,
                cfg: TrainConfig, finetune_encoder: bool = False,
                dataset_tag: str | None = None) -> ProbeResult:
    """Train the head (and optionally the encoder) on the clean training split in place."""
    train, _ = split_groups(entries, ShiftSpec("clean", train_group=dataset_tag))
    recs = load_recordings(train, root, frontend, params.cfg)
    x, y, _ = flatten_segments(recs)
    return train_probe(x, y, params, cfg, finetune_encoder=finetune_encoder)


def validation_report(entries, root, params, frontend, seed: int = 0) -> EvalReport:
    """Frozen-pipeline macro-F on the clean validation split."""
    val = [e for e in entries if e.split == "validation"]
    if not val:
        raise ValueError("manifest has no validation recordings")
    recs = load_recordings(val, root, frontend, params.cfg)
    y_pred = predict_recordings(recs, params, "frozen")
    return build_report([r.label for r in recs], y_pred, ShiftSpec("clean"), "frozen", seed)


def evaluate(entries, root, params, frontend, spec: ShiftSpec, mode: str, ttt_cfg: TttConfig | None = None,
             train_cfg: TrainConfig | None = None, seed: int = 0) -> ProtocolResult:
    return run_protocol(entries, spec, params, frontend, root, mode=mode, ttt_cfg=ttt_cfg,
                        train_cfg=train_cfg, seed=seed)


def sweep(entries, root, params, frontend, spec: ShiftSpec, ttt_cfg: TttConfig,
          checkpoints: Sequence[int], seed: int = 0) -> list[SweepRow]:
    if spec.kind in ("gender_cross", "dataset_cross"):
        raise ValueError("step sweeps run on clean/noise shifts")
    _, test = split_groups(entries, spec)
    recs = load_recordings(test, root, frontend, params.cfg, shift=spec, seed=seed)
    return sweep_steps(recs, params, ttt_cfg, checkpoints)
