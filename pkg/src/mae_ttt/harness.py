"""Synthetic corpus, shift application and the evaluation protocols.

The corpus stands in for clinical speech: each recording is a harmonic
carrier whose amplitude-modulation rate, fundamental and formant resonance
depend on the class. The fundamental also depends on speaker gender, while
spectral tilt, envelope shape and breath colour depend on the dataset tag. Shifts are applied to test audio
only; gender and dataset shifts are realized by filtering the manifest.
"""

from __future__ import annotations

import csv
import io
import logging
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .audio import (
    SAMPLE_RATE,
    FrontendConfig,
    Waveform,
    load_wav,
    log_mel,
    mix_at_snr,
    power,
    segment_waveform,
    to_pcm16,
    write_wav,
)
from .metrics import LABEL_NAMES, Confusion, bootstrap_ci, macro_f
from .model import ModelParams, classify_batch, crop_frames, patchify, private_group
from .training import TrainConfig, train_probe
from .ttt import TestRecording, TttConfig, segment_id, ttt_predict, vote_probs

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
GENDERS = ("F", "M")
MANIFEST_FIELDS = ("id", "path", "label", "gender", "dataset_tag", "split")
NOISE_TYPES = ("awgn", "hum", "babble_like", "reverb")
SHIFT_KINDS = ("clean", "noise", "gender_cross", "dataset_cross")


class ProtocolError(RuntimeError):
    pass


# ----------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: str
    gender: str
    dataset_tag: str
    split: str

    def __post_init__(self):
        if self.label not in LABEL_NAMES:
            raise ValueError(f"{self.id}: label {self.label!r} not in {LABEL_NAMES}")
        if self.gender not in GENDERS:
            raise ValueError(f"{self.id}: gender {self.gender!r} not in {GENDERS}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: split {self.split!r} not in {SPLITS}")

    @property
    def label_index(self) -> int:
        return LABEL_NAMES.index(self.label)


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    from .model import atomic_write_bytes

    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest ids must be unique")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    for e in entries:
        w.writerow([getattr(e, f) for f in MANIFEST_FIELDS])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        entries = [ManifestEntry(**row) for row in reader]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate ids in manifest")
    return entries


# ------------------------------------------------------------ synthesis


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 64
    n_validation: int = 8
    n_test: int = 32
    duration: float = 7.0
    dataset_tags: tuple[str, ...] = ("corpus_a", "corpus_b")
    # class-conditional carrier: (healthy, depressed)
    f0_class_factor: tuple[float, float] = (1.0, 0.85)
    formant_hz: tuple[float, float] = (1400.0, 700.0)
    formant_gain_db: float = 15.0
    am_rate_hz: tuple[float, float] = (5.0, 2.0)
    am_depth: float = 0.9
    # speaker fundamentals by gender
    f0_hz: tuple[float, float] = (210.0, 120.0)
    # per-tag spectral tilt in dB/octave (same order as dataset_tags)
    tilt_db_per_octave: tuple[float, ...] = (-6.0, -12.0)
    jitter: float = 0.05
    # envelope-following broadband (aspiration-like) component, dB re. the carrier
    breath_db: float = -15.0
    floor_snr_db: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.am_rate_hz[0] == self.am_rate_hz[1] and self.f0_class_factor[0] == self.f0_class_factor[1]:
            raise ValueError("classes must differ in AM rate or fundamental (class separation > 0)")
        if len(self.tilt_db_per_octave) != len(self.dataset_tags):
            raise ValueError("one spectral tilt per dataset tag is required")
        if min(self.n_train, self.n_test) < 0 or self.duration <= 0:
            raise ValueError("counts must be >= 0 and duration positive")


def _envelope(t: np.ndarray, rate: float, depth: float, family: int, phase: float) -> np.ndarray:
    c = 0.5 + 0.5 * np.cos(2 * np.pi * rate * t + phase)
    if family % 2 == 0:
        shape = c
    else:
        # sharper syllable-like pulses
        shape = c**3
    return 1.0 - depth + depth * shape


def synth_recording(label: int, gender: str, tag_index: int, cfg: SynthConfig, rng: np.random.Generator) -> Waveform:
    n = int(round(cfg.duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = cfg.f0_hz[GENDERS.index(gender)] * cfg.f0_class_factor[label] * (1 + cfg.jitter * rng.standard_normal())
    rate = cfg.am_rate_hz[label] * (1 + cfg.jitter * rng.uniform(-1, 1))
    drift = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi))
    phase_inc = 2 * np.pi * f0 * drift / SAMPLE_RATE
    base_phase = np.cumsum(phase_inc)
    tilt = cfg.tilt_db_per_octave[tag_index]
    formant = cfg.formant_hz[label] * (1 + cfg.jitter * rng.standard_normal())
    carrier = np.zeros(n)
    k_max = int(4000 // f0)
    for k in range(1, k_max + 1):
        fk = k * f0
        resonance = cfg.formant_gain_db * np.exp(-0.5 * (np.log2(fk / formant) / 0.35) ** 2)
        amp = 10 ** ((tilt * np.log2(k) + resonance) / 20) * (1 + 0.1 * rng.standard_normal())
        carrier += amp * np.sin(k * base_phase + rng.uniform(0, 2 * np.pi))
    env = _envelope(t, rate, cfg.am_depth, tag_index, rng.uniform(0, 2 * np.pi))
    carrier *= 1.0 / np.sqrt(power(carrier))
    breath = rng.standard_normal(n)
    breath = np.diff(breath, prepend=0.0) if tilt > -9 else breath  # brighter hiss on the flatter corpus
    breath *= 10 ** (cfg.breath_db / 20) / np.sqrt(power(breath))
    x = (carrier + breath) * env
    x *= 0.1 / np.sqrt(power(x))
    floor = rng.standard_normal(n)
    x = mix_at_snr(Waveform(x), Waveform(floor), cfg.floor_snr_db).samples
    return Waveform(np.clip(x, -1.0, 32767 / 32768))


def generate_synthetic_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Write WAV files plus ``manifest.csv`` under ``out_dir``; returns the manifest path.

    Within each (dataset tag, split) labels alternate and genders follow a
    seeded shuffle, so every class and gender is present whenever the split
    has at least four recordings.
    """
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise FileNotFoundError(f"output parent directory does not exist: {out_dir.parent}")
    out_dir.mkdir(exist_ok=True)
    (out_dir / "wav").mkdir(exist_ok=True)
    entries = []
    counts = {"train": cfg.n_train, "validation": cfg.n_validation, "test": cfg.n_test}
    for ti, tag in enumerate(cfg.dataset_tags):
        for split in SPLITS:
            n = counts[split]
            ss = np.random.SeedSequence([cfg.seed, ti, SPLITS.index(split)])
            rng = np.random.default_rng(ss)
            genders = [GENDERS[(i // 2) % 2] for i in range(n)]
            rng.shuffle(genders)
            for i in range(n):
                label = i % 2
                rid = f"{tag}-{split}-{i:04d}"
                w = synth_recording(label, genders[i], ti, cfg, rng)
                rel = f"wav/{rid}.wav"
                write_wav(out_dir / rel, w)
                entries.append(ManifestEntry(rid, rel, LABEL_NAMES[label], genders[i], tag, split))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


def synth_noise(kind: str, length: int, seed) -> Waveform:
    """Parametric noise families; ``reverb`` returns an impulse response."""
    if length <= 0:
        raise ValueError("noise length must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / SAMPLE_RATE
    if kind == "awgn":
        x = rng.standard_normal(length)
    elif kind == "hum":
        x = np.zeros(length)
        for k in range(1, 8):
            x += (0.6**(k - 1)) * np.sin(2 * np.pi * 50.0 * k * t + rng.uniform(0, 2 * np.pi))
    elif kind == "babble_like":
        x = np.zeros(length)
        for _ in range(6):
            f = rng.uniform(150, 900)
            drift = 1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.1, 0.6) * t + rng.uniform(0, 2 * np.pi))
            phase = np.cumsum(2 * np.pi * f * drift / SAMPLE_RATE)
            env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 7) * t + rng.uniform(0, 2 * np.pi))
            x += env * (np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase))
    elif kind == "reverb":
        tau = rng.uniform(0.05, 0.1)  # decay constant in seconds
        x = rng.standard_normal(length) * np.exp(-t / tau)
        x[0] = 1.0
    else:
        raise ValueError(f"unknown noise type {kind!r}; expected one of {NOISE_TYPES}")
    x = x / np.max(np.abs(x)) * 0.5
    return Waveform(x)


# ------------------------------------------------------------------ shifts


@dataclass(frozen=True)
class ShiftSpec:
    """A test-time condition.

    ``train_group``/``test_group`` select a gender (gender_cross) or dataset
    tag (dataset_cross); for clean/noise they optionally restrict both splits
    to one dataset tag.
    """

    kind: str = "clean"
    noise_type: str | None = None
    snr_db: float | None = None
    train_group: str | None = None
    test_group: str | None = None

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.kind == "noise":
            if self.noise_type not in NOISE_TYPES:
                raise ValueError(f"noise shift needs noise_type in {NOISE_TYPES}")
            if self.snr_db is None:
                object.__setattr__(self, "snr_db", 5.0)
        elif self.noise_type is not None or self.snr_db is not None:
            raise ValueError("noise_type/snr_db are only valid for kind='noise'")
        if self.kind in ("gender_cross", "dataset_cross") and not self.train_group:
            raise ValueError(f"{self.kind} needs train_group")
        if self.kind == "gender_cross":
            for g in (self.train_group, self.test_group):
                if g is not None and g not in GENDERS:
                    raise ValueError(f"gender group {g!r} not in {GENDERS}")

    @property
    def label(self) -> str:
        if self.kind == "noise":
            return f"noise:{self.noise_type}@{self.snr_db:g}dB"
        if self.kind in ("gender_cross", "dataset_cross"):
            return f"{self.kind}:{self.train_group}->{self.test_group or '*'}"
        return "clean" + (f":{self.train_group}" if self.train_group else "")

    @classmethod
    def parse(cls, text: str) -> "ShiftSpec":
        """Parse ``clean``, ``noise:awgn[:5]``, ``gender_cross:F[:M]`` or
        ``dataset_cross:corpus_a[:corpus_b]``."""
        parts = text.split(":")
        kind = parts[0]
        if kind == "clean":
            return cls("clean", train_group=parts[1] if len(parts) > 1 else None)
        if kind == "noise":
            if len(parts) < 2:
                raise ValueError("noise shift needs a type, e.g. noise:awgn:5")
            return cls("noise", parts[1], float(parts[2]) if len(parts) > 2 else 5.0)
        if kind in ("gender_cross", "dataset_cross"):
            if len(parts) < 2:
                raise ValueError(f"{kind} needs a training group, e.g. {kind}:F")
            return cls(kind, train_group=parts[1], test_group=parts[2] if len(parts) > 2 else None)
        raise ValueError(f"unknown shift {text!r}")


def _entry_seed(seed: int, entry_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(entry_id.encode())])


def apply_shift(w: Waveform, spec: ShiftSpec, seed) -> Waveform:
    """Corrupt test audio per ``spec``; non-noise kinds return the input unchanged."""
    if spec.kind != "noise":
        return w
    if spec.noise_type == "reverb":
        ir = synth_noise("reverb", int(0.4 * SAMPLE_RATE), seed).samples
        y = fftconvolve(w.samples, ir)[: len(w)]
        y *= np.sqrt(power(w.samples) / power(y))
        return Waveform(y)
    noise = synth_noise(spec.noise_type, len(w), seed)
    return mix_at_snr(w, noise, spec.snr_db)


# --------------------------------------------------------------- protocols


def split_groups(entries: Sequence[ManifestEntry], spec: ShiftSpec) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Train and test entries for a protocol; raises ProtocolError when empty."""
    train = [e for e in entries if e.split == "train"]
    test = [e for e in entries if e.split == "test"]
    if spec.kind == "gender_cross":
        test_group = spec.test_group or next(g for g in GENDERS if g != spec.train_group)
        train = [e for e in train if e.gender == spec.train_group]
        test = [e for e in test if e.gender == test_group]
        desc = f"gender train={spec.train_group} test={test_group}"
    elif spec.kind == "dataset_cross":
        tags = sorted({e.dataset_tag for e in entries})
        if spec.train_group not in tags:
            raise ProtocolError(f"dataset tag {spec.train_group!r} not present in manifest (tags: {tags})")
        others = [t for t in tags if t != spec.train_group]
        test_group = spec.test_group or (others[0] if others else None)
        if test_group is None:
            raise ProtocolError("dataset_cross needs a second dataset tag")
        train = [e for e in train if e.dataset_tag == spec.train_group]
        test = [e for e in test if e.dataset_tag == test_group]
        desc = f"dataset train={spec.train_group} test={test_group}"
    else:
        desc = "all"
        if spec.train_group:
            train = [e for e in train if e.dataset_tag == spec.train_group]
            test = [e for e in test if e.dataset_tag == spec.train_group]
            desc = f"dataset={spec.train_group}"
    if not train:
        raise ProtocolError(f"empty train split after filter ({desc})")
    if not test:
        raise ProtocolError(f"empty test split after filter ({desc})")
    return train, test


def recording_patches(w: Waveform, frontend: FrontendConfig, params_cfg) -> list[np.ndarray]:
    """Segment, compute normalized log-mels, crop, and patchify."""
    out = []
    for seg in segment_waveform(w, frontend.seg_seconds):
        spec = crop_frames(log_mel(seg, frontend, normalize=True), params_cfg)
        out.append(patchify(spec, params_cfg))
    return out


def load_recordings(entries: Sequence[ManifestEntry], root, frontend: FrontendConfig, patch_cfg,
                    shift: ShiftSpec | None = None, seed: int = 0) -> list[TestRecording]:
    root = Path(root)
    recs = []
    for e in entries:
        w = load_wav(root / e.path)
        if shift is not None:
            w = apply_shift(w, shift, _entry_seed(seed, e.id))
        recs.append(TestRecording(e.id, e.label_index, recording_patches(w, frontend, patch_cfg)))
    return recs


def flatten_segments(recs: Sequence[TestRecording]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Stack every segment; returns (patches, labels, owning recording index)."""
    patches, labels, owner = [], [], []
    for i, r in enumerate(recs):
        for seg in r.segments:
            patches.append(seg)
            labels.append(r.label)
            owner.append(i)
    return np.stack(patches), np.asarray(labels), owner


def normalization_stats(entries: Sequence[ManifestEntry], root, frontend: FrontendConfig) -> tuple[float, float]:
    vals = []
    for e in entries:
        for seg in segment_waveform(load_wav(Path(root) / e.path), frontend.seg_seconds):
            vals.append(log_mel(seg, frontend).values.ravel())
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std())


@dataclass
class EvalReport:
    f1_healthy: float
    f1_depressed: float
    macro_f: float
    ci_low: float
    ci_high: float
    n_recordings: int
    shift: ShiftSpec
    mode: str = "frozen"

    def row(self) -> dict:
        return {
            "shift": self.shift.label,
            "mode": self.mode,
            "macro_f": f"{self.macro_f:.4f}",
            "f1_healthy": f"{self.f1_healthy:.4f}",
            "f1_depressed": f"{self.f1_depressed:.4f}",
            "ci_low": f"{self.ci_low:.4f}",
            "ci_high": f"{self.ci_high:.4f}",
            "n_recordings": self.n_recordings,
        }


REPORT_FIELDS = ("shift", "mode", "macro_f", "f1_healthy", "f1_depressed", "ci_low", "ci_high", "n_recordings")


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


@dataclass
class ProtocolResult:
    report: EvalReport
    y_true: list[int]
    y_pred: list[int]
    # items per group label that entered probe training batches (empty if no probe was trained)
    train_group_counts: Counter = field(default_factory=Counter)
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    # per-segment TTT reconstruction losses, keyed by segment id (ttt mode only)
    traces: dict[str, list[float]] = field(default_factory=dict)


def predict_recordings(recs: Sequence[TestRecording], params: ModelParams, mode: str,
                       ttt_cfg: TttConfig | None = None,
                       traces: dict[str, list[float]] | None = None) -> list[int]:
    if mode not in ("frozen", "ttt"):
        raise ValueError(f"mode must be 'frozen' or 'ttt', got {mode!r}")
    preds = []
    for rec in recs:
        if mode == "frozen":
            probs = list(classify_batch(np.stack(rec.segments), params))
        else:
            probs = []
            for k, seg in enumerate(rec.segments):
                sid = segment_id(rec.id, k)
                p, trace = ttt_predict(seg, params, ttt_cfg, sid)
                probs.append(p)
                if traces is not None:
                    traces[sid] = trace.losses
        preds.append(vote_probs(probs))
    return preds


def build_report(y_true, y_pred, spec: ShiftSpec, mode: str, seed: int, resamples: int = 1000) -> EvalReport:
    m = macro_f(Confusion.from_pairs(y_true, y_pred))
    if len(y_true) >= 2:
        lo, hi = bootstrap_ci(y_true, y_pred, resamples=resamples, seed=seed)
    else:
        lo = hi = m.macro_f
    return EvalReport(m.f1_healthy, m.f1_depressed, m.macro_f, lo, hi, len(y_true), spec, mode)


def run_protocol(
    entries: Sequence[ManifestEntry],
    spec: ShiftSpec,
    params: ModelParams,
    frontend: FrontendConfig,
    root,
    mode: str = "frozen",
    ttt_cfg: TttConfig | None = None,
    train_cfg: TrainConfig | None = None,
    retrain_probe: bool | None = None,
    seed: int = 0,
) -> ProtocolResult:
    """Run one (shift, mode) evaluation.

    Gender- and dataset-cross protocols always fit a fresh head on the
    filtered training split; clean/noise protocols reuse the head in
    ``params`` unless ``retrain_probe`` is set. Shifts touch test audio only.
    """
    if mode == "ttt" and ttt_cfg is None:
        raise ValueError("ttt mode needs a TttConfig")
    train, test = split_groups(entries, spec)
    if retrain_probe is None:
        retrain_probe = spec.kind in ("gender_cross", "dataset_cross")
    result_counts: Counter = Counter()
    if retrain_probe:
        train_cfg = train_cfg or TrainConfig(seed=seed)
        fresh = ModelParams.init(params.cfg, seed=train_cfg.seed, dtype=params.encoder["patch_w"].dtype)
        params = params.with_groups(head=private_group(fresh.head))
        recs = load_recordings(train, root, frontend, params.cfg)
        x, y, owner = flatten_segments(recs)
        if spec.kind == "gender_cross":
            groups = [train[i].gender for i in owner]
        else:
            groups = [train[i].dataset_tag for i in owner]
        probe = train_probe(x, y, params, train_cfg, finetune_encoder=False, groups=groups)
        result_counts = probe.group_counts
    test_recs = load_recordings(test, root, frontend, params.cfg, shift=spec, seed=seed)
    y_true = [r.label for r in test_recs]
    traces: dict[str, list[float]] = {}
    y_pred = predict_recordings(test_recs, params, mode, ttt_cfg, traces)
    report = build_report(y_true, y_pred, spec, mode, seed)
    log.info("%s %s macro-F %.2f", spec.label, mode, report.macro_f)
    return ProtocolResult(report, y_true, y_pred, result_counts,
                          [e.id for e in train], [e.id for e in test], traces)
