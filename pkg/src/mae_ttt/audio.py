"""Waveform I/O, log-mel spectrograms, SNR mixing and fixed-length segmentation."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


class AudioFormatError(ValueError):
    """Raised when a WAV file violates the expected PCM layout."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    """Spectrogram front end. ``norm_mean``/``norm_std`` are corpus statistics
    fixed at pretraining time and applied to every log-mel grid afterwards."""

    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    n_mels: int = 32
    seg_seconds: float = 7.0
    # "global": corpus mean/std below; "utterance": per-segment, per-mel-band mean/std
    norm_mode: str = "global"
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (frames, mels)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def mels(self) -> int:
        return self.values.shape[1]


def load_wav(path) -> Waveform:
    """Read a 16-bit mono 16 kHz PCM WAV file, scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            comp = wf.getcomptype()
            if comp != "NONE":
                raise AudioFormatError(f"{path}: unsupported codec {comp!r}, expected PCM")
            if channels != 1:
                raise AudioFormatError(f"{path}: expected 1 channels (mono), got {channels} channels")
            if width != 2:
                raise AudioFormatError(f"{path}: expected 16-bit sample width, got {8 * width}-bit")
            if rate != SAMPLE_RATE:
                raise AudioFormatError(f"{path}: expected sample rate {SAMPLE_RATE}, got {rate}")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(to_pcm16(w.samples).tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    matrix: np.ndarray = field(repr=False)  # (mels, n_fft // 2 + 1)
    centers_hz: np.ndarray = field(repr=False)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int = 512, sample_rate: int = SAMPLE_RATE) -> MelFilterbank:
    """Triangular HTK-mel filters from 0 Hz to Nyquist.

    Triangles are evaluated on the continuous frequency axis, so narrow
    low-frequency filters still catch at least one FFT bin.
    """
    n_bins = n_fft // 2 + 1
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    mat = np.maximum(0.0, np.minimum(up, down))
    empty = ~(mat > 0).any(axis=1)
    if empty.any():
        # filter narrower than the bin spacing: give it the nearest bin
        for row in np.flatnonzero(empty):
            mat[row, np.argmin(np.abs(freqs - edges[row + 1]))] = 1.0
    mat.setflags(write=False)
    centers = edges[1:-1].copy()
    centers.setflags(write=False)
    return MelFilterbank(mat, centers)


def frame_count(n_samples: int, win: int = 400, hop: int = 160) -> int:
    return 1 + (n_samples - win) // hop


def log_mel(w: Waveform, cfg: FrontendConfig = FrontendConfig(), normalize: bool = False) -> LogMelSpectrogram:
    """Hann-windowed power STFT -> mel filterbank -> ``log(x + 1e-10)``.

    Only full frames are kept (no centre padding). With ``normalize`` the
    corpus statistics in ``cfg`` are applied afterwards.
    """
    x = w.samples
    win, hop = cfg.win_length, cfg.hop_length
    if len(x) < win:
        raise ValueError(f"waveform has {len(x)} samples, need at least win_length={win}")
    n_frames = frame_count(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, w.sample_rate).matrix
    values = np.log(power @ fb.T + LOG_FLOOR)
    if normalize:
        if cfg.norm_mode == "utterance":
            values = (values - values.mean(axis=0)) / (values.std(axis=0) + 1e-5)
        elif cfg.norm_mode == "global":
            values = (values - cfg.norm_mean) / cfg.norm_std
        else:
            raise ValueError(f"unknown norm_mode {cfg.norm_mode!r}")
    return LogMelSpectrogram(values)


def dump_spectrogram_csv(spec: LogMelSpectrogram, path) -> None:
    """Debug dump: one frame per row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"mel{i}" for i in range(spec.mels)])
        for row in spec.values:
            writer.writerow([repr(float(v)) for v in row])


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Tile ``noise`` end to end (or truncate) to exactly ``n`` samples."""
    reps = -(-n // len(noise))
    return np.tile(noise, reps)[:n]


def snr_scale(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    return float(np.sqrt(power(clean) / (power(noise) * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return ``clean + alpha * noise`` with the noise scaled to ``snr_db``."""
    if power(noise.samples) <= 1e-12:
        raise ValueError("noise is silent (power <= 1e-12)")
    if power(clean.samples) <= 1e-12:
        raise ValueError("clean signal is silent (power <= 1e-12)")
    n = fit_length(noise.samples, len(clean))
    if power(n) <= 1e-12:
        raise ValueError("noise is silent over the clean signal's length")
    alpha = snr_scale(clean.samples, n, snr_db)
    return Waveform(clean.samples + alpha * n, clean.sample_rate)


def segment_waveform(w: Waveform, seg_seconds: float = 7.0) -> list[Waveform]:
    """Split into consecutive non-overlapping segments.

    A trailing remainder of at least half a segment is zero-padded and kept;
    anything shorter is dropped.
    """
    seg = int(round(seg_seconds * w.sample_rate))
    if len(w) * 2 < seg:
        raise ValueError(f"waveform of {w.seconds:.3f} s is shorter than half a segment ({seg_seconds / 2} s)")
    out = []
    for start in range(0, len(w), seg):
        chunk = w.samples[start:start + seg]
        if len(chunk) < seg:
            if 2 * len(chunk) < seg:
                break
            chunk = np.concatenate([chunk, np.zeros(seg - len(chunk))])
        out.append(Waveform(chunk.copy(), w.sample_rate))
    return out
