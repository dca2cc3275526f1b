"""Masked-autoencoder over log-mel patches with a classification head.

The network is Y-shaped: a shared encoder feeds both a reconstruction decoder
and a small feed-forward classifier. Parameters live in three named groups
(``encoder``, ``decoder``, ``head``) so that training stages can freeze or
adapt them independently.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .audio import FrontendConfig, LogMelSpectrogram
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
GROUPS = ("encoder", "decoder", "head")
N_CLASSES = 2
LN_EPS = 1e-6


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    patch_time: int = 16
    patch_mel: int = 8
    embed_dim: int = 64
    decoder_dim: int = 32
    enc_layers: int = 2
    dec_layers: int = 1
    heads: int = 4
    mask_ratio: float = 0.8
    mlp_ratio: int = 2
    head_hidden: int = 100
    head_layers: int = 2

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        for name in ("patch_time", "patch_mel", "embed_dim", "decoder_dim", "heads", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ValueError("embed_dim and decoder_dim must be divisible by heads")
        if self.head_layers not in (1, 2):
            raise ValueError("head_layers must be 1 or 2")

    @property
    def patch_len(self) -> int:
        return self.patch_time * self.patch_mel

    def n_patches(self, frames: int, mels: int) -> int:
        return (frames // self.patch_time) * (mels // self.patch_mel)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- patching


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, LogMelSpectrogram) else np.asarray(s)


def crop_frames(s: LogMelSpectrogram, cfg: PatchConfig) -> LogMelSpectrogram:
    """Drop trailing frames so the frame count is a multiple of ``patch_time``."""
    keep = (s.frames // cfg.patch_time) * cfg.patch_time
    if keep == 0:
        raise ValueError(f"spectrogram has {s.frames} frames, fewer than patch_time={cfg.patch_time}")
    return LogMelSpectrogram(s.values[:keep])


def patchify(s, cfg: PatchConfig) -> np.ndarray:
    """Tile a (frames, mels) grid into flattened patches, row-major over (time, mel)."""
    v = _values(s)
    t, m = v.shape
    pt, pm = cfg.patch_time, cfg.patch_mel
    if t % pt or m % pm:
        raise ValueError(f"spectrogram {t}x{m} is not divisible into {pt}x{pm} patches")
    nt, nm = t // pt, m // pm
    return v.reshape(nt, pt, nm, pm).transpose(0, 2, 1, 3).reshape(nt * nm, pt * pm)


def unpatchify(patches: np.ndarray, frames: int, mels: int, cfg: PatchConfig) -> np.ndarray:
    pt, pm = cfg.patch_time, cfg.patch_mel
    nt, nm = frames // pt, mels // pm
    return np.asarray(patches).reshape(nt, nm, pt, pm).transpose(0, 2, 1, 3).reshape(frames, mels)


@lru_cache(maxsize=32)
def sincos_table(n_pos: int, dim: int) -> np.ndarray:
    """Fixed positional table: sin on even columns, cos on odd columns."""
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    freq = 1.0 / (10000.0 ** (i / dim))
    table = np.zeros((n_pos, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    table.setflags(write=False)
    return table


# ----------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into masked and visible sets.

    ``restore[i]`` is the slot of patch ``i`` in the concatenation
    ``visible + masked``, so ``np.concatenate([visible, masked])[restore]``
    yields ``0..P-1``. Both index lists are sorted, which makes the plan a
    canonical function of the visible set.
    """

    masked: np.ndarray
    visible: np.ndarray
    restore: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.restore.shape[0]

    @classmethod
    def from_visible(cls, visible, n_patches: int) -> "MaskPlan":
        visible = np.unique(np.asarray(visible, dtype=np.intp))
        masked = np.setdiff1d(np.arange(n_patches), visible).astype(np.intp)
        restore = np.argsort(np.concatenate([visible, masked]), kind="stable").astype(np.intp)
        return cls(masked, visible, restore)


def mask_count(n_patches: int, ratio: float) -> int:
    # round half up
    return int(math.floor(ratio * n_patches + 0.5))


def make_mask_plan(n_patches: int, ratio: float, rng_seed) -> MaskPlan:
    """Uniformly random partition with ``round(ratio * P)`` masked patches."""
    if n_patches < 2:
        raise ValueError("need at least 2 patches to mask")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_mask = mask_count(n_patches, ratio)
    if not 1 <= n_mask <= n_patches - 1:
        raise ValueError(f"mask ratio {ratio} gives {n_mask} masked of {n_patches}; need 1..P-1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    perm = rng.permutation(n_patches)
    masked = np.sort(perm[:n_mask]).astype(np.intp)
    visible = np.sort(perm[n_mask:]).astype(np.intp)
    restore = np.argsort(np.concatenate([visible, masked]), kind="stable").astype(np.intp)
    return MaskPlan(masked, visible, restore)


@dataclass(frozen=True)
class MaskBatch:
    """Stacked plans for a batch; every plan must share P and |visible|."""

    masked: np.ndarray   # (B, M)
    visible: np.ndarray  # (B, V)
    restore: np.ndarray  # (B, P)

    @classmethod
    def stack(cls, plans: Sequence[MaskPlan]) -> "MaskBatch":
        if not plans:
            raise ValueError("no mask plans given")
        sizes = {(p.n_patches, len(p.visible)) for p in plans}
        if len(sizes) != 1:
            raise ValueError(f"mask plans disagree on (P, |visible|): {sorted(sizes)}")
        return cls(
            np.stack([p.masked for p in plans]),
            np.stack([p.visible for p in plans]),
            np.stack([p.restore for p in plans]),
        )


def _as_mask_batch(plan) -> MaskBatch:
    if isinstance(plan, MaskBatch):
        return plan
    if isinstance(plan, MaskPlan):
        return MaskBatch.stack([plan])
    return MaskBatch.stack(list(plan))


# -------------------------------------------------------------- parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def _block_shapes(dim: int, mlp_ratio: int) -> dict[str, tuple]:
    hid = dim * mlp_ratio
    return {
        "ln1_g": (dim,), "ln1_b": (dim,),
        "wq": (dim, dim), "bq": (dim,),
        "wk": (dim, dim), "bk": (dim,),
        "wv": (dim, dim), "bv": (dim,),
        "wo": (dim, dim), "bo": (dim,),
        "ln2_g": (dim,), "ln2_b": (dim,),
        "fc1_w": (dim, hid), "fc1_b": (hid,),
        "fc2_w": (hid, dim), "fc2_b": (dim,),
    }


def param_shapes(cfg: PatchConfig) -> dict[str, dict[str, tuple]]:
    e, d, pd = cfg.embed_dim, cfg.decoder_dim, cfg.patch_len
    enc = {"patch_w": (pd, e), "patch_b": (e,)}
    for i in range(cfg.enc_layers):
        enc.update({f"blocks.{i}.{k}": s for k, s in _block_shapes(e, cfg.mlp_ratio).items()})
    enc.update({"norm_g": (e,), "norm_b": (e,)})

    dec = {"embed_w": (e, d), "embed_b": (d,), "mask_token": (d,)}
    for i in range(cfg.dec_layers):
        dec.update({f"blocks.{i}.{k}": s for k, s in _block_shapes(d, cfg.mlp_ratio).items()})
    dec.update({"norm_g": (d,), "norm_b": (d,), "pred_w": (d, pd), "pred_b": (pd,)})

    h = cfg.head_hidden
    head = {"fc1_w": (e, h), "fc1_b": (h,)}
    if cfg.head_layers == 2:
        head.update({"fc2_w": (h, h), "fc2_b": (h,)})
    head.update({"out_w": (h, N_CLASSES), "out_b": (N_CLASSES,)})
    return {"encoder": enc, "decoder": dec, "head": head}


@dataclass
class ModelParams:
    """Named parameter groups. Positional tables are not parameters: they are
    recomputed from :func:`sincos_table` and so can never be optimized."""

    cfg: PatchConfig
    encoder: dict[str, Tensor] = field(default_factory=dict)
    decoder: dict[str, Tensor] = field(default_factory=dict)
    head: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: PatchConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        groups = {}
        for gname, shapes in param_shapes(cfg).items():
            group = {}
            for name, shape in shapes.items():
                leaf = name.rsplit(".", 1)[-1]
                if leaf.endswith("_g"):
                    arr = np.ones(shape)
                elif leaf.endswith("_b") or leaf.startswith("b"):
                    arr = np.zeros(shape)
                else:
                    arr = _trunc_normal(rng, shape)
                group[name] = Tensor(arr.astype(dtype), requires_grad=True, name=f"{gname}.{name}")
            groups[gname] = group
        return cls(cfg, **groups)

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def parameters(self, *names: str) -> list[Tensor]:
        names = names or GROUPS
        return [t for n in names for t in self.group(n).values()]

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams(self.cfg)
        for g in GROUPS:
            setattr(out, g, {k: Tensor(t.data.astype(dtype), requires_grad=True, name=t.name)
                             for k, t in self.group(g).items()})
        return out

    def snapshot(self, *names: str) -> dict[str, dict[str, np.ndarray]]:
        return {g: {k: t.data.copy() for k, t in self.group(g).items()} for g in (names or GROUPS)}

    def restore(self, snap: dict[str, dict[str, np.ndarray]]) -> None:
        for g, arrays in snap.items():
            group = self.group(g)
            if set(arrays) != set(group):
                raise ValueError(f"snapshot for {g!r} does not match parameter names")
            for k, arr in arrays.items():
                group[k].data = arr.copy()

    def checksum(self, *names: str) -> str:
        h = hashlib.sha256()
        for g in names or GROUPS:
            for k in sorted(self.group(g)):
                arr = self.group(g)[k].data
                h.update(f"{g}.{k}:{arr.dtype.str}:{arr.shape}".encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def with_groups(self, **groups: dict[str, Tensor]) -> "ModelParams":
        """Shallow copy with some groups replaced."""
        out = ModelParams(self.cfg, self.encoder, self.decoder, self.head)
        for g, d in groups.items():
            self.group(g)  # validates the name
            setattr(out, g, d)
        return out


def frozen_group(group: dict[str, Tensor]) -> dict[str, Tensor]:
    """Views sharing storage with ``group`` that never collect gradients."""
    return {k: Tensor(t.data, requires_grad=False, name=t.name) for k, t in group.items()}


def private_group(group: dict[str, Tensor]) -> dict[str, Tensor]:
    """Trainable deep copy of ``group``."""
    return {k: Tensor(t.data.copy(), requires_grad=True, name=t.name) for k, t in group.items()}


# ------------------------------------------------------------ forward pass


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _attention(x: Tensor, p: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    bsz, n, dim = x.shape
    hd = dim // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (bsz, n, heads, hd)), (0, 2, 1, 3))

    q = split(_linear(x, p[pre + "wq"], p[pre + "bq"]))
    k = split(_linear(x, p[pre + "wk"], p[pre + "bk"]))
    v = split(_linear(x, p[pre + "wv"], p[pre + "bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, n, dim))
    return _linear(ctx, p[pre + "wo"], p[pre + "bo"])


def _block(x: Tensor, p: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    h = ad.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"], LN_EPS)
    x = ad.add(x, _attention(h, p, pre, heads))
    h = ad.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"], LN_EPS)
    h = _linear(ad.silu(_linear(h, p[pre + "fc1_w"], p[pre + "fc1_b"])), p[pre + "fc2_w"], p[pre + "fc2_b"])
    return ad.add(x, h)


def _patch_tensor(patches, dtype) -> Tensor:
    if isinstance(patches, Tensor):
        arr = patches.data
    else:
        arr = np.asarray(patches)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr.astype(dtype, copy=False))


def embed_patches(patches, params: ModelParams) -> Tensor:
    """Linear patch projection plus the fixed sinusoidal table by patch index.

    ``patches`` is (P, patch_len) or (B, P, patch_len); output is (B, P, E).
    """
    enc = params.encoder
    dtype = enc["patch_w"].dtype
    x = _patch_tensor(patches, dtype)
    n = x.shape[1]
    pos = Tensor(sincos_table(n, params.cfg.embed_dim).astype(dtype))
    return ad.add(_linear(x, enc["patch_w"], enc["patch_b"]), pos)


def encode(embedded: Tensor, plan, params: ModelParams) -> Tensor:
    """Run the encoder on visible tokens (``plan`` given) or on all tokens.

    Returns the latent sequence (B, |visible|, E) or (B, P, E).
    """
    x = embedded
    if plan is not None:
        mb = _as_mask_batch(plan)
        if mb.restore.shape[1] != x.shape[1]:
            raise ValueError(f"plan covers {mb.restore.shape[1]} patches, input has {x.shape[1]}")
        if mb.visible.shape[0] != x.shape[0]:
            raise ValueError("one mask plan per batch item is required")
        x = ad.gather_rows(x, mb.visible)
    enc, cfg = params.encoder, params.cfg
    for i in range(cfg.enc_layers):
        x = _block(x, enc, f"blocks.{i}.", cfg.heads)
    return ad.layer_norm(x, enc["norm_g"], enc["norm_b"], LN_EPS)


def decode(latents: Tensor, plan, params: ModelParams) -> Tensor:
    """Reconstruct every patch from visible latents; output is (B, P, patch_len)."""
    mb = _as_mask_batch(plan)
    bsz, v, _ = latents.shape
    if mb.visible.shape != (bsz, v):
        raise ValueError(f"latents {latents.shape} inconsistent with plan visible set {mb.visible.shape}")
    dec, cfg = params.decoder, params.cfg
    x = _linear(latents, dec["embed_w"], dec["embed_b"])
    x = ad.insert_mask_tokens(x, dec["mask_token"], mb.restore)
    n = x.shape[1]
    x = ad.add(x, Tensor(sincos_table(n, cfg.decoder_dim).astype(x.dtype)))
    for i in range(cfg.dec_layers):
        x = _block(x, dec, f"blocks.{i}.", cfg.heads)
    x = ad.layer_norm(x, dec["norm_g"], dec["norm_b"], LN_EPS)
    return _linear(x, dec["pred_w"], dec["pred_b"])


def reconstruction_loss(patches, plan, params: ModelParams) -> Tensor:
    """Masked-patch MSE between the decoder output and the input patches.

    ``patches`` is (P, patch_len) for a single plan or (B, P, patch_len) for a
    batch of plans; the mean runs over every masked element in the batch.
    """
    mb = _as_mask_batch(plan)
    x = _patch_tensor(patches, params.encoder["patch_w"].dtype)
    if x.shape[0] == 1 and mb.visible.shape[0] > 1:
        x = Tensor(np.broadcast_to(x.data, (mb.visible.shape[0],) + x.shape[1:]).copy())
    pred = decode(encode(embed_patches(x, params), mb, params), mb, params)
    return ad.mse_masked(pred, x.data, mb.masked)


def pooled_features(patches, params: ModelParams) -> Tensor:
    """Full-sequence encode, then mean over tokens; shape (B, E)."""
    return ad.mean_axis(encode(embed_patches(patches, params), None, params), axis=1)


def head_log_probs(features: Tensor, params: ModelParams) -> Tensor:
    h = params.head
    x = ad.silu(_linear(features, h["fc1_w"], h["fc1_b"]))
    if "fc2_w" in h:
        x = ad.silu(_linear(x, h["fc2_w"], h["fc2_b"]))
    return ad.log_softmax(_linear(x, h["out_w"], h["out_b"]))


def classify_batch(patches, params: ModelParams) -> np.ndarray:
    """Class probabilities (B, 2) ordered (healthy, depressed)."""
    return np.exp(head_log_probs(pooled_features(patches, params), params).data)


def classify(s, params: ModelParams) -> np.ndarray:
    """Probabilities (healthy, depressed) for one spectrogram; no masking."""
    v = _values(s)
    if v.ndim == 2 and v.shape[1] != params.cfg.patch_len:
        v = patchify(v, params.cfg)
    return classify_batch(v, params)[0]


# ------------------------------------------------------------- checkpoints


def _fixed_zipinfo(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: ModelParams, frontend: FrontendConfig, stages: Sequence[str]) -> None:
    """Write a versioned zip of ``.npy`` arrays plus a JSON header.

    The archive uses fixed timestamps so identical parameters give identical bytes.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "patch": params.cfg.to_dict(),
        "frontend": frontend.to_dict(),
        "stages": list(stages),
        "dtype": params.encoder["patch_w"].dtype.str,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_fixed_zipinfo("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for g in GROUPS:
            for name in sorted(params.group(g)):
                arr_buf = io.BytesIO()
                np.lib.format.write_array(arr_buf, params.group(g)[name].data, allow_pickle=False)
                zf.writestr(_fixed_zipinfo(f"{g}/{name}.npy"), arr_buf.getvalue())
    atomic_write_bytes(path, buf.getvalue())


@dataclass
class Checkpoint:
    params: ModelParams
    frontend: FrontendConfig
    stages: list[str]


def load_checkpoint(path, expect_patch: PatchConfig | None = None,
                    expect_frontend: FrontendConfig | None = None) -> Checkpoint:
    """Load a checkpoint; mismatched configs raise :class:`CheckpointError`.

    Frontend comparison ignores the normalization statistics, which are
    produced by pretraining rather than configured.
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            cfg = PatchConfig(**meta["patch"])
            frontend = FrontendConfig(**meta["frontend"])
            shapes = param_shapes(cfg)
            params = ModelParams(cfg)
            for g in GROUPS:
                group = {}
                for name, shape in shapes[g].items():
                    arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{g}/{name}.npy")), allow_pickle=False)
                    if arr.shape != tuple(shape):
                        raise CheckpointError(f"{path}: {g}.{name} has shape {arr.shape}, expected {shape}")
                    group[name] = Tensor(arr, requires_grad=True, name=f"{g}.{name}")
                setattr(params, g, group)
    except (KeyError, zipfile.BadZipFile, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if expect_patch is not None and expect_patch != cfg:
        raise CheckpointError(f"{path}: patch/model config mismatch: checkpoint {cfg}, expected {expect_patch}")
    if expect_frontend is not None:
        a = {k: v for k, v in frontend.to_dict().items() if not k.startswith("norm_")}
        b = {k: v for k, v in expect_frontend.to_dict().items() if not k.startswith("norm_")}
        if a != b:
            raise CheckpointError(f"{path}: frontend config mismatch: checkpoint {a}, expected {b}")
    return Checkpoint(params, frontend, list(meta["stages"]))
