import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mae_ttt import autodiff as ad
from mae_ttt.audio import FrontendConfig, LogMelSpectrogram
from mae_ttt.model import (
    CheckpointError,
    MaskPlan,
    ModelParams,
    PatchConfig,
    classify,
    classify_batch,
    decode,
    embed_patches,
    encode,
    load_checkpoint,
    make_mask_plan,
    mask_count,
    patchify,
    reconstruction_loss,
    save_checkpoint,
    sincos_table,
    unpatchify,
)

from .gradcheck import check

TINY = PatchConfig(patch_time=2, patch_mel=2, embed_dim=8, decoder_dim=8, enc_layers=2, dec_layers=1,
                   heads=2, mlp_ratio=2, head_hidden=6)


def tiny_params(seed=0, dtype=np.float64, cfg=TINY):
    p = ModelParams.init(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    # default init is small and bias-free; perturb so every path carries signal
    for t in p.parameters():
        t.data = (t.data + rng.normal(0, 0.3, t.shape)).astype(dtype)
    return p


# --------------------------------------------------------------- patching


def test_patch_count_and_length():
    cfg = PatchConfig(patch_time=16, patch_mel=16)
    s = np.random.default_rng(0).standard_normal((128, 32))
    patches = patchify(LogMelSpectrogram(s), cfg)
    assert patches.shape == (16, 256)


def test_patch_order_is_row_major_over_time_then_mel():
    cfg = PatchConfig(patch_time=2, patch_mel=2, embed_dim=8, decoder_dim=8, heads=2)
    s = np.arange(16.0).reshape(4, 4)
    p = patchify(s, cfg)
    np.testing.assert_array_equal(p[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[2], [8, 9, 12, 13])


def test_constant_spectrogram_gives_identical_patches():
    p = patchify(np.full((32, 32), 3.0), PatchConfig())
    assert np.all(p == p[0])


def test_unpatchify_inverts_patchify():
    cfg = PatchConfig(patch_time=4, patch_mel=4)
    s = np.random.default_rng(1).standard_normal((64, 32))
    np.testing.assert_array_equal(unpatchify(patchify(s, cfg), 64, 32, cfg), s)


def test_indivisible_shape_is_an_error():
    with pytest.raises(ValueError, match="not divisible"):
        patchify(np.zeros((30, 32)), PatchConfig())


# ----------------------------------------------------------- positions


def test_positional_table_at_index_zero():
    t = sincos_table(5, 8)
    np.testing.assert_array_equal(t[0, 0::2], 0.0)
    np.testing.assert_array_equal(t[0, 1::2], 1.0)


def test_zero_patches_embed_to_positional_table():
    p = ModelParams.init(TINY, dtype=np.float64)
    out = embed_patches(np.zeros((4, TINY.patch_len)), p).data[0]
    np.testing.assert_array_equal(out, sincos_table(4, TINY.embed_dim))


def test_identical_patches_at_different_positions_differ():
    p = tiny_params()
    patch = np.ones(TINY.patch_len)
    out = embed_patches(np.stack([patch, patch]), p).data[0]
    assert not np.allclose(out[0], out[1])


def test_positional_table_is_not_a_parameter():
    p = ModelParams.init(TINY)
    for t in p.parameters():
        assert t.shape != (4, TINY.embed_dim) or "pos" not in (t.name or "")


# -------------------------------------------------------------- masking


def test_mask_count_example():
    plan = make_mask_plan(10, 0.8, 0)
    assert len(plan.masked) == 8 and len(plan.visible) == 2


def test_mask_count_rounds_half_up():
    assert mask_count(16, 0.8) == 13
    assert mask_count(10, 0.25) == 3


def test_mask_plan_same_seed_identical():
    a, b = make_mask_plan(40, 0.8, 7), make_mask_plan(40, 0.8, 7)
    for f in ("masked", "visible", "restore"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_degenerate_mask_is_an_error():
    with pytest.raises(ValueError):
        make_mask_plan(2, 0.1, 0)
    with pytest.raises(ValueError):
        make_mask_plan(1, 0.5, 0)
    with pytest.raises(ValueError):
        make_mask_plan(10, 1.0, 0)


def test_mask_frequency_monte_carlo():
    counts = np.zeros(16)
    for seed in range(10000):
        counts[make_mask_plan(16, 0.8, seed).masked] += 1
    freq = counts / 10000
    assert np.all(np.abs(freq - 0.8) <= 0.02), freq


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_mask_plan_invariants(n, ratio, seed):
    m = mask_count(n, ratio)
    if not 1 <= m <= n - 1:
        return
    plan = make_mask_plan(n, ratio, seed)
    assert len(plan.masked) == m
    assert np.all(np.diff(plan.masked) > 0) and np.all(np.diff(plan.visible) > 0)
    np.testing.assert_array_equal(np.sort(np.concatenate([plan.masked, plan.visible])), np.arange(n))
    np.testing.assert_array_equal(np.concatenate([plan.visible, plan.masked])[plan.restore], np.arange(n))


def test_from_visible_canonicalizes_order():
    a = MaskPlan.from_visible([5, 1, 3], 8)
    b = MaskPlan.from_visible([1, 3, 5], 8)
    np.testing.assert_array_equal(a.restore, b.restore)
    np.testing.assert_array_equal(a.masked, [0, 2, 4, 6, 7])


# ------------------------------------------------------------- encoder


def test_encode_token_counts():
    p = tiny_params()
    x = np.random.default_rng(0).standard_normal((6, TINY.patch_len))
    emb = embed_patches(x, p)
    assert encode(emb, None, p).shape == (1, 6, 8)
    plan = MaskPlan.from_visible([0, 1, 2, 3, 5], 6)
    assert encode(emb, plan, p).shape == (1, 5, 8)


def test_encoder_is_permutation_equivariant():
    p = tiny_params(seed=3)
    x = np.random.default_rng(2).standard_normal((7, TINY.patch_len))
    emb = embed_patches(x, p)
    perm = np.random.default_rng(9).permutation(7)
    out = encode(emb, None, p).data[0]
    out_perm = encode(ad.Tensor(emb.data[:, perm]), None, p).data[0]
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


# ------------------------------------------------------------- decoder


def test_decode_returns_every_patch():
    p = tiny_params()
    x = np.random.default_rng(0).standard_normal((10, TINY.patch_len))
    for ratio in (0.1, 0.5, 0.9):
        plan = make_mask_plan(10, ratio, 1)
        out = decode(encode(embed_patches(x, p), plan, p), plan, p)
        assert out.shape == (1, 10, TINY.patch_len)


def test_decode_shape_mismatch():
    p = tiny_params()
    x = np.random.default_rng(0).standard_normal((10, TINY.patch_len))
    lat = encode(embed_patches(x, p), make_mask_plan(10, 0.5, 0), p)
    with pytest.raises(ValueError, match="inconsistent"):
        decode(lat, make_mask_plan(10, 0.8, 0), p)


def test_same_visible_set_gives_identical_reconstruction():
    p = tiny_params()
    x = np.random.default_rng(4).standard_normal((8, TINY.patch_len))
    a, b = MaskPlan.from_visible([6, 2], 8), MaskPlan.from_visible([2, 6], 8)
    ra = decode(encode(embed_patches(x, p), a, p), a, p).data
    rb = decode(encode(embed_patches(x, p), b, p), b, p).data
    assert ra.tobytes() == rb.tobytes()


def _diagnostic_decoder(p):
    """Decoder whose blocks are identities and whose visible tokens carry nothing,
    so each output row shows whether a mask token sits at that position."""
    dec = p.decoder
    dec["embed_w"].data[:] = 0.0
    dec["embed_b"].data[:] = 0.0
    dec["mask_token"].data[:] = 100.0 * np.tile([1.0, -1.0], TINY.decoder_dim // 2)
    for k in ("blocks.0.wo", "blocks.0.bo", "blocks.0.fc2_w", "blocks.0.fc2_b"):
        dec[k].data[:] = 0.0
    dec["norm_g"].data[:] = 1.0
    dec["norm_b"].data[:] = 0.0
    dec["pred_w"].data[:] = 0.0
    dec["pred_w"].data[0, 0] = 1.0
    dec["pred_b"].data[:] = 0.0


def test_mask_tokens_land_on_masked_indices():
    p = tiny_params()
    _diagnostic_decoder(p)
    x = np.random.default_rng(5).standard_normal((10, TINY.patch_len))
    for vis in ([0, 1, 2], [7, 8, 9], [1, 4, 6]):
        plan = MaskPlan.from_visible(vis, 10)
        out = decode(encode(embed_patches(x, p), plan, p), plan, p).data[0, :, 0]
        # layer-normed mask token has +1 in column 0; the positional table alone stays below
        flagged = np.flatnonzero(out > 0.99)
        np.testing.assert_array_equal(flagged, plan.masked)


# ------------------------------------------------------ reconstruction loss


def test_reconstruction_loss_rigged_decoder_is_zero():
    cfg = TINY
    p = tiny_params()
    s = np.full((4, 4), 0.7)
    patches = patchify(s, cfg)
    p.decoder["pred_w"].data[:] = 0.0
    p.decoder["pred_b"].data[:] = patches[0]
    assert reconstruction_loss(patches, make_mask_plan(4, 0.5, 0), p).item() == 0.0


def test_reconstruction_loss_matches_hand_computed_mse():
    p = tiny_params(seed=1)
    patches = np.random.default_rng(6).standard_normal((4, TINY.patch_len))
    plan = MaskPlan.from_visible([1], 4)
    pred = decode(encode(embed_patches(patches, p), plan, p), plan, p).data[0]
    total, count = 0.0, 0
    for i in (0, 2, 3):
        for j in range(TINY.patch_len):
            total += (pred[i, j] - patches[i, j]) ** 2
            count += 1
    assert reconstruction_loss(patches, plan, p).item() == pytest.approx(total / count, rel=1e-12)


def test_loss_ignores_visible_rows_of_the_target():
    p = tiny_params(seed=2)
    patches = np.random.default_rng(7).standard_normal((6, TINY.patch_len))
    plan = MaskPlan.from_visible([0, 3], 6)
    pred = decode(encode(embed_patches(patches, p), plan, p), plan, p)
    target = patches[None].copy()
    base = ad.mse_masked(pred, target, plan.masked[None]).item()
    target[0, plan.visible] += 50.0
    assert ad.mse_masked(pred, target, plan.masked[None]).item() == base


def test_full_model_gradients_match_finite_differences():
    p = tiny_params(seed=4)
    patches = np.random.default_rng(8).standard_normal((4, TINY.patch_len))
    plan = MaskPlan.from_visible([2], 4)
    tensors = p.parameters("encoder", "decoder")
    assert check(lambda: reconstruction_loss(patches, plan, p), tensors) < 1e-3


# ------------------------------------------------------------- classify


def test_classify_sums_to_one_and_is_deterministic():
    p = tiny_params()
    s = np.random.default_rng(9).standard_normal((8, 4))
    np.random.seed(1)
    a = classify(s, p)
    np.random.seed(2)
    b = classify(s, p)
    assert abs(a.sum() - 1.0) < 1e-6
    assert a.tobytes() == b.tobytes()


def test_zero_head_is_uninformative():
    p = tiny_params()
    for t in p.head.values():
        t.data[:] = 0.0
    out = classify(np.random.default_rng(0).standard_normal((8, 4)), p)
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_batched_classification_matches_single():
    p = tiny_params()
    xs = np.random.default_rng(10).standard_normal((3, 8, TINY.patch_len))
    batch = classify_batch(xs, p)
    for i in range(3):
        np.testing.assert_allclose(batch[i], classify(xs[i], p), atol=1e-12)


# ---------------------------------------------------------- params/ckpt


def test_snapshot_restore_is_bitwise():
    p = ModelParams.init(TINY, seed=1)
    before = p.checksum()
    snap = p.snapshot()
    for t in p.parameters():
        t.data = t.data + 1.0
    assert p.checksum() != before
    p.restore(snap)
    assert p.checksum() == before


def test_checkpoint_round_trip(tmp_path):
    p = tiny_params(dtype=np.float32)
    fe = FrontendConfig(norm_mean=-3.5, norm_std=2.25)
    save_checkpoint(tmp_path / "a.ckpt", p, fe, ["pretrain"])
    save_checkpoint(tmp_path / "b.ckpt", p, fe, ["pretrain"])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ck = load_checkpoint(tmp_path / "a.ckpt", expect_patch=TINY, expect_frontend=FrontendConfig())
    assert ck.params.checksum() == p.checksum()
    assert ck.frontend == fe and ck.stages == ["pretrain"]


def test_checkpoint_mismatch_fails_loudly(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", ModelParams.init(TINY), FrontendConfig(), ["pretrain"])
    with pytest.raises(CheckpointError, match="patch"):
        load_checkpoint(tmp_path / "a.ckpt", expect_patch=PatchConfig())
    with pytest.raises(CheckpointError, match="frontend"):
        load_checkpoint(tmp_path / "a.ckpt", expect_frontend=FrontendConfig(n_mels=64))
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path / "bad.ckpt")
