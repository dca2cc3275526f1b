import numpy as np
import pytest

from mae_ttt.harness import ShiftSpec, load_recordings
from mae_ttt.metrics import Confusion, macro_f
from mae_ttt.model import classify_batch
from mae_ttt.ttt import (
    AdaptationTrace,
    TestRecording,
    TttConfig,
    sample_seed,
    sweep_steps,
    ttt_adapt,
    ttt_predict,
    ttt_predict_checkpoints,
    vote_probs,
)

from .conftest import segment

FAST = TttConfig(steps=3, views_per_batch=4)


def test_config_validation():
    with pytest.raises(ValueError):
        TttConfig(steps=-1)
    with pytest.raises(ValueError):
        TttConfig(views_per_batch=0)


def test_zero_steps_is_a_no_op(fresh_params, test_recordings):
    x = segment(test_recordings)
    enc, trace = ttt_adapt(x, fresh_params, TttConfig(steps=0))
    assert trace.steps == 0
    for k, t in fresh_params.encoder.items():
        assert enc[k].data.tobytes() == t.data.tobytes()
    probs, _ = ttt_predict(x, fresh_params, TttConfig(steps=0))
    assert probs.tobytes() == classify_batch(x, fresh_params)[0].tobytes()


def test_adapt_touches_only_a_private_encoder(fresh_params, test_recordings):
    x = segment(test_recordings)
    before = fresh_params.checksum()
    enc, trace = ttt_adapt(x, fresh_params, FAST, "s0")
    assert fresh_params.checksum() == before
    assert any(enc[k].data.tobytes() != t.data.tobytes() for k, t in fresh_params.encoder.items())
    assert trace.steps == 3 and all(np.isfinite(trace.losses))


def test_predict_restores_encoder_and_keeps_decoder_and_head(fresh_params, test_recordings):
    sums = {g: fresh_params.checksum(g) for g in ("encoder", "decoder", "head")}
    for rec in test_recordings[:3]:
        ttt_predict(rec.segments[0], fresh_params, FAST, rec.id)
        for g, s in sums.items():
            assert fresh_params.checksum(g) == s


def test_repeat_calls_are_identical(fresh_params, test_recordings):
    x = segment(test_recordings)
    a = ttt_predict(x, fresh_params, FAST, "same")
    b = ttt_predict(x, fresh_params, FAST, "same")
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].losses == b[1].losses


def test_sample_seed_depends_on_id_not_order():
    a = np.random.default_rng(sample_seed(0, "x")).integers(0, 2**31)
    b = np.random.default_rng(sample_seed(0, "y")).integers(0, 2**31)
    c = np.random.default_rng(sample_seed(0, "x")).integers(0, 2**31)
    assert a == c and a != b


def test_order_independence(fresh_params, test_recordings):
    recs = test_recordings[:3]
    forward = [ttt_predict(r.segments[0], fresh_params, FAST, r.id)[0].tobytes() for r in recs]
    backward = [ttt_predict(r.segments[0], fresh_params, FAST, r.id)[0].tobytes() for r in reversed(recs)]
    assert forward == backward[::-1]


def test_trace_loss_decreases_on_noisy_sample(corpus, pretrained, fresh_params):
    test = [e for e in corpus.entries if e.split == "test"]
    noisy = load_recordings(test[:5], corpus.root, pretrained.frontend, fresh_params.cfg,
                            shift=ShiftSpec("noise", "awgn", 5.0), seed=0)
    early, late = [], []
    for seed, rec in enumerate(noisy):
        _, trace = ttt_adapt(rec.segments[0], fresh_params, TttConfig(views_per_batch=16, seed=seed), rec.id)
        assert trace.steps == 20
        early.append(np.mean(trace.losses[:5]))
        late.append(np.mean(trace.losses[15:20]))
    assert np.mean(late) < np.mean(early)


def test_checkpoint_predictions_match_separate_runs(fresh_params, test_recordings):
    x = segment(test_recordings)
    cfg = TttConfig(steps=4, views_per_batch=4)
    probs, trace = ttt_predict_checkpoints(x, fresh_params, cfg, [0, 2, 4], "cp")
    assert probs[0].tobytes() == classify_batch(x, fresh_params)[0].tobytes()
    for k in (2, 4):
        direct, t = ttt_predict(x, fresh_params, TttConfig(steps=k, views_per_batch=4), "cp")
        assert direct.tobytes() == probs[k].tobytes()
        assert t.losses == trace.losses[:k]


def test_sweep_contracts(fresh_params, test_recordings):
    recs = test_recordings[:4]
    rows = sweep_steps(recs, fresh_params, FAST, [0])
    frozen = [vote_probs(list(classify_batch(np.stack(r.segments), fresh_params))) for r in recs]
    assert len(rows) == 1
    assert rows[0].macro_f == macro_f(Confusion.from_pairs([r.label for r in recs], frozen)).macro_f
    rows = sweep_steps(recs, fresh_params, FAST, [0, 1, 2, 3])
    assert [r.steps for r in rows] == [0, 1, 2, 3]
    with pytest.raises(ValueError, match="sorted"):
        sweep_steps(recs, fresh_params, FAST, [2, 1])
    with pytest.raises(ValueError, match="exceeds"):
        sweep_steps(recs, fresh_params, FAST, [0, 5])


def test_vote_probs_breaks_ties_by_mean_probability():
    assert vote_probs([np.array([0.4, 0.6]), np.array([0.7, 0.3])]) == 0
    assert vote_probs([np.array([0.2, 0.8]), np.array([0.6, 0.4])]) == 1


def test_recording_types():
    rec = TestRecording("r", 1, [np.zeros((2, 3))])
    assert rec.label == 1
    assert AdaptationTrace([0.5, 0.4]).steps == 2
