import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ascnet.errors import ConfigError, NumericsError
from ascnet.model import EncoderConfig
from ascnet.objectives import retrieve_similar
from ascnet.pretrain import (LarsState, TrainConfig, Trainer, ckpt_name, cosine_lr, lars_step, load_model,
                             scaled_lr, train)

from conftest import SMALL_MODEL, small_train


def step_once(w, g, lr=0.1, momentum=0.9, wd=0.0, eta=0.001, state=None):
    params = {"w": np.array(w, dtype=np.float64)}
    state = state or LarsState.for_params(params)
    lars_step(params, {"w": np.array(g, dtype=np.float64)}, state, lr, momentum, wd, eta)
    return params["w"], state


def test_lars_hand_computed_step():
    # |w| = 5, |g| = 1 -> local_lr = 0.001 * 5 / 1 = 0.005; update = 0.1 * 0.005 * g
    w, _ = step_once([[3.0, 4.0]], [[0.6, 0.8]])
    np.testing.assert_allclose(w, [[2.9997, 3.9996]], atol=1e-12)


def test_lars_zero_gradient_leaves_weights():
    w, state = step_once([[1.0, -2.0], [0.5, 0.0]], np.zeros((2, 2)))
    np.testing.assert_array_equal(w, [[1.0, -2.0], [0.5, 0.0]])
    assert not state.buffers["w"].any()


def test_lars_pure_weight_decay():
    # g' = wd * w, local_lr = eta / wd, so w <- w * (1 - lr * eta)
    w0 = np.array([[1.0, 2.0], [-3.0, 0.5]])
    w, _ = step_once(w0, np.zeros((2, 2)), lr=0.5, wd=0.1, eta=0.02)
    np.testing.assert_allclose(w, w0 * (1 - 0.5 * 0.02), rtol=1e-12)


def test_lars_momentum_over_three_steps():
    # w = [2, 0], g = [0, 1] every step, lr 0.2, eta 0.01: each step adds 0.002 * |w| to the buffer
    # step 1: v = 0.004                                    -> w[1] = -0.004
    # step 2: v = 0.9 * 0.004 + 0.002 * 2.000004           -> w[1] = -0.011600008
    # step 3: v = 0.9 * 0.007600008 + 0.002 * 2.0000336    -> w[1] = -0.0224400825
    expected = [-0.004, -0.011600008, -0.0224400825]
    w, state = [[2.0, 0.0]], None
    for want in expected:
        w, state = step_once(w, [[0.0, 1.0]], lr=0.2, momentum=0.9, eta=0.01, state=state)
        assert w[0, 0] == 2.0
        assert abs(w[0, 1] - want) <= 1e-6 * 1e-3


def test_lars_bias_exclusion():
    params = {"b": np.array([1.0, -1.0])}
    state = LarsState.for_params(params)
    lars_step(params, {"b": np.array([0.5, 0.25])}, state, 0.1, 0.9, 0.5, 0.001)
    np.testing.assert_allclose(params["b"], [0.95, -1.025], rtol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_lars_scaled_tensor_direction_invariance(seed, c):
    rng = np.random.default_rng(seed)
    w, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w1, _ = step_once(w, g, momentum=0.0)
    w2, _ = step_once(c * w, c * g, momentum=0.0)
    # the update is eta * lr * |w| * g / |g|: scaling both by c scales the step by c
    np.testing.assert_allclose((w - w1) * c, c * w - w2, rtol=1e-9, atol=1e-12)
    d1, d2 = (w - w1).ravel(), (c * w - w2).ravel()
    assert d1 @ d2 / (np.linalg.norm(d1) * np.linalg.norm(d2)) == pytest.approx(1.0)


def test_lars_rejects_nan_before_touching_anything():
    params = {"a": np.ones((2, 2)), "b": np.ones(2)}
    state = LarsState.for_params(params)
    with pytest.raises(NumericsError):
        lars_step(params, {"a": np.ones((2, 2)), "b": np.array([np.nan, 0.0])}, state, 0.1, 0.9, 0.0, 0.001)
    np.testing.assert_array_equal(params["a"], np.ones((2, 2)))


def test_lr_rules():
    assert scaled_lr(0.3, 128) == 0.3
    assert scaled_lr(0.3, 16) == pytest.approx(0.0375)
    assert cosine_lr(0, 100, 0.3) == 0.3
    assert cosine_lr(100, 100, 0.3) == pytest.approx(0.003, abs=1e-15)
    vals = [cosine_lr(s, 50, 1.0) for s in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------------------
# config


@pytest.mark.parametrize("bad", [
    {"gamma": 1.5}, {"speed_set": (3,)}, {"speed_set": ()}, {"instance_mode": "nearest"},
    {"scp_mode": "both"}, {"batch_size": 0}, {"fixed_speed_pair": True, "speed_set": (1, 2, 4)},
])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_speed_classes_sorted_distinct():
    assert TrainConfig(speed_set=(8, 4, 8)).speed_classes == (4, 8)


# --------------------------------------------------------------------------
# trainer


def small_model(**kw):
    return EncoderConfig(**{**SMALL_MODEL, **kw})


def test_trainer_rejects_bad_setups(small_corpus):
    with pytest.raises(ConfigError):
        Trainer(small_corpus[:1], small_train(), small_model())
    with pytest.raises(ConfigError):
        Trainer(small_corpus, small_train(clip_frames=7), small_model())
    with pytest.raises(ConfigError):
        Trainer(small_corpus, small_train(scp_mode="sp", speed_set=(1, 2, 4)), small_model())
    with pytest.raises(ConfigError):
        Trainer(small_corpus, small_train(speed_set=(8,)), small_model())  # 57 frames > 40


def test_train_steps_are_deterministic(small_corpus):
    a = train(small_corpus, small_train(max_steps=4), small_model())
    b = train(small_corpus, small_train(max_steps=4), small_model())
    assert [r.log_line() for r in a.records] == [r.log_line() for r in b.records]
    c = train(small_corpus, small_train(max_steps=4, seed=1), small_model())
    assert [r.log_line() for r in a.records] != [r.log_line() for r in c.records]


def test_schedule_and_epochs(small_corpus):
    tr = Trainer(small_corpus, small_train(epochs=3), small_model())
    assert tr.steps_per_epoch == 2 and tr.total_steps == 6
    seen = sorted(v.video_id for s in range(2) for v in tr.batch_videos(s))
    assert seen == list(range(8))


def test_step_inserts_one_record_per_video(small_corpus):
    tr = Trainer(small_corpus, small_train(bank_capacity=16), small_model())
    rec = tr.train_step()
    assert len(tr.bank) == 4 and rec.step == 0 and tr.step == 1
    assert rec.l_m is not None and rec.l_sp is None
    assert rec.total == pytest.approx(0.5 * rec.l_m + 0.5 * rec.l_a, rel=1e-6)


@pytest.mark.parametrize("mode", ["same", "different", "similar"])
def test_partner_modes(small_corpus, mode):
    tr = Trainer(small_corpus, small_train(instance_mode=mode), small_model())
    rng = np.random.default_rng(0)
    for _ in range(3):
        tr.train_step()
    video = small_corpus[0]
    query = tr.bank.vectors[0]
    partner = tr._partner(video, query, rng)
    if mode == "same":
        assert partner is video
    else:
        assert partner.video_id != video.video_id


def test_similar_mode_uses_retrieval_once_bank_is_full(small_corpus):
    tr = Trainer(small_corpus, small_train(), small_model())
    tr.train_step()
    assert tr.bank.full
    video = small_corpus[0]
    query = next(r.vector for r in tr.bank.records() if r.video_id != video.video_id)
    want = retrieve_similar(query, tr.bank, video.video_id).video_id
    assert tr._partner(video, query, np.random.default_rng(0)).video_id == want


def test_similar_mode_falls_back_while_bank_fills(small_corpus):
    tr = Trainer(small_corpus, small_train(bank_capacity=64), small_model())
    tr.train_step()
    assert not tr.bank.full
    picks = {tr._partner(small_corpus[0], tr.bank.vectors[0], np.random.default_rng(s)).video_id
             for s in range(40)}
    assert 0 not in picks and len(picks) > 1


def test_sp_mode_trains_classifier_only(small_corpus):
    tr = Trainer(small_corpus, small_train(scp_mode="sp"), small_model())
    before = tr.params.arrays()
    rec = tr.train_step()
    after = tr.params.arrays()
    assert rec.l_m is None and rec.l_sp is not None
    assert not np.array_equal(before["speed_cls.weight"], after["speed_cls.weight"])
    np.testing.assert_array_equal(before["pred_m.weight"], after["pred_m.weight"])


def test_checkpoints_and_resume_are_exact(small_corpus, tmp_path):
    cfg = small_train(max_steps=6, checkpoint_every=3)
    full = tmp_path / "full"
    train(small_corpus, cfg, small_model(), out_dir=full)
    assert sorted(p.name for p in full.glob("ckpt_*")) == [ckpt_name(0), ckpt_name(3), ckpt_name(6)]
    resumed = tmp_path / "resumed"
    train(small_corpus, cfg, small_model(), out_dir=resumed, resume=full / ckpt_name(3))
    assert (full / "metrics.jsonl").read_bytes() == (resumed / "metrics.jsonl").read_bytes()
    a, _ = load_model(full / ckpt_name(6))
    b, meta = load_model(resumed / ckpt_name(6))
    assert meta["step"] == 6
    for name in a.names():
        np.testing.assert_array_equal(a[name].values, b[name].values)
    lines = (full / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(ln)["step"] for ln in lines] == list(range(6))
    assert "ms" not in lines[0]


def test_resume_rejects_other_corpus(small_corpus, tmp_path):
    train(small_corpus, small_train(max_steps=1), small_model(), out_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(small_corpus[:6], small_train(max_steps=2), small_model(), resume=tmp_path / ckpt_name(1))


def test_zero_epochs_writes_initial_checkpoint_only(small_corpus, tmp_path):
    tr = train(small_corpus, small_train(epochs=0), small_model(), out_dir=tmp_path)
    assert tr.step == 0
    assert [p.name for p in tmp_path.glob("ckpt_*")] == [ckpt_name(0)]
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_feature_std_is_finite_and_positive(small_corpus):
    tr = Trainer(small_corpus, small_train(), small_model())
    rec = tr.train_step()
    assert math.isfinite(rec.feat_std) and rec.feat_std > 0
