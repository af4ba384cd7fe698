import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ascnet.errors import ConfigError, LabelError
from ascnet.evaluate import (VideoFeature, appearance_probe, average_features, collapse_metrics,
                             extract_video_features, finetune, linear_probe, speed_probe, split_query_gallery,
                             topk_retrieval)
from ascnet.model import EncoderConfig, init_params

from conftest import SMALL_MODEL


def features(rng, n, d=6, n_classes=3, start_id=0):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return [VideoFeature(v[i], start_id + i, int(rng.integers(n_classes))) for i in range(n)]


def sort_oracle(queries, gallery, ks):
    hits = {k: 0 for k in ks}
    for q in queries:
        ranked = sorted(gallery, key=lambda g: (-float(np.dot(g.vector, q.vector)), g.video_id))
        for k in ks:
            hits[k] += any(g.appearance_class == q.appearance_class for g in ranked[:k])
    return {k: hits[k] / len(queries) for k in ks}


def test_topk_matches_sort_oracle():
    ks = (1, 5, 10, 20, 50)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        q = features(rng, int(rng.integers(1, 10)), n_classes=4)
        g = features(rng, int(rng.integers(1, 60)), n_classes=4, start_id=100)
        report = topk_retrieval(q, g, ks)
        assert report.topk == sort_oracle(q, g, ks)
        vals = [report.topk[k] for k in ks]
        assert vals == sorted(vals)


def test_topk_tie_break_by_video_id():
    q = [VideoFeature(np.array([1.0, 0.0]), 0, 0)]
    g = [VideoFeature(np.array([1.0, 0.0]), 9, 0), VideoFeature(np.array([1.0, 0.0]), 3, 1)]
    assert topk_retrieval(q, g, (1, 2)).topk == {1: 0.0, 2: 1.0}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_topk_invariant_under_rotation(seed):
    rng = np.random.default_rng(seed)
    q, g = features(rng, 5), features(rng, 20, start_id=50)
    R, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    rot = lambda fs: [VideoFeature(R @ f.vector, f.video_id, f.appearance_class) for f in fs]
    assert topk_retrieval(q, g).topk == topk_retrieval(rot(q), rot(g)).topk


def test_topk_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        topk_retrieval(features(rng, 2), [])
    f = features(rng, 3)
    with pytest.raises(ConfigError):
        topk_retrieval(f[:2], f[1:])


def test_report_table_lists_every_k():
    rng = np.random.default_rng(0)
    text = topk_retrieval(features(rng, 4), features(rng, 60, start_id=10)).table()
    for k in (1, 5, 10, 20, 50):
        assert f"top-{k}" in text


def test_split_is_seeded_partition():
    items = list(range(50))
    q, g = split_query_gallery(items, seed=3)
    assert len(q) == 10 and sorted(q + g) == items
    assert split_query_gallery(items, seed=3) == (q, g)
    assert split_query_gallery(items, seed=4)[0] != q


def test_average_features_is_order_free():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(10, 8)).astype(np.float32)
    a, _ = average_features(feats)
    b, _ = average_features(feats[rng.permutation(10)])
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1) < 1e-6
    zero, degenerate = average_features(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert degenerate and not zero.any()


def test_linear_probe_separable_and_errors():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-2, 0.3, (40, 3)), rng.normal(2, 0.3, (40, 3))])
    y = np.repeat([0, 1], 40)
    res = linear_probe(X[::2], y[::2], X[1::2], y[1::2], 2, epochs=50)
    assert res.accuracy == 1.0 and res.confusion.sum() == 40
    again = linear_probe(X[::2], y[::2], X[1::2], y[1::2], 2, epochs=50)
    assert again.to_dict() == res.to_dict()
    with pytest.raises(LabelError):
        linear_probe(X, np.zeros(80, int), X, y, 2)
    with pytest.raises(LabelError):
        linear_probe(X, y, X, y + 1, 2)


def test_collapse_metrics():
    m = collapse_metrics(np.tile([[0.6, 0.8]], (5, 1)))
    assert m.mean_std == 0 and m.mean_cosine == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    r = collapse_metrics(rng.normal(size=(200, 16)))
    assert r.mean_std > 0.5 and abs(r.mean_cosine) < 0.1
    with pytest.raises(ConfigError):
        collapse_metrics(np.ones((1, 3)))


@pytest.fixture(scope="module")
def small_params():
    return init_params(EncoderConfig(**SMALL_MODEL), seed=0)


def test_video_features_and_probes(small_corpus, small_params):
    feats = extract_video_features(small_corpus, small_params, "appearance")
    assert len(feats) == 8 and all(abs(np.linalg.norm(f.vector) - 1) < 1e-5 for f in feats)
    assert [f.appearance_class for f in feats] == [v.appearance_class for v in small_corpus]
    a = appearance_probe(small_params, small_corpus, 2, seed=1, epochs=20)
    s = speed_probe(small_params, small_corpus, (1, 2), seed=1, epochs=20)
    for res in (a, s):
        assert 0.0 <= res.accuracy <= 1.0
    assert s.n_test == 2 * 2 * 2  # 2 held-out videos x 2 speeds x 2 clips
    assert speed_probe(small_params, small_corpus, (1, 2), seed=1, epochs=20).accuracy == s.accuracy


def test_finetune_is_reproducible_and_private(small_corpus, small_params):
    before = small_params.arrays()
    acc = finetune(small_corpus, small_params, 2, epochs=1, batch_size=4, seed=0)
    assert 0.0 <= acc <= 1.0
    assert finetune(small_corpus, small_params, 2, epochs=1, batch_size=4, seed=0) == acc
    for name, v in small_params.arrays().items():
        np.testing.assert_array_equal(v, before[name])
