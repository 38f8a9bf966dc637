import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimclr import evaluation as ev
from aimclr import training as tr
from aimclr.encoder import EncoderConfig, encode
from aimclr.skeleton import default_graph, generate_synthetic, synthetic_arrays

SMALL = EncoderConfig(3, (8, 8), (1, 2), 3, 8)


@pytest.fixture(scope="module")
def state():
    return tr.init_state(tr.TrainConfig(encoder=SMALL, bank_size=16, seed=1), default_graph())


@pytest.fixture(scope="module")
def arrays():
    data, labels = synthetic_arrays(4, 16, T=8, seed=2)
    return data.astype(np.float64), labels


def brute_force_1nn(train, ytr, test):
    preds = []
    for q in test:
        best, best_sim = None, -np.inf
        for j, t in enumerate(train):
            sim = q @ t / (np.linalg.norm(q) * np.linalg.norm(t))
            if sim > best_sim:
                best, best_sim = j, sim
        preds.append(ytr[best])
    return np.array(preds)


def test_knn_train_equals_test_is_perfect(state, arrays):
    report = ev.knn_eval(state, arrays, arrays)
    assert report.accuracy == 1.0


def test_knn_matches_brute_force_oracle(state, arrays):
    data, labels = arrays
    train, test = (data[::2], labels[::2]), (data[1::2], labels[1::2])
    ftr, _ = ev.features(state, train)
    fte, _ = ev.features(state, test)
    report = ev.knn_eval(state, train, test)
    np.testing.assert_array_equal(report.predictions, brute_force_1nn(ftr, train[1], fte))


def test_random_encoder_above_chance_floor(state, arrays):
    data, labels = arrays
    report = ev.knn_eval(state, (data[::2], labels[::2]), (data[1::2], labels[1::2]))
    assert report.accuracy >= ev.chance_floor(4, 32)


def test_knn_vote_tie_goes_to_nearest():
    train = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    labels = np.array([0, 1, 1, 0])
    preds, votes = ev.knn_predict(train, labels, np.array([[1.0, 0.05]]), k=2)
    assert preds[0] == 0
    np.testing.assert_allclose(votes[0], [0.5, 0.5])


def test_per_class_accuracy_consistent_with_top1():
    report = ev.make_report("x", [0, 1, 1, 2, 2, 2], [0, 0, 1, 2, 2, 1], 10, ["joint"])
    counts = {0: 2, 1: 2, 2: 2}
    total = sum(report.per_class[c] * n for c, n in counts.items()) / 6
    assert report.accuracy == pytest.approx(total)
    assert 0 <= report.accuracy <= 1


def test_linear_eval_leaves_encoder_untouched(state, arrays):
    before = {k: v.data.copy() for k, v in state.pair.query.items()}
    ev.linear_eval(state, arrays, arrays, epochs=5)
    for k, v in state.pair.query.items():
        assert v.data.tobytes() == before[k].tobytes()


def test_linear_separable_features_reach_full_accuracy():
    rng = np.random.default_rng(0)
    centers = np.eye(3) * 5
    labels = np.repeat(np.arange(3), 20)
    feats = centers[labels] + rng.normal(scale=0.3, size=(60, 3))
    w, b, history = ev.train_linear(feats, labels, 3, epochs=200, lr=0.5)
    assert np.mean((feats @ w + b).argmax(axis=1) == labels) == 1.0
    assert all(b2 <= a + 1e-12 for a, b2 in zip(history, history[1:]))  # convex, full batch


def test_zero_epoch_protocols_are_reproducible(state, arrays):
    a = ev.linear_eval(state, arrays, arrays, epochs=0, seed=4)
    b = ev.linear_eval(state, arrays, arrays, epochs=0, seed=4)
    np.testing.assert_array_equal(a.scores, b.scores)
    c = ev.finetune_eval(state, arrays, 1.0, arrays, epochs=0, seed=4)
    d = ev.finetune_eval(state, arrays, 1.0, arrays, epochs=0, seed=4)
    np.testing.assert_array_equal(c.scores, d.scores)


def test_label_subset_counts():
    labels = np.repeat(np.arange(4), 64)
    np.testing.assert_array_equal(ev.label_subset(labels, 1.0), np.arange(256))
    sub = ev.label_subset(labels, 0.1, seed=3)
    assert len(sub) == 26
    assert set(np.bincount(labels[sub])) <= {6, 7}
    np.testing.assert_array_equal(sub, ev.label_subset(labels, 0.1, seed=3))
    tiny = ev.label_subset(labels, 0.001)
    np.testing.assert_array_equal(np.bincount(labels[tiny]), [1, 1, 1, 1])
    with pytest.raises(ValueError):
        ev.label_subset(labels, 0.0)


def test_finetune_trains_and_names_protocol(state, arrays):
    report = ev.finetune_eval(state, arrays, 0.5, arrays, epochs=2)
    assert report.protocol == "semi-supervised@0.5"
    assert report.num_train == 32
    assert len(report.history) == 2


def test_fusion_single_stream_is_identity(state, arrays):
    report = ev.linear_eval(state, arrays, arrays, epochs=3)
    fused = ev.fuse_streams([report], [1.0])
    np.testing.assert_array_equal(fused.predictions, report.predictions)
    assert fused.accuracy == report.accuracy


def test_fusion_hand_example():
    labels = np.array([0, 1])
    joint = ev.make_report("linear", [0, 0], labels, 4, ["joint"], np.array([[0.6, 0.4], [0.7, 0.3]]))
    motion = ev.make_report("linear", [1, 1], labels, 4, ["motion"], np.array([[0.1, 0.9], [0.0, 1.0]]))
    fused = ev.fuse_streams([joint, motion])
    # sample 0: 0.6*[0.6,0.4] + 0.4*[0.1,0.9] = [0.40, 0.60]; sample 1: [0.42, 0.58]
    np.testing.assert_allclose(fused.scores, [[0.40, 0.60], [0.42, 0.58]])
    np.testing.assert_array_equal(fused.predictions, [1, 1])
    assert fused.weights == [0.6, 0.4]
    assert fused.accuracy == 0.5


def test_fusion_rejects_mismatched_sets():
    a = ev.make_report("k", [0], [0], 1, ["joint"], np.array([[1.0, 0.0]]))
    b = ev.make_report("k", [0, 1], [0, 1], 1, ["bone"], np.eye(2))
    with pytest.raises(ValueError, match="different"):
        ev.fuse_streams([a, b])
    with pytest.raises(ValueError, match="weights"):
        ev.fuse_streams([a], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_fusion_weight_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=8)
    reports = [ev.make_report("k", labels, labels, 8, [s], rng.random((8, 3))) for s in ("joint", "bone")]
    w = rng.uniform(0.1, 1, size=2)
    a = ev.fuse_streams(reports, list(w))
    b = ev.fuse_streams(reports, list(w * c))
    np.testing.assert_array_equal(a.predictions, b.predictions)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_two_identical_streams_keep_predictions(seed, k):
    rng = np.random.default_rng(seed)
    scores = rng.random((6, k + 1))
    r = ev.make_report("k", scores.argmax(1), np.zeros(6, int), 6, ["joint"], scores)
    fused = ev.fuse_streams([r, r], [rng.uniform(0.1, 2), rng.uniform(0.1, 2)])
    np.testing.assert_array_equal(fused.predictions, r.predictions)


def test_report_json_roundtrip(tmp_path):
    r = ev.make_report("linear", [0, 1], [0, 0], 3, ["bone"], np.array([[0.9, 0.1], [0.2, 0.8]]))
    ev.save_report(r, tmp_path / "r.json")
    back = ev.load_report(tmp_path / "r.json")
    assert back.accuracy == r.accuracy and back.per_class == r.per_class
    np.testing.assert_array_equal(back.scores, r.scores)
    assert "top-1      0.5000" in r.table()


def test_export_embeddings(tmp_path, state):
    manifest = generate_synthetic(2, 3, tmp_path / "data", T=8, seed=0)
    ckpt = tr.save_checkpoint(state, tmp_path / "ckpt")
    out = ev.export_embeddings(ckpt, manifest, tmp_path / "e.jsonl")
    records = [json.loads(s) for s in out.read_text().splitlines()]
    assert len(records) == len(manifest)
    assert records[0]["id"] == "seq_00000"
    x, _ = manifest.load_all()
    _, h = encode(state.pair.query, x, state.graph, state.config.encoder)
    np.testing.assert_array_equal(np.array([r["h"] for r in records]), h.data)
    again = ev.export_embeddings(ckpt, manifest, tmp_path / "f.jsonl")
    assert again.read_bytes() == out.read_bytes()


def test_checkpoint_and_manifest_paths(tmp_path, state):
    generate_synthetic(2, 3, tmp_path / "data", T=8, seed=0, test_per_class=1)
    ckpt = tr.save_checkpoint(state, tmp_path / "ckpt")
    report = ev.knn_eval(ckpt, tmp_path / "data" / "manifest.json", tmp_path / "data" / "test_manifest.json")
    assert (report.num_train, report.num_test) == (6, 2)
