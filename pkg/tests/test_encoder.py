import time

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from aimclr import autodiff as ad
from aimclr import encoder as enc
from aimclr.skeleton import default_graph
from grad_cases import MODEL_CASES, TINY_CONFIG, TINY_GRAPH


def params_for(config=TINY_CONFIG, seed=0):
    return enc.init_params(config, np.random.default_rng(seed))


def test_zero_input_zero_params_gives_zero_h():
    params = {k: ad.Tensor(np.zeros(v.shape)) for k, v in params_for().items()}
    _, h = enc.encode(params, np.zeros((3, 6, 4, 1)), TINY_GRAPH, TINY_CONFIG)
    np.testing.assert_array_equal(h.data, 0)


def test_output_shapes():
    fmap, h = enc.encode(params_for(), np.ones((2, 3, 7, 4, 2)), TINY_GRAPH, TINY_CONFIG)
    assert fmap.shape == (2, 5, 4, 4)  # stride 2 turns 7 frames into 4
    assert h.shape == (2, 5)
    np.testing.assert_allclose(h.data, fmap.data.mean(axis=(2, 3)))


def test_single_sequence_input_is_batched():
    x = np.random.default_rng(1).normal(size=(3, 6, 4, 1))
    _, a = enc.encode(params_for(), x, TINY_GRAPH, TINY_CONFIG)
    _, b = enc.encode(params_for(), x[None], TINY_GRAPH, TINY_CONFIG)
    np.testing.assert_array_equal(a.data, b.data)


def test_person_slots_are_mean_pooled():
    x = np.random.default_rng(2).normal(size=(1, 3, 6, 4, 1))
    fmap1, _ = enc.encode(params_for(), x, TINY_GRAPH, TINY_CONFIG)
    fmap2, _ = enc.encode(params_for(), np.concatenate([x, x], axis=-1), TINY_GRAPH, TINY_CONFIG)
    np.testing.assert_allclose(fmap1.data, fmap2.data, rtol=1e-14)


def test_input_checks():
    with pytest.raises(ValueError, match="channels"):
        enc.encode(params_for(), np.zeros((2, 6, 4, 1)), TINY_GRAPH, TINY_CONFIG)
    with pytest.raises(ValueError, match="joints"):
        enc.encode(params_for(), np.zeros((3, 6, 9, 1)), TINY_GRAPH, TINY_CONFIG)


def test_config_validation():
    with pytest.raises(ValueError, match="stride"):
        enc.EncoderConfig(channels=(4, 4), strides=(1,))
    with pytest.raises(ValueError, match="odd"):
        enc.EncoderConfig(kernel_size=4)


def test_projection_is_unit_norm_and_deterministic():
    params = params_for()
    h = np.random.default_rng(3).normal(size=(6, TINY_CONFIG.feature_dim))
    params["head.fc1.bias"] = ad.Tensor(np.full(TINY_CONFIG.feature_dim, 0.5))
    z = enc.project(params, ad.Tensor(h)).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-6)
    np.testing.assert_array_equal(z, enc.project(params, ad.Tensor(h)).data)


@pytest.mark.parametrize("name", sorted(MODEL_CASES))
def test_model_gradients(name):
    for seed in range(3):
        report = ad.grad_check(*MODEL_CASES[name](seed))
        assert report.passed, (name, seed, report.max_rel_error)


def test_momentum_examples():
    q = {"w": ad.Tensor(np.ones(3))}
    pair = enc.EncoderPair(q, {"w": ad.Tensor(np.zeros(3))}, momentum=0.999)
    enc.momentum_update(pair)
    np.testing.assert_allclose(pair.key["w"].data, 0.001, rtol=1e-12)
    pair0 = enc.EncoderPair(q, {"w": ad.Tensor(np.full(3, 7.0))}, momentum=0.0)
    enc.momentum_update(pair0)
    np.testing.assert_array_equal(pair0.key["w"].data, q["w"].data)


def test_momentum_pair_validation():
    with pytest.raises(ValueError):
        enc.EncoderPair({"w": ad.Tensor(np.ones(2))}, momentum=1.0)
    with pytest.raises(ValueError, match="shape"):
        enc.EncoderPair({"w": ad.Tensor(np.ones(2))}, {"w": ad.Tensor(np.ones(3))})
    with pytest.raises(ValueError, match="names"):
        enc.EncoderPair({"w": ad.Tensor(np.ones(2))}, {"v": ad.Tensor(np.ones(2))})


def test_key_copy_is_independent():
    pair = enc.EncoderPair(params_for())
    name = "encoder.block0.spatial_weight"
    pair.query[name].data += 1
    assert not np.array_equal(pair.query[name].data, pair.key[name].data)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(1, 50), st.integers(0, 1000))
def test_momentum_contracts_geometrically(m, n, seed):
    assume(m ** n > 1e-6)  # below this the gap sits at rounding level
    rng = np.random.default_rng(seed)
    q = {"w": ad.Tensor(rng.normal(size=5))}
    pair = enc.EncoderPair(q, {"w": ad.Tensor(rng.normal(size=5))}, momentum=m)
    d0 = np.linalg.norm(pair.key["w"].data - q["w"].data)
    for _ in range(n):
        enc.momentum_update(pair)
    d = np.linalg.norm(pair.key["w"].data - q["w"].data)
    assert d == pytest.approx(d0 * m ** n, rel=1e-6)


def test_checkpoint_container_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4).astype(np.float32), "c": np.array(1.5)}
    enc.save_arrays(tmp_path / "x.ckpt", arrays)
    out = enc.load_arrays(tmp_path / "x.ckpt", {k: v.shape for k, v in arrays.items()})
    for k in arrays:
        assert out[k].dtype == arrays[k].dtype
        assert out[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_errors(tmp_path):
    enc.save_arrays(tmp_path / "x.ckpt", {"a": np.ones((2, 2))})
    with pytest.raises(enc.CheckpointError, match="shape"):
        enc.load_arrays(tmp_path / "x.ckpt", {"a": (3, 2)})
    with pytest.raises(enc.CheckpointError, match="missing"):
        enc.load_arrays(tmp_path / "x.ckpt", {"a": (2, 2), "b": (1,)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(enc.CheckpointError, match="truncated"):
        enc.load_arrays(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(enc.CheckpointError, match="magic"):
        enc.load_arrays(tmp_path / "m.ckpt")


def test_params_roundtrip_through_arrays():
    params = enc.init_params(enc.EncoderConfig(), np.random.default_rng(5))
    back = enc.arrays_to_params(enc.params_to_arrays(params, "query"), "query")
    assert back.keys() == params.keys()
    for k in params:
        np.testing.assert_array_equal(back[k].data, params[k].data)


def test_default_encoder_on_default_graph():
    config = enc.EncoderConfig()
    params = enc.init_params(config, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(2, 3, 32, 9, 1))
    fmap, h = enc.encode(params, x, default_graph(), config)
    assert fmap.shape == (2, config.feature_dim, 16, 9)
    assert np.all(np.isfinite(h.data))


def test_person_permutation_leaves_h_unchanged():
    x = np.random.default_rng(8).normal(size=(2, 3, 6, 4, 3))
    _, a = enc.encode(params_for(), x, TINY_GRAPH, TINY_CONFIG)
    _, b = enc.encode(params_for(), x[..., [2, 0, 1]], TINY_GRAPH, TINY_CONFIG)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-13)


def test_equal_parameters_give_equal_key_and_query_embeddings():
    pair = enc.EncoderPair(params_for())
    x = np.random.default_rng(9).normal(size=(2, 3, 6, 4, 1))
    zq = enc.project(pair.query, enc.encode(pair.query, x, TINY_GRAPH, TINY_CONFIG)[1]).data
    zk = enc.project(pair.key, enc.encode(pair.key, x, TINY_GRAPH, TINY_CONFIG)[1]).data
    np.testing.assert_array_equal(zq, zk)


def test_default_step_budget():
    from aimclr import training as tr
    cfg = tr.TrainConfig(batch_size=1)
    state = tr.init_state(cfg, default_graph())
    x = np.random.default_rng(10).normal(size=(1, 3, 32, 9, 1))
    tr.pretrain_step(state, x)  # warm up
    t0 = time.perf_counter()
    for _ in range(5):
        tr.pretrain_step(state, x)
    assert (time.perf_counter() - t0) / 5 < 0.05
