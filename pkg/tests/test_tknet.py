import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tknets import numcore as nc
from tknets import tknet as tk


def identity_params(dim=2, functions=("identity",), n_classes=2, koopman=None):
    enc = tk.EncoderSpec(dim, (), "tanh", dim)
    meas = tk.MeasurementSpec("predefined", functions)
    p = tk.init_params(enc, meas, n_classes, seed=0)
    p.tensors["enc.W0"] = np.eye(dim)
    p.tensors["enc.b0"] = np.zeros((1, dim))
    k = meas.koopman_dim(dim)
    p.tensors["koopman"] = np.eye(k) if koopman is None else np.asarray(koopman, dtype=float)
    return p


def random_params(seed=0, in_dim=3, measurement=None, n_classes=3):
    enc = tk.EncoderSpec(in_dim, (5,), "tanh", 4)
    return tk.init_params(enc, measurement or tk.MeasurementSpec(), n_classes, seed=seed)


def test_embed_identity_composition():
    x = np.random.default_rng(0).normal(size=(6, 2))
    assert np.array_equal(tk.embed(identity_params(), x), x)


def test_embed_concatenated_dimension():
    p = identity_params(functions=("identity", "sin"))
    assert p.koopman_dim == 4
    assert tk.embed(p, np.ones((3, 2))).shape == (3, 4)


def test_embed_sine():
    p = identity_params(functions=("sin",))
    out = tk.embed(p, [[0.0, np.pi / 2]])
    assert np.allclose(out, [[0.0, 1.0]], atol=1e-12)


def test_embed_dimension_mismatch():
    with pytest.raises(ValueError, match="features"):
        tk.embed(identity_params(), np.ones((2, 3)))


def test_forecast_identity_and_scaling():
    z = np.random.default_rng(1).normal(size=(5, 2))
    assert np.array_equal(tk.forecast(identity_params(), z), z)
    assert np.allclose(tk.forecast(identity_params(koopman=2 * np.eye(2)), z), 2 * z)
    with pytest.raises(ValueError):
        tk.forecast(identity_params(), np.ones((1, 3)))


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_forecast_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    p = identity_params(koopman=rng.normal(size=(2, 2)))
    z1, z2 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    lhs = tk.forecast(p, a * z1 + b * z2)
    rhs = a * tk.forecast(p, z1) + b * tk.forecast(p, z2)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_forecast_power():
    k = np.array([[0.0, -1.0], [1.0, 0.0]])
    p = identity_params(koopman=k)
    z = np.array([[1.0, 2.0]])
    assert np.allclose(tk.forecast(p, z, power=3), z @ np.linalg.matrix_power(k, 3).T)


def test_centroids_single_sample_per_class():
    p = random_params()
    x = np.random.default_rng(0).normal(size=(3, 3))
    c = tk.centroids_from_support(p, x, [0, 1, 2])
    assert np.allclose(c.vectors, tk.forecast(p, tk.embed(p, x)), atol=1e-14)


def test_centroids_arithmetic_mean():
    c = tk.centroids_from_support(identity_params(), [[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]], [0, 0, 1])
    assert np.allclose(c.vectors[0], [1.0, 0.0])


def test_centroids_invariant_to_duplication():
    p = random_params(2)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(9, 3)), np.repeat([0, 1, 2], 3)
    a = tk.centroids_from_support(p, x, y).vectors
    b = tk.centroids_from_support(p, np.vstack([x, x]), np.concatenate([y, y])).vectors
    assert np.allclose(a, b, atol=1e-12)


def test_centroids_empty_class():
    with pytest.raises(ValueError, match="no support"):
        tk.centroids_from_support(random_params(), np.ones((2, 3)), [0, 1])


def test_classify_equidistant_is_uniform():
    c = tk.Centroids(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
    p = tk.classify(identity_params(n_classes=4), c, [[0.0, 0.0]])
    assert np.allclose(p, 0.25)


def test_classify_two_class_hand_value():
    c = tk.Centroids(np.array([[0.0, 0.0], [1.0, 0.0]]))
    p = tk.classify(identity_params(), c, [[0.0, 0.0]])
    assert np.allclose(p, [[0.7311, 0.2689]], atol=1e-4)
    assert p.argmax() == 0


def test_classify_dimension_mismatch():
    with pytest.raises(ValueError):
        tk.classify(identity_params(), tk.Centroids(np.zeros((2, 3))), [[0.0, 0.0]])


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_classify_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed % 7)
    c = tk.Centroids(rng.normal(size=(3, 4)) * 3)
    probs = tk.classify(p, c, rng.normal(size=(6, 3)))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(probs > 0)


def test_classify_shift_invariance():
    # centroids in the xy-plane; moving the query along z adds the same constant to every distance
    p = identity_params(dim=3, n_classes=3)
    c = tk.Centroids(np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [-1.0, -1.0, 0.0]]))
    base = tk.classify(p, c, [[0.3, 0.1, 0.0]])
    shifted = tk.classify(p, c, [[0.3, 0.1, 1.7]])
    assert np.allclose(base, shifted, atol=1e-9)


def test_support_query_asymmetry():
    """The operator acts on the support path only."""
    k = np.array([[0.0, -1.0], [1.0, 0.0]])
    p = identity_params(koopman=k)
    sx = np.array([[1.0, 0.0], [-1.0, 0.0]])
    c = tk.centroids_from_support(p, sx, [0, 1])
    query = np.array([[0.0, 1.0]])
    with_op = tk.classify(p, c, query)
    control = tk.classify(p, tk.Centroids(tk.embed(p, sx)), query)
    assert with_op.argmax() == 0 and not np.allclose(with_op, control)
    # a head that also pushed the query through K would undo the rotation
    rotated_query = tk.classify(p, c, tk.forecast(p, query))
    assert not np.allclose(with_op, rotated_query)


def test_predefined_measurement_gradients():
    from tknets.episodic import Episode, episode_loss

    p = random_params(3, measurement=tk.MeasurementSpec("predefined", ("identity", "sin")))
    assert not any(name.startswith("meas") for name in p.tensors)
    rng = np.random.default_rng(0)
    ep = Episode(1, rng.normal(size=(6, 3)), np.repeat([0, 1, 2], 2), rng.normal(size=(6, 3)), np.repeat([0, 1, 2], 2))
    _, grads = episode_loss(p, ep)
    for name in ("enc.W0", "enc.W1", "koopman"):
        assert np.abs(grads[name]).sum() > 0


def test_learned_measurement_has_parameters():
    spec = tk.MeasurementSpec("learned", hidden=(6,), out_dim=5)
    p = random_params(measurement=spec)
    assert p.koopman_dim == 5 and p.koopman.shape == (5, 5)
    assert "meas.W0" in p.tensors and "meas.W1" in p.tensors
    assert tk.embed(p, np.ones((2, 3))).shape == (2, 5)


def test_koopman_initialised_near_identity():
    p = tk.init_params(tk.EncoderSpec(2, (), "tanh", 16), tk.MeasurementSpec(), 2, seed=0)
    noise = p.koopman - np.eye(16)
    assert 0.005 < noise.std() < 0.02


def test_spec_validation():
    with pytest.raises(ValueError):
        tk.MeasurementSpec("predefined", ("log",))
    with pytest.raises(ValueError):
        tk.MeasurementSpec("learned", out_dim=0)
    with pytest.raises(ValueError):
        tk.EncoderSpec(2, (), "sigmoid", 2)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = random_params(5, measurement=tk.MeasurementSpec("learned", hidden=(4,), out_dim=3))
    tk.save_checkpoint(tmp_path / "a.ckpt", p.header(), p.tensors)
    meta, tensors = tk.load_checkpoint(tmp_path / "a.ckpt")
    back = tk.params_from_checkpoint(meta, tensors)
    assert back.encoder == p.encoder and back.measurement == p.measurement
    for name, arr in p.tensors.items():
        assert back.tensors[name].tobytes() == arr.tobytes()
    tk.save_checkpoint(tmp_path / "b.ckpt", back.header(), back.tensors)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        tk.load_checkpoint(tmp_path / "x")


def test_graph_numerics_stay_finite_with_exp_measurement():
    p = identity_params(functions=("exp",))
    out = tk.embed(p, [[500.0, -500.0]])
    assert np.all(np.isfinite(out))
    with pytest.raises(nc.NonFiniteError):
        tk.embed(p, [[np.inf, 0.0]])
