import logging

import numpy as np
import pytest

from rsk.gradcheck import central_difference, max_relative_error
from rsk.model import (
    Adam,
    CheckpointError,
    Embedder,
    backward_through_normalization,
    load_checkpoint,
    save_checkpoint,
)


def test_outputs_are_unit_norm():
    rng = np.random.default_rng(0)
    for hidden in [(), (7,), (5, 6)]:
        model = Embedder.init(6, 4, hidden=hidden, seed=1)
        y = model.forward(rng.standard_normal((20, 6)))
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
        assert y.dtype == np.float64


def test_scale_invariance_of_linear_map():
    rng = np.random.default_rng(1)
    model = Embedder.init(5, 3, bias=False, seed=2)
    x = rng.standard_normal((4, 5))
    np.testing.assert_allclose(model.forward(3.7 * x), model.forward(x), atol=1e-14)


def test_identity_map():
    model = Embedder((3, 3), False, {"W0": np.eye(3)})
    x = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]])
    np.testing.assert_allclose(model.forward(x), [[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]])


def test_zero_output_is_perturbed_with_warning(caplog):
    model = Embedder((2, 2), False, {"W0": np.zeros((2, 2))})
    with caplog.at_level(logging.WARNING):
        y = model.forward(np.ones((1, 2)))
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[1.0, 0.0]])
    assert "near-zero" in caplog.text


def test_bad_feature_shape():
    with pytest.raises(ValueError):
        Embedder.init(4, 2).forward(np.zeros((3, 5)))


def test_normalization_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        u = rng.standard_normal((3, 5)) * rng.uniform(0.1, 10)
        g = rng.standard_normal((3, 5))

        def f(x):
            return float(np.sum(g * x / np.linalg.norm(x, axis=1, keepdims=True)))

        fd = central_difference(f, u)
        assert max_relative_error(backward_through_normalization(g, u), fd) <= 1e-5


def test_normalization_backward_rejects_degenerate_norm():
    with pytest.raises(FloatingPointError):
        backward_through_normalization(np.ones((1, 2)), np.zeros((1, 2)))


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    model = Embedder.init(4, 3, hidden=(5,), bias=True, seed=4)
    x = rng.standard_normal((6, 4))
    g = rng.standard_normal((6, 3))
    _, acts = model.forward(x, keep_cache=True)
    grads = model.backward(acts, g)
    for name, p in model.params.items():

        def f(v, name=name):
            probe = model.copy()
            probe.params[name] = v
            return float(np.sum(g * probe.forward(x)))

        assert max_relative_error(grads[name], central_difference(f, p)) <= 1e-6


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(lr=0.1)
    opt.step(params, {"w": np.array([3.0, -0.5, 0.0])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 0.5], atol=1e-7)


def test_adam_step_decay():
    opt = Adam(lr=1.0, milestones=(2, 4), decay=0.5)
    lrs = []
    params = {"w": np.zeros(1)}
    for _ in range(5):
        lrs.append(opt.current_lr())
        opt.step(params, {"w": np.ones(1)})
    assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_adam_minimises_quadratic():
    params = {"w": np.array([4.0, -3.0])}
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(params, {"w": 2 * params["w"]})
    assert np.all(np.abs(params["w"]) < 1e-2)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    model = Embedder.init(4, 3, hidden=(6,), seed=6)
    opt = Adam(lr=0.01, milestones=(10,))
    for _ in range(3):
        opt.step(model.params, {k: rng.standard_normal(v.shape) for k, v in model.params.items()})
    path = tmp_path / "ck.npz"
    save_checkpoint(path, model, opt, "abc123", {"seed": 7})
    m2, o2, header = load_checkpoint(path)
    assert header["config_hash"] == "abc123"
    assert header["config"] == {"seed": 7}
    assert m2.sizes == model.sizes and m2.bias == model.bias
    for k in model.params:
        assert np.array_equal(m2.params[k], model.params[k])
        assert np.array_equal(o2.m[k], opt.m[k])
        assert np.array_equal(o2.v[k], opt.v[k])
    assert o2.t == 3 and o2.milestones == (10,)
    x = rng.standard_normal((5, 4))
    assert np.array_equal(m2.forward(x), model.forward(x))


@pytest.mark.parametrize("payload", [b"", b"not a zip file", b"PK\x03\x04garbage"])
def test_corrupt_checkpoint(tmp_path, payload):
    path = tmp_path / "bad.npz"
    path.write_bytes(payload)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.npz")
