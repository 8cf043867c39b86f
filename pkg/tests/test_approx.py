import math

import numpy as np
import pytest

from decisionflow.approx import (AdamState, Approximator, TargetTracker,
                                 adam_step, load_checkpoint, save_checkpoint)
from decisionflow.errors import (ConfigError, InputShapeError, SchemaError,
                                 TrainingDivergenceError)

from conftest import full_fd_gradient, relative_error


def _linear_net(weights, bias):
    """Single affine layer with hand-set parameters."""
    w = np.asarray(weights, dtype=np.float64)
    fi, fo = w.shape
    params = np.concatenate([w.ravel(), np.asarray(bias, dtype=np.float64)])
    return Approximator(inputs=(("x", fi),), hidden=(), out_dim=fo, params=params)


def test_forward_identity_affine_layer():
    net = _linear_net(np.eye(2), [0.0, 0.0])
    np.testing.assert_array_equal(net(x=np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_zero_weights_returns_bias():
    net = _linear_net(np.zeros((3, 2)), [0.7, -1.2])
    for x in (np.zeros(3), np.array([5.0, -3.0, 2.0])):
        np.testing.assert_array_equal(net(x=x), [0.7, -1.2])


def test_forward_two_layer_hand_composition():
    # [1] -> silu(2 hidden units) -> [1], weights set by hand; the expected
    # value is the longhand evaluation of the two affine+nonlinear stages
    w1 = np.array([[1.0, -2.0]])
    b1 = np.array([0.5, 0.25])
    w2 = np.array([[2.0], [1.0]])
    b2 = np.array([-0.3])
    params = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
    net = Approximator(inputs=(("x", 1),), hidden=(2,), out_dim=1,
                       activation="silu", params=params)

    x = 0.5
    z1 = x * 1.0 + 0.5
    z2 = x * -2.0 + 0.25
    h1 = z1 / (1.0 + math.exp(-z1))
    h2 = z2 / (1.0 + math.exp(-z2))
    expected = 2.0 * h1 + 1.0 * h2 - 0.3
    got = net(x=np.array([x]))
    assert abs(float(got[0]) - expected) < 1e-14


def test_forward_is_pure_and_deterministic():
    net = Approximator(inputs=(("x", 3),), hidden=(16, 16), out_dim=2, seed=5)
    x = np.random.default_rng(1).normal(size=(4, 3))
    y1 = net(x=x)
    y2 = net(x=x)
    assert np.array_equal(y1, y2)


def test_init_deterministic_in_seed():
    a = Approximator(inputs=(("x", 3),), hidden=(8,), out_dim=2, seed=9)
    b = Approximator(inputs=(("x", 3),), hidden=(8,), out_dim=2, seed=9)
    c = Approximator(inputs=(("x", 3),), hidden=(8,), out_dim=2, seed=10)
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)


def test_param_count_invariant():
    net = Approximator(inputs=(("s", 3), ("a", 2)), hidden=(7, 5), out_dim=4)
    expected = (5 + 1) * 7 + (7 + 1) * 5 + (5 + 1) * 4
    assert net.n_params == expected == net.params.size


def test_forward_dim_mismatch_raises():
    net = Approximator(inputs=(("x", 3),), hidden=(4,), out_dim=1)
    with pytest.raises(InputShapeError):
        net(x=np.zeros(2))
    with pytest.raises(InputShapeError):
        net.forward({"x": np.zeros((5, 4))})
    with pytest.raises(InputShapeError):
        net.forward({"y": np.zeros(3)})


def test_backward_linear_input_gradient():
    w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    net = _linear_net(w, [0.0, 0.0])
    up = np.array([1.5, -0.5])
    _, grads = net.backward({"x": np.zeros(3)}, up)
    np.testing.assert_allclose(grads["x"], w @ up)


def test_backward_zero_upstream_gives_zero_grads():
    net = Approximator(inputs=(("x", 2),), hidden=(6,), out_dim=3, seed=2)
    dp, grads = net.backward({"x": np.ones(2)}, np.zeros(3))
    assert not dp.any()
    assert not grads["x"].any()


@pytest.mark.parametrize("activation", ["relu", "silu"])
def test_backward_matches_full_finite_differences(activation):
    # random 3-layer net; coordinate-wise central differences at 1e-5
    rng = np.random.default_rng(7)
    net = Approximator(inputs=(("s", 2), ("a", 2)), hidden=(6, 5), out_dim=3,
                       activation=activation, seed=3)
    s = rng.normal(size=(4, 2))
    a = rng.normal(size=(4, 2))
    up = rng.normal(size=(4, 3))
    dp, grads = net.backward({"s": s, "a": a}, up)

    def loss_params(p):
        return float((net.forward({"s": s, "a": a}, params=p) * up).sum())

    fd_p = full_fd_gradient(loss_params, net.params.copy())
    assert relative_error(dp, fd_p, floor=1e-6) < 1e-4

    def loss_inputs(flat):
        sa = flat.reshape(4, 4)
        return float((net.forward({"s": sa[:, :2], "a": sa[:, 2:]}) * up).sum())

    flat0 = np.concatenate([s, a], axis=1).ravel()
    fd_x = full_fd_gradient(loss_inputs, flat0).reshape(4, 4)
    assert relative_error(grads["s"], fd_x[:, :2], floor=1e-6) < 1e-4
    assert relative_error(grads["a"], fd_x[:, 2:], floor=1e-6) < 1e-4


def test_backward_with_time_features_matches_fd():
    rng = np.random.default_rng(13)
    net = Approximator(inputs=(("a", 2), ("time", 1)), hidden=(8,), out_dim=2,
                       activation="silu", time_features=3, seed=4)
    a = rng.normal(size=(5, 2))
    t = rng.random((5, 1))
    up = rng.normal(size=(5, 2))
    dp, grads = net.backward({"a": a, "time": t}, up)

    fd_p = full_fd_gradient(
        lambda p: float((net.forward({"a": a, "time": t}, params=p) * up).sum()),
        net.params.copy(),
    )
    assert relative_error(dp, fd_p, floor=1e-6) < 1e-4

    fd_t = full_fd_gradient(
        lambda tv: float((net.forward({"a": a, "time": tv.reshape(5, 1)}) * up).sum()),
        t.ravel().copy(),
    ).reshape(5, 1)
    assert relative_error(grads["time"], fd_t, floor=1e-6) < 1e-4


def test_adam_single_step_closed_form():
    # from zero moments: theta' = theta - lr * g / (|g| + eps)
    params = np.array([1.0])
    g = np.array([0.3])
    opt = AdamState.for_params(params, lr=0.01)
    adam_step(params, g, opt)
    expected = 1.0 - 0.01 * 0.3 / (0.3 + opt.eps)
    assert abs(params[0] - expected) < 1e-15
    assert opt.step == 1


def test_adam_zero_gradient_leaves_params():
    params = np.array([2.0, -1.0])
    opt = AdamState.for_params(params, lr=0.1)
    before = params.copy()
    adam_step(params, np.zeros(2), opt)
    assert np.array_equal(params, before)
    assert opt.step == 1


def test_adam_zero_lr_leaves_params():
    params = np.array([2.0, -1.0])
    opt = AdamState.for_params(params, lr=0.0)
    adam_step(params, np.array([1.0, 5.0]), opt)
    np.testing.assert_array_equal(params, [2.0, -1.0])


def test_adam_rejects_nonfinite_gradient():
    params = np.zeros(2)
    opt = AdamState.for_params(params)
    with pytest.raises(TrainingDivergenceError):
        adam_step(params, np.array([np.nan, 0.0]), opt)


def test_adam_step_counter_strictly_increases():
    params = np.zeros(3)
    opt = AdamState.for_params(params)
    rng = np.random.default_rng(0)
    for k in range(1, 8):
        adam_step(params, rng.normal(size=3), opt)
        assert opt.step == k


def test_target_tracker_kappa_one_copies():
    tr = TargetTracker(params=np.zeros(3), kappa=1.0)
    online = np.array([1.0, 2.0, 3.0])
    tr.update(online)
    np.testing.assert_array_equal(tr.params, online)


def test_target_tracker_half_step():
    tr = TargetTracker(params=np.zeros(1), kappa=0.5)
    tr.update(np.array([2.0]))
    assert tr.params[0] == 1.0


def test_target_tracker_geometric_series():
    # 1000 updates toward constant 1 from 0: target = 1 - (1-kappa)^1000
    tr = TargetTracker(params=np.zeros(1), kappa=0.005)
    one = np.ones(1)
    for _ in range(1000):
        tr.update(one)
    expected = 1.0 - 0.995**1000
    assert abs(tr.params[0] - expected) < 1e-12


def test_target_tracker_rejects_bad_kappa():
    with pytest.raises(ConfigError):
        TargetTracker(params=np.zeros(1), kappa=0.0)
    with pytest.raises(ConfigError):
        TargetTracker(params=np.zeros(1), kappa=1.2)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    blocks = {"a": rng.normal(size=17), "b": rng.normal(size=5)}
    meta = {"note": "x", "widths": [3, 4]}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, blocks, meta)
    loaded, got_meta = load_checkpoint(path)
    assert got_meta == meta
    for k in blocks:
        np.testing.assert_array_equal(blocks[k], loaded[k])


def test_checkpoint_truncation_raises(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"a": np.arange(10.0)}, {})
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(SchemaError):
        load_checkpoint(path)
