import numpy as np
import pytest
from hypothesis import given, strategies as st

from beamopt import neural
from beamopt.errors import ContractError, FormatError
from beamopt.neural import (
    AdamState,
    BatchNormLayer,
    ConvLayer,
    InferencePlan,
    TrainConfig,
    adam_step,
    backward,
    batchnorm_forward,
    build_network,
    conv2d_forward,
    count_forward_ops,
    forward,
    glorot_normal_init,
    mse,
    network_from_bytes,
    network_to_bytes,
    split_indices,
    train_supervised,
)

from oracles import bn_infer_loops, bn_train_loops, conv_loops, forward_loops, mse_loops


def _randomised(net, seed):
    """Give batch-norm nontrivial parameters and statistics."""
    rng = np.random.default_rng(seed)
    for conv, bn in zip(net.convs, net.norms):
        conv.bias[:] = rng.normal(0, 0.1, conv.bias.shape)
        bn.scale[:] = rng.uniform(0.5, 1.5, bn.scale.shape)
        bn.shift[:] = rng.normal(0, 0.2, bn.shift.shape)
        bn.running_mean[:] = rng.normal(0, 0.2, bn.shift.shape)
        bn.running_var[:] = rng.uniform(0.5, 2.0, bn.shift.shape)
    net.dense.bias[:] = rng.normal(0, 0.1, net.dense.bias.shape)
    return net


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(1, 5),
       st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_conv_matches_loops(c_in, c_out, a, hgt, wid, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c_in, hgt, wid))
    layer = ConvLayer(rng.standard_normal((c_out, c_in, a, a)), rng.standard_normal(c_out))
    assert np.allclose(conv2d_forward(x, layer), conv_loops(x, layer.weight, layer.bias))


def test_even_kernels_are_rejected():
    with pytest.raises(ContractError):
        ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))


def test_batchnorm_modes(rng):
    x = rng.standard_normal((20, 3, 2, 4)) * 3 + 1
    bn = BatchNormLayer(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3), rng.uniform(1, 2, 3))
    mean0, var0 = bn.running_mean.copy(), bn.running_var.copy()
    assert np.allclose(batchnorm_forward(x, bn, "infer"),
                       bn_infer_loops(x, bn.scale, bn.shift, bn.running_mean, bn.running_var, bn.eps))
    assert np.allclose(batchnorm_forward(x, bn, "train", update_stats=False),
                       bn_train_loops(x, bn.scale, bn.shift, bn.eps))
    assert np.array_equal(bn.running_mean, mean0)
    batchnorm_forward(x, bn, "train")
    mu = x.mean(axis=(0, 2, 3))
    assert np.allclose(bn.running_mean, 0.99 * mean0 + 0.01 * mu)
    assert np.all(bn.running_var > 0) and not np.allclose(bn.running_var, var0)


def test_forward_matches_loops():
    net = _randomised(build_network(2, 3, 5, seed=1), 2)
    x = np.random.default_rng(3).standard_normal((3, 2, 6))
    out, _ = forward(net, x)
    assert np.allclose(out, forward_loops(net, x))
    assert np.allclose(neural.predict(net, x, batch_size=2), out)


def test_inference_plan_matches_forward():
    net = _randomised(build_network(4, 4, 4, seed=5), 6)
    x = np.random.default_rng(7).standard_normal((9, 2, 16))
    plan = InferencePlan(net)
    assert np.allclose(plan(x), forward(net, x)[0], rtol=1e-12, atol=1e-14)
    assert np.allclose(plan(x[:1]), forward(net, x[:1])[0])
    with pytest.raises(ContractError):
        plan(np.zeros((1, 2, 15)))


def test_input_shape_contract():
    net = build_network(2, 2, 2)
    with pytest.raises(ContractError):
        forward(net, np.zeros((1, 2, 5)))


def test_mse_matches_loops(rng):
    p, t = rng.random((7, 3)), rng.random((7, 3))
    assert mse(p, t) == pytest.approx(mse_loops(p, t))


def test_glorot_normal_std():
    w = glorot_normal_init((8, 8, 3, 3), seed=0)
    assert np.std(w) == pytest.approx(np.sqrt(2 / (72 + 72)), rel=0.05)
    w = glorot_normal_init((300, 200), seed=1)
    assert np.std(w) == pytest.approx(np.sqrt(2 / 500), rel=0.02)
    assert abs(np.mean(w)) < 0.005


def _loss(net, x, y):
    out, _ = forward(net, x, "train", update_stats=False)
    return np.sum((out - y) ** 2) / out.size


def test_backward_matches_finite_differences():
    net = _randomised(build_network(2, 2, 4, seed=3), 4)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((5, 2, 4)), rng.random((5, 4))
    out, cache = forward(net, x, "train", update_stats=False)
    grads = backward(net, cache, 2 * (out - y) / out.size)
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        assert p.shape == g.shape
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + 1e-6
            up = _loss(net, x, y)
            p[i] = old - 1e-6
            down = _loss(net, x, y)
            p[i] = old
            fd = (up - down) / 2e-6
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-7))
    assert worst < 1e-4


def test_backward_needs_a_cache():
    with pytest.raises(ContractError):
        backward(build_network(2, 2, 2), None, np.zeros((1, 2)))


def test_adam_first_step():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -0.1])]
    state = AdamState(lr=0.1)
    adam_step(p, g, state)
    # bias-corrected moments equal g and g^2, so the step is lr * sign(g) up to eps
    assert np.allclose(p[0], [1.0 - 0.1, -2.0 + 0.1], atol=1e-6)
    assert state.step == 1


def test_split_is_deterministic_and_disjoint():
    cfg = TrainConfig(validation_split=0.2)
    a_tr, a_val = split_indices(100, cfg, np.random.default_rng(4))
    b_tr, b_val = split_indices(100, cfg, np.random.default_rng(4))
    assert np.array_equal(a_val, b_val) and len(a_val) == 20
    assert set(a_tr).isdisjoint(a_val) and len(set(a_tr) | set(a_val)) == 100
    with pytest.raises(ContractError):
        TrainConfig(validation_split=1.0)


def test_training_learns_a_toy_mapping():
    x = np.random.default_rng(12).standard_normal((2000, 2, 4))
    z = np.stack([x[:, 0].sum(1) - x[:, 1, 0], np.abs(x[:, 1]).sum(1) - 2], axis=1)
    y = 1 / (1 + np.exp(-z))
    cfg = TrainConfig(epochs=10, batch_size=32, seed=0)
    hist = train_supervised(build_network(2, 2, 2, seed=13), x, y, cfg)
    # well below the best constant predictor
    assert hist["val_loss"][-1] < 0.15 * np.var(y)
    assert len(hist["train_loss"]) == 10
    # same seed, same run
    hist2 = train_supervised(build_network(2, 2, 2, seed=13), x, y, cfg)
    assert hist2["val_loss"] == hist["val_loss"]


def test_checkpoint_roundtrip():
    net = _randomised(build_network(3, 2, 4, seed=1), 2)
    x = np.random.default_rng(0).standard_normal((50, 2, 6))
    y = np.random.default_rng(1).random((50, 4))
    hist = train_supervised(net, x, y, TrainConfig(epochs=1, batch_size=10))
    blob = network_to_bytes(net, hist["adam"])
    back, adam, end = network_from_bytes(blob)
    assert end == len(blob)
    assert np.array_equal(forward(back, x)[0], forward(net, x)[0])
    assert adam.step == hist["adam"].step
    for a, b in zip(adam.m + adam.v, hist["adam"].m + hist["adam"].v):
        assert np.array_equal(a, b)
    assert network_to_bytes(back, adam) == blob
    with pytest.raises(FormatError):
        network_from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        network_from_bytes(blob[:-3])


def test_operation_count():
    # [DERIVED] N = K = 4: input 2 x 16; conv 1->8 and 8->8 with 3x3 kernels; 4 outputs
    hw = 2 * 16
    expected = (2 * 9 * 1 * hw * 8 + 2 * 8 * hw) + (2 * 72 * hw * 8 + 2 * 8 * hw) + 2 * 4 * 8 * hw + 2 * 4
    assert count_forward_ops(build_network(4, 4, 4)) == expected
