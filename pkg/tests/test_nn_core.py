import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_differences, reference_forward, rel_err
from sage_ada.errors import ContractViolation, NumericError
from sage_ada.nn_core import (
    DenseNet,
    GradientTape,
    Layer,
    ModelBundle,
    grl_lambda,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


def test_zero_softmax_layer_is_uniform():
    net = DenseNet([Layer(np.zeros((3, 5)), np.zeros(5), "softmax")])
    np.testing.assert_allclose(net.forward(np.array([0.3, -2.0, 7.0])), np.full(5, 0.2))


def test_identity_layer():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(net.forward(np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_matches_reference(rng):
    net = DenseNet.build([4, 7, 3], ["tanh", "softmax"], rng)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(net.forward(x), reference_forward(net, x), rtol=0, atol=1e-12)


def test_batched_forward_matches_rows(rng):
    net = DenseNet.build([2, 8, 8, 3], ["relu", "sigmoid", "softmax"], rng)
    x = rng.standard_normal((5, 2))
    batch = net.forward(x)
    for i in range(5):
        np.testing.assert_allclose(batch[i], reference_forward(net, x[i]), atol=1e-12)


def test_forward_is_bit_deterministic(rng):
    net = ModelBundle.build(2, 3, rng).phi
    x = rng.standard_normal((10, 2))
    assert np.array_equal(net.forward(x), net.forward(x))


def test_layer_chain_is_checked(rng):
    with pytest.raises(ContractViolation):
        DenseNet([Layer(np.ones((2, 3)), np.zeros(3)), Layer(np.ones((4, 1)), np.zeros(1))])


def test_input_dimension_checked(rng):
    net = DenseNet.build([3, 2], ["identity"], rng)
    with pytest.raises(ContractViolation):
        net.forward(np.ones(4))


def test_nonfinite_activation_reports_layer():
    net = DenseNet([Layer(np.eye(2), np.zeros(2)), Layer(np.full((2, 2), 1e308), np.zeros(2))])
    with pytest.raises(NumericError, match="layer 1"):
        net.forward(np.array([1e10, 1e10]))


def test_backward_without_forward():
    net = DenseNet([Layer(np.eye(2), np.zeros(2))])
    with pytest.raises(ContractViolation):
        net.backward(np.ones(2))


def test_zero_upstream_gives_zero_gradients(rng):
    net = DenseNet.build([3, 5, 2], ["relu", "softmax"], rng)
    tape = GradientTape(net)
    net.forward(rng.standard_normal((4, 3)))
    dx = net.backward(np.zeros((4, 2)), tape)
    assert not dx.any()
    assert not tape.flat().any()


def test_sigmoid_unit_log_gradient(rng):
    w = rng.standard_normal(4)
    net = DenseNet([Layer(w[:, None], np.zeros(1), "sigmoid")])
    z = rng.standard_normal(4)
    s = net.forward(z)[0]
    dx = net.backward(np.array([1.0 / s]))  # upstream = d log(out) / d out
    np.testing.assert_allclose(dx, (1 - s) * w, rtol=1e-12)


@pytest.mark.parametrize("acts", [["relu", "softmax"], ["tanh", "sigmoid"], ["sigmoid", "identity"], ["relu", "relu", "tanh"]])
def test_backward_matches_finite_differences(acts):
    rng = np.random.default_rng(len(acts) * 17 + len(acts[0]))
    dims = [3] + [6] * (len(acts) - 1) + [4]
    net = DenseNet.build(dims, acts, rng)
    for layer in net.layers:
        layer.bias[:] = rng.standard_normal(layer.bias.shape) * 0.1
    x = rng.standard_normal((5, 3))
    up = rng.standard_normal((5, 4))
    tape = GradientTape(net)
    net.forward(x)
    dx = net.backward(up, tape)

    def loss():
        return float(np.sum(up * net.forward(x)))

    numeric = central_differences(loss, net.parameters() + [x])
    analytic = [g for pair in tape.grads for g in pair] + [dx]
    for a, (idx, num) in zip(analytic, numeric):
        assert rel_err(a.ravel()[idx], num) < 1e-4


def test_grl_lambda_values():
    assert grl_lambda(0.0) == 0.0
    assert grl_lambda(1.0, 10.0) == pytest.approx(math.tanh(5.0), abs=1e-15)
    assert grl_lambda(1.0, 10.0) == pytest.approx(0.99991, abs=5e-6)
    assert grl_lambda(0.5, 10.0) == pytest.approx(0.9866, abs=5e-5)


def test_grl_lambda_monotone_and_below_one():
    vals = [grl_lambda(p) for p in np.linspace(0, 1, 1000)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert max(vals) < 1.0


def test_grl_lambda_range_checked():
    with pytest.raises(ContractViolation):
        grl_lambda(1.5)


def test_sgd_zero_tape_leaves_net_unchanged(rng):
    net = DenseNet.build([3, 2], ["identity"], rng)
    before = [p.copy() for p in net.parameters()]
    sgd_step(net, GradientTape(net), 0.1)
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_sgd_scalar_step():
    net = DenseNet([Layer(np.array([[1.0]]), np.zeros(1))])
    tape = GradientTape(net)
    tape.grads[0][0][0, 0] = 2.0
    sgd_step(net, tape, 0.1)
    assert net.layers[0].weight[0, 0] == pytest.approx(0.8)
    assert not tape.flat().any()


def test_sgd_quadratic_converges():
    net = DenseNet([Layer(np.array([[0.0]]), np.zeros(1))])
    tape = GradientTape(net)
    x = np.array([1.0])
    for _ in range(100):
        theta = net.forward(x)[0]
        net.backward(np.array([2 * (theta - 3.0)]), tape)
        tape.grads[0][1][:] = 0.0  # only the weight plays theta
        sgd_step(net, tape, 0.1)
    assert abs(net.layers[0].weight[0, 0] - 3.0) < 1e-6


def test_sgd_refuses_nonfinite(rng):
    net = DenseNet.build([2, 2], ["identity"], rng)
    before = net.layers[0].weight.copy()
    tape = GradientTape(net)
    tape.grads[0][0][0, 0] = np.nan
    with pytest.raises(NumericError):
        sgd_step(net, tape, 0.1)
    np.testing.assert_array_equal(net.layers[0].weight, before)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_softmax_sums_to_one(seed, c):
    rng = np.random.default_rng(seed)
    net = DenseNet.build([3, 5, c], ["relu", "softmax"], rng)
    out = net.forward(rng.standard_normal((20, 3)))
    assert np.all(out > 0) and np.all(out < 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sigmoid_range(seed):
    rng = np.random.default_rng(seed)
    out = DenseNet.build([3, 4], ["sigmoid"], rng).forward(rng.standard_normal((10, 3)) * 3)
    assert np.all((out > 0) & (out < 1))


def test_checkpoint_round_trip(tmp_path, rng):
    bundle = ModelBundle.build(2, 3, rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(bundle.nets(), path)
    loaded = load_checkpoint(path)
    assert set(loaded) == {"phi", "f", "disc", "d_bin"}
    for name, net in bundle.nets().items():
        for a, b in zip(net.parameters(), loaded[name].parameters()):
            np.testing.assert_array_equal(a, b)
        assert [l.activation for l in net.layers] == [l.activation for l in loaded[name].layers]


def test_default_architecture(rng):
    b = ModelBundle.build(2, 4, rng)
    assert [l.fan_out for l in b.phi.layers] == [64, 64, 16]
    assert b.f.layers[-1].activation == "softmax" and b.f.output_dim == 4
    assert b.disc.layers[-1].activation == "sigmoid" and b.disc.output_dim == 4
    assert b.d_bin.output_dim == 1
    limit = math.sqrt(6 / (2 + 64))
    assert np.abs(b.phi.layers[0].weight).max() <= limit
