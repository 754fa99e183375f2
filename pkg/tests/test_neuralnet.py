import numpy as np
import pytest

from oracles import adam_scalar, central_diff, mlp_forward_loops, rel_err
from romo import neuralnet as nn


def test_param_count():
    assert nn.init([3, 64, 64, 1], 0).n_params == 3 * 64 + 64 + 64 * 64 + 64 + 64 + 1 == 4481


def test_init_deterministic_and_zero_bias():
    a, b = nn.init([3, 8, 1], 5), nn.init([3, 8, 1], 5)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)
    assert all(not bias.any() for bias in a.biases)
    lim = np.sqrt(6 / (3 + 8))
    assert np.all(np.abs(a.weights[0]) <= lim)


@pytest.mark.parametrize("dims", [[1], [3, 2], [3, 0, 1], [2, 4, 2]])
def test_init_invalid(dims):
    with pytest.raises(nn.NetError):
        nn.init(dims, 0)


def test_forward_zero_and_linear():
    net = nn.init([2, 5, 1], 0)
    for p in net.params():
        p[...] = 0
    assert nn.forward(net, np.array([3.0, -2.0])) == 0.0
    lin = nn.Mlp([2, 1], [np.array([[1.0], [1.0]])], [np.zeros(1)])
    assert nn.forward(lin, np.array([3.0, 4.0])) == 7.0


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        net = nn.init([4, 7, 5, 1], trial)
        for b in net.biases:
            b[...] = rng.normal(size=b.shape)
        x = rng.normal(size=4)
        assert abs(nn.forward(net, x) - mlp_forward_loops(net.weights, net.biases, x)) < 1e-12


def test_forward_dimension_mismatch():
    with pytest.raises(nn.NetError):
        nn.forward(nn.init([3, 4, 1], 0), np.zeros(2))


def test_backward_linear():
    lin = nn.Mlp([2, 1], [np.array([[2.0], [-3.0]])], [np.zeros(1)])
    g = nn.backward(lin, np.array([1.0, 1.0]), 0.5)
    np.testing.assert_array_equal(g.input_grad, [1.0, -1.5])


def test_backward_zero_upstream():
    net = nn.init([3, 6, 1], 1)
    g = nn.backward(net, np.ones(3), 0.0)
    assert not any(a.any() for a in g.param_grads()) and not g.input_grad.any()


def _fd_check(net, x, up):
    g = nn.backward(net, x, up)

    def f():
        return up * nn.forward(net, x)

    for p, gp in zip(net.params(), g.param_grads()):
        assert rel_err(gp, central_diff(f, p)) < 1e-4
    assert rel_err(g.input_grad, central_diff(f, x)) < 1e-4


@pytest.mark.parametrize("seed", range(50))
def test_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 7)), 1]
    net = nn.init(dims, seed)
    for b in net.biases:
        b[...] = rng.normal(0, 0.3, b.shape)
    _fd_check(net, rng.normal(size=dims[0]), float(rng.normal()))


def test_batched_backward_sums_over_rows():
    rng = np.random.default_rng(3)
    net = nn.init([3, 5, 1], 2)
    X = rng.normal(size=(4, 3))
    up = rng.normal(size=4)
    out, gb = nn.forward_backward(net, X, up)
    np.testing.assert_allclose(out, [nn.forward(net, x) for x in X], atol=1e-15)
    singles = [nn.backward(net, X[i], up[i]) for i in range(4)]
    for j, g in enumerate(gb.param_grads()):
        np.testing.assert_allclose(g, sum(s.param_grads()[j] for s in singles), atol=1e-12)
    for i in range(4):
        np.testing.assert_allclose(gb.input_grad[i], singles[i].input_grad, atol=1e-15)


def test_adam_zero_gradient():
    net = nn.init([2, 3, 1], 0)
    before = [p.copy() for p in net.params()]
    zeros = nn.GradBundle([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases], np.zeros(2))
    net, st = nn.adam_step(net, zeros, None, 1e-3)
    assert st.t == 1
    for p, q in zip(net.params(), before):
        np.testing.assert_array_equal(p, q)


def test_adam_first_step_is_lr_sign():
    net = nn.init([2, 3, 1], 0)
    before = [p.copy() for p in net.params()]
    g = nn.backward(net, np.array([0.3, -0.7]), 1.0)
    net, _ = nn.adam_step(net, g, None, 1e-3)
    for p, q, gp in zip(net.params(), before, g.param_grads()):
        nz = np.abs(gp) > 1e-6
        np.testing.assert_allclose((q - p)[nz], 1e-3 * np.sign(gp[nz]), rtol=1e-4)


def test_adam_two_steps_match_reference():
    p = [np.array([0.5, -1.0, 2.0])]
    grads = [np.array([0.1, -0.3, 0.0]), np.array([0.2, 0.4, -1.0])]
    st = nn.AdamState.zeros_like(p)
    for g in grads:
        nn.adam_update(p, [g], st, 0.01)
    for i, start in enumerate([0.5, -1.0, 2.0]):
        assert abs(p[0][i] - adam_scalar(start, [g[i] for g in grads], 0.01)) < 1e-12
    assert st.t == 2


def test_sin_regression_smoke():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (50, 1))
    y = np.sin(3 * x[:, 0])
    net = nn.init([1, 16, 1], 0)
    st = None
    for _ in range(2000):
        _, g = nn.forward_backward(net, x, 2 * (nn.forward(net, x) - y) / len(y))
        net, st = nn.adam_step(net, g, st, 1e-2)
    assert np.mean((nn.forward(net, x) - y) ** 2) < 1e-2


def test_json_round_trip():
    net = nn.init([3, 4, 1], 0)
    back = nn.Mlp.from_json(net.to_json())
    for p, q in zip(net.params(), back.params()):
        np.testing.assert_array_equal(p, q)
