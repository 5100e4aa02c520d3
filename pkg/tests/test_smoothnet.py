import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nullfiber as nf
from nullfiber.smoothnet import activate, activation_derivative

from conftest import level_curve_closed_form, random_dims


def affine(weights, bias, act="identity"):
    return nf.NetworkSpec([nf.SmoothLayer(weights, bias, act)])


# --- activations -----------------------------------------------------------


@pytest.mark.parametrize("kind", list(nf.Activation))
def test_derivative_strictly_positive(kind):
    z = np.random.default_rng(0).uniform(-30, 30, size=100_000)
    assert np.all(activation_derivative(kind, z) > 0)


@pytest.mark.parametrize("kind", list(nf.Activation))
def test_derivative_matches_central_difference(kind):
    z = np.linspace(-8, 8, 97)
    eps = 1e-6
    fd = (activate(kind, z + eps) - activate(kind, z - eps)) / (2 * eps)
    assert np.allclose(activation_derivative(kind, z), fd, atol=1e-8)


def test_stable_softplus_and_sigmoid_extremes():
    sp = activate("softplus", np.array([700.0, -700.0]))
    assert np.isfinite(sp).all()
    assert abs(sp[0] - 700.0) <= 1e-9 * 700
    assert 0 < sp[1] < 1e-300
    s = activate("sigmoid", np.array([-700.0, 700.0]))
    assert 0 < s[0] <= 1e-300
    assert s[1] == 1.0
    assert np.all(activation_derivative("tanh", np.array([-700.0, 700.0])) >= 0)


@given(st.floats(-50, 50))
def test_softplus_is_log1p_exp(z):
    assert activate("softplus", z) == pytest.approx(np.log1p(np.exp(z)), rel=1e-12, abs=1e-300)


# --- forward ---------------------------------------------------------------


def test_forward_level_curve_net_is_ln17(level_net):
    out = nf.forward(level_net, 1, 2, np.zeros(2))
    assert out[0] == pytest.approx(np.log(17), abs=1e-12)
    assert out[0] == pytest.approx(2.8332133, abs=1e-7)


def test_forward_matches_closed_form(level_net, rng):
    x = rng.uniform(-3, 3, size=(50, 2))
    assert np.allclose(nf.forward(level_net, 1, 2, x)[:, 0], level_curve_closed_form(x), rtol=1e-13)


def test_identity_layer_adds_bias():
    b = np.array([0.5, -1.5, 2.0])
    net = affine(np.eye(3), b)
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(nf.forward(net, 1, 1, x), x + b)


def test_sigmoid_zero_weights_is_half():
    net = affine(np.zeros((4, 2)), np.zeros(4), "sigmoid")
    assert np.array_equal(nf.forward(net, 1, 1, [3.0, -7.0]), np.full(4, 0.5))


def test_forward_errors(level_net):
    with pytest.raises(nf.DimensionMismatch):
        nf.forward(level_net, 1, 2, np.zeros(3))
    with pytest.raises(nf.InvalidRange):
        nf.forward(level_net, 2, 1, np.zeros(2))
    with pytest.raises(nf.InvalidRange):
        nf.forward(level_net, 0, 1, np.zeros(2))


# --- jacobians -------------------------------------------------------------


def test_layer_jacobian_sigmoid_identity_at_origin():
    layer = nf.SmoothLayer(np.eye(2), np.zeros(2), "sigmoid")
    assert np.allclose(nf.layer_jacobian(layer, np.zeros(2)), 0.25 * np.eye(2), atol=0)


def test_layer_jacobian_identity_activation_is_weights(rng):
    w = rng.normal(size=(3, 5))
    layer = nf.SmoothLayer(w, rng.normal(size=3), "identity")
    assert np.array_equal(nf.layer_jacobian(layer, rng.normal(size=5)), w)


def test_second_layer_jacobian_of_level_net(level_net):
    y = np.full(2, np.log(2))
    jac = nf.layer_jacobian(level_net.layers[1], y)
    # d/dy0 ln(1 + e^{4 y0}) = 4 sigma(4 y0) = 4 * 16/17 at y0 = ln 2
    assert np.allclose(jac, [[4 * 16 / 17, 0.0]], atol=1e-14)
    fd = nf.finite_diff_jacobian(level_net, 2, 2, y, 1e-5)
    assert np.allclose(jac, fd, atol=1e-9)


def test_composite_jacobian_single_identity_layer(rng):
    w = rng.normal(size=(2, 4))
    net = affine(w, np.zeros(2))
    assert np.array_equal(nf.composite_jacobian(net, 1, 1, rng.normal(size=4)), w)


def test_level_net_jacobian_parallel_to_2_1(level_net, rng):
    for x in rng.uniform(-3, 3, size=(20, 2)):
        jac = nf.composite_jacobian(level_net, 1, 2, x)
        assert jac.shape == (1, 2)
        assert abs(jac[0, 0] - 2 * jac[0, 1]) <= 1e-14 * abs(jac[0, 0])


def test_composite_is_product_of_layer_jacobians(rng):
    for _ in range(100):
        n = int(rng.integers(1, 6))
        dims = [int(d) for d in rng.integers(1, 9, size=n + 1)]
        net = nf.random_network(rng, dims)
        x = rng.uniform(-3, 3, size=dims[0])
        prod = np.eye(dims[0])
        y = x
        for layer in net.layers:
            prod = nf.layer_jacobian(layer, y) @ prod
            y = layer(y)
        assert np.max(np.abs(nf.composite_jacobian(net, 1, n, x) - prod)) <= 1e-12


def test_composite_vs_finite_difference_random_nets(rng):
    for _ in range(200):
        dims = random_dims(rng, max_layers=3, max_width=8, min_layers=1)
        net = nf.random_network(rng, dims)
        x = rng.uniform(-3, 3, size=dims[0])
        jac = nf.composite_jacobian(net, 1, net.n_layers, x)
        fd = nf.finite_diff_jacobian(net, 1, net.n_layers, x, 1e-5)
        assert np.max(np.abs(jac - fd)) <= 1e-5 * (1 + np.max(np.abs(jac)))


def test_finite_diff_recovers_affine_map(rng):
    w = rng.normal(size=(3, 3))
    net = affine(w, rng.normal(size=3))
    assert np.max(np.abs(nf.finite_diff_jacobian(net, 1, 1, rng.normal(size=3), 1e-5) - w)) <= 1e-10


def test_finite_diff_level_net_matches_analytic(level_net):
    x = np.array([0.3, -0.7])
    assert np.max(np.abs(nf.finite_diff_jacobian(level_net, 1, 2, x, 1e-5)
                         - nf.composite_jacobian(level_net, 1, 2, x))) <= 1e-6


@pytest.mark.parametrize("eps", [0.0, -1e-3])
def test_finite_diff_rejects_nonpositive_eps(level_net, eps):
    with pytest.raises(ValueError):
        nf.finite_diff_jacobian(level_net, 1, 2, np.zeros(2), eps)


# --- full-rank report ------------------------------------------------------


def test_full_rank_report(level_net):
    rep = nf.check_full_rank(level_net)
    assert [r.rank for r in rep] == [2, 1]
    assert all(r.passed for r in rep)


def test_full_rank_zero_matrix_fails():
    rep = nf.check_full_rank(affine(np.zeros((2, 3)), np.zeros(2)))[0]
    assert rep.rank == 0 and not rep.passed


def test_full_rank_linear_example(linear_net):
    rep = nf.check_full_rank(linear_net)[0]
    assert rep.rank == 2 and rep.passed and rep.smallest_singular_value > 1


def test_duplicate_row_flags_layer():
    w2 = np.array([[1.0, 2.0], [1.0, 2.0]])
    net = nf.NetworkSpec([
        nf.SmoothLayer(np.eye(2), np.zeros(2), "tanh"),
        nf.SmoothLayer(w2, np.zeros(2), "tanh"),
    ])
    rep = nf.check_full_rank(net)
    assert [r.passed for r in rep] == [True, False]


# --- spec construction and JSON -------------------------------------------


def test_network_rejects_chain_mismatch():
    with pytest.raises(nf.SpecError, match="layers\\[1\\]"):
        nf.NetworkSpec([nf.SmoothLayer(np.eye(2), np.zeros(2)), nf.SmoothLayer(np.eye(3), np.zeros(3))])


@pytest.mark.parametrize(
    "metric", [[[1.0, 0.5], [0.4, 1.0]], [[1.0, 0.0], [0.0, -1.0]], [[0.0, 0.0], [0.0, 0.0]]]
)
def test_network_rejects_bad_output_metric(metric):
    with pytest.raises(nf.NonSPDOutputMetric):
        nf.NetworkSpec([nf.SmoothLayer(np.eye(2), np.zeros(2))], metric)


def test_layer_rejects_nonfinite_weights():
    with pytest.raises(nf.SpecError):
        nf.SmoothLayer([[np.nan]], [0.0])


def test_network_is_immutable(level_net):
    with pytest.raises(ValueError):
        level_net.layers[0].weights[0, 0] = 5.0


def test_json_roundtrip(level_net):
    again = nf.network_from_dict(json.loads(json.dumps(nf.network_to_dict(level_net))))
    assert again.dims == level_net.dims
    for a, b in zip(again.layers, level_net.layers):
        assert np.array_equal(a.weights, b.weights) and a.activation == b.activation


@pytest.mark.parametrize(
    "obj, where",
    [
        ({}, "layers"),
        ({"layers": []}, "layers"),
        ({"layers": [{"activation": "softmax", "weights": [[1]], "bias": [0]}]}, "layers[0].activation"),
        ({"layers": [{"activation": "tanh", "weights": [[1, 2], [3]], "bias": [0, 0]}]}, "layers[0].weights[1]"),
        ({"layers": [{"activation": "tanh", "weights": [[1, "a"]], "bias": [0]}]}, "layers[0].weights[0][1]"),
        ({"layers": [{"activation": "tanh", "weights": [[1, 2]], "bias": [0, 1]}]}, "layers[0].bias"),
        ({"layers": [{"activation": "tanh", "weights": [[1, 2]]}]}, "layers[0]"),
        (
            {"layers": [
                {"activation": "tanh", "weights": [[1, 2]], "bias": [0]},
                {"activation": "tanh", "weights": [[1, 2]], "bias": [0]},
            ]},
            "layers[1].weights",
        ),
        ({"layers": [{"activation": "tanh", "weights": [[1]], "bias": [0]}], "output_metric": [[1, 0]]}, "output_metric"),
    ],
)
def test_json_errors_name_the_field(obj, where):
    with pytest.raises(nf.SpecError) as exc:
        nf.network_from_dict(obj)
    assert where in str(exc.value)


def test_load_network_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"layers": [\n  {"activation": "tanh",,}\n]}')
    with pytest.raises(nf.SpecError, match="line 2"):
        nf.load_network(p)


def test_random_gaussian_weights_are_full_rank():
    rng = np.random.default_rng(7)
    passed = 0
    for _ in range(1000):
        dims = [int(d) for d in rng.integers(1, 9, size=int(rng.integers(2, 5)))]
        passed += all(r.passed for r in nf.check_full_rank(nf.random_network(rng, dims)))
    assert passed >= 999


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batched_forward_matches_pointwise(seed):
    rng = np.random.default_rng(seed)
    dims = random_dims(rng)
    net = nf.random_network(rng, dims)
    xs = rng.uniform(-2, 2, size=(5, dims[0]))
    batch = nf.composite_jacobian(net, 1, net.n_layers, xs)
    for x, jb in zip(xs, batch):
        assert np.allclose(nf.composite_jacobian(net, 1, net.n_layers, x), jb, rtol=0, atol=1e-15)
