import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modfield.errors import DimensionError, NumericalError
from modfield.nn import (
    Activation,
    AdamState,
    DenseLayer,
    RngStream,
    activate,
    activate_backward,
    adam_step,
    finite_difference_grad,
    init_relu_layer,
    init_siren_first,
    init_siren_hidden,
    linear_forward,
    mlp_backward,
    mlp_forward,
)


# ---------------------------------------------------------------------------
# linear_forward
# ---------------------------------------------------------------------------


def test_linear_identity():
    layer = DenseLayer(np.eye(2), np.zeros(2), Activation.IDENTITY)
    np.testing.assert_allclose(linear_forward(layer, np.array([2.0, 3.0])), [2.0, 3.0])


def test_linear_hand_case():
    layer = DenseLayer(np.array([[1.0, 1.0]]), np.array([-1.0]), Activation.IDENTITY)
    np.testing.assert_allclose(linear_forward(layer, np.array([0.5, 0.5])), [0.0])


def test_linear_matches_double_loop_oracle():
    rng = RngStream(11)
    w = rng.normal((4, 3))
    b = rng.normal((4,))
    x = rng.normal((3,))
    layer = DenseLayer(w, b, Activation.IDENTITY)
    expected = np.zeros(4)
    for i in range(4):
        acc = b[i]
        for j in range(3):
            acc += w[i, j] * x[j]
        expected[i] = acc
    np.testing.assert_allclose(linear_forward(layer, x), expected, atol=1e-6)


def test_linear_dimension_error_names_both_dims():
    layer = DenseLayer(np.zeros((4, 3)), np.zeros(4), Activation.IDENTITY)
    with pytest.raises(DimensionError, match=r"3.*5|5.*3"):
        linear_forward(layer, np.zeros(5))


def test_linearity_invariant():
    rng = RngStream(5)
    w = rng.normal((6, 4))
    b = rng.normal((6,))
    layer = DenseLayer(w, b, Activation.IDENTITY)
    for _ in range(20):
        x = rng.normal((4,))
        y = rng.normal((4,))
        lhs = linear_forward(layer, x + y) - linear_forward(layer, x) - linear_forward(layer, y) + b
        assert np.abs(lhs).max() < 1e-5


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_activate_trivial_cases():
    np.testing.assert_allclose(activate(np.array([0.0, np.pi / 2]), Activation.SINE), [0.0, 1.0],
                               atol=1e-12)
    np.testing.assert_allclose(activate(np.array([-1.0, 2.0]), Activation.RELU), [0.0, 2.0])
    np.testing.assert_allclose(activate(np.array([3.5]), Activation.IDENTITY), [3.5])


def test_activate_backward_trivial_cases():
    np.testing.assert_allclose(
        activate_backward(np.array([0.0]), Activation.SINE, np.array([1.0])), [1.0])
    np.testing.assert_allclose(
        activate_backward(np.array([-1.0]), Activation.RELU, np.array([5.0])), [0.0])
    np.testing.assert_allclose(
        activate_backward(np.array([2.0]), Activation.IDENTITY, np.array([7.0])), [7.0])


def test_activate_backward_length_mismatch():
    with pytest.raises(DimensionError):
        activate_backward(np.zeros(3), Activation.SINE, np.zeros(4))


@pytest.mark.parametrize("kind", [Activation.SINE, Activation.RELU, Activation.IDENTITY])
def test_activate_backward_matches_finite_differences(kind):
    rng = RngStream(77)
    v = rng.normal((1000,)) * 2.0
    if kind == Activation.RELU:
        v = v[np.abs(v) > 1e-3]  # keep clear of the kink
    upstream = rng.normal(v.shape)
    analytic = activate_backward(v, kind, upstream)
    eps = 1e-6
    fd = upstream * (activate(v + eps, kind) - activate(v - eps, kind)) / (2 * eps)
    rel = np.abs(analytic - fd) / np.maximum(1e-8, np.abs(fd) + np.abs(analytic))
    mask = np.abs(fd) > 1e-9
    assert rel[mask].max() < 1e-6


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_relu_range_property(values):
    out = activate(np.array(values), Activation.RELU)
    assert (out >= 0).all()
    assert np.isfinite(out).all()


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

GOLDEN_RAW_2024 = [
    0x9F6D8FECF88EECD5, 0x18E430BB1511F2D2, 0x4C6F7CBF58DBA57F, 0x1DBE69E0AE9BB859,
    0xD4A0C1656476437A, 0x8D6B7B6D69455AEB, 0x230249CAE3603297, 0x98AA033E99C4A792,
    0x2B39E8E05BA9E530, 0x6D467B84DC360331, 0x762887BF5D21A339, 0xD644A39996A5CD1B,
    0xD811DFDB557FAB8B, 0xA955C3C7D9D3AF85, 0x25430E1349D55355, 0xB05386BF060A34C7,
]


def test_rng_golden_vector():
    assert [int(v) for v in RngStream(2024).raw(16)] == GOLDEN_RAW_2024


def test_rng_matches_published_splitmix64_vector():
    # First output of the splitmix64 reference implementation for seed 0.
    assert int(RngStream(0).raw(1)[0]) == 0xE220A8397B1DCDAF


def test_rng_chunking_is_counter_based():
    a = RngStream(99).raw(16)
    b = np.concatenate([RngStream(99).raw(5), RngStream(99).raw(0)[:0]])
    r = RngStream(99)
    c = np.concatenate([r.raw(5), r.raw(11)])
    np.testing.assert_array_equal(a, c)
    np.testing.assert_array_equal(a[:5], b)


def test_rng_uniform_range_and_determinism():
    u = RngStream(3).uniform((10000,), -2.0, 5.0)
    assert u.min() >= -2.0 and u.max() < 5.0
    np.testing.assert_array_equal(u, RngStream(3).uniform((10000,), -2.0, 5.0))


def test_rng_normal_moments():
    x = RngStream(4).normal((200000,), mean=1.0, std=2.0)
    assert abs(x.mean() - 1.0) < 0.02
    assert abs(x.std() - 2.0) < 0.02


def test_rng_integers_range():
    k = RngStream(5).integers(7, (5000,))
    assert k.min() >= 0 and k.max() <= 6
    assert len(np.unique(k)) == 7


def test_rng_spawn_streams_differ():
    base = RngStream(123)
    a = base.spawn(0).raw(8)
    b = base.spawn(1).raw(8)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, RngStream(123).spawn(0).raw(8))


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def test_siren_first_bound():
    layer = init_siren_first(5000, 2, RngStream(1), omega0=30.0)
    assert np.abs(layer.weights).max() <= 15.0
    assert np.all(layer.bias == 0)


def test_siren_first_seed_determinism():
    a = init_siren_first(8, 3, RngStream(42))
    b = init_siren_first(8, 3, RngStream(42))
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.bias.tobytes() == b.bias.tobytes()


def test_siren_first_mean_within_3_sigma():
    n = 100000
    layer = init_siren_first(n, 1, RngStream(9), omega0=30.0, dtype=np.float64)
    draws = layer.weights.ravel()
    # Uniform(-30, 30): std of the sample mean is (range/sqrt(12)) / sqrt(n).
    sigma_mean = (60.0 / math.sqrt(12.0)) / math.sqrt(n)
    assert abs(draws.mean()) < 3 * sigma_mean


def test_siren_hidden_bound():
    layer = init_siren_hidden(2000, 6, 30.0, RngStream(2))
    assert np.abs(layer.weights).max() <= 1.0 / 30.0  # sqrt(6/6)/30


def test_siren_hidden_variance():
    layer = init_siren_hidden(400, 100, 30.0, RngStream(3), dtype=np.float64)
    bound = math.sqrt(6.0 / 100.0) / 30.0
    expected = (2 * bound) ** 2 / 12.0
    assert abs(layer.weights.var() / expected - 1.0) < 0.05


def test_relu_init_bound():
    layer = init_relu_layer(50, 24, RngStream(4))
    assert np.abs(layer.weights).max() <= math.sqrt(6.0 / 24.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_grad_is_identity_fresh_state():
    p = np.array([1.0, -2.0, 3.0], dtype=np.float32)
    state = AdamState(0.1)
    p2, state = adam_step(p, np.zeros_like(p), state)
    np.testing.assert_array_equal(p, p2)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_adam_zero_grad_is_identity_any_state(seed):
    rng = RngStream(seed)
    p = rng.normal((6,))
    state = AdamState(0.05, first_moment=rng.normal((6,)),
                      second_moment=np.abs(rng.normal((6,))), step_count=int(rng.integers(100)))
    p2, _ = adam_step(p, np.zeros_like(p), state)
    np.testing.assert_array_equal(p, p2)


def test_adam_first_step_magnitude():
    p = np.array([0.0])
    state = AdamState(0.1)
    p2, _ = adam_step(p, np.array([1.0]), state)
    assert abs(p2[0] + 0.1) < 1e-6  # bias correction makes the first step ~= -lr


def test_adam_minimizes_quadratic():
    p = np.array([1.0])
    state = AdamState(0.1)
    for _ in range(100):
        p, state = adam_step(p, 2.0 * p, state)
    assert abs(p[0]) < 0.05
    assert state.step_count == 100


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(np.zeros(3), np.zeros(4), AdamState(0.1))


def test_adam_preserves_untouched_rows():
    # Sparse codebook-style usage: rows with zero grad never drift.
    p = np.arange(12, dtype=np.float32).reshape(4, 3)
    g = np.zeros_like(p)
    g[1] = 1.0
    state = AdamState(0.1)
    p2 = p
    for _ in range(5):
        p2, state = adam_step(p2, g, state)
    np.testing.assert_array_equal(p2[0], p[0])
    np.testing.assert_array_equal(p2[2:], p[2:])
    assert not np.array_equal(p2[1], p[1])


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def test_fd_quadratic():
    g = finite_difference_grad(lambda p: float(p[0] ** 2), np.array([3.0]), 1e-4)
    assert abs(g[0] - 6.0) < 1e-6


def test_fd_linear_exact_slope():
    s = np.array([2.0, -0.5, 7.0])
    g = finite_difference_grad(lambda p: float(s @ p), np.array([0.1, 0.2, 0.3]), 1e-5)
    np.testing.assert_allclose(g, s, rtol=1e-9, atol=1e-9)


def test_fd_rejects_nonfinite():
    with pytest.raises(NumericalError):
        finite_difference_grad(lambda p: float("nan"), np.array([1.0]), 1e-4)


def test_fd_requires_positive_eps():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda p: 0.0, np.array([1.0]), 0.0)


# ---------------------------------------------------------------------------
# plain MLP helpers
# ---------------------------------------------------------------------------


def test_mlp_gradients_match_fd():
    rng = RngStream(8)
    layers = [
        init_relu_layer(5, 3, rng, dtype=np.float64),
        init_relu_layer(2, 5, rng, Activation.IDENTITY, dtype=np.float64),
    ]
    x = rng.normal((4, 3))

    def flatten(ls):
        return np.concatenate([a.ravel() for ly in ls for a in (ly.weights, ly.bias)])

    def loss_of(theta):
        off = 0
        ls = []
        for ly in layers:
            w = theta[off:off + ly.weights.size].reshape(ly.weights.shape)
            off += ly.weights.size
            b = theta[off:off + ly.bias.size]
            off += ly.bias.size
            ls.append(DenseLayer(w, b, ly.activation))
        y, _ = mlp_forward(ls, x)
        return float((y ** 2).sum())

    y, tape = mlp_forward(layers, x)
    grads, _ = mlp_backward(layers, tape, 2.0 * y)
    analytic = np.concatenate([g.ravel() for dw_db in grads for g in dw_db])
    fd = finite_difference_grad(loss_of, flatten(layers), 1e-6)
    rel = np.abs(analytic - fd) / np.maximum(1e-7, np.abs(analytic) + np.abs(fd))
    assert rel.max() < 1e-6
