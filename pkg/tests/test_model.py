import math

import numpy as np
import pytest

from modfield.errors import ConfigError, DimensionError
from modfield.model import (
    ModelConfig,
    ModelParams,
    concat_first_layer_preact,
    fourier_encode,
    init_model,
    layer_shapes,
    model_backward,
    model_forward,
    model_forward_tape,
    modulator_forward,
    synthesizer_forward,
)
from modfield.nn import Activation, DenseLayer, RngStream, finite_difference_grad


def tiny_config(**kw):
    base = dict(n=2, m=2, d=4, hidden_layers=2, width=5)
    base.update(kw)
    return ModelConfig(**base)


def make_model(cfg, seed, dtype=np.float64):
    return init_model(cfg, RngStream(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# modulator_forward
# ---------------------------------------------------------------------------


def test_modulator_zero_latent_zero_biases_gives_zero_alphas():
    cfg = tiny_config()
    params = make_model(cfg, 1)
    for ly in params.mod:
        ly.bias[...] = 0.0
    mods = modulator_forward(params, np.zeros(cfg.d))
    for a in mods.alphas:
        np.testing.assert_array_equal(a, np.zeros(cfg.width))


def test_modulator_hand_arithmetic():
    # d=1, width=1, K=1, all weights and biases one:
    # stem = relu(1*1 + 1) = 2; alpha_1 = relu([1,1]@[2,1] + 1) = 4
    cfg = ModelConfig(n=1, m=1, d=1, hidden_layers=1, width=1)
    params = make_model(cfg, 0)
    for ly in params.mod:
        ly.weights[...] = 1.0
        ly.bias[...] = 1.0
    mods = modulator_forward(params, np.array([1.0]))
    assert mods.hiddens[0][0] == 2.0
    assert mods.alphas[0][0] == 4.0


def test_modulator_matches_straight_line_oracle():
    cfg = tiny_config(hidden_layers=3, width=4, d=3)
    params = make_model(cfg, 17)
    z = RngStream(5).normal((cfg.d,))

    # Independent reimplementation with explicit loops.
    def relu(v):
        return np.maximum(v, 0.0)

    h = relu(params.mod[0].weights @ z + params.mod[0].bias)
    expected = []
    for ly in params.mod[1:]:
        h = relu(ly.weights @ np.concatenate([h, z]) + ly.bias)
        expected.append(h)

    mods = modulator_forward(params, z)
    for a, e in zip(mods.alphas, expected):
        np.testing.assert_allclose(a, e, atol=1e-6)


def test_modulator_alphas_nonnegative():
    cfg = tiny_config()
    params = make_model(cfg, 3)
    for seed in range(10):
        mods = modulator_forward(params, RngStream(seed).normal((cfg.d,), std=2.0))
        for a in mods.alphas:
            assert (a >= 0).all()


def test_modulator_dimension_error():
    params = make_model(tiny_config(), 1)
    with pytest.raises(DimensionError):
        modulator_forward(params, np.zeros(3))


# ---------------------------------------------------------------------------
# synthesizer_forward
# ---------------------------------------------------------------------------


def test_all_ones_alphas_reduce_to_plain_sine_mlp():
    cfg = tiny_config(conditioning="modulated")
    params = make_model(cfg, 7)
    plain = ModelParams(tiny_config(conditioning="none"), params.synth, params.out)
    x = RngStream(9).uniform((6, cfg.n))
    ones = [np.ones((6, cfg.width))] * cfg.hidden_layers
    y_mod, _ = synthesizer_forward(params, x, ones)
    y_plain = model_forward(plain, x)
    assert y_mod.tobytes() == y_plain.tobytes()  # bit-identical


def test_zero_alpha_annihilates_hidden_state():
    cfg = tiny_config(hidden_layers=1)
    params = make_model(cfg, 2)
    x = np.array([0.3, 0.4])
    zeros = [np.zeros(cfg.width)]
    y, _ = synthesizer_forward(params, x, zeros)
    np.testing.assert_allclose(y, params.out.bias, atol=1e-12)


def test_synthesizer_matches_straight_line_oracle():
    cfg = tiny_config(hidden_layers=2, width=3)
    params = make_model(cfg, 21)
    rng = RngStream(33)
    x = rng.uniform((cfg.n,))
    alphas = [np.abs(rng.normal((cfg.width,))) for _ in range(cfg.hidden_layers)]

    h = x
    for ly, a in zip(params.synth, alphas):
        h = a * np.sin(ly.weights @ h + ly.bias)
    expected = params.out.weights @ h + params.out.bias

    y, _ = synthesizer_forward(params, x, alphas)
    np.testing.assert_allclose(y, expected, atol=1e-6)


def test_modulated_forward_requires_alphas():
    params = make_model(tiny_config(), 1)
    with pytest.raises(ConfigError):
        synthesizer_forward(params, np.zeros(2), None)


# ---------------------------------------------------------------------------
# model_forward
# ---------------------------------------------------------------------------


def test_zero_latent_zero_mod_biases_output_is_head_bias():
    cfg = tiny_config(hidden_layers=1)
    params = make_model(cfg, 4)
    for ly in params.mod:
        ly.bias[...] = 0.0
    y = model_forward(params, np.array([0.1, 0.9]), np.zeros(cfg.d))
    np.testing.assert_allclose(y, params.out.bias, atol=1e-12)


def test_concat_zero_latent_weights_make_output_latent_independent():
    cfg = tiny_config(conditioning="concat")
    params = make_model(cfg, 5)
    params.synth[0].weights[:, cfg.n:] = 0.0
    x = np.array([0.2, 0.7])
    y1 = model_forward(params, x, RngStream(1).normal((cfg.d,)))
    y2 = model_forward(params, x, RngStream(2).normal((cfg.d,)))
    np.testing.assert_array_equal(y1, y2)


def test_forward_is_deterministic():
    cfg = tiny_config()
    params = make_model(cfg, 6)
    x = RngStream(1).uniform((5, cfg.n))
    z = RngStream(2).normal((5, cfg.d))
    assert model_forward(params, x, z).tobytes() == model_forward(params, x, z).tobytes()


def test_batch_matches_per_sample_definition():
    for conditioning, activation, encoding in [
        ("modulated", "sine", "raw"),
        ("concat", "sine", "raw"),
        ("concat", "relu", "fourier"),
        ("none", "sine", "raw"),
    ]:
        cfg = tiny_config(conditioning=conditioning, activation=activation,
                          encoding=encoding, fourier_features=3)
        params = make_model(cfg, 31)
        rng = RngStream(13)
        x = rng.uniform((7, cfg.n))
        z = rng.normal((7, cfg.d))
        batched = model_forward(params, x, z if conditioning != "none" else None)
        for i in range(7):
            yi = model_forward(params, x[i], z[i] if conditioning != "none" else None)
            np.testing.assert_allclose(batched[i], yi, atol=1e-6)


# ---------------------------------------------------------------------------
# fourier_encode
# ---------------------------------------------------------------------------


def test_fourier_zero_matrix():
    x = np.array([0.3, 0.4])
    b = np.zeros((5, 2))
    feats = fourier_encode(x, b)
    np.testing.assert_allclose(feats, np.concatenate([np.ones(5), np.zeros(5)]), atol=1e-12)


def test_fourier_single_row():
    b = np.array([[1.0, 0.0]])
    feats = fourier_encode(np.array([0.25, 123.0]), b)
    np.testing.assert_allclose(feats, [math.cos(math.pi / 2), math.sin(math.pi / 2)], atol=1e-12)


def test_fourier_output_length():
    b = RngStream(3).normal((11, 4))
    assert fourier_encode(RngStream(4).uniform((4,)), b).shape == (22,)


# ---------------------------------------------------------------------------
# concat phase-shift law
# ---------------------------------------------------------------------------


def test_concat_preact_difference_constant_in_x():
    cfg = tiny_config(conditioning="concat", d=6, width=8)
    params = make_model(cfg, 12)
    rng = RngStream(40)
    z1 = rng.normal((cfg.d,))
    z2 = rng.normal((cfg.d,))
    x = rng.uniform((100, cfg.n))
    diff = concat_first_layer_preact(params, x, np.broadcast_to(z1, (100, cfg.d))) - \
        concat_first_layer_preact(params, x, np.broadcast_to(z2, (100, cfg.d)))
    dev = np.abs(diff - diff.mean(axis=0)).max()
    assert dev < 1e-6


def test_concat_preact_same_latent_is_exactly_zero():
    cfg = tiny_config(conditioning="concat")
    params = make_model(cfg, 13)
    z = RngStream(1).normal((cfg.d,))
    x = RngStream(2).uniform((10, cfg.n))
    diff = concat_first_layer_preact(params, x, np.broadcast_to(z, (10, cfg.d))) - \
        concat_first_layer_preact(params, x, np.broadcast_to(z, (10, cfg.d)))
    assert np.all(diff == 0.0)


def test_concat_preact_difference_equals_submatrix_product():
    cfg = tiny_config(conditioning="concat", d=5, width=7)
    params = make_model(cfg, 14)
    rng = RngStream(3)
    z1 = rng.normal((cfg.d,))
    z2 = rng.normal((cfg.d,))
    x = rng.uniform((cfg.n,))
    diff = concat_first_layer_preact(params, x, z1) - concat_first_layer_preact(params, x, z2)
    w_z = params.synth[0].weights[:, cfg.n:]
    np.testing.assert_allclose(diff, w_z @ (z1 - z2), atol=1e-6)


def test_modulated_amplitudes_vary_per_unit_by_factor_two():
    # Contrast with the phase-shift law: amplitude ratios swing across latents.
    cfg = tiny_config(conditioning="modulated", d=8, width=8)
    params = make_model(cfg, 15)
    rng = RngStream(8)
    found = False
    for _ in range(100):
        a1 = modulator_forward(params, rng.normal((cfg.d,))).alphas[0]
        a2 = modulator_forward(params, rng.normal((cfg.d,))).alphas[0]
        mask = (a1 > 1e-6) & (a2 > 1e-6)
        if not mask.any():
            continue
        ratio = a1[mask] / a2[mask]
        if max(ratio.max(), (1.0 / ratio).max()) > 2.0:
            found = True
            break
    assert found


def test_wrong_mode_for_preact_split():
    params = make_model(tiny_config(conditioning="modulated"), 1)
    with pytest.raises(ConfigError):
        concat_first_layer_preact(params, np.zeros(2), np.zeros(4))


# ---------------------------------------------------------------------------
# model_backward
# ---------------------------------------------------------------------------


def test_zero_upstream_gives_zero_grads():
    cfg = tiny_config()
    params = make_model(cfg, 16)
    x = RngStream(1).uniform((3, cfg.n))
    z = RngStream(2).normal((3, cfg.d))
    y, tape = model_forward_tape(params, x, z)
    g = model_backward(params, tape, z, np.zeros_like(y))
    assert np.all(g.to_vector() == 0.0)
    assert np.all(g.dz == 0.0)


def test_hand_derived_scalar_gradient():
    # K=1, width=1, d=1, all dims scalar; L = y^2.
    # Modulator: s0 = relu(w0p*z + b0p); a = relu(wa*s0 + wz*z + ba)
    # Trunk:     y  = wo * (a * sin(w1*x + b1)) + bo
    w0p, b0p = 0.5, 0.1
    wa, wz, ba = 0.7, 0.3, 0.2
    w1, b1 = 1.3, 0.2
    wo, bo = 1.1, -0.3
    xv, zv = 0.4, 1.0

    cfg = ModelConfig(n=1, m=1, d=1, hidden_layers=1, width=1)
    params = init_model(cfg, RngStream(0), dtype=np.float64)
    params.mod[0].weights[...] = w0p
    params.mod[0].bias[...] = b0p
    params.mod[1].weights[...] = [[wa, wz]]
    params.mod[1].bias[...] = ba
    params.synth[0].weights[...] = w1
    params.synth[0].bias[...] = b1
    params.out.weights[...] = wo
    params.out.bias[...] = bo

    s0 = w0p * zv + b0p                  # = 0.6, relu active
    a = wa * s0 + wz * zv + ba           # = 0.92, relu active
    s = math.sin(w1 * xv + b1)
    c = math.cos(w1 * xv + b1)
    y = wo * a * s + bo
    dy = 2.0 * y

    expected = {
        "dw1": dy * wo * a * c * xv,
        "db1": dy * wo * a * c,
        "dw0p": dy * wo * s * wa * zv,
        "db0p": dy * wo * s * wa,
        "dwa": dy * wo * s * s0,
        "dwz": dy * wo * s * zv,
        "dba": dy * wo * s,
        "dwo": dy * a * s,
        "dbo": dy,
        "dz": dy * wo * s * (wa * w0p + wz),
    }

    out, tape = model_forward_tape(params, np.array([xv]), np.array([zv]))
    assert abs(out[0] - y) < 1e-12
    g = model_backward(params, tape, np.array([zv]), np.array([dy]))

    assert abs(g.synth[0][0][0, 0] - expected["dw1"]) < 1e-10
    assert abs(g.synth[0][1][0] - expected["db1"]) < 1e-10
    assert abs(g.mod[0][0][0, 0] - expected["dw0p"]) < 1e-10
    assert abs(g.mod[0][1][0] - expected["db0p"]) < 1e-10
    assert abs(g.mod[1][0][0, 0] - expected["dwa"]) < 1e-10
    assert abs(g.mod[1][0][0, 1] - expected["dwz"]) < 1e-10
    assert abs(g.mod[1][1][0] - expected["dba"]) < 1e-10
    assert abs(g.out[0][0, 0] - expected["dwo"]) < 1e-10
    assert abs(g.out[1][0] - expected["dbo"]) < 1e-10
    assert abs(g.dz[0] - expected["dz"]) < 1e-10


def _grad_check(cfg, seed, tol=1e-5):
    rng = RngStream(seed)
    params = init_model(cfg, rng, dtype=np.float64)
    B = 3
    x = rng.uniform((B, cfg.n))
    z = rng.normal((B, cfg.d)) if cfg.conditioning != "none" else None

    # Central differences straddle ReLU kinks; jitter parameters until every
    # pre-activation clears zero by more than the differencing step.
    for attempt in range(20):
        _, probe = model_forward_tape(params, x, z)
        pres = list(probe.pres) + (probe.mods.pres if probe.mods else [])
        clearance = min(float(np.abs(p).min()) for p in pres)
        if clearance > 1e-3:
            break
        params.set_vector(params.to_vector() + rng.normal((params.num_params(),), std=0.02))
    else:
        pytest.skip("could not move pre-activations off the ReLU kink")

    def loss_of(theta):
        p2 = params.copy()
        p2.set_vector(theta)
        y = model_forward(p2, x, z)
        return float((y ** 2).sum())

    y, tape = model_forward_tape(params, x, z)
    g = model_backward(params, tape, z, 2.0 * y)
    fd = finite_difference_grad(loss_of, params.to_vector(), 1e-5)
    gv = g.to_vector()
    denom = np.maximum(np.abs(fd) + np.abs(gv), 1e-6)
    assert (np.abs(gv - fd) / denom).max() < tol

    if z is not None:
        def loss_z(zf):
            return float((model_forward(params, x, zf.reshape(z.shape)) ** 2).sum())
        fdz = finite_difference_grad(loss_z, z.ravel(), 1e-5)
        dzv = g.dz.ravel()
        denom = np.maximum(np.abs(fdz) + np.abs(dzv), 1e-6)
        assert (np.abs(dzv - fdz) / denom).max() < tol


@pytest.mark.parametrize("seed", range(8))
def test_gradcheck_modulated(seed):
    rng = RngStream(seed + 1000)
    cfg = ModelConfig(n=1 + rng.integers(3), m=1 + rng.integers(3), d=1 + rng.integers(8),
                      hidden_layers=1 + rng.integers(3), width=1 + rng.integers(8))
    _grad_check(cfg, seed)


@pytest.mark.parametrize("conditioning,activation,encoding", [
    ("concat", "sine", "raw"),
    ("concat", "relu", "raw"),
    ("concat", "relu", "fourier"),
    ("none", "sine", "raw"),
    ("none", "relu", "fourier"),
])
def test_gradcheck_baselines(conditioning, activation, encoding):
    for seed in range(3):
        cfg = tiny_config(conditioning=conditioning, activation=activation,
                          encoding=encoding, fourier_features=4)
        _grad_check(cfg, seed + 50)


# ---------------------------------------------------------------------------
# parameter vector round trip
# ---------------------------------------------------------------------------


def test_param_vector_round_trip():
    for conditioning in ("modulated", "concat", "none"):
        cfg = tiny_config(conditioning=conditioning)
        params = make_model(cfg, 19, dtype=np.float32)
        vec = params.to_vector()
        clone = params.copy()
        clone.set_vector(np.zeros_like(vec))
        assert clone.to_vector().sum() == 0.0
        clone.set_vector(vec)
        assert clone.to_vector().tobytes() == vec.tobytes()


def test_layer_shapes_consistency():
    cfg = tiny_config(conditioning="modulated", hidden_layers=3, width=6, d=4)
    shapes = layer_shapes(cfg)
    assert shapes["synth"] == [(6, 2), (6, 6), (6, 6)]
    assert shapes["mod"] == [(6, 4)] + [(6, 10)] * 3
    assert shapes["out"] == (2, 6)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n=0, m=1).validate()
    with pytest.raises(ConfigError):
        tiny_config(conditioning="hyper").validate()
    with pytest.raises(ConfigError):
        tiny_config(conditioning="modulated", activation="relu").validate()
    with pytest.raises(ConfigError):
        tiny_config(encoding="fourier", activation="sine").validate()
