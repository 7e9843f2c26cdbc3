"""Conditional coordinate-to-value mapping.

A sine-activated synthesis trunk maps coordinates to signal values.  Its
per-layer amplitudes come from a ReLU modulation stack that reads a latent
code, with the code re-fed at every layer as a skip connection.  Baseline
conditionings (plain concatenation, unconditioned trunks, random Fourier
input features) share the same trunk machinery.

All gradients are hand-derived; `model_backward` is checked against the
finite-difference oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import (
    Activation,
    DenseLayer,
    RngStream,
    activate,
    activate_backward,
    init_relu_layer,
    init_siren_first,
    init_siren_hidden,
    linear_forward,
)

CONDITIONINGS = ("modulated", "concat", "none")
ACTIVATIONS = ("sine", "relu")
ENCODINGS = ("raw", "fourier")


@dataclass
class ModelConfig:
    n: int                       # input coordinate dimension
    m: int                       # output dimension
    d: int = 256                 # latent dimension
    hidden_layers: int = 3       # trunk depth K
    width: int = 128             # hidden units per trunk layer
    omega0: float = 30.0         # first sine layer frequency scale
    conditioning: str = "modulated"
    activation: str = "sine"     # trunk activation
    encoding: str = "raw"
    fourier_sigma: float = 1.0
    fourier_features: int = 64

    def validate(self) -> None:
        for name in ("n", "m", "d", "hidden_layers", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if self.conditioning == "modulated" and self.activation != "sine":
            raise ConfigError("modulated conditioning requires the sine trunk")
        if self.encoding == "fourier":
            if self.activation != "relu":
                raise ConfigError("fourier input features are only for ReLU baselines")
            if self.fourier_features < 1:
                raise ConfigError("fourier_features must be >= 1")

    def feature_dim(self) -> int:
        """Width of the vector actually fed to the first trunk layer."""
        base = 2 * self.fourier_features if self.encoding == "fourier" else self.n
        if self.conditioning == "concat":
            base += self.d
        return base


@dataclass
class ModulationSignals:
    """Modulator activations for one batch.

    hiddens[0] is the stem output; hiddens[1..K] are the amplitude vectors
    alpha_1..alpha_K.  Pre-activations are kept for backprop.
    """

    pres: list     # K+1 arrays, each (B, width)
    hiddens: list  # K+1 arrays, each (B, width)

    @property
    def alphas(self) -> list:
        return self.hiddens[1:]


@dataclass
class ForwardTape:
    """Cached activations of one forward pass (batch of B samples)."""

    feats: np.ndarray          # (B, feature_dim) trunk input
    pres: list                 # trunk pre-activations, K arrays (B, width)
    hiddens: list              # trunk outputs after modulation, K arrays
    raw_posts: list            # trunk activations before modulation
    alphas: list | None        # amplitude arrays multiplied in, or None
    mods: ModulationSignals | None  # full modulator cache (model_forward_tape only)
    batched: bool              # False when the caller passed 1-d vectors


@dataclass
class ModelParams:
    config: ModelConfig
    synth: list                      # K DenseLayers (trunk)
    out: DenseLayer                  # identity head, (m, width)
    mod: list = field(default_factory=list)   # K+1 ReLU layers, modulated only
    fourier_b: np.ndarray | None = None       # (fourier_features, n), fixed

    # Flattening order (also the checkpoint blob order): trunk layers, then
    # modulator, then output head; each layer as row-major weights then bias.
    def _arrays(self) -> list:
        arrs = []
        for ly in self.synth:
            arrs += [ly.weights, ly.bias]
        for ly in self.mod:
            arrs += [ly.weights, ly.bias]
        arrs += [self.out.weights, self.out.bias]
        return arrs

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    def set_vector(self, vec: np.ndarray) -> None:
        arrs = self._arrays()
        total = sum(a.size for a in arrs)
        if vec.size != total:
            raise DimensionError(f"parameter vector has {vec.size} entries, model needs {total}")
        off = 0
        for a in arrs:
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size

    def num_params(self) -> int:
        return sum(a.size for a in self._arrays())

    def copy(self) -> "ModelParams":
        def cp(ly):
            return DenseLayer(ly.weights.copy(), ly.bias.copy(), ly.activation)
        return ModelParams(
            config=self.config,
            synth=[cp(ly) for ly in self.synth],
            out=cp(self.out),
            mod=[cp(ly) for ly in self.mod],
            fourier_b=None if self.fourier_b is None else self.fourier_b.copy(),
        )


def layer_shapes(config: ModelConfig) -> dict:
    """Shapes of every parameter group, in flattening order."""
    K, w, d = config.hidden_layers, config.width, config.d
    feat = config.feature_dim()
    synth = [(w, feat)] + [(w, w)] * (K - 1)
    mod = []
    if config.conditioning == "modulated":
        mod = [(w, d)] + [(w, w + d)] * K
    return {"synth": synth, "mod": mod, "out": (config.m, w)}


def init_model(config: ModelConfig, rng: RngStream, dtype=np.float32) -> ModelParams:
    """Draw fresh parameters.  Draw order: trunk, head, modulator, fourier."""
    config.validate()
    shapes = layer_shapes(config)

    synth = []
    for i, (out_d, in_d) in enumerate(shapes["synth"]):
        if config.activation == "sine":
            if i == 0:
                synth.append(init_siren_first(out_d, in_d, rng, config.omega0, dtype))
            else:
                synth.append(init_siren_hidden(out_d, in_d, config.omega0, rng, dtype))
        else:
            synth.append(init_relu_layer(out_d, in_d, rng, Activation.RELU, dtype))

    out_d, in_d = shapes["out"]
    if config.activation == "sine":
        head = init_siren_hidden(out_d, in_d, config.omega0, rng, dtype)
        head = DenseLayer(head.weights, head.bias, Activation.IDENTITY)
    else:
        head = init_relu_layer(out_d, in_d, rng, Activation.IDENTITY, dtype)

    mod = [init_relu_layer(o, i, rng, Activation.RELU, dtype) for (o, i) in shapes["mod"]]
    # Amplitude-producing layers start with bias 1: near-zero latents then give
    # alpha ~= 1, so the trunk begins as a plain sine network instead of dark.
    for ly in mod[1:]:
        ly.bias[...] = 1.0

    fourier_b = None
    if config.encoding == "fourier":
        fourier_b = rng.normal((config.fourier_features, config.n),
                               std=config.fourier_sigma).astype(dtype)

    return ModelParams(config, synth, head, mod, fourier_b)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _as_batch(v):
    if v is None:
        return None, True
    v = np.asarray(v)
    if v.ndim == 1:
        return v[None, :], False
    return v, True


def fourier_encode(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """concat(cos(2*pi*Bx), sin(2*pi*Bx)) for a fixed Gaussian matrix B."""
    if x.shape[-1] != b.shape[1]:
        raise DimensionError(f"fourier matrix expects dim={b.shape[1]}, input has dim={x.shape[-1]}")
    proj = 2.0 * np.pi * (x @ b.T)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


def modulator_forward(params: ModelParams, z: np.ndarray) -> ModulationSignals:
    """ReLU stack over the latent code, re-fed at every layer.

    stem:  h0 = relu(W0 z + b0)
    layer: h_{i+1} = relu(W_{i+1} [h_i, z] + b_{i+1}) = alpha_{i+1}
    """
    if not params.mod:
        raise ConfigError("model has no modulator (conditioning is not 'modulated')")
    zb, batched = _as_batch(z)
    if zb.shape[1] != params.config.d:
        raise DimensionError(f"latent code has dim={zb.shape[1]}, model expects d={params.config.d}")
    pres, hiddens = [], []
    p = linear_forward(params.mod[0], zb)
    h = activate(p, Activation.RELU)
    pres.append(p)
    hiddens.append(h)
    for ly in params.mod[1:]:
        p = linear_forward(ly, np.concatenate([h, zb], axis=1))
        h = activate(p, Activation.RELU)
        pres.append(p)
        hiddens.append(h)
    if not batched:
        pres = [a[0] for a in pres]
        hiddens = [a[0] for a in hiddens]
    return ModulationSignals(pres, hiddens)


def _trunk_forward(params: ModelParams, feats: np.ndarray, alphas: list | None):
    pres, raw_posts, hiddens = [], [], []
    h = feats
    for i, ly in enumerate(params.synth):
        p = linear_forward(ly, h)
        s = activate(p, ly.activation)
        pres.append(p)
        raw_posts.append(s)
        if alphas is not None:
            s = alphas[i] * s
        hiddens.append(s)
        h = s
    y = linear_forward(params.out, h)
    return y, pres, raw_posts, hiddens


def synthesizer_forward(params: ModelParams, x: np.ndarray, alphas: list | None = None):
    """Run the trunk on (already encoded) coordinates x with amplitudes alphas.

    With alphas=None the trunk runs unmodulated.  Returns (y, ForwardTape).
    """
    cfg = params.config
    xb, batched = _as_batch(x)
    if cfg.conditioning == "modulated" and alphas is None:
        raise ConfigError("modulated model needs modulation amplitudes; call modulator_forward")
    al = None
    if alphas is not None:
        al = [np.asarray(a) for a in alphas]
        al = [a if a.ndim == 2 else a[None, :] for a in al]
        if len(al) != len(params.synth):
            raise DimensionError(
                f"got {len(al)} amplitude vectors for {len(params.synth)} trunk layers"
            )
    y, pres, raw_posts, hiddens = _trunk_forward(params, xb, al)
    tape = ForwardTape(xb, pres, hiddens, raw_posts, al, None, batched)
    if not batched:
        y = y[0]
    return y, tape


def _build_features(params: ModelParams, x: np.ndarray, z: np.ndarray | None) -> np.ndarray:
    cfg = params.config
    if x.shape[1] != cfg.n:
        raise DimensionError(f"input has dim={x.shape[1]}, model expects n={cfg.n}")
    feats = fourier_encode(x, params.fourier_b) if cfg.encoding == "fourier" else x
    if cfg.conditioning == "concat":
        if z is None:
            raise ConfigError("concat conditioning needs a latent code")
        if z.shape[1] != cfg.d:
            raise DimensionError(f"latent code has dim={z.shape[1]}, model expects d={cfg.d}")
        if z.shape[0] == 1 and x.shape[0] > 1:
            z = np.broadcast_to(z, (x.shape[0], cfg.d))
        feats = np.concatenate([feats, z], axis=1)
    return feats


def model_forward_tape(params: ModelParams, x: np.ndarray, z: np.ndarray | None = None):
    """Full conditional forward pass; returns (y, ForwardTape)."""
    cfg = params.config
    xb, batched = _as_batch(x)
    zb, _ = _as_batch(z)
    if cfg.conditioning == "modulated":
        if zb is None:
            raise ConfigError("modulated conditioning needs a latent code")
        if zb.shape[0] == 1 and xb.shape[0] > 1:
            zb = np.broadcast_to(zb, (xb.shape[0], cfg.d))
        if xb.shape[1] != cfg.n:
            raise DimensionError(f"input has dim={xb.shape[1]}, model expects n={cfg.n}")
        mods = modulator_forward(params, zb)
        y, pres, raw_posts, hiddens = _trunk_forward(params, xb, mods.alphas)
        tape = ForwardTape(xb, pres, hiddens, raw_posts, mods.alphas, mods, batched)
    else:
        feats = _build_features(params, xb, zb)
        y, pres, raw_posts, hiddens = _trunk_forward(params, feats, None)
        tape = ForwardTape(feats, pres, hiddens, raw_posts, None, None, batched)
    if not batched:
        y = y[0]
    return y, tape


def model_forward(params: ModelParams, x: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
    y, _ = model_forward_tape(params, x, z)
    return y


def concat_first_layer_preact(params: ModelParams, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Pre-activation of trunk layer 1 under concatenation conditioning.

    Exposed on its own because the latent's entire first-layer influence is
    the additive term W_z z, i.e. a pure phase shift for a sine trunk.
    """
    if params.config.conditioning != "concat":
        raise ConfigError("first-layer pre-activation split requires concat conditioning")
    xb, batched = _as_batch(x)
    zb, _ = _as_batch(z)
    feats = _build_features(params, xb, zb)
    p = linear_forward(params.synth[0], feats)
    return p if batched else p[0]


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


@dataclass
class ModelGrads:
    """Gradients in the same layout as ModelParams; batch-summed."""

    synth: list                    # (dW, db) per trunk layer
    mod: list                      # (dW, db) per modulator layer
    out: tuple
    dz: np.ndarray | None          # (B, d) per-sample, or (d,) for vector input

    def to_vector(self) -> np.ndarray:
        parts = []
        for dw, db in self.synth:
            parts += [dw.ravel(), db]
        for dw, db in self.mod:
            parts += [dw.ravel(), db]
        parts += [self.out[0].ravel(), self.out[1]]
        return np.concatenate(parts)


def trunk_backward(params: ModelParams, tape: ForwardTape, upstream: np.ndarray):
    """Backprop through head and trunk only.

    Returns (synth_grads, out_grad, dfeats, dalphas); dalphas is a list of
    per-sample gradients w.r.t. each amplitude vector (None when the trunk
    ran unmodulated).  For h_i = alpha_i * sin(pre_i) the incoming gradient
    splits into an amplitude branch (times the raw sine output) and a sine
    branch (times alpha, then cos via the chain rule).
    """
    dy, _ = _as_batch(upstream)
    B = tape.feats.shape[0]
    m = params.out.out_dim
    if dy.shape != (B, m):
        raise DimensionError(f"upstream shape {np.shape(upstream)} does not match output ({B}, {m})")

    h_last = tape.hiddens[-1]
    d_out = (dy.T @ h_last, dy.sum(axis=0))
    dh = dy @ params.out.weights

    K = len(params.synth)
    d_synth = [None] * K
    dalphas = [None] * K if tape.alphas is not None else None
    for i in range(K - 1, -1, -1):
        ly = params.synth[i]
        if tape.alphas is not None:
            dalphas[i] = dh * tape.raw_posts[i]
            ds = dh * tape.alphas[i]
        else:
            ds = dh
        dpre = activate_backward(tape.pres[i], ly.activation, ds)
        x_in = tape.hiddens[i - 1] if i > 0 else tape.feats
        d_synth[i] = (dpre.T @ x_in, dpre.sum(axis=0))
        dh = dpre @ ly.weights
    return d_synth, d_out, dh, dalphas


def modulator_backward(params: ModelParams, mods: ModulationSignals,
                       z: np.ndarray, dalphas: list):
    """Backprop through the modulator.

    dalphas[i] is the gradient w.r.t. alpha_{i+1}.  Each hidden state
    receives gradient both as an amplitude (from the trunk) and as input to
    the next modulator layer; the latent accumulates a term from the stem
    plus every layer's skip connection.
    """
    zb, _ = _as_batch(z)
    pres = [p if p.ndim == 2 else p[None, :] for p in mods.pres]
    hiddens = [h if h.ndim == 2 else h[None, :] for h in mods.hiddens]
    dal = [a if a.ndim == 2 else a[None, :] for a in dalphas]
    K = len(dal)
    d = params.config.d
    grads = [None] * (K + 1)
    dz = np.zeros_like(zb)
    dh = np.zeros_like(hiddens[0])
    for i in range(K, 0, -1):
        dh_total = dal[i - 1] + dh if i < K else dal[i - 1]
        dpre = activate_backward(pres[i], Activation.RELU, dh_total)
        inp = np.concatenate([hiddens[i - 1], zb], axis=1)
        grads[i] = (dpre.T @ inp, dpre.sum(axis=0))
        dinp = dpre @ params.mod[i].weights
        dh = dinp[:, :-d]
        dz = dz + dinp[:, -d:]
    dpre = activate_backward(pres[0], Activation.RELU, dh)
    grads[0] = (dpre.T @ zb, dpre.sum(axis=0))
    dz = dz + dpre @ params.mod[0].weights
    return grads, dz


def model_backward(params: ModelParams, tape: ForwardTape, z: np.ndarray | None,
                   upstream: np.ndarray) -> ModelGrads:
    """Analytic gradients of a batch-summed loss w.r.t. all parameters and z.

    `upstream` is dL/dy with the same leading shape the forward call used.
    The tape must come from model_forward_tape on the same params.
    """
    cfg = params.config
    d_synth, d_out, dfeats, dalphas = trunk_backward(params, tape, upstream)

    d_mod: list = []
    dz = None
    if cfg.conditioning == "modulated":
        if tape.mods is None:
            raise ConfigError("tape has no modulator cache; use model_forward_tape")
        zb, _ = _as_batch(z)
        B = tape.feats.shape[0]
        if zb.shape[0] == 1 and B > 1:
            zb = np.broadcast_to(zb, (B, cfg.d))
        d_mod, dz = modulator_backward(params, tape.mods, zb, dalphas)
    elif cfg.conditioning == "concat":
        dz = dfeats[:, -cfg.d:]

    if dz is not None and z is not None and np.asarray(z).ndim == 1:
        dz = dz.sum(axis=0)
    return ModelGrads(d_synth, d_mod, d_out, dz)
