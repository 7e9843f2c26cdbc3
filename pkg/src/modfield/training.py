"""Losses, the auto-decoder and auto-encoder training loops, frozen-parameter
latent inference, and reconstruction metrics.

Training draws minibatches of (tile, point) pairs over all signals.  Points
are regressed in their tile's local coordinates against the tile's own
latent code; cross-tile blending only happens at decode time, which keeps
every tile's latent gradient independent of its neighbours.  Points inside
overlap bands belong to every covering tile as separate pairs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError
from .nn import (
    Activation,
    AdamState,
    DenseLayer,
    RngStream,
    adam_step,
    init_relu_layer,
    mlp_backward,
    mlp_forward,
)
from .model import (
    ModelConfig,
    ModelGrads,
    ModelParams,
    init_model,
    model_backward,
    model_forward_tape,
    modulator_backward,
    modulator_forward,
    synthesizer_forward,
    trunk_backward,
)
from .signals import SampledSignal, bilinear_resample, pixel_center_grid
from .tiling import Codebook, TileGrid, decode_points


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 512        # samples per step (per tile for infer_latents)
    lr_theta: float = 1e-4
    lr_latent: float = 1e-3
    loss: str = "l2"
    latent_scale: float = 1e-2   # std of the Gaussian latent init
    seed: int = 0
    eval_every: int = 0          # 0 disables periodic evaluation
    eval_2x: bool = False        # also track PSNR at 2x decode resolution

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr_theta <= 0 or self.lr_latent <= 0:
            raise ConfigError("learning rates must be positive")
        if self.latent_scale <= 0:
            raise ConfigError("latent_scale must be positive")
        if self.loss not in ("l2", "l1"):
            raise ConfigError(f"loss must be 'l2' or 'l1', got {self.loss!r}")


@dataclass
class EncoderConfig:
    hidden: tuple = (256, 256)   # widths of the ReLU layers before the latent head


@dataclass
class TileEncoderParams:
    """ReLU MLP from a flattened tile's sample values to a latent code."""

    layers: list

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def d(self) -> int:
        return self.layers[-1].out_dim

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for ly in self.layers for a in (ly.weights, ly.bias)])

    def set_vector(self, vec: np.ndarray) -> None:
        arrs = [a for ly in self.layers for a in (ly.weights, ly.bias)]
        total = sum(a.size for a in arrs)
        if vec.size != total:
            raise DimensionError(f"encoder vector has {vec.size} entries, needs {total}")
        off = 0
        for a in arrs:
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)   # step/loss/psnr_1x/psnr_2x/wall_ms
    loss_history: list = field(default_factory=list)
    wall_s: float = 0.0
    final: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def reconstruction_loss(pred: np.ndarray, target: np.ndarray, kind: str = "l2"):
    """Per-sample loss and its gradient w.r.t. pred.

    l2 is the squared Euclidean norm of the residual; l1 the sum of absolute
    differences (subgradient 0 where the residual is exactly zero).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    if kind == "l2":
        return float((diff * diff).sum()), 2.0 * diff
    if kind == "l1":
        return float(np.abs(diff).sum()), np.sign(diff)
    raise ConfigError(f"unknown loss kind {kind!r}")


def _loss_batch(pred: np.ndarray, target: np.ndarray, kind: str):
    """Mean per-sample loss over a batch, gradient already divided by B."""
    diff = pred - target
    B = pred.shape[0]
    if kind == "l2":
        return float((diff * diff).sum() / B), (2.0 / B) * diff
    return float(np.abs(diff).sum() / B), np.sign(diff) / B


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf when the signals match exactly."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} does not match target shape {target.shape}")
    mse = float(np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def init_latents(count: int, d: int, scale: float, rng: RngStream,
                 dtype=np.float32) -> np.ndarray:
    """(count, d) i.i.d. Normal(0, scale^2) latent codes."""
    if scale <= 0:
        raise ConfigError(f"latent scale must be positive, got {scale}")
    return rng.normal((count, d), std=scale).astype(dtype)


# ---------------------------------------------------------------------------
# Sample banks: (tile, point) training pairs in local coordinates
# ---------------------------------------------------------------------------


def _tile_masks(grid: TileGrid, coords: np.ndarray):
    """Yield (linear_index, origin, mask) for every tile of the grid."""
    import itertools
    for index in itertools.product(*[range(c) for c in grid.counts]):
        origin = grid.tile_origin(index)
        inside = np.ones(coords.shape[0], dtype=bool)
        for k in range(grid.n):
            a, t, e = origin[k], grid.tile_size[k], grid.extent[k]
            xk = coords[:, k]
            cover = (xk >= a) & (xk < a + t)
            if index[k] == grid.counts[k] - 1:
                cover |= xk == e
            inside &= cover
        yield grid.linear_index(index), origin, inside


def build_sample_bank(signals: list, grid: TileGrid, dtype=np.float32):
    """Flatten all signals into (local coords, targets, codebook row) arrays.

    Codebook rows are numbered signal-major: signal s, tile k -> s * T + k.
    """
    if not signals:
        raise ConfigError("training needs at least one signal")
    n, m = signals[0].n, signals[0].m
    for s in signals:
        if (s.n, s.m) != (n, m):
            raise DimensionError(f"signals disagree on dims: ({s.n}, {s.m}) vs ({n}, {m})")
        if s.extent != grid.extent:
            raise DimensionError(f"signal extent {s.extent} does not match grid extent {grid.extent}")
    T = grid.num_tiles
    xs, ys, rows = [], [], []
    t_sizes = np.asarray(grid.tile_size, dtype=np.float64)
    for si, sig in enumerate(signals):
        coords = np.asarray(sig.coords, dtype=np.float64)
        for k, origin, mask in _tile_masks(grid, coords):
            if not mask.any():
                continue
            local = (coords[mask] - np.asarray(origin, dtype=np.float64)) / t_sizes
            xs.append(local.astype(dtype))
            ys.append(np.asarray(sig.values[mask], dtype=dtype))
            rows.append(np.full(mask.sum(), si * T + k, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    r = np.concatenate(rows)
    return x, y, r


def _segment_sum(values: np.ndarray, seg: np.ndarray, count: int) -> np.ndarray:
    """Sum rows of `values` by segment id, deterministically."""
    order = np.argsort(seg, kind="stable")
    sv = values[order]
    bounds = np.searchsorted(seg[order], np.arange(count))
    out = np.add.reduceat(sv, bounds, axis=0)
    # reduceat misbehaves on empty segments; mask them out explicitly
    present = np.zeros(count, dtype=bool)
    present[seg] = True
    out[~present] = 0
    return out


# ---------------------------------------------------------------------------
# One optimization step (shared by all loops)
# ---------------------------------------------------------------------------


def _forward_backward(params: ModelParams, xb, yb, z_uniq, inv, loss_kind):
    """Loss + parameter gradients + per-unique-latent gradients for a batch.

    z_uniq holds each distinct latent once; inv maps samples to them.  The
    modulator runs once per distinct latent instead of once per sample.
    """
    cfg = params.config
    if cfg.conditioning == "modulated":
        mods = modulator_forward(params, z_uniq)
        alphas = [a[inv] for a in mods.alphas]
        y_pred, tape = synthesizer_forward(params, xb, alphas)
        loss, dpred = _loss_batch(y_pred, yb, loss_kind)
        d_synth, d_out, _, dalphas = trunk_backward(params, tape, dpred)
        dal_u = [_segment_sum(da, inv, z_uniq.shape[0]) for da in dalphas]
        d_mod, dz_u = modulator_backward(params, mods, z_uniq, dal_u)
        grads = ModelGrads(d_synth, d_mod, d_out, None)
    else:
        zb = None if cfg.conditioning == "none" else z_uniq[inv]
        y_pred, tape = model_forward_tape(params, xb, zb)
        loss, dpred = _loss_batch(y_pred, yb, loss_kind)
        g = model_backward(params, tape, zb, dpred)
        dz_u = None if g.dz is None else _segment_sum(g.dz, inv, z_uniq.shape[0])
        grads = ModelGrads(g.synth, g.mod, g.out, None)
    return loss, grads, dz_u


def _eval_metrics(params, codes, grid, signals, eval_2x):
    """PSNR of the blended decode against each dense signal, averaged."""
    T = grid.num_tiles
    vals_1x, vals_2x = [], []
    for si, sig in enumerate(signals):
        if not sig.dense:
            return float("nan"), float("nan")
        cb = Codebook(grid, codes[si * T:(si + 1) * T])
        pred = decode_points(params, cb, sig.coords)
        vals_1x.append(psnr(pred, sig.values))
        if eval_2x:
            ext2 = tuple(2 * e for e in sig.extent)
            pred2 = decode_points(params, cb, pixel_center_grid(sig.extent, 2))
            target2 = bilinear_resample(sig, ext2)
            vals_2x.append(psnr(pred2, target2.values))
    p1 = float(np.mean(vals_1x))
    p2 = float(np.mean(vals_2x)) if vals_2x else float("nan")
    return p1, p2


def _record(report, step, loss, p1, p2, t0):
    wall_ms = (time.perf_counter() - t0) * 1e3
    report.rows.append({"step": step, "loss": loss, "psnr_1x": p1,
                        "psnr_2x": p2, "wall_ms": wall_ms})


def _check_finite(loss, step, rows):
    if not math.isfinite(loss):
        sample = np.unique(rows)[:8].tolist()
        raise NumericalError(f"non-finite loss at step {step} (codebook rows {sample})")


# ---------------------------------------------------------------------------
# Auto-decoder
# ---------------------------------------------------------------------------


def train_autodecoder(signals: list, grid: TileGrid, model_cfg: ModelConfig,
                      train_cfg: TrainConfig):
    """Jointly optimize network parameters and per-tile latent codes.

    Returns (params, [Codebook per signal], TrainReport).
    """
    train_cfg.validate()
    model_cfg.validate()
    t0 = time.perf_counter()
    rng = RngStream(train_cfg.seed)
    params = init_model(model_cfg, rng)
    T = grid.num_tiles
    codes = init_latents(T * len(signals), model_cfg.d, train_cfg.latent_scale, rng)
    x, y, rows = build_sample_bank(signals, grid)

    theta = params.to_vector()
    adam_t = AdamState(train_cfg.lr_theta)
    adam_z = AdamState(train_cfg.lr_latent)
    report = TrainReport()

    for step in range(train_cfg.steps):
        idx = rng.integers(x.shape[0], (train_cfg.batch_size,))
        rb = rows[idx]
        uniq, inv = np.unique(rb, return_inverse=True)
        loss, grads, dz_u = _forward_backward(params, x[idx], y[idx], codes[uniq],
                                              inv, train_cfg.loss)
        _check_finite(loss, step, rb)
        report.loss_history.append(loss)

        theta, adam_t = adam_step(theta, grads.to_vector(), adam_t)
        params.set_vector(theta)
        if dz_u is not None:
            zgrad = np.zeros_like(codes)
            zgrad[uniq] = dz_u
            codes, adam_z = adam_step(codes, zgrad, adam_z)

        if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0:
            p1, p2 = _eval_metrics(params, codes, grid, signals, train_cfg.eval_2x)
            _record(report, step + 1, loss, p1, p2, t0)

    p1, p2 = _eval_metrics(params, codes, grid, signals, train_cfg.eval_2x)
    _record(report, train_cfg.steps, report.loss_history[-1], p1, p2, t0)
    report.wall_s = time.perf_counter() - t0
    report.final = {"loss": report.loss_history[-1], "psnr_1x": p1, "psnr_2x": p2}
    books = [Codebook(grid, codes[i * T:(i + 1) * T]) for i in range(len(signals))]
    return params, books, report


# ---------------------------------------------------------------------------
# Frozen-parameter latent inference
# ---------------------------------------------------------------------------


def infer_latents(params: ModelParams, signal: SampledSignal, grid: TileGrid,
                  train_cfg: TrainConfig) -> Codebook:
    """Optimize a fresh codebook for one signal, network parameters frozen.

    Every tile runs an independent optimization from its own spawned RNG
    stream, so tiles may be processed in any order (or in parallel) with
    identical results; here they are batched together per step.
    batch_size counts samples per tile per step.
    """
    train_cfg.validate()
    theta_before = params.to_vector()
    x, y, rows = build_sample_bank([signal], grid)
    T = grid.num_tiles
    d = params.config.d

    base = RngStream(train_cfg.seed)
    codes = init_latents(T, d, train_cfg.latent_scale, base)
    streams = [base.spawn(k) for k in range(T)]

    # Group samples by tile once; per-step indices come from per-tile streams.
    order = np.argsort(rows, kind="stable")
    x, y, rows = x[order], y[order], rows[order]
    starts = np.searchsorted(rows, np.arange(T))
    stops = np.searchsorted(rows, np.arange(T), side="right")
    active = [k for k in range(T) if stops[k] > starts[k]]
    adam_z = AdamState(train_cfg.lr_latent)

    for step in range(train_cfg.steps):
        picks = []
        seg = []
        for k in active:
            count = stops[k] - starts[k]
            b = min(train_cfg.batch_size, count)
            picks.append(starts[k] + streams[k].integers(count, (b,)))
            seg.append(np.full(b, k, dtype=np.int64))
        idx = np.concatenate(picks)
        seg = np.concatenate(seg)
        uniq, inv = np.unique(seg, return_inverse=True)
        loss, _, dz_u = _forward_backward(params, x[idx], y[idx], codes[uniq],
                                          inv, train_cfg.loss)
        _check_finite(loss, step, seg)
        if dz_u is None:
            raise ConfigError("latent inference needs a latent-conditioned model")
        zgrad = np.zeros_like(codes)
        zgrad[uniq] = dz_u
        codes, adam_z = adam_step(codes, zgrad, adam_z)

    theta_after = params.to_vector()
    if theta_after.tobytes() != theta_before.tobytes():
        raise NumericalError("frozen parameters changed during latent inference")
    return Codebook(grid, codes)


# ---------------------------------------------------------------------------
# Auto-encoder
# ---------------------------------------------------------------------------


def init_encoder(in_dim: int, d: int, enc_cfg: EncoderConfig, rng: RngStream,
                 dtype=np.float32) -> TileEncoderParams:
    dims = [in_dim, *enc_cfg.hidden, d]
    layers = []
    for i in range(len(dims) - 1):
        act = Activation.RELU if i < len(dims) - 2 else Activation.IDENTITY
        layers.append(init_relu_layer(dims[i + 1], dims[i], rng, act, dtype))
    return TileEncoderParams(layers)


def tile_inputs(signals: list, grid: TileGrid, dtype=np.float32) -> np.ndarray:
    """(total_tiles, prod(tile_size) * m) flattened tile targets, row-major.

    Requires dense signals; this is the encoder's discrete input.
    """
    blocks = []
    for sig in signals:
        if not sig.dense:
            raise DimensionError("the tile encoder needs dense signals")
        arr = sig.to_dense()
        import itertools
        for index in itertools.product(*[range(c) for c in grid.counts]):
            origin = grid.tile_origin(index)
            sl = tuple(slice(origin[k], origin[k] + grid.tile_size[k]) for k in range(grid.n))
            blocks.append(np.asarray(arr[sl], dtype=dtype).reshape(-1))
    return np.stack(blocks)


def encode_signal(params: ModelParams, encoder: TileEncoderParams,
                  signal: SampledSignal, grid: TileGrid) -> Codebook:
    """Single-pass encoding: one forward through the tile encoder, no optimization."""
    inputs = tile_inputs([signal], grid, dtype=encoder.layers[0].weights.dtype)
    z, _ = mlp_forward(encoder.layers, inputs)
    return Codebook(grid, z.astype(np.float32, copy=False))


def train_autoencoder(signals: list, grid: TileGrid, enc_cfg: EncoderConfig,
                      model_cfg: ModelConfig, train_cfg: TrainConfig):
    """End-to-end training with encoder-predicted latent codes.

    Returns (params, encoder, TrainReport).  Gradients flow from the
    reconstruction loss through the decoder into the encoder.
    """
    train_cfg.validate()
    model_cfg.validate()
    if model_cfg.conditioning == "none":
        raise ConfigError("auto-encoding needs a latent-conditioned model")
    t0 = time.perf_counter()
    rng = RngStream(train_cfg.seed)
    params = init_model(model_cfg, rng)
    inputs = tile_inputs(signals, grid)
    encoder = init_encoder(inputs.shape[1], model_cfg.d, enc_cfg, rng)
    x, y, rows = build_sample_bank(signals, grid)

    theta = params.to_vector()
    phi = encoder.to_vector()
    adam_t = AdamState(train_cfg.lr_theta)
    adam_e = AdamState(train_cfg.lr_theta)
    report = TrainReport()

    for step in range(train_cfg.steps):
        idx = rng.integers(x.shape[0], (train_cfg.batch_size,))
        rb = rows[idx]
        uniq, inv = np.unique(rb, return_inverse=True)
        z_u, enc_tape = mlp_forward(encoder.layers, inputs[uniq])
        loss, grads, dz_u = _forward_backward(params, x[idx], y[idx], z_u, inv,
                                              train_cfg.loss)
        _check_finite(loss, step, rb)
        report.loss_history.append(loss)
        enc_grads, _ = mlp_backward(encoder.layers, enc_tape, dz_u)
        egrad = np.concatenate([g.ravel() for dw_db in enc_grads for g in dw_db])

        theta, adam_t = adam_step(theta, grads.to_vector(), adam_t)
        params.set_vector(theta)
        phi, adam_e = adam_step(phi, egrad, adam_e)
        encoder.set_vector(phi)

        if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0:
            codes = mlp_forward(encoder.layers, inputs)[0]
            p1, p2 = _eval_metrics(params, codes, grid, signals, train_cfg.eval_2x)
            _record(report, step + 1, loss, p1, p2, t0)

    codes = mlp_forward(encoder.layers, inputs)[0]
    p1, p2 = _eval_metrics(params, codes, grid, signals, train_cfg.eval_2x)
    _record(report, train_cfg.steps, report.loss_history[-1], p1, p2, t0)
    report.wall_s = time.perf_counter() - t0
    report.final = {"loss": report.loss_history[-1], "psnr_1x": p1, "psnr_2x": p2}
    return params, encoder, report
