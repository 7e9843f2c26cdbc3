"""Binary artifact formats and CSV emission.

Checkpoint (MODF): magic "MODF", u32 version, u32 header length, UTF-8 JSON
header, then a little-endian float32 blob.  Blob order: synthesis layers
(row-major weights, then bias), modulator layers, output layer, then the
fixed Fourier matrix (fourier models only), then the tile encoder (when
present).  The header records the model config, encoder dims, RNG seed,
training step, and the expected float count, which is validated on load.

Codebook (MODZ): same framing; header holds the latent dim and tile grid
fields, blob is the row-major (num_tiles, d) code matrix.

Point cloud (MODP): magic, u32 version, u32 count, then count*3 float32.

All writes are atomic (temp file + rename).  JSON headers use sorted keys so
a load/save round trip is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import DimensionError, FormatError
from .model import ModelConfig, ModelParams, layer_shapes
from .nn import Activation, DenseLayer
from .tiling import Codebook, TileGrid
from .training import EncoderConfig, TileEncoderParams, init_encoder

FORMAT_VERSION = 1

_CHECKPOINT_MAGIC = b"MODF"
_CODEBOOK_MAGIC = b"MODZ"
_POINTS_MAGIC = b"MODP"


def atomic_write(path, payload: bytes) -> None:
    path = str(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-modfield-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _frame(magic: bytes, header: dict, blob: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<II", FORMAT_VERSION, len(head)) + head + blob


def _unframe(magic: bytes, payload: bytes):
    if payload[:4] != magic:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {magic!r}")
    if len(payload) < 12:
        raise FormatError("truncated header")
    version, hlen = struct.unpack("<II", payload[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    if len(payload) < 12 + hlen:
        raise FormatError("truncated JSON header")
    header = json.loads(payload[12:12 + hlen].decode("utf-8"))
    return header, payload[12 + hlen:]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, encoder: TileEncoderParams | None = None,
                    seed: int = 0, step: int = 0) -> None:
    cfg = params.config
    parts = [params.to_vector().astype("<f4")]
    if params.fourier_b is not None:
        parts.append(params.fourier_b.ravel().astype("<f4"))
    enc_meta = None
    if encoder is not None:
        enc_meta = {
            "in_dim": encoder.in_dim,
            "hidden": [ly.out_dim for ly in encoder.layers[:-1]],
        }
        parts.append(encoder.to_vector().astype("<f4"))
    blob = np.concatenate(parts)
    header = {
        "kind": "checkpoint",
        "model": {
            "n": cfg.n, "m": cfg.m, "d": cfg.d,
            "hidden_layers": cfg.hidden_layers, "width": cfg.width,
            "omega0": cfg.omega0, "conditioning": cfg.conditioning,
            "activation": cfg.activation, "encoding": cfg.encoding,
            "fourier_sigma": cfg.fourier_sigma,
            "fourier_features": cfg.fourier_features,
        },
        "encoder": enc_meta,
        "seed": int(seed),
        "step": int(step),
        "float_count": int(blob.size),
    }
    atomic_write(path, _frame(_CHECKPOINT_MAGIC, header, blob.tobytes()))


def _empty_model(config: ModelConfig) -> ModelParams:
    shapes = layer_shapes(config)
    trunk_act = Activation.SINE if config.activation == "sine" else Activation.RELU

    def zero(shape, act):
        return DenseLayer(np.zeros(shape, dtype=np.float32),
                          np.zeros(shape[0], dtype=np.float32), act)

    synth = [zero(s, trunk_act) for s in shapes["synth"]]
    out = zero(shapes["out"], Activation.IDENTITY)
    mod = [zero(s, Activation.RELU) for s in shapes["mod"]]
    fourier_b = None
    if config.encoding == "fourier":
        fourier_b = np.zeros((config.fourier_features, config.n), dtype=np.float32)
    return ModelParams(config, synth, out, mod, fourier_b)


def load_checkpoint(path):
    """Returns (params, encoder or None, meta dict with seed/step)."""
    with open(path, "rb") as f:
        payload = f.read()
    header, blob = _unframe(_CHECKPOINT_MAGIC, payload)
    floats = np.frombuffer(blob, dtype="<f4")
    if floats.size != header.get("float_count"):
        raise FormatError(
            f"blob holds {floats.size} floats but header declares {header.get('float_count')}"
        )
    cfg = ModelConfig(**header["model"])
    cfg.validate()
    params = _empty_model(cfg)
    off = params.num_params()
    if floats.size < off:
        raise FormatError(f"blob holds {floats.size} floats, model needs {off}")
    params.set_vector(floats[:off].astype(np.float32))
    if params.fourier_b is not None:
        nb = params.fourier_b.size
        params.fourier_b[...] = floats[off:off + nb].reshape(params.fourier_b.shape)
        off += nb
    encoder = None
    if header.get("encoder") is not None:
        enc_meta = header["encoder"]
        encoder = init_encoder(enc_meta["in_dim"], cfg.d,
                               EncoderConfig(tuple(enc_meta["hidden"])),
                               _ZeroRng())
        ne = encoder.to_vector().size
        if floats.size - off != ne:
            raise FormatError(f"encoder blob holds {floats.size - off} floats, needs {ne}")
        encoder.set_vector(floats[off:].astype(np.float32))
        off = floats.size
    if off != floats.size:
        raise FormatError(f"blob has {floats.size - off} unexpected trailing floats")
    return params, encoder, {"seed": header["seed"], "step": header["step"]}


class _ZeroRng:
    """Stand-in RNG for shape-only construction; loads overwrite the values."""

    def uniform(self, shape=(), low=0.0, high=1.0):
        return np.zeros(shape)


# ---------------------------------------------------------------------------
# Codebooks
# ---------------------------------------------------------------------------


def save_codebook(path, codebook: Codebook) -> None:
    grid = codebook.grid
    header = {
        "kind": "codebook",
        "n": grid.n,
        "d": codebook.d,
        "extent": list(grid.extent),
        "tile_size": list(grid.tile_size),
        "overlap": list(grid.overlap),
    }
    blob = codebook.codes.astype("<f4").tobytes()
    atomic_write(path, _frame(_CODEBOOK_MAGIC, header, blob))


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        payload = f.read()
    header, blob = _unframe(_CODEBOOK_MAGIC, payload)
    grid = TileGrid.create(tuple(header["extent"]), tuple(header["tile_size"]),
                           tuple(header["overlap"]))
    codes = np.frombuffer(blob, dtype="<f4")
    d = int(header["d"])
    if codes.size != grid.num_tiles * d:
        raise FormatError(
            f"codebook blob holds {codes.size} floats, grid needs {grid.num_tiles} x {d}"
        )
    return Codebook(grid, codes.reshape(grid.num_tiles, d).copy())


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


def save_points(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"point cloud must be (N, 3), got {pts.shape}")
    payload = _POINTS_MAGIC + struct.pack("<II", FORMAT_VERSION, pts.shape[0]) + pts.tobytes()
    atomic_write(path, payload)


def load_points(path) -> np.ndarray:
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != _POINTS_MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {_POINTS_MAGIC!r}")
    version, count = struct.unpack("<II", payload[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported point-cloud version {version}")
    body = payload[12:]
    if len(body) != 12 * count:
        raise FormatError(f"point payload holds {len(body)} bytes, expected {12 * count}")
    return np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(np.float64)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("step", "loss", "psnr_1x", "psnr_2x", "wall_ms")


def format_value(v) -> str:
    if isinstance(v, float):
        if v != v:
            return "nan"
        if v == float("inf"):
            return "inf"
        if v == float("-inf"):
            return "-inf"
        return format(v, ".9g")
    return str(v)


def metrics_csv(rows: list) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(format_value(row[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows: list) -> None:
    atomic_write(path, metrics_csv(rows).encode("utf-8"))
