"""Command-line front end.

Subcommands: fit, infer, decode, eval, compare.  Configuration comes from a
JSON file plus flag overrides (flags win).  Exit codes: 0 success, 2 I/O or
file-format failure, 3 configuration or dimension failure, 4 numerical
failure.

All commands are bit-deterministic given --seed; --deterministic
additionally zeroes wall-clock columns so emitted CSV files compare equal
across reruns.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import io as mio
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    ModfieldError,
    NumericalError,
)
from .model import ModelConfig
from .nn import RngStream
from .signals import (
    Box,
    PerlinSpec,
    SampledSignal,
    Sphere,
    Torus,
    Union,
    bilinear_resample,
    from_dense,
    grid_to_world,
    load_image,
    perlin_grid,
    pixel_center_grid,
    save_image,
    sdf_signal,
    world_to_grid,
)
from .tiling import Codebook, TileGrid, decode_points
from .training import (
    EncoderConfig,
    TrainConfig,
    encode_signal,
    infer_latents,
    psnr,
    train_autodecoder,
    train_autoencoder,
)

BASELINES = ("modulated", "concat", "relu", "ffn")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON in {path}: {e}") from e


def _take(d: dict, allowed: dict, what: str) -> dict:
    out = dict(allowed)
    for k, v in d.items():
        if k not in allowed:
            raise ConfigError(f"unknown {what} field {k!r}")
        out[k] = v
    return out


def parse_scene(obj) -> Union:
    shapes = []
    for s in obj:
        kind = s.get("kind")
        if kind == "sphere":
            shapes.append(Sphere(tuple(s["center"]), float(s["radius"])))
        elif kind == "box":
            shapes.append(Box(tuple(s["center"]), tuple(s["half_extents"])))
        elif kind == "torus":
            shapes.append(Torus(tuple(s["center"]), float(s["major_radius"]),
                                float(s["minor_radius"])))
        else:
            raise ConfigError(f"unknown scene shape kind {kind!r}")
    if not shapes:
        raise ConfigError("scene has no shapes")
    return Union(tuple(shapes))


def load_data_source(data: dict):
    """Build the training signal; returns (signal, meta) where meta carries
    anything evaluation needs (the scene for SDF fits)."""
    kind = data.get("kind")
    if kind == "image":
        return load_image(data["path"]), {}
    if kind == "perlin":
        spec_fields = _take({k: v for k, v in data.items() if k != "kind"},
                            {"rows": 4, "cols": 4, "patch_size": 32,
                             "freq_min": 2.0, "freq_max": 16.0, "seed": 0},
                            "perlin")
        return perlin_grid(PerlinSpec(**spec_fields)), {}
    if kind == "sdf":
        scene = parse_scene(data["shapes"])
        fields = _take({k: v for k, v in data.items() if k not in ("kind", "shapes")},
                       {"count": 50000, "near_fraction": 0.5, "near_sigma": 0.01,
                        "extent": 64, "seed": 0}, "sdf")
        sig = sdf_signal(scene, int(fields["count"]), int(fields["extent"]),
                         float(fields["near_fraction"]), float(fields["near_sigma"]),
                         RngStream(int(fields["seed"])))
        return sig, {"scene": scene, "extent": int(fields["extent"])}
    raise ConfigError(f"unknown data source kind {kind!r}")


def build_configs(raw: dict, args) -> dict:
    """Merge the JSON config with flag overrides into concrete objects."""
    signal, meta = load_data_source(raw.get("data", {}))

    grid_fields = _take(raw.get("grid", {}), {"tile_size": 32, "overlap": 8}, "grid")
    if args.tile_size is not None:
        grid_fields["tile_size"] = args.tile_size
    if args.overlap is not None:
        grid_fields["overlap"] = args.overlap
    grid = TileGrid.create(signal.extent, grid_fields["tile_size"], grid_fields["overlap"])

    model_fields = _take(raw.get("model", {}),
                         {"d": 64, "hidden_layers": 3, "width": 128, "omega0": 30.0,
                          "conditioning": "modulated", "activation": "sine",
                          "encoding": "raw", "fourier_sigma": 1.0,
                          "fourier_features": 64}, "model")
    if args.latent_dim is not None:
        model_fields["d"] = args.latent_dim
    if args.width is not None:
        model_fields["width"] = args.width
    if args.layers is not None:
        model_fields["hidden_layers"] = args.layers
    if args.omega0 is not None:
        model_fields["omega0"] = args.omega0
    model_cfg = ModelConfig(n=signal.n, m=signal.m, **model_fields)
    model_cfg.validate()

    train_fields = _take(raw.get("train", {}),
                         {"steps": 2000, "batch_size": 512, "lr_theta": 1e-4,
                          "lr_latent": 1e-3, "loss": "l2", "latent_scale": 1e-2,
                          "seed": 0, "eval_every": 0, "eval_2x": False}, "train")
    if args.steps is not None:
        train_fields["steps"] = args.steps
    if args.loss is not None:
        train_fields["loss"] = args.loss
    if args.seed is not None:
        train_fields["seed"] = args.seed
    train_cfg = TrainConfig(**train_fields)
    train_cfg.validate()

    enc_fields = _take(raw.get("encoder", {}), {"hidden": [256, 256]}, "encoder")
    enc_cfg = EncoderConfig(tuple(enc_fields["hidden"]))

    return {
        "signal": signal,
        "meta": meta,
        "grid": grid,
        "model": model_cfg,
        "train": train_cfg,
        "encoder": enc_cfg,
        "mode": raw.get("mode", "autodecoder"),
        "out_dir": args.out or raw.get("out_dir", "."),
    }


def _zero_wall(rows, deterministic):
    if not deterministic:
        return rows
    return [{**r, "wall_ms": 0.0} for r in rows]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    cfg = build_configs(raw, args)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    signal, grid = cfg["signal"], cfg["grid"]

    if cfg["mode"] == "autodecoder":
        params, books, report = train_autodecoder([signal], grid, cfg["model"], cfg["train"])
        encoder = None
    elif cfg["mode"] == "autoencoder":
        params, encoder, report = train_autoencoder([signal], grid, cfg["encoder"],
                                                    cfg["model"], cfg["train"])
        books = [encode_signal(params, encoder, signal, grid)]
    else:
        raise ConfigError(f"unknown fit mode {cfg['mode']!r}")

    ck = os.path.join(cfg["out_dir"], "checkpoint.modf")
    mio.save_checkpoint(ck, params, encoder, seed=cfg["train"].seed, step=cfg["train"].steps)
    for i, book in enumerate(books):
        mio.save_codebook(os.path.join(cfg["out_dir"], f"codebook_{i:03d}.modz"), book)
    mio.write_metrics_csv(os.path.join(cfg["out_dir"], "metrics.csv"),
                          _zero_wall(report.rows, args.deterministic))
    print(f"fit complete: loss={mio.format_value(report.final['loss'])} "
          f"psnr_1x={mio.format_value(report.final['psnr_1x'])}")
    return 0


def cmd_infer(args) -> int:
    params, _, _ = mio.load_checkpoint(args.checkpoint)
    signal = load_image(args.signal)
    grid = TileGrid.create(signal.extent, args.tile_size or 32, args.overlap or 8)
    train_cfg = TrainConfig(steps=args.steps or 600, batch_size=256,
                            lr_latent=args.lr_latent, loss=args.loss or "l2",
                            seed=args.seed or 0)
    book = infer_latents(params, signal, grid, train_cfg)
    mio.save_codebook(args.out, book)
    pred = decode_points(params, book, signal.coords)
    print(f"psnr,{mio.format_value(psnr(pred, signal.values))}")
    return 0


def cmd_decode(args) -> int:
    params, _, _ = mio.load_checkpoint(args.checkpoint)
    book = mio.load_codebook(args.codebook)
    grid = book.grid
    if grid.n != 2:
        raise ConfigError("decode renders images; use 'eval --metric sdf-grid' for 3-d fields")
    factor = args.factor or 1
    pts = pixel_center_grid(grid.extent, factor)
    pred = decode_points(params, book, pts)
    out_extent = tuple(e * factor for e in grid.extent)
    sig = SampledSignal(out_extent, pts, np.clip(pred, 0.0, 1.0), dense=True)
    save_image(sig, args.out)
    print(f"wrote {args.out} ({out_extent[1]}x{out_extent[0]})")
    return 0


def _field_from_checkpoint(params, book):
    extent = book.grid.extent[0]

    def field(world_pts):
        gridpts = np.clip(world_to_grid(world_pts, extent), 0.0, extent)
        return decode_points(params, book, gridpts)[:, 0]

    return field


def cmd_eval(args) -> int:
    metric = args.metric
    if metric in ("psnr", "l1"):
        pred = load_image(args.pred)
        target = load_image(args.target)
        if pred.values.shape != target.values.shape:
            raise DimensionError(
                f"prediction shape {pred.values.shape} does not match target {target.values.shape}"
            )
        if metric == "psnr":
            value = psnr(pred.values, target.values)
        else:
            value = float(np.mean(np.abs(pred.values - target.values)))
        print(f"{metric},{mio.format_value(float(value))}")
        return 0
    if metric == "chamfer":
        from .signals import chamfer_distance
        a = mio.load_points(args.pred)
        b = mio.load_points(args.target)
        print(f"chamfer,{mio.format_value(chamfer_distance(a, b))}")
        return 0
    if metric == "sdf-grid":
        if not args.codebook:
            raise ConfigError("--metric sdf-grid needs --codebook")
        from .signals import sdf_grid_metrics
        params, _, _ = mio.load_checkpoint(args.pred)
        book = mio.load_codebook(args.codebook)
        scene = parse_scene(_load_json(args.target)["shapes"])
        mean_abs, agree = sdf_grid_metrics(_field_from_checkpoint(params, book),
                                           scene, args.resolution or 64)
        print(f"sdf_mean_abs,{mio.format_value(mean_abs)}")
        print(f"sdf_sign_agreement,{mio.format_value(agree)}")
        return 0
    raise ConfigError(f"unknown metric {metric!r}")


def baseline_config(base: ModelConfig, name: str) -> ModelConfig:
    if name == "modulated":
        fields = dict(conditioning="modulated", activation="sine", encoding="raw")
    elif name == "concat":
        fields = dict(conditioning="concat", activation="sine", encoding="raw")
    elif name == "relu":
        fields = dict(conditioning="concat", activation="relu", encoding="raw")
    elif name == "ffn":
        fields = dict(conditioning="concat", activation="relu", encoding="fourier")
    else:
        raise ConfigError(f"unknown baseline {name!r} (choose from {', '.join(BASELINES)})")
    cfg = ModelConfig(n=base.n, m=base.m, d=base.d, hidden_layers=base.hidden_layers,
                      width=base.width, omega0=base.omega0,
                      fourier_sigma=base.fourier_sigma,
                      fourier_features=base.fourier_features, **fields)
    cfg.validate()
    return cfg


def cmd_compare(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    cfg = build_configs(raw, args)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    signal, grid, train_cfg = cfg["signal"], cfg["grid"], cfg["train"]
    names = [s.strip() for s in (args.baselines or "modulated").split(",") if s.strip()]

    lines = ["method,steps,psnr_1x,psnr_2x,wall_ms"]
    for name in names:
        mcfg = baseline_config(cfg["model"], name)
        t0 = time.perf_counter()
        params, books, report = train_autodecoder([signal], grid, mcfg, train_cfg)
        wall_ms = 0.0 if args.deterministic else (time.perf_counter() - t0) * 1e3
        pred = decode_points(params, books[0], signal.coords)
        p1 = psnr(pred, signal.values)
        ext2 = tuple(2 * e for e in signal.extent)
        pred2 = decode_points(params, books[0], pixel_center_grid(signal.extent, 2))
        p2 = psnr(pred2, bilinear_resample(signal, ext2).values)
        lines.append(",".join([name, str(train_cfg.steps), mio.format_value(p1),
                               mio.format_value(p2), mio.format_value(wall_ms)]))
    csv = "\n".join(lines) + "\n"
    mio.atomic_write(os.path.join(cfg["out_dir"], "compare.csv"), csv.encode())
    sys.stdout.write(csv)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modfield",
                                description="Tiled neural fields with modulated sine networks")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true",
                        help="zero wall-clock columns for byte-identical reruns")
        sp.add_argument("--out", type=str, default=None)

    sp = sub.add_parser("fit", help="train on a data source, write checkpoint/codebook/metrics")
    common(sp)
    sp.add_argument("--config", type=str, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--tile-size", dest="tile_size", type=int, default=None)
    sp.add_argument("--overlap", type=int, default=None)
    sp.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--omega0", type=float, default=None)
    sp.add_argument("--loss", choices=("l2", "l1"), default=None)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("infer", help="fit a codebook for a new signal, parameters frozen")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("signal")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--tile-size", dest="tile_size", type=int, default=None)
    sp.add_argument("--overlap", type=int, default=None)
    sp.add_argument("--lr-latent", dest="lr_latent", type=float, default=1e-2)
    sp.add_argument("--loss", choices=("l2", "l1"), default=None)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("decode", help="render a checkpoint+codebook to an image file")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("codebook")
    sp.add_argument("--factor", type=int, default=1)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="compute a metric between two artifacts")
    common(sp)
    sp.add_argument("pred")
    sp.add_argument("target")
    sp.add_argument("--metric", choices=("psnr", "l1", "chamfer", "sdf-grid"), required=True)
    sp.add_argument("--codebook", type=str, default=None)
    sp.add_argument("--resolution", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="train baseline variants under one budget")
    common(sp)
    sp.add_argument("--config", type=str, default=None)
    sp.add_argument("--baselines", type=str, default="modulated")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--tile-size", dest="tile_size", type=int, default=None)
    sp.add_argument("--overlap", type=int, default=None)
    sp.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--omega0", type=float, default=None)
    sp.add_argument("--loss", choices=("l2", "l1"), default=None)
    sp.set_defaults(func=cmd_compare)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # fit/compare flags that other commands never define
    for name in ("steps", "tile_size", "overlap", "latent_dim", "width",
                 "layers", "omega0", "loss", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, DimensionError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
