"""Signal generation, I/O, sampling, and evaluation data.

Images travel as PPM (P6, 8-bit) or PFM (32-bit float, little-endian,
scale -1.0, rows bottom-to-top).  Dense signals index axis 0 as image rows;
sample k of an axis sits at global coordinate k + 0.5 (pixel centers).

3D scenes live in a world frame where shapes fit inside the unit sphere;
`world_to_grid` maps [-1, 1]^3 onto a cubic sample lattice so the tiling
machinery can treat fields like any other signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DimensionError, FormatError
from .nn import RngStream


@dataclass
class SampledSignal:
    """Coordinates and targets of one signal, plus its lattice extent."""

    extent: tuple
    coords: np.ndarray   # (N, n) global sample coordinates
    values: np.ndarray   # (N, m)
    dense: bool = False  # True when samples are the full row-major lattice

    def __post_init__(self):
        self.extent = tuple(int(e) for e in self.extent)
        if self.coords.ndim != 2 or self.values.ndim != 2:
            raise DimensionError("coords and values must be 2-d arrays")
        if self.coords.shape[0] != self.values.shape[0]:
            raise DimensionError(
                f"{self.coords.shape[0]} coords but {self.values.shape[0]} values"
            )
        if self.coords.shape[1] != len(self.extent):
            raise DimensionError(
                f"coords are {self.coords.shape[1]}-d but extent has {len(self.extent)} axes"
            )
        if self.dense and self.coords.shape[0] != int(np.prod(self.extent)):
            raise DimensionError("dense signal must have one sample per lattice point")

    @property
    def n(self) -> int:
        return len(self.extent)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def to_dense(self) -> np.ndarray:
        if not self.dense:
            raise DimensionError("signal is not dense")
        return self.values.reshape(self.extent + (self.m,))


def from_dense(values: np.ndarray) -> SampledSignal:
    """Wrap a row-major array of shape extent + (m,) as a dense signal."""
    if values.ndim < 2:
        raise DimensionError("dense array needs at least one spatial axis plus channels")
    extent = values.shape[:-1]
    coords = pixel_center_grid(extent, 1)
    return SampledSignal(extent, coords, values.reshape(-1, values.shape[-1]).copy(), dense=True)


def pixel_center_grid(extent, factor: int = 1) -> np.ndarray:
    """Centers of a (factor * extent) lattice in the original coordinate frame.

    Sample index k on an axis maps to (k + 0.5) / factor, so factor=1 gives
    the native pixel centers and factor=2 the 2x supersampling positions.
    Row-major order, axis 0 slowest.
    """
    if factor < 1 or int(factor) != factor:
        raise ConfigError(f"factor must be a positive integer, got {factor}")
    axes = [(np.arange(int(e) * factor, dtype=np.float64) + 0.5) / factor for e in extent]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------


def _read_token(f) -> bytes:
    """Next whitespace-delimited token, skipping '#' comments."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            if tok:
                return tok
            raise FormatError("unexpected end of header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def load_image(path) -> SampledSignal:
    """Load a P6 PPM or a PF/Pf PFM; values end up in [0, 1] for PPM."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P6":
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
            if maxval != 255:
                raise FormatError(f"P6 maxval must be 255, got {maxval}")
            payload = f.read(w * h * 3)
            if len(payload) != w * h * 3:
                raise FormatError(f"P6 payload truncated: expected {w * h * 3} bytes, got {len(payload)}")
            arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
            return from_dense(arr.astype(np.float32) / 255.0)
        if magic in (b"PF", b"Pf"):
            channels = 3 if magic == b"PF" else 1
            w = int(_read_token(f))
            h = int(_read_token(f))
            scale = float(_read_token(f))
            if scale >= 0:
                raise FormatError("only little-endian PFM (negative scale) is supported")
            count = w * h * channels
            payload = f.read(4 * count)
            if len(payload) != 4 * count:
                raise FormatError(f"PFM payload truncated: expected {4 * count} bytes, got {len(payload)}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, channels)
            return from_dense(arr[::-1].copy())  # PFM rows are stored bottom-to-top
        raise FormatError(f"unrecognized image magic {magic!r}")


def save_image(signal: SampledSignal, path) -> None:
    """Write PPM for .ppm paths (m=3, quantized) or PFM for .pfm (exact)."""
    if signal.n != 2:
        raise DimensionError(f"image output needs a 2-d signal, got n={signal.n}")
    h, w = signal.extent
    arr = signal.to_dense()
    path = str(path)
    if path.endswith(".ppm"):
        if signal.m != 3:
            raise FormatError(f"PPM requires 3 channels, signal has {signal.m}")
        q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (w, h))
            f.write(q.tobytes())
    elif path.endswith(".pfm"):
        if signal.m not in (1, 3):
            raise FormatError(f"PFM requires 1 or 3 channels, signal has {signal.m}")
        magic = b"PF" if signal.m == 3 else b"Pf"
        with open(path, "wb") as f:
            f.write(magic + b"\n%d %d\n-1.0\n" % (w, h))
            f.write(arr[::-1].astype("<f4").tobytes())
    else:
        raise FormatError(f"unknown image extension on {path!r} (use .ppm or .pfm)")


def bilinear_resample(signal: SampledSignal, new_extent) -> SampledSignal:
    """Resample a dense 2-d signal at the target lattice's pixel centers.

    Samples are taken bilinearly between source pixel centers with edge
    clamp, the usual ground-truth construction for resolution-doubling
    comparisons.
    """
    if not signal.dense or signal.n != 2:
        raise DimensionError("bilinear_resample needs a dense 2-d signal")
    src = signal.to_dense().astype(np.float64)
    new_extent = tuple(int(e) for e in new_extent)

    def axis_coords(new_e, old_e):
        pos = (np.arange(new_e) + 0.5) * (old_e / new_e)  # target centers, source units
        u = np.clip(pos - 0.5, 0.0, old_e - 1.0)
        j0 = np.clip(np.floor(u).astype(int), 0, max(old_e - 2, 0))
        frac = u - j0
        j1 = np.minimum(j0 + 1, old_e - 1)
        return j0, j1, frac

    r0, r1, fr = axis_coords(new_extent[0], signal.extent[0])
    c0, c1, fc = axis_coords(new_extent[1], signal.extent[1])
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    return from_dense(out.astype(signal.values.dtype))


# ---------------------------------------------------------------------------
# Perlin gradient noise
# ---------------------------------------------------------------------------

_SQ2 = np.sqrt(0.5)
# Eight unit gradient directions; with these the raw 2-d noise is bounded by
# +-sqrt(1/2), so 0.5 + 0.5 * value stays inside [0, 1].
_GRAD2 = np.array([
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (_SQ2, _SQ2), (-_SQ2, _SQ2), (_SQ2, -_SQ2), (-_SQ2, -_SQ2),
])


def perlin_permutation(rng: RngStream) -> np.ndarray:
    """A seed-derived permutation of 0..255 (doubled to avoid index wraps)."""
    perm = np.argsort(rng.raw(256)).astype(np.int64)
    return np.concatenate([perm, perm])


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin2(x, y, perm: np.ndarray):
    """Classic 2-d lattice-gradient noise; zero at integer lattice points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xi = np.floor(x).astype(np.int64)
    yi = np.floor(y).astype(np.int64)
    xf = x - xi
    yf = y - yi
    u = _fade(xf)
    v = _fade(yf)

    def grad_dot(ix, iy, dx, dy):
        h = perm[perm[ix & 255] + (iy & 255)] & 7
        g = _GRAD2[h]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = grad_dot(xi, yi, xf, yf)
    n10 = grad_dot(xi + 1, yi, xf - 1, yf)
    n01 = grad_dot(xi, yi + 1, xf, yf - 1)
    n11 = grad_dot(xi + 1, yi + 1, xf - 1, yf - 1)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


@dataclass
class PerlinSpec:
    """A rows x cols grid of noise patches with per-patch base frequencies.

    Frequencies ramp geometrically from freq_min (top-left) to freq_max
    (bottom-right): row index drives the vertical frequency, column index
    the horizontal one.
    """

    rows: int = 4
    cols: int = 4
    patch_size: int = 32
    freq_min: float = 2.0
    freq_max: float = 16.0
    seed: int = 0

    def frequency(self, idx: int, count: int) -> float:
        if count == 1:
            return self.freq_min
        return self.freq_min * (self.freq_max / self.freq_min) ** (idx / (count - 1))

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.patch_size < 1:
            raise ConfigError("rows, cols and patch_size must be >= 1")
        if not 0 < self.freq_min <= self.freq_max:
            raise ConfigError(
                f"frequencies must satisfy 0 < freq_min <= freq_max, got {self.freq_min}, {self.freq_max}"
            )


def perlin_grid(spec: PerlinSpec) -> SampledSignal:
    """Render the patch grid as one grayscale image with values in [0, 1]."""
    spec.validate()
    rng = RngStream(spec.seed)
    perm = perlin_permutation(rng)
    ps = spec.patch_size
    img = np.empty((spec.rows * ps, spec.cols * ps, 1), dtype=np.float32)
    px = (np.arange(ps) + 0.5) / ps  # pixel centers in patch-normalized units
    for r in range(spec.rows):
        fy = spec.frequency(r, spec.rows)
        for c in range(spec.cols):
            fx = spec.frequency(c, spec.cols)
            # Integer lattice offset decorrelates patches that share the table.
            ox = rng.integers(1 << 16)
            oy = rng.integers(1 << 16)
            gx = px[None, :] * fx + ox
            gy = px[:, None] * fy + oy
            patch = perlin2(np.broadcast_to(gx, (ps, ps)), np.broadcast_to(gy, (ps, ps)), perm)
            img[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps, 0] = 0.5 + 0.5 * patch
    return from_dense(img)


# ---------------------------------------------------------------------------
# Analytic signed distance fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple


@dataclass(frozen=True)
class Torus:
    """Ring of radius major_radius in the xy-plane around center, tube minor_radius."""

    center: tuple
    major_radius: float
    minor_radius: float


@dataclass(frozen=True)
class Union:
    """min of the children; exact for disjoint shapes, a lower bound otherwise."""

    shapes: tuple


def sdf_eval(shape, p: np.ndarray) -> np.ndarray:
    """Exact analytic signed distance; p is (3,) or (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    q = p[None, :] if single else p
    if q.shape[-1] != 3:
        raise DimensionError(f"SDF points must be 3-d, got dim={q.shape[-1]}")
    if isinstance(shape, Sphere):
        d = np.linalg.norm(q - np.asarray(shape.center), axis=-1) - shape.radius
    elif isinstance(shape, Box):
        off = np.abs(q - np.asarray(shape.center)) - np.asarray(shape.half_extents)
        outside = np.linalg.norm(np.maximum(off, 0.0), axis=-1)
        inside = np.minimum(off.max(axis=-1), 0.0)
        d = outside + inside
    elif isinstance(shape, Torus):
        rel = q - np.asarray(shape.center)
        ring = np.hypot(rel[..., 0], rel[..., 1]) - shape.major_radius
        d = np.hypot(ring, rel[..., 2]) - shape.minor_radius
    elif isinstance(shape, Union):
        if not shape.shapes:
            raise ConfigError("Union needs at least one shape")
        d = np.min([sdf_eval(s, q) for s in shape.shapes], axis=0)
    else:
        raise ConfigError(f"unknown SDF shape {type(shape).__name__}")
    return d[0] if single else d


def _sdf_gradient(shape, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (sdf_eval(shape, p + e) - sdf_eval(shape, p - e)) / (2 * h)
    return g


def _uniform_in_ball(count: int, rng: RngStream) -> np.ndarray:
    dirs = rng.normal((count, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    radii = rng.uniform((count, 1)) ** (1.0 / 3.0)
    return dirs * radii


def sample_sdf_points(shape, count: int, near_fraction: float = 0.5,
                      near_sigma: float = 0.01, rng: RngStream | None = None):
    """Training points for an SDF: a near-surface fraction plus uniform fill.

    Near points start uniform in the unit ball, walk to the surface along the
    field gradient, then get a Gaussian jitter of scale near_sigma.  The rest
    stay uniform in the unit ball.  Returns (points (N,3), values (N,)) in
    world units.
    """
    if not 0.0 <= near_fraction <= 1.0:
        raise ConfigError(f"near_fraction must be in [0, 1], got {near_fraction}")
    rng = rng if rng is not None else RngStream(0)
    n_near = int(round(count * near_fraction))
    n_far = count - n_near
    parts = []
    if n_near:
        p = _uniform_in_ball(n_near, rng)
        for _ in range(12):
            d = sdf_eval(shape, p)
            g = _sdf_gradient(shape, p)
            g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-9)
            p = p - d[:, None] * g
        p = p + rng.normal((n_near, 3), std=near_sigma)
        parts.append(p)
    if n_far:
        parts.append(_uniform_in_ball(n_far, rng))
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    return points, sdf_eval(shape, points)


def world_to_grid(points: np.ndarray, extent: int) -> np.ndarray:
    """Map world coordinates in [-1, 1]^3 onto a cubic sample lattice [0, extent]^3."""
    return (np.asarray(points, dtype=np.float64) + 1.0) * (extent / 2.0)


def grid_to_world(points: np.ndarray, extent: int) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * (2.0 / extent) - 1.0


def sdf_signal(shape, count: int, extent: int, near_fraction: float = 0.5,
               near_sigma: float = 0.01, rng: RngStream | None = None) -> SampledSignal:
    """Tiling-ready SDF samples: grid-unit coordinates, world-unit distances."""
    points, values = sample_sdf_points(shape, count, near_fraction, near_sigma, rng)
    coords = np.clip(world_to_grid(points, extent), 0.0, extent)
    return SampledSignal((extent,) * 3, coords, values[:, None].astype(np.float64))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def chamfer_distance_brute(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    """Reference O(|A||B|) bi-directional mean squared nearest-neighbor distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DimensionError("chamfer distance needs non-empty point sets")

    def one_way(src, dst):
        mins = np.empty(src.shape[0])
        for i in range(0, src.shape[0], chunk):
            block = src[i:i + chunk]
            d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
            mins[i:i + chunk] = d2.min(axis=1)
        return mins.mean()

    return float(one_way(a, b) + one_way(b, a))


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """KD-tree accelerated path; matches chamfer_distance_brute."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DimensionError("chamfer distance needs non-empty point sets")
    da = cKDTree(b).query(a)[0]
    db = cKDTree(a).query(b)[0]
    return float((da ** 2).mean() + (db ** 2).mean())


def sdf_grid_metrics(field, shape, resolution: int):
    """Compare a learned field against the analytic SDF on a dense world grid.

    `field` maps (N, 3) world points to (N,) predicted distances.  Returns
    (mean absolute error, sign agreement rate) over a resolution^3 grid
    spanning [-1, 1]^3 inclusive.
    """
    if resolution < 2:
        raise ConfigError(f"resolution must be >= 2, got {resolution}")
    axis = np.linspace(-1.0, 1.0, resolution)
    mesh = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    pred = np.asarray(field(pts), dtype=np.float64).ravel()
    true = sdf_eval(shape, pts)
    if pred.shape != true.shape:
        raise DimensionError(f"field returned shape {pred.shape}, expected {true.shape}")
    mean_abs = float(np.abs(pred - true).mean())
    agreement = float(((pred < 0) == (true < 0)).mean())
    return mean_abs, agreement
