"""Overlapping tile grids over an n-dimensional signal domain.

The domain [0, extent] per axis is covered by equal-size tiles laid out on a
regular stride, with the last tile per axis pulled back so its footprint ends
exactly at the extent.  Footprints are half-open [origin, origin + t); the
domain's far edge is closed on the last tile.  Every tile owns normalized
local coordinates in [0, 1]^n, and overlapping predictions are blended with
per-axis linear ramps (bilinear in 2D, trilinear in 3D).

Blend weight definition, per axis, for a tile with footprint [a, b):

    w(p) = 1                       in the region only this tile covers
    w(p) *= (p - a) / (c_l - a)    for p < c_l, where c_l is the end of the
                                   left neighbour's footprint
    w(p) *= (b - p) / (b - c_r)    for p > c_r, where c_r is the start of
                                   the right neighbour's footprint

The n-dimensional weight is the product over axes, renormalized over all
covering tiles so the weights sum to one (this also handles tiles at the
domain edge, which have no neighbour to ramp against).
"""

from __future__ import annotations

import itertools
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DomainError


def _as_tuple(v, n: int, name: str) -> tuple:
    if np.isscalar(v):
        return (int(v),) * n
    t = tuple(int(x) for x in v)
    if len(t) != n:
        raise ConfigError(f"{name} needs {n} entries, got {len(t)}")
    return t


@dataclass(frozen=True)
class TileGrid:
    extent: tuple        # signal size in samples, per axis
    tile_size: tuple
    overlap: tuple
    origins: tuple       # per axis: tuple of tile origins, strictly increasing

    @staticmethod
    def create(extent, tile_size, overlap=0, n: int | None = None) -> "TileGrid":
        if n is None:
            n = len(extent) if not np.isscalar(extent) else 1
        ext = _as_tuple(extent, n, "extent")
        t = _as_tuple(tile_size, n, "tile_size")
        o = _as_tuple(overlap, n, "overlap")
        origins = []
        for e, tk, ok in zip(ext, t, o):
            if tk < 1 or e < 1:
                raise ConfigError(f"extent and tile_size must be >= 1, got extent={e}, tile={tk}")
            if not 0 <= ok < tk:
                raise ConfigError(f"overlap must satisfy 0 <= o < tile_size, got o={ok}, t={tk}")
            if tk > e:
                raise ConfigError(f"tile_size {tk} exceeds extent {e}")
            stride = tk - ok
            count = -(-(e - ok) // stride)  # ceil
            origins.append(tuple(min(j * stride, e - tk) for j in range(count)))
        return TileGrid(ext, t, o, tuple(origins))

    @property
    def n(self) -> int:
        return len(self.extent)

    @property
    def counts(self) -> tuple:
        return tuple(len(o) for o in self.origins)

    @property
    def num_tiles(self) -> int:
        return int(np.prod(self.counts))

    def linear_index(self, index: tuple) -> int:
        """Row-major position of a tile multi-index (axis 0 slowest)."""
        return int(np.ravel_multi_index(index, self.counts))

    def tile_origin(self, index: tuple) -> tuple:
        return tuple(self.origins[k][index[k]] for k in range(self.n))


@dataclass(frozen=True)
class TileRef:
    index: tuple    # multi-index into the tile grid
    origin: tuple   # global sample coordinates of the tile's low corner


@dataclass
class Codebook:
    """One latent code per tile, row-major over tile indices."""

    grid: TileGrid
    codes: np.ndarray    # (num_tiles, d)

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] != self.grid.num_tiles:
            raise DimensionError(
                f"codebook needs {self.grid.num_tiles} codes, got array of shape {self.codes.shape}"
            )

    @property
    def d(self) -> int:
        return self.codes.shape[1]


def _check_in_domain(grid: TileGrid, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (grid.n,):
        raise DimensionError(f"point has shape {p.shape}, domain is {grid.n}-dimensional")
    for k in range(grid.n):
        if not 0.0 <= p[k] <= grid.extent[k]:
            raise DomainError(f"coordinate {p[k]} on axis {k} outside [0, {grid.extent[k]}]")
    return p


def _axis_covering(grid: TileGrid, k: int, x: float) -> list:
    """Tile indices on axis k whose footprint contains x."""
    origins = grid.origins[k]
    t = grid.tile_size[k]
    hi = bisect_right(origins, x) - 1          # last tile starting at or before x
    lo = bisect_right(origins, x - t)          # first tile ending after x
    out = []
    for j in range(lo, hi + 1):
        if origins[j] <= x < origins[j] + t or (x == grid.extent[k] and j == len(origins) - 1):
            out.append(j)
    return out


def tiles_containing(grid: TileGrid, p) -> list:
    """All tiles whose footprint contains the global point p."""
    p = _check_in_domain(grid, p)
    per_axis = [_axis_covering(grid, k, p[k]) for k in range(grid.n)]
    refs = []
    for index in itertools.product(*per_axis):
        refs.append(TileRef(index, grid.tile_origin(index)))
    return refs


def to_local(grid: TileGrid, tile: TileRef, p) -> np.ndarray:
    """Normalized coordinates of p inside the tile, in [0, 1]^n."""
    p = np.asarray(p, dtype=np.float64)
    local = np.empty(grid.n)
    for k in range(grid.n):
        t = grid.tile_size[k]
        off = p[k] - tile.origin[k]
        if not 0.0 <= off <= t:
            raise DomainError(
                f"coordinate {p[k]} on axis {k} outside tile footprint "
                f"[{tile.origin[k]}, {tile.origin[k] + t}]"
            )
        local[k] = off / t
    return local


def _axis_weight(grid: TileGrid, k: int, j: int, x) -> np.ndarray:
    """Unnormalized per-axis ramp weight; x may be scalar or array."""
    origins = grid.origins[k]
    t = grid.tile_size[k]
    a = origins[j]
    b = a + t
    x = np.asarray(x, dtype=np.float64)
    w = np.ones_like(x)
    if j > 0:
        c_l = origins[j - 1] + t          # left neighbour's footprint end
        if c_l > a:                       # zero-overlap grids have no ramp band
            ramp = np.clip((x - a) / (c_l - a), 0.0, 1.0)
            w = np.where(x < c_l, w * ramp, w)
    if j < len(origins) - 1:
        c_r = origins[j + 1]              # right neighbour's footprint start
        if c_r < b:
            ramp = np.clip((b - x) / (b - c_r), 0.0, 1.0)
            w = np.where(x > c_r, w * ramp, w)
    return w


def blend_weights(grid: TileGrid, p) -> list:
    """(TileRef, weight) for every tile covering p; weights sum to one."""
    p = _check_in_domain(grid, p)
    refs = tiles_containing(grid, p)
    raw = []
    for ref in refs:
        w = 1.0
        for k in range(grid.n):
            w *= float(_axis_weight(grid, k, ref.index[k], p[k]))
        raw.append(w)
    total = sum(raw)
    if total <= 0.0:
        # Degenerate geometry; fall back to uniform weights over covering tiles.
        raw = [1.0] * len(refs)
        total = float(len(refs))
    return [(ref, w / total) for ref, w in zip(refs, raw)]


def blended_decode(params, codebook: Codebook, p) -> np.ndarray:
    """Evaluate the tiled field at a single global point.

    Sum over covering tiles of weight * f(local coords; tile code).
    """
    from .model import model_forward  # local import to avoid a cycle at module load

    grid = codebook.grid
    out = None
    for ref, w in blend_weights(grid, p):
        local = to_local(grid, ref, p)
        z = codebook.codes[grid.linear_index(ref.index)]
        y = model_forward(params, local.astype(codebook.codes.dtype), z)
        out = w * y if out is None else out + w * y
    return out


def decode_points(params, codebook: Codebook, points: np.ndarray) -> np.ndarray:
    """Vectorized blended decode of many global points.

    Equivalent to blended_decode per point (the test suite asserts this);
    iterates over tiles instead of points so each tile's batch is one
    forward pass.
    """
    from .model import model_forward

    grid = codebook.grid
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != grid.n:
        raise DimensionError(f"points must be (N, {grid.n}), got {pts.shape}")
    m = params.config.m
    acc = np.zeros((pts.shape[0], m))
    wsum = np.zeros(pts.shape[0])
    dtype = codebook.codes.dtype
    for index in itertools.product(*[range(c) for c in grid.counts]):
        origin = grid.tile_origin(index)
        inside = np.ones(pts.shape[0], dtype=bool)
        for k in range(grid.n):
            a, t, e = origin[k], grid.tile_size[k], grid.extent[k]
            xk = pts[:, k]
            cover = (xk >= a) & (xk < a + t)
            if index[k] == grid.counts[k] - 1:
                cover |= xk == e
            inside &= cover
        if not inside.any():
            continue
        sel = np.nonzero(inside)[0]
        sub = pts[sel]
        w = np.ones(sel.shape[0])
        local = np.empty_like(sub)
        for k in range(grid.n):
            w *= _axis_weight(grid, k, index[k], sub[:, k])
            local[:, k] = (sub[:, k] - origin[k]) / grid.tile_size[k]
        z = codebook.codes[grid.linear_index(index)]
        y = model_forward(params, local.astype(dtype), z[None, :])
        acc[sel] += w[:, None] * y.astype(np.float64)
        wsum[sel] += w
    zero = wsum <= 0
    if zero.any():
        raise DomainError(f"{int(zero.sum())} points received no tile coverage")
    return acc / wsum[:, None]
