"""Pillar encoding: BEV grid geometry, point decoration, and the pseudo-image scatter."""

import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cloud_io import CropBounds, PointCloud, crop
from .validation import ConfigError, ContractError, check_int, check_positive, check_random_state

__all__ = [
    "GridParams",
    "PillarTensor",
    "TUNNEL_GRID",
    "DESK_GRID",
    "GRID_PRESETS",
    "round_half_away",
    "pseudo_image_dims",
    "bucket_points",
    "encode_pillars",
    "scatter",
    "dump_pillars",
    "load_pillars",
    "PillarEncoder",
]

N_FEATURES = 9


def round_half_away(q):
    """Round to nearest, halves away from zero."""
    # absorb representation error in quotients such as 70 / 0.16
    q = round(q, 9)
    return int(math.copysign(math.floor(abs(q) + 0.5), q))


@dataclass(frozen=True)
class GridParams:
    """BEV grid over the cropped volume.

    ``ds_factor`` is the total downsampling of the detector backbone and must
    divide both cell counts. ``rounding`` selects how cell counts are derived
    from extent / step: ``"nearest"`` (halves away from zero) or ``"floor"``.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    x_step: float
    y_step: float
    ds_factor: int = 1
    rounding: str = "nearest"

    def __post_init__(self):
        check_positive(self.x_step, "x_step")
        check_positive(self.y_step, "y_step")
        check_int(self.ds_factor, "ds_factor", minimum=1)
        if self.rounding not in ("nearest", "floor"):
            raise ConfigError(f"rounding must be 'nearest' or 'floor', got {self.rounding!r}")
        self.bounds  # validates min < max
        x_n, y_n = pseudo_image_dims(self)
        if x_n < 1 or y_n < 1:
            raise ConfigError("grid must have at least one cell per axis")
        if x_n % self.ds_factor or y_n % self.ds_factor:
            raise ConfigError(f"ds_factor {self.ds_factor} must divide x_n={x_n} and y_n={y_n}")

    @property
    def bounds(self):
        return CropBounds(self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max)

    @property
    def x_n(self):
        return pseudo_image_dims(self)[0]

    @property
    def y_n(self):
        return pseudo_image_dims(self)[1]

    def cell_center(self, row, col):
        return (
            self.x_min + (np.asarray(col) + 0.5) * self.x_step,
            self.y_min + (np.asarray(row) + 0.5) * self.y_step,
        )


def pseudo_image_dims(g):
    """Return ``(x_n, y_n)``, the pseudo-image width and height in cells."""
    if g.x_step <= 0 or g.y_step <= 0:
        raise ConfigError("grid steps must be positive")
    qx = (g.x_max - g.x_min) / g.x_step
    qy = (g.y_max - g.y_min) / g.y_step
    if g.rounding == "floor":
        return math.floor(round(qx, 9)), math.floor(round(qy, 9))
    return round_half_away(qx), round_half_away(qy)


TUNNEL_GRID = GridParams(0.0, 70.0, -39.68, 39.68, -7.0, 5.0, 0.16, 0.16, ds_factor=2)
DESK_GRID = GridParams(0.0, 20.0, -10.0, 10.0, -3.0, 3.0, 0.25, 0.25, ds_factor=2)
GRID_PRESETS = {"tunnel": TUNNEL_GRID, "desk": DESK_GRID}
# max_pillars, max_points_per_pillar
PILLAR_LIMITS = {"tunnel": (12000, 100), "desk": (6400, 32)}


@dataclass(frozen=True, eq=False)
class PillarTensor:
    """Dense pillar features.

    Attributes
    ----------
    features : ndarray (P, N, 9), float64
        ``x, y, z, r, x_c, y_c, z_c, x_p, y_p`` per point; padded slots are zero.
    indices : ndarray (P, 2), int64
        ``(row, col)`` BEV cell of each pillar.
    counts : ndarray (P,), int64
        Number of real points per pillar.
    x_n, y_n : int
        Grid width and height.
    """

    features: np.ndarray
    indices: np.ndarray
    counts: np.ndarray
    x_n: int
    y_n: int

    @property
    def n_pillars(self):
        return self.features.shape[0]

    @property
    def max_points(self):
        return self.features.shape[1]

    def mask(self):
        """Boolean (P, N) array marking real point slots."""
        return np.arange(self.max_points)[None, :] < self.counts[:, None]

    def __eq__(self, other):
        if not isinstance(other, PillarTensor):
            return NotImplemented
        return (
            (self.x_n, self.y_n) == (other.x_n, other.y_n)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None


def bucket_points(xyz, g):
    """Return ``(row, col)`` for each point under half-open cell intervals."""
    xyz = np.asarray(xyz, dtype=np.float64)
    col = np.floor((xyz[:, 0] - g.x_min) / g.x_step).astype(np.int64)
    row = np.floor((xyz[:, 1] - g.y_min) / g.y_step).astype(np.int64)
    return row, col


def encode_pillars(cloud, g, max_pillars=12000, max_points_per_pillar=100, seed=0):
    """Bucket a cropped cloud into BEV pillars and decorate every point.

    Pillars come out in row-major cell order. Overfull pillars are subsampled
    uniformly without replacement, and if there are more than ``max_pillars``
    non-empty cells a uniform subset of pillars is kept; both draws use
    ``seed``.

    Raises
    ------
    ContractError
        If any point lies outside the grid bounds.
    """
    check_int(max_pillars, "max_pillars", minimum=1)
    check_int(max_points_per_pillar, "max_points_per_pillar", minimum=1)
    x_n, y_n = pseudo_image_dims(g)
    pts = np.asarray(cloud.points, dtype=np.float64)
    inside = np.all(np.isfinite(pts), axis=1) & g.bounds.contains(pts[:, :3])
    row, col = bucket_points(pts[:, :3], g) if len(pts) else (np.empty(0, int), np.empty(0, int))
    inside &= (row >= 0) & (row < y_n) & (col >= 0) & (col < x_n)
    if not np.all(inside):
        bad = int(np.argmin(inside))
        raise ContractError(f"point {bad} at {tuple(pts[bad, :3])} lies outside the grid; crop first")

    rng = check_random_state(seed)
    N = max_points_per_pillar
    empty = PillarTensor(
        np.zeros((0, N, N_FEATURES)), np.zeros((0, 2), np.int64), np.zeros(0, np.int64), x_n, y_n
    )
    if len(pts) == 0:
        return empty

    cell = row * x_n + col
    order = np.argsort(cell, kind="stable")
    cells, starts, counts = np.unique(cell[order], return_index=True, return_counts=True)

    chosen = np.arange(len(cells))
    if len(cells) > max_pillars:
        chosen = np.sort(rng.choice(len(cells), size=max_pillars, replace=False))
    P = len(chosen)

    members = []
    for k in chosen:
        idx = order[starts[k]:starts[k] + counts[k]]
        if counts[k] > N:
            idx = idx[np.sort(rng.choice(counts[k], size=N, replace=False))]
        members.append(idx)
    kept_counts = np.array([len(m) for m in members], dtype=np.int64)
    pillar_of = np.repeat(np.arange(P), kept_counts)
    slot = np.arange(kept_counts.sum()) - np.repeat(np.cumsum(kept_counts) - kept_counts, kept_counts)
    flat = np.concatenate(members)

    p = pts[flat]
    sums = np.zeros((P, 3))
    np.add.at(sums, pillar_of, p[:, :3])
    means = sums / kept_counts[:, None]
    p_rows, p_cols = cells[chosen] // x_n, cells[chosen] % x_n
    cx, cy = g.cell_center(p_rows, p_cols)

    feats = np.zeros((P, N, N_FEATURES))
    dec = np.empty((len(flat), N_FEATURES))
    dec[:, :4] = p
    dec[:, 4:7] = p[:, :3] - means[pillar_of]
    dec[:, 7] = p[:, 0] - cx[pillar_of]
    dec[:, 8] = p[:, 1] - cy[pillar_of]
    feats[pillar_of, slot] = dec
    indices = np.stack([p_rows, p_cols], axis=1).astype(np.int64)
    return PillarTensor(feats, indices, kept_counts, x_n, y_n)


def _check_indices(indices, x_n, y_n):
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
    if indices.size:
        if np.any(indices < 0) or np.any(indices[:, 0] >= y_n) or np.any(indices[:, 1] >= x_n):
            raise ContractError("pillar index outside the grid")
        flat = indices[:, 0] * x_n + indices[:, 1]
        if len(np.unique(flat)) != len(flat):
            raise ContractError("duplicate pillar indices")
    return indices


def scatter(pillar_features, indices, g):
    """Place per-pillar feature vectors onto a zero (C, y_n, x_n) pseudo-image."""
    x_n, y_n = pseudo_image_dims(g)
    feats = np.asarray(pillar_features)
    indices = _check_indices(indices, x_n, y_n)
    if feats.ndim != 2 or feats.shape[0] != len(indices):
        raise ContractError(f"pillar features {feats.shape} do not match {len(indices)} indices")
    image = np.zeros((feats.shape[1], y_n, x_n), dtype=feats.dtype)
    image[:, indices[:, 0], indices[:, 1]] = feats.T
    return image


_DUMP_MAGIC = b"PILT"
_DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIIIII")


def dump_pillars(t):
    """Serialize a PillarTensor.

    Layout (little-endian): ``b"PILT"``, u32 version, u32 P, u32 N, u32 x_n,
    u32 y_n, then float64 features (P*N*9), int32 indices (P*2, row then col),
    int32 counts (P).
    """
    header = _DUMP_HEADER.pack(_DUMP_MAGIC, _DUMP_VERSION, t.n_pillars, t.max_points, t.x_n, t.y_n)
    return (
        header
        + np.ascontiguousarray(t.features, dtype="<f8").tobytes()
        + np.ascontiguousarray(t.indices, dtype="<i4").tobytes()
        + np.ascontiguousarray(t.counts, dtype="<i4").tobytes()
    )


def load_pillars(data):
    if len(data) < _DUMP_HEADER.size:
        raise ValueError("pillar dump too short")
    magic, version, P, N, x_n, y_n = _DUMP_HEADER.unpack_from(data)
    if magic != _DUMP_MAGIC or version != _DUMP_VERSION:
        raise ValueError("not a pillar dump (bad magic/version)")
    off = _DUMP_HEADER.size
    sizes = (P * N * N_FEATURES * 8, P * 2 * 4, P * 4)
    if len(data) != off + sum(sizes):
        raise ValueError(f"pillar dump has {len(data)} bytes, expected {off + sum(sizes)}")
    feats = np.frombuffer(data, "<f8", P * N * N_FEATURES, off).reshape(P, N, N_FEATURES)
    off += sizes[0]
    idx = np.frombuffer(data, "<i4", P * 2, off).reshape(P, 2)
    off += sizes[1]
    counts = np.frombuffer(data, "<i4", P, off)
    return PillarTensor(feats.astype(np.float64), idx.astype(np.int64), counts.astype(np.int64), x_n, y_n)


def resolve_grid(grid):
    if isinstance(grid, GridParams):
        return grid
    if isinstance(grid, str) and grid in GRID_PRESETS:
        return GRID_PRESETS[grid]
    raise ConfigError(f"grid must be GridParams or one of {sorted(GRID_PRESETS)}, got {grid!r}")


class PillarEncoder(TransformerMixin, BaseEstimator):
    """Crop clouds to the grid and encode each into a :class:`PillarTensor`.

    Parameters
    ----------
    grid : GridParams or {"tunnel", "desk"}, default="desk"
    max_pillars : int, default=6400
    max_points_per_pillar : int, default=32
    crop : bool, default=True
        Crop to the grid bounds first. When False, out-of-bounds points raise.
    random_state : int, default=0
        Seed for the truncation draws; the same seed is used for every cloud.
    """

    def __init__(self, grid="desk", max_pillars=6400, max_points_per_pillar=32, crop=True,
                 random_state=0):
        self.grid = grid
        self.max_pillars = max_pillars
        self.max_points_per_pillar = max_points_per_pillar
        self.crop = crop
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.grid_ = resolve_grid(self.grid)
        check_int(self.max_pillars, "max_pillars", minimum=1)
        check_int(self.max_points_per_pillar, "max_points_per_pillar", minimum=1)
        self.image_shape_ = (self.grid_.y_n, self.grid_.x_n)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        clouds = [X] if isinstance(X, PointCloud) else X
        out = []
        for cloud in clouds:
            if self.crop:
                cloud = crop(cloud, self.grid_.bounds)
            out.append(
                encode_pillars(cloud, self.grid_, self.max_pillars, self.max_points_per_pillar,
                               self.random_state)
            )
        return out
