"""Range-shell segmentation, Euclidean clustering, heuristic filtering and the
velocity gate: the clustering localizer used as the baseline method.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator

from ._fileio import atomic_write
from .cloud_io import PointCloud
from .geometry import Cuboid, PositionEstimate
from .validation import ConfigError, ContractError, check_int, check_positive

__all__ = [
    "ShellParams",
    "HeuristicConfig",
    "Cluster",
    "VelocityGateState",
    "shell_segment",
    "radius_pairs",
    "euclidean_cluster",
    "kmeans_cluster",
    "apply_heuristics",
    "localize_clustering",
    "velocity_gate",
    "read_ranges",
    "write_ranges",
    "ClusterLocalizer",
]

log = logging.getLogger(__name__)

DEFAULT_LINK_RADIUS = 0.3
DEFAULT_MIN_POINTS = 5


@dataclass(frozen=True)
class ShellParams:
    range: float
    margin: float = 2.0

    def __post_init__(self):
        check_positive(self.range, "range")
        check_positive(self.margin, "margin")

    @property
    def inner(self):
        return max(self.range - self.margin, 0.0)

    @property
    def outer(self):
        return self.range + self.margin


@dataclass(frozen=True)
class HeuristicConfig:
    altimeter_height: float
    height_tolerance: float = 0.3
    min_volume: float = 0.01
    max_aspect_diff: float = 0.5

    def __post_init__(self):
        # altimeter height is a z coordinate in the sensor frame and may be negative
        if not math.isfinite(self.altimeter_height):
            raise ConfigError("altimeter_height must be finite")
        check_positive(self.height_tolerance, "height_tolerance")
        check_positive(self.min_volume, "min_volume")
        check_positive(self.max_aspect_diff, "max_aspect_diff")


@dataclass(frozen=True, eq=False)
class Cluster:
    point_indices: np.ndarray
    bbox: Cuboid
    centroid: np.ndarray

    @classmethod
    def from_points(cls, indices, xyz):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            raise ContractError("a cluster needs at least one point")
        pts = np.asarray(xyz, dtype=np.float64)[indices]
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        ctr = (lo + hi) / 2
        ext = hi - lo
        bbox = Cuboid(ctr[0], ctr[1], ctr[2], ext[0], ext[1], ext[2])
        return cls(indices, bbox, pts.mean(axis=0))

    def __len__(self):
        return len(self.point_indices)


@dataclass
class VelocityGateState:
    last_estimate: PositionEstimate = None
    max_speed: float = 0.5

    def __post_init__(self):
        check_positive(self.max_speed, "max_speed")


def shell_segment(cloud, shell):
    """Keep points whose distance from the sensor lies in ``[inner, outer]``."""
    xyz = cloud.xyz.astype(np.float64)
    with np.errstate(invalid="ignore"):
        r = np.linalg.norm(xyz, axis=1)
        keep = (r >= shell.inner) & (r <= shell.outer)
    return cloud.with_points(cloud.points[keep])


def radius_pairs(xyz, radius):
    """All index pairs ``(i, j), i < j`` with ``|p_i - p_j| <= radius``.

    Uses a uniform hash grid with cell size ``radius`` so only the 27
    neighbouring cells are compared.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if n < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    cells = np.floor((xyz - xyz.min(axis=0)) / radius).astype(np.int64)
    dims = cells.max(axis=0) + 3
    # shift by one so neighbour offsets never go negative
    def key_of(c):
        return ((c[..., 0] + 1) * dims[1] + (c[..., 1] + 1)) * dims[2] + (c[..., 2] + 1)

    keys = key_of(cells)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
    uniq_cells = cells[order[starts]]

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    # half of the neighbourhood plus the cell itself covers every unordered pair once
    offsets = [o for o in offsets if o > (0, 0, 0)] + [(0, 0, 0)]
    out_i, out_j = [], []
    r2 = radius * radius
    for off in offsets:
        nb = key_of(uniq_cells + np.array(off))
        pos = np.searchsorted(uniq, nb)
        pos = np.minimum(pos, len(uniq) - 1)
        hit = uniq[pos] == nb
        a_idx = np.nonzero(hit)[0]
        b_idx = pos[hit]
        if a_idx.size == 0:
            continue
        a_start, a_cnt = starts[a_idx], counts[a_idx]
        b_start, b_cnt = starts[b_idx], counts[b_idx]
        sizes = a_cnt * b_cnt
        total = int(sizes.sum())
        pair = np.repeat(np.arange(len(sizes)), sizes)
        local = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        i = order[a_start[pair] + local // b_cnt[pair]]
        j = order[b_start[pair] + local % b_cnt[pair]]
        if off == (0, 0, 0):
            sel = i < j
            i, j = i[sel], j[sel]
        d2 = np.sum((xyz[i] - xyz[j]) ** 2, axis=1)
        close = d2 <= r2
        i, j = i[close], j[close]
        out_i.append(np.minimum(i, j))
        out_j.append(np.maximum(i, j))
    if not out_i:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(out_i), np.concatenate(out_j)


def _clusters_from_labels(labels, xyz, min_points):
    n_labels = labels.max() + 1 if labels.size else 0
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_labels + 1))
    groups = [order[bounds[k]:bounds[k + 1]] for k in range(n_labels)]
    groups = [g for g in groups if len(g) >= min_points]
    groups.sort(key=lambda g: g[0])
    return [Cluster.from_points(g, xyz) for g in groups]


def euclidean_cluster(cloud, link_radius=DEFAULT_LINK_RADIUS, min_points=DEFAULT_MIN_POINTS):
    """Connected components of the graph joining points within ``link_radius``.

    Components with fewer than ``min_points`` members are discarded. Clusters
    are ordered by their smallest point index, and indices refer to ``cloud``.
    """
    check_positive(link_radius, "link_radius")
    check_int(min_points, "min_points", minimum=1)
    xyz = cloud.xyz.astype(np.float64)
    n = len(xyz)
    if n == 0:
        return []
    if not np.all(np.isfinite(xyz)):
        raise ContractError("euclidean_cluster needs finite points; crop the cloud first")
    i, j = radius_pairs(xyz, link_radius)
    graph = coo_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return _clusters_from_labels(labels, xyz, min_points)


def kmeans_cluster(cloud, n_clusters=8, min_points=DEFAULT_MIN_POINTS, random_state=0):
    """Partition the cloud with k-means; an alternative behind the same Cluster type."""
    from sklearn.cluster import KMeans

    check_int(n_clusters, "n_clusters", minimum=1)
    xyz = cloud.xyz.astype(np.float64)
    if len(xyz) == 0:
        return []
    k = min(n_clusters, len(xyz))
    labels = KMeans(n_clusters=k, n_init=4, random_state=random_state).fit_predict(xyz)
    return _clusters_from_labels(labels, xyz, min_points)


def _passes(c, cfg):
    b = c.bbox
    lengths = (b.x_len, b.y_len, b.z_len)
    return (
        abs(b.z_ctr - cfg.altimeter_height) <= cfg.height_tolerance
        and b.volume >= cfg.min_volume
        and max(lengths) - min(lengths) <= cfg.max_aspect_diff
    )


def apply_heuristics(clusters, cfg):
    """Keep clusters whose box sits at the altimeter height, is large enough,
    and whose side lengths differ by at most ``max_aspect_diff``."""
    return [c for c in clusters if _passes(c, cfg)]


def localize_clustering(
    cloud,
    shell,
    cfg,
    link_radius=DEFAULT_LINK_RADIUS,
    min_points=DEFAULT_MIN_POINTS,
    method="euclidean",
    n_clusters=8,
    random_state=0,
):
    """Run shell segmentation, clustering and the heuristics on one scan.

    Returns the bbox center of the surviving cluster as a PositionEstimate, or
    None when nothing survives. Among several survivors the one whose centroid
    range is closest to ``shell.range`` wins; earlier clusters win exact ties.
    """
    seg = shell_segment(cloud, shell)
    if len(seg) == 0:
        return None
    if method == "euclidean":
        clusters = euclidean_cluster(seg, link_radius, min_points)
    elif method == "kmeans":
        clusters = kmeans_cluster(seg, n_clusters, min_points, random_state)
    else:
        raise ConfigError(f"unknown clustering method {method!r}")
    survivors = apply_heuristics(clusters, cfg)
    if not survivors:
        return None
    best = min(survivors, key=lambda c: abs(float(np.linalg.norm(c.centroid)) - shell.range))
    b = best.bbox
    return PositionEstimate(b.x_ctr, b.y_ctr, b.z_ctr, cloud.timestamp, "clustering")


def velocity_gate(state, candidate):
    """Accept ``candidate`` unless it implies a speed above ``state.max_speed``.

    Returns ``(accepted, new_state)``; a rejected candidate leaves the state as is.
    Because only accepted estimates update the state, a single rejected jump
    can lock the gate out for the rest of a flight.
    """
    last = state.last_estimate
    if last is None:
        return True, replace(state, last_estimate=candidate)
    dt = candidate.timestamp - last.timestamp
    if dt < 0:
        raise ContractError(
            f"velocity gate needs non-decreasing timestamps ({candidate.timestamp} < {last.timestamp})"
        )
    dist = float(np.linalg.norm(candidate.xyz - last.xyz))
    if dt == 0:
        ok = dist == 0
    else:
        ok = dist / dt <= state.max_speed
    if ok:
        return True, replace(state, last_estimate=candidate)
    return False, state


def read_ranges(path):
    """Parse a range series ``timestamp,range_m[,altimeter_m]`` into a list of
    ``(timestamp, range_m, altimeter_m or None)`` sorted by time."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 'timestamp,range_m[,altimeter_m]'")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
        out.append((vals[0], vals[1], vals[2] if len(vals) == 3 else None))
    out.sort(key=lambda r: r[0])
    return out


def write_ranges(path, rows):
    lines = []
    for ts, rng, alt in rows:
        cols = [ts, rng] if alt is None else [ts, rng, alt]
        lines.append(",".join(repr(float(v)) for v in cols) + "\n")
    atomic_write(path, "".join(lines))


class ClusterLocalizer(BaseEstimator):
    """Estimator wrapper around :func:`localize_clustering`.

    Nothing is learned; ``fit`` only validates the parameters. ``predict``
    takes a sequence of clouds plus one range per cloud (and optionally one
    altimeter reading per cloud, overriding ``altimeter_height``).

    Parameters
    ----------
    margin : float, default=2.0
        Half-width of the range shell in meters.
    altimeter_height : float, default=0.0
    height_tolerance, min_volume, max_aspect_diff : float
        Heuristic thresholds.
    link_radius : float, default=0.3
    min_points : int, default=5
    method : {"euclidean", "kmeans"}
    n_clusters : int, default=8
        Only used by the k-means method.
    velocity_gate : bool, default=False
        Filter the estimate sequence with the velocity gate.
    max_speed : float, default=0.5
    random_state : int, default=0
    """

    def __init__(
        self,
        margin=2.0,
        altimeter_height=0.0,
        height_tolerance=0.3,
        min_volume=0.01,
        max_aspect_diff=0.5,
        link_radius=DEFAULT_LINK_RADIUS,
        min_points=DEFAULT_MIN_POINTS,
        method="euclidean",
        n_clusters=8,
        velocity_gate=False,
        max_speed=0.5,
        random_state=0,
    ):
        self.margin = margin
        self.altimeter_height = altimeter_height
        self.height_tolerance = height_tolerance
        self.min_volume = min_volume
        self.max_aspect_diff = max_aspect_diff
        self.link_radius = link_radius
        self.min_points = min_points
        self.method = method
        self.n_clusters = n_clusters
        self.velocity_gate = velocity_gate
        self.max_speed = max_speed
        self.random_state = random_state

    def _validate(self):
        check_positive(self.margin, "margin")
        check_positive(self.link_radius, "link_radius")
        check_int(self.min_points, "min_points", minimum=1)
        check_positive(self.max_speed, "max_speed")
        if self.method not in ("euclidean", "kmeans"):
            raise ConfigError(f"unknown clustering method {self.method!r}")
        HeuristicConfig(
            self.altimeter_height, self.height_tolerance, self.min_volume, self.max_aspect_diff
        )

    def fit(self, X=None, y=None):
        self._validate()
        self.n_features_in_ = 4
        return self

    def heuristic_config(self, altimeter_height=None):
        alt = self.altimeter_height if altimeter_height is None else altimeter_height
        return HeuristicConfig(alt, self.height_tolerance, self.min_volume, self.max_aspect_diff)

    def localize(self, cloud, range_m, altimeter_height=None):
        if not (range_m and math.isfinite(range_m) and range_m > 0):
            return None
        return localize_clustering(
            cloud,
            ShellParams(float(range_m), self.margin),
            self.heuristic_config(altimeter_height),
            self.link_radius,
            self.min_points,
            self.method,
            self.n_clusters,
            self.random_state,
        )

    def predict(self, X, ranges, altimeters=None):
        """Return one PositionEstimate or None per cloud in ``X``."""
        self._validate()
        clouds = [X] if isinstance(X, PointCloud) else list(X)
        ranges = np.broadcast_to(np.asarray(ranges, dtype=np.float64), (len(clouds),))
        if altimeters is None:
            altimeters = [None] * len(clouds)
        out = []
        state = VelocityGateState(max_speed=self.max_speed)
        for cloud, rng, alt in zip(clouds, ranges, altimeters):
            est = self.localize(cloud, rng, alt)
            if est is not None and self.velocity_gate:
                accepted, state = velocity_gate(state, est)
                if not accepted:
                    log.debug("velocity gate rejected estimate at t=%s", est.timestamp)
                    est = None
            out.append(est)
        return out
