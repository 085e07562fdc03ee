"""Synthetic tunnel flights with exact ground truth.

The sensor sits at the origin looking down +x inside a rectangular tunnel.
Walls, floor and ceiling are sampled uniformly at a fixed areal density; the
drone is a box whose surface carries ``drone_points`` returns. Optional static
clutter boxes are scattered through the tunnel.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud_io import PointCloud, save_pcd, write_manifest
from .cluster import write_ranges
from .geometry import Cuboid, PositionEstimate, write_estimates, write_labels
from .validation import ConfigError, ContractError, check_int, check_positive, check_unit_interval

__all__ = ["SceneSpec", "Frame", "SyntheticDataset", "generate_frame", "generate_dataset", "split_indices"]

DEFAULT_WAYPOINTS = (
    (0.0, 4.0, -1.0, 0.5),
    (10.0, 8.0, 0.5, 0.6),
    (20.0, 12.0, -0.5, 0.5),
)


@dataclass(frozen=True)
class SceneSpec:
    """Tunnel geometry, drone model, trajectory and noise for synthetic flights.

    Waypoints are ``(t, x, y, z)`` in seconds and sensor-frame meters and are
    linearly interpolated.
    """

    tunnel_length: float = 30.0
    tunnel_width: float = 8.0
    tunnel_height: float = 4.0
    tunnel_x0: float = -2.0
    floor_z: float = -1.5
    wall_density: float = 30.0
    drone_extent: tuple = (0.5, 0.5, 0.3)
    drone_points: int = 60
    waypoints: tuple = DEFAULT_WAYPOINTS
    noise_sigma: float = 0.0
    clutter_count: int = 0
    clutter_size: tuple = (0.2, 1.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("tunnel_length", "tunnel_width", "tunnel_height", "wall_density"):
            check_positive(getattr(self, name), name)
        for v in self.drone_extent:
            check_positive(v, "drone extent")
        check_int(self.drone_points, "drone_points", minimum=6)
        check_positive(self.noise_sigma, "noise_sigma", allow_zero=True)
        check_int(self.clutter_count, "clutter_count")
        lo, hi = self.clutter_size
        if not 0 < lo <= hi:
            raise ConfigError("clutter_size must be 0 < min <= max")
        check_int(self.seed, "seed")
        wp = np.asarray(self.waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 4 or len(wp) < 1:
            raise ConfigError("waypoints must be a list of (t, x, y, z)")
        if np.any(np.diff(wp[:, 0]) < 0):
            raise ConfigError("waypoints must be time-sorted")

    @property
    def t_start(self):
        return float(self.waypoints[0][0])

    @property
    def t_end(self):
        return float(self.waypoints[-1][0])

    @property
    def duration(self):
        return self.t_end - self.t_start

    def position_at(self, t):
        if not self.t_start <= t <= self.t_end:
            raise ContractError(f"t={t} outside trajectory span [{self.t_start}, {self.t_end}]")
        wp = np.asarray(self.waypoints, dtype=np.float64)
        return np.array([np.interp(t, wp[:, 0], wp[:, k]) for k in (1, 2, 3)])


@dataclass(frozen=True, eq=False)
class Frame:
    cloud: PointCloud
    truth_box: Cuboid
    truth: PositionEstimate
    range_m: float
    drone_mask: np.ndarray


def _sample_box_surface(rng, center, extent, n):
    """``n`` points on the surface of an axis-aligned box, every face hit at least once.

    Points on a face come in pairs mirrored through the face center, so the
    sample mean stays within a few centimetres of the box center; only the
    odd point left on a face is unpaired.
    """
    lx, ly, lz = extent
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
    counts = np.ones(6, dtype=int)
    extra = n - 6
    share = areas / areas.sum() * extra
    counts += np.floor(share).astype(int)
    rest = extra - (counts.sum() - 6)
    counts[np.argsort(-(share - np.floor(share)), kind="stable")[:rest]] += 1
    half = np.array(extent) / 2
    out = []
    for face, k in enumerate(counts):
        axis, sign = face // 2, 1 if face % 2 == 0 else -1
        p = rng.uniform(-half, half, size=((k + 1) // 2, 3))
        p = np.concatenate([p, -p[: k // 2]])
        p[:, axis] = sign * half[axis]
        out.append(p)
    return np.concatenate(out) + center


def _tunnel_points(spec, rng):
    x0, L = spec.tunnel_x0, spec.tunnel_length
    w, h, fz = spec.tunnel_width, spec.tunnel_height, spec.floor_z
    d = spec.wall_density
    pts = []
    for z in (fz, fz + h):
        n = int(round(d * L * w))
        pts.append(np.c_[rng.uniform(x0, x0 + L, n), rng.uniform(-w / 2, w / 2, n), np.full(n, z)])
    for y in (-w / 2, w / 2):
        n = int(round(d * L * h))
        pts.append(np.c_[rng.uniform(x0, x0 + L, n), np.full(n, y), rng.uniform(fz, fz + h, n)])
    return np.concatenate(pts)


def _clutter(spec):
    """Static clutter boxes shared by every frame of a flight."""
    rng = np.random.default_rng([spec.seed, 7919])
    boxes = []
    lo, hi = spec.clutter_size
    w, fz, h = spec.tunnel_width, spec.floor_z, spec.tunnel_height
    for _ in range(spec.clutter_count):
        ext = rng.uniform(lo, hi, 3)
        x = rng.uniform(spec.tunnel_x0 + ext[0], spec.tunnel_x0 + spec.tunnel_length - ext[0])
        y = rng.uniform(-w / 2 + ext[1] / 2 + 0.2, w / 2 - ext[1] / 2 - 0.2)
        z = rng.uniform(fz + ext[2] / 2, fz + h - ext[2] / 2 - 0.2)
        boxes.append((np.array([x, y, z]), ext))
    return boxes


def generate_frame(spec, t):
    """Render one scan at time ``t``.

    Returns a :class:`Frame` with the cloud, the truth cuboid, the truth
    position and the simulated UWB range (distance to the drone center).
    Identical ``(spec, t)`` always give identical frames.
    """
    center = spec.position_at(t)
    rng = np.random.default_rng([spec.seed, int(round(t * 1e6)) % (1 << 62)])
    extent = np.asarray(spec.drone_extent, dtype=np.float64)
    truth_box = Cuboid(*center, *extent)

    walls = _tunnel_points(spec, rng)
    parts = [walls]
    scene_intensity = [rng.uniform(5, 60, len(walls))]
    for c_center, c_ext in _clutter(spec):
        if np.all(np.abs(c_center - center) < (c_ext + extent) / 2 + 0.3):
            continue
        n = max(6, int(round(55.0 * 2 * (c_ext[0] * c_ext[1] + c_ext[0] * c_ext[2] + c_ext[1] * c_ext[2]))))
        parts.append(_sample_box_surface(rng, c_center, c_ext, n))
        scene_intensity.append(rng.uniform(80, 200, n))
    scene = np.concatenate(parts)
    scene_intensity = np.concatenate(scene_intensity)
    drone = _sample_box_surface(rng, center, extent, spec.drone_points)
    drone_intensity = rng.uniform(80, 200, len(drone))
    if spec.noise_sigma > 0:
        scene = scene + rng.normal(0, spec.noise_sigma, scene.shape)
        drone = drone + rng.normal(0, spec.noise_sigma, drone.shape)
    # keep scenery out of the (slightly inflated) drone box
    clear = np.any(np.abs(scene - center) > extent / 2 + 0.1, axis=1)
    scene, scene_intensity = scene[clear], scene_intensity[clear]

    xyz = np.concatenate([scene, drone])
    intensity = np.concatenate([scene_intensity, drone_intensity])
    mask = np.zeros(len(xyz), dtype=bool)
    mask[len(scene):] = True
    cloud = PointCloud(np.c_[xyz, intensity], float(t), f"t{t:.6f}")
    truth = PositionEstimate(*center, float(t), "truth")
    return Frame(cloud, truth_box, truth, float(np.linalg.norm(center)), mask)


def split_indices(n, split=0.75, seed=0):
    """Seeded shuffle, then the first ``round(split * n)`` indices are training."""
    check_unit_interval(split, "split", open_ends=True)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    times: np.ndarray
    frames: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    files: dict = field(default_factory=dict)

    @property
    def train(self):
        return [self.frames[i] for i in self.train_idx]

    @property
    def test(self):
        return [self.frames[i] for i in self.test_idx]


def frame_times(spec, frame_rate):
    check_positive(frame_rate, "frame_rate")
    n = int(round(spec.duration * frame_rate))
    return spec.t_start + np.arange(n) / frame_rate


def generate_dataset(spec, frame_rate=10.0, split=0.75, out_dir=None, encoding="binary"):
    """Render a flight at ``frame_rate`` and split it into train/test frames.

    When ``out_dir`` is given, writes ``clouds/*.pcd``, ``manifest.csv``,
    ``manifest_train.csv``, ``manifest_test.csv``, ``labels.csv``,
    ``truth.csv`` and ``range.csv`` (``timestamp,range_m,altimeter_m``).
    """
    times = frame_times(spec, frame_rate)
    frames = [generate_frame(spec, float(t)) for t in times]
    train_idx, test_idx = split_indices(len(frames), split, spec.seed)
    ds = SyntheticDataset(spec, times, frames, train_idx, test_idx)
    if out_dir is not None:
        ds.files = write_dataset(ds, out_dir, encoding)
    return ds


def write_dataset(ds, out_dir, encoding="binary"):
    out = Path(out_dir)
    records = []
    for k, frame in enumerate(ds.frames):
        rel = Path("clouds") / f"frame_{k:05d}.pcd"
        save_pcd(out / rel, frame.cloud, encoding)
        records.append((rel, frame.cloud.timestamp))
    files = {
        "manifest": out / "manifest.csv",
        "manifest_train": out / "manifest_train.csv",
        "manifest_test": out / "manifest_test.csv",
        "labels": out / "labels.csv",
        "truth": out / "truth.csv",
        "range": out / "range.csv",
    }
    write_manifest(files["manifest"], records)
    write_manifest(files["manifest_train"], [records[i] for i in ds.train_idx])
    write_manifest(files["manifest_test"], [records[i] for i in ds.test_idx])
    write_labels(files["labels"], [(f.cloud.timestamp, f.truth_box) for f in ds.frames])
    write_estimates(files["truth"], [f.truth for f in ds.frames])
    write_ranges(files["range"], [(f.cloud.timestamp, f.range_m, f.truth.z) for f in ds.frames])
    return files
