"""Oriented cuboids, BEV overlap, and position error.

Cuboids use the nine-element label layout
``[x_ctr, y_ctr, z_ctr, x_len, y_len, z_len, x_rot, y_rot, z_rot]``. Only the
yaw (``z_rot``) enters any geometric computation; roll and pitch must be zero.
"""

import math
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from ._fileio import atomic_write
from .validation import ContractError

__all__ = [
    "InvalidGeometryError",
    "Cuboid",
    "Detection",
    "PositionEstimate",
    "position_error",
    "bev_iou",
    "bev_iou_matrix",
    "cuboid_corners",
    "polygon_area",
    "clip_convex",
    "read_labels",
    "write_labels",
    "read_estimates",
    "write_estimates",
]

SOURCES = ("clustering", "network", "truth")


class InvalidGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Cuboid:
    x_ctr: float
    y_ctr: float
    z_ctr: float
    x_len: float
    y_len: float
    z_len: float
    x_rot: float = 0.0
    y_rot: float = 0.0
    z_rot: float = 0.0

    def __post_init__(self):
        vals = astuple(self)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidGeometryError(f"non-finite cuboid parameters: {vals}")

    @classmethod
    def from_array(cls, arr):
        arr = [float(v) for v in np.asarray(arr, dtype=np.float64).ravel()]
        if len(arr) == 7:
            x, y, z, lx, ly, lz, yaw = arr
            return cls(x, y, z, lx, ly, lz, 0.0, 0.0, yaw)
        if len(arr) != 9:
            raise ValueError(f"cuboid needs 7 or 9 values, got {len(arr)}")
        return cls(*arr)

    def to_array(self):
        return np.array(astuple(self), dtype=np.float64)

    def to_box7(self):
        """(x, y, z, x_len, y_len, z_len, yaw), the detector's box layout."""
        return np.array(
            [self.x_ctr, self.y_ctr, self.z_ctr, self.x_len, self.y_len, self.z_len, self.z_rot]
        )

    @property
    def center(self):
        return np.array([self.x_ctr, self.y_ctr, self.z_ctr])

    @property
    def volume(self):
        return self.x_len * self.y_len * self.z_len

    def is_degenerate(self):
        return min(self.x_len, self.y_len, self.z_len) <= 0


@dataclass(frozen=True)
class Detection:
    box: Cuboid
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class PositionEstimate:
    x: float
    y: float
    z: float
    timestamp: float = 0.0
    source: str = "clustering"

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("position estimate must be finite")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    @property
    def xyz(self):
        return np.array([self.x, self.y, self.z])

    def shifted(self, offset):
        dx, dy, dz = (float(v) for v in offset)
        return PositionEstimate(self.x + dx, self.y + dy, self.z + dz, self.timestamp, self.source)


def position_error(predicted, truth):
    """3D Euclidean distance between two position estimates, in meters."""
    return math.sqrt(
        (predicted.x - truth.x) ** 2 + (predicted.y - truth.y) ** 2 + (predicted.z - truth.z) ** 2
    )


def _require_yaw_only(c):
    if c.x_rot != 0.0 or c.y_rot != 0.0:
        raise ContractError("geometry ops support yaw-only cuboids (x_rot = y_rot = 0)")


def cuboid_corners(c):
    """Return the (8, 3) corners of a yaw-rotated cuboid."""
    _require_yaw_only(c)
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (c.x_len / 2)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (c.y_len / 2)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (c.z_len / 2)
    cos, sin = math.cos(c.z_rot), math.sin(c.z_rot)
    x = c.x_ctr + cos * sx - sin * sy
    y = c.y_ctr + sin * sx + cos * sy
    z = c.z_ctr + sz
    return np.stack([x, y, z], axis=1)


def _footprint(x, y, lx, ly, yaw):
    # counter-clockwise
    hx, hy = lx / 2, ly / 2
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    cos, sin = math.cos(yaw), math.sin(yaw)
    rot = np.array([[cos, -sin], [sin, cos]])
    return local @ rot.T + np.array([x, y])


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _as_box7(b):
    if isinstance(b, Cuboid):
        _require_yaw_only(b)
        return b.to_box7()
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape[-1] == 9:
        if np.any(arr[..., 6:8] != 0):
            raise ContractError("geometry ops support yaw-only cuboids (x_rot = y_rot = 0)")
        arr = np.concatenate([arr[..., :6], arr[..., 8:9]], axis=-1)
    return arr


def _rotated_iou(a, b):
    pa = _footprint(a[0], a[1], a[3], a[4], a[6])
    pb = _footprint(b[0], b[1], b[3], b[4], b[6])
    inter = polygon_area(clip_convex(pa, pb))
    union = a[3] * a[4] + b[3] * b[4] - inter
    return min(max(inter / union, 0.0), 1.0)


def bev_iou(a, b):
    """Intersection-over-union of the bird's-eye-view footprints of two cuboids."""
    return float(bev_iou_matrix(np.atleast_2d(_as_box7(a)), np.atleast_2d(_as_box7(b)))[0, 0])


def _quarter_turns(yaw):
    k = np.round(yaw / (np.pi / 2))
    return k, np.abs(yaw - k * (np.pi / 2)) < 1e-12


def bev_iou_matrix(boxes_a, boxes_b):
    """Pairwise BEV IoU between (N, 7) and (M, 7) box arrays (9-wide also accepted).

    Axis-aligned pairs (yaw a multiple of pi/2) take a closed-form path; the
    remaining pairs whose circumscribed circles overlap are clipped exactly.
    """
    a = np.atleast_2d(_as_box7(boxes_a)).reshape(-1, 7)
    b = np.atleast_2d(_as_box7(boxes_b)).reshape(-1, 7)
    for arr in (a, b):
        if arr.size and np.any(arr[:, 3:6] <= 0):
            raise InvalidGeometryError("box lengths must be positive")
        if not np.all(np.isfinite(arr)):
            raise InvalidGeometryError("box parameters must be finite")
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out

    ka, aligned_a = _quarter_turns(a[:, 6])
    kb, aligned_b = _quarter_turns(b[:, 6])
    # footprint half extents for axis-aligned boxes
    swap_a = (ka % 2) == 1
    swap_b = (kb % 2) == 1
    hxa = np.where(swap_a, a[:, 4], a[:, 3]) / 2
    hya = np.where(swap_a, a[:, 3], a[:, 4]) / 2
    hxb = np.where(swap_b, b[:, 4], b[:, 3]) / 2
    hyb = np.where(swap_b, b[:, 3], b[:, 4]) / 2
    ix = np.minimum(a[:, None, 0] + hxa[:, None], b[None, :, 0] + hxb[None]) - np.maximum(
        a[:, None, 0] - hxa[:, None], b[None, :, 0] - hxb[None]
    )
    iy = np.minimum(a[:, None, 1] + hya[:, None], b[None, :, 1] + hyb[None]) - np.maximum(
        a[:, None, 1] - hya[:, None], b[None, :, 1] - hyb[None]
    )
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = a[:, 3] * a[:, 4]
    area_b = b[:, 3] * b[:, 4]
    aligned = aligned_a[:, None] & aligned_b[None, :]
    out = np.where(aligned, inter / (area_a[:, None] + area_b[None, :] - inter), 0.0)

    rad_a = np.hypot(a[:, 3], a[:, 4]) / 2
    rad_b = np.hypot(b[:, 3], b[:, 4]) / 2
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    candidates = ~aligned & (dist < rad_a[:, None] + rad_b[None, :])
    for i, j in zip(*np.nonzero(candidates)):
        out[i, j] = _rotated_iou(a[i], b[j])
    return np.clip(out, 0.0, 1.0)


_ANGLE_DIRECTIVE = "angle_units"


def read_labels(path, angle_units=None):
    """Parse a label CSV into ``[(timestamp, Cuboid), ...]``.

    Rows are ``timestamp,x_ctr,y_ctr,z_ctr,x_len,y_len,z_len,x_rot,y_rot,z_rot``.
    Angles are radians unless ``angle_units="deg"`` is passed or the file holds a
    ``# angle_units: deg`` line before its rows.
    """
    path = Path(path)
    units = angle_units
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith(_ANGLE_DIRECTIVE) and angle_units is None:
                units = body.split(":", 1)[-1].split("=", 1)[-1].strip()
            continue
        parts = line.split(",")
        if len(parts) != 10:
            raise ValueError(f"{path}:{lineno}: expected 10 comma-separated values, got {len(parts)}")
        vals = [float(p) for p in parts]
        if units in ("deg", "degrees"):
            vals[7:10] = [math.radians(v) for v in vals[7:10]]
        elif units not in (None, "rad", "radians"):
            raise ValueError(f"{path}: unknown angle units {units!r}")
        out.append((vals[0], Cuboid(*vals[1:])))
    return out


def write_labels(path, rows):
    """Write ``(timestamp, Cuboid)`` rows in radians; values round-trip exactly."""
    lines = ["# angle_units: rad\n"]
    for ts, c in rows:
        lines.append(",".join(repr(float(v)) for v in (ts, *astuple(c))) + "\n")
    atomic_write(path, "".join(lines))


def read_estimates(path):
    """Parse ``timestamp,x,y,z,source`` rows into PositionEstimates (sorted by time)."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'timestamp,x,y,z,source'")
        ts, x, y, z = (float(p) for p in parts[:4])
        out.append(PositionEstimate(x, y, z, ts, parts[4].strip()))
    out.sort(key=lambda e: e.timestamp)
    return out


def write_estimates(path, estimates, header=None):
    """Write ``timestamp,x,y,z,source`` rows; ``header`` lines become ``#`` comments."""
    lines = [f"# {h}\n" for h in (header or [])]
    lines += [
        ",".join(repr(float(v)) for v in (e.timestamp, e.x, e.y, e.z)) + f",{e.source}\n"
        for e in estimates
    ]
    atomic_write(path, "".join(lines))
