"""PCD v0.7 reading/writing, cropping, and the dataset manifest format.

Clouds are held as an (N, 4) float32 array of ``x, y, z, intensity``. Only the
``ascii`` and ``binary`` encodings are supported.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._fileio import atomic_write
from .validation import ConfigError, check_points

__all__ = [
    "PointCloud",
    "CropBounds",
    "PcdError",
    "PcdParseError",
    "PcdTruncatedError",
    "PcdUnsupportedError",
    "parse_pcd",
    "write_pcd",
    "read_pcd",
    "save_pcd",
    "crop",
    "read_manifest",
    "write_manifest",
]

_MAX_FIELD_COUNT = 1 << 16
_TYPE_CODES = {
    ("F", 2): "<f2", ("F", 4): "<f4", ("F", 8): "<f8",
    ("I", 1): "i1", ("I", 2): "<i2", ("I", 4): "<i4", ("I", 8): "<i8",
    ("U", 1): "u1", ("U", 2): "<u2", ("U", 4): "<u4", ("U", 8): "<u8",
}


class PcdError(ValueError):
    """Base class for PCD decoding failures."""


class PcdParseError(PcdError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class PcdTruncatedError(PcdError):
    def __init__(self, expected, actual, unit="bytes"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated PCD body: expected {expected} {unit}, got {actual}")


class PcdUnsupportedError(PcdError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unorganized LiDAR scan.

    Attributes
    ----------
    points : ndarray of shape (N, 4), float32
        Columns are x, y, z (meters, sensor frame) and intensity.
    timestamp : float
        Epoch seconds; PCD files carry none, so it comes from the manifest.
    frame_id : str
    """

    points: np.ndarray
    timestamp: float = 0.0
    frame_id: str = ""

    def __post_init__(self):
        pts = check_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def intensity(self):
        return self.points[:, 3]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and self.points.tobytes() == other.points.tobytes()
            and self.timestamp == other.timestamp
            and self.frame_id == other.frame_id
        )

    __hash__ = None

    def with_points(self, points):
        return PointCloud(points, self.timestamp, self.frame_id)


@dataclass(frozen=True)
class CropBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for axis in "xyz":
            lo, hi = getattr(self, f"{axis}_min"), getattr(self, f"{axis}_max")
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"crop bounds on {axis}: need finite min < max, got [{lo}, {hi})")

    def contains(self, xyz):
        xyz = np.asarray(xyz)
        lo = np.array([self.x_min, self.y_min, self.z_min])
        hi = np.array([self.x_max, self.y_max, self.z_max])
        with np.errstate(invalid="ignore"):
            return np.all((xyz >= lo) & (xyz < hi), axis=-1)


def _header_error(msg, lineno):
    raise PcdParseError(msg, lineno)


def _parse_header(data):
    header = {}
    pos = 0
    lineno = 0
    n = len(data)
    while True:
        if pos >= n:
            raise PcdParseError("missing DATA line in header", lineno + 1)
        end = data.find(b"\n", pos)
        if end < 0:
            end = n
        raw = data[pos:end]
        pos = end + 1
        lineno += 1
        line = raw.decode("latin-1").strip()
        if not line or line.startswith("#"):
            continue
        key, *values = line.split()
        key = key.upper()
        if key in header:
            _header_error(f"duplicate header key {key}", lineno)
        header[key] = (values, lineno)
        if key == "DATA":
            return header, pos, lineno


def _ints(header, key, default=None):
    if key not in header:
        if default is None:
            raise PcdParseError(f"missing {key} header line")
        return default
    values, lineno = header[key]
    try:
        out = [int(v) for v in values]
    except ValueError:
        raise PcdParseError(f"non-integer value in {key}", lineno) from None
    if any(v < 0 for v in out):
        raise PcdParseError(f"negative value in {key}", lineno)
    return out


def _single_int(header, key, default=None):
    values = _ints(header, key, default=None if default is None else [default])
    if len(values) != 1:
        raise PcdParseError(f"{key} must hold a single integer", header[key][1])
    return values[0]


def _field_layout(header):
    if "FIELDS" not in header:
        raise PcdParseError("missing FIELDS header line")
    fields, f_line = header["FIELDS"]
    if not fields:
        raise PcdParseError("FIELDS is empty", f_line)
    sizes = _ints(header, "SIZE")
    counts = _ints(header, "COUNT", default=[1] * len(fields))
    if "TYPE" not in header:
        raise PcdParseError("missing TYPE header line")
    types, t_line = header["TYPE"]
    for key, seq in (("SIZE", sizes), ("TYPE", types), ("COUNT", counts)):
        if len(seq) != len(fields):
            line = header[key][1] if key in header else f_line
            raise PcdParseError(f"{key} has {len(seq)} entries, FIELDS has {len(fields)}", line)
    dtype_fields = []
    seen = set()
    for i, (name, size, typ, count) in enumerate(zip(fields, sizes, types, counts)):
        code = _TYPE_CODES.get((typ.upper(), size))
        if code is None:
            raise PcdParseError(f"unsupported TYPE/SIZE {typ}/{size} for field {name}", t_line)
        if count < 1 or count > _MAX_FIELD_COUNT:
            raise PcdParseError(f"COUNT {count} out of range for field {name}", f_line)
        # padding fields ("_") and duplicates get unique private names
        key = name if name not in seen and name != "_" else f"__pad{i}"
        seen.add(key)
        dtype_fields.append((key, code, count) if count > 1 else (key, code))
    for required in ("x", "y", "z"):
        if required not in seen:
            raise PcdParseError(f"FIELDS lacks required field {required!r}", f_line)
    return fields, counts, np.dtype(dtype_fields)


def parse_pcd(data, timestamp=0.0, frame_id=""):
    """Decode a PCD v0.7 byte string into a :class:`PointCloud`.

    Parameters
    ----------
    data : bytes
        File contents. ``DATA ascii`` and ``DATA binary`` are accepted.
    timestamp : float, optional
    frame_id : str, optional

    Returns
    -------
    PointCloud
        Exactly ``POINTS`` points; NaN coordinates are kept.

    Raises
    ------
    PcdParseError
        Malformed header; carries the offending line number.
    PcdTruncatedError
        The body holds fewer records than declared.
    PcdUnsupportedError
        ``binary_compressed`` or an unknown encoding.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise TypeError("parse_pcd expects bytes")
    data = bytes(data)
    header, body_start, data_line = _parse_header(data)
    fields, counts, dtype = _field_layout(header)
    width = _single_int(header, "WIDTH", default=0)
    height = _single_int(header, "HEIGHT", default=1)
    if "POINTS" in header:
        n_points = _single_int(header, "POINTS")
    else:
        n_points = width * height

    encoding_values, _ = header["DATA"]
    if len(encoding_values) != 1:
        raise PcdParseError("DATA must name exactly one encoding", data_line)
    encoding = encoding_values[0].lower()
    if encoding == "binary_compressed":
        raise PcdUnsupportedError("DATA binary_compressed is not supported")

    if encoding == "binary":
        need = n_points * dtype.itemsize
        have = len(data) - body_start
        if have < need:
            raise PcdTruncatedError(need, have)
        rec = np.frombuffer(data, dtype=dtype, count=n_points, offset=body_start)
    elif encoding == "ascii":
        rec = _parse_ascii_body(data[body_start:], n_points, fields, counts, dtype, data_line)
    else:
        raise PcdUnsupportedError(f"unknown DATA encoding {encoding!r}")

    out = np.zeros((n_points, 4), dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        for col, name in enumerate(("x", "y", "z", "intensity")):
            if name in rec.dtype.names:
                v = rec[name]
                out[:, col] = v if v.ndim == 1 else v[:, 0]
    return PointCloud(out, float(timestamp), frame_id)


def _parse_ascii_body(body, n_points, fields, counts, dtype, data_line):
    n_cols = sum(counts)
    lines = body.split(b"\n")
    rows = []
    for offset, raw in enumerate(lines):
        if len(rows) == n_points:
            break
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != n_cols:
            raise PcdParseError(
                f"expected {n_cols} values per record, got {len(tokens)}", data_line + offset + 1
            )
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise PcdParseError("non-numeric value in record", data_line + offset + 1) from None
    if len(rows) < n_points:
        raise PcdTruncatedError(n_points, len(rows), unit="records")
    flat = np.array(rows, dtype=np.float64).reshape(n_points, n_cols)
    rec = np.zeros(n_points, dtype=dtype)
    col = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for name, count in zip(dtype.names, counts):
            target = rec[name]
            chunk = flat[:, col:col + count]
            if np.issubdtype(target.dtype, np.integer):
                info = np.iinfo(target.dtype)
                chunk = np.nan_to_num(chunk, nan=0.0, posinf=info.max, neginf=info.min)
                chunk = np.clip(chunk, info.min, info.max)
            rec[name] = chunk if count > 1 else chunk[:, 0]
            col += count
    return rec


def write_pcd(cloud, encoding="binary"):
    """Serialize ``cloud`` as PCD v0.7 with float32 ``x y z intensity`` fields."""
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    n = pts.shape[0]
    if encoding not in ("ascii", "binary"):
        raise PcdUnsupportedError(f"cannot write encoding {encoding!r}")
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        "FIELDS x y z intensity\n"
        "SIZE 4 4 4 4\n"
        "TYPE F F F F\n"
        "COUNT 1 1 1 1\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {encoding}\n"
    ).encode("ascii")
    if encoding == "binary":
        return header + pts.tobytes()
    body = "".join(" ".join(_ascii_token(float(v)) for v in row) + "\n" for row in pts)
    return header + body.encode("ascii")


def _ascii_token(v):
    # %.9g is enough digits to round-trip any float32. Python prints every NaN
    # as "nan", so the sign is written out by hand; payload bits cannot be
    # expressed in text and come back as the default quiet NaN.
    if math.isnan(v):
        return "-nan" if math.copysign(1.0, v) < 0 else "nan"
    return format(v, ".9g")


def read_pcd(path, timestamp=0.0, frame_id=None):
    path = Path(path)
    return parse_pcd(path.read_bytes(), timestamp, frame_id if frame_id is not None else path.stem)


def save_pcd(path, cloud, encoding="binary"):
    atomic_write(path, write_pcd(cloud, encoding))


def crop(cloud, bounds):
    """Keep finite points inside the half-open box ``[min, max)`` on every axis.

    Point order is preserved.
    """
    pts = cloud.points
    keep = np.all(np.isfinite(pts), axis=1) & bounds.contains(pts[:, :3])
    return cloud.with_points(pts[keep])


def read_manifest(path):
    """Return ``[(pcd_path, timestamp), ...]`` with paths resolved against the manifest."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(",", 1)
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<path>,<timestamp>'")
        try:
            ts = float(parts[1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad timestamp {parts[1]!r}") from None
        out.append((path.parent / parts[0], ts))
    return out


def write_manifest(path, records, root=None):
    """Write ``(pcd_path, timestamp)`` records, paths relative to ``root`` (default: manifest dir)."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    lines = []
    for pcd_path, ts in records:
        rel = Path(pcd_path)
        if rel.is_absolute():
            rel = rel.relative_to(root.resolve()) if rel.is_relative_to(root.resolve()) else rel
        lines.append(f"{rel.as_posix()},{float(ts)!r}\n")
    atomic_write(path, "".join(lines))
