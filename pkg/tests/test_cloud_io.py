import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _fuzz import fuzz
from uavloc.cloud_io import (
    CropBounds,
    PcdParseError,
    PcdTruncatedError,
    PcdUnsupportedError,
    PointCloud,
    crop,
    parse_pcd,
    read_manifest,
    read_pcd,
    save_pcd,
    write_manifest,
    write_pcd,
)
from uavloc.validation import ConfigError

float32s = st.floats(width=32, allow_nan=True, allow_infinity=True)
clouds = arrays(np.float32, st.tuples(st.integers(0, 40), st.just(4)), elements=float32s)


def quiet_nan_only(pts):
    # text can carry a NaN's sign but not its payload
    pts = pts.copy()
    nan = np.isnan(pts)
    pts[nan] = np.copysign(np.float32("nan"), pts[nan])
    return pts


def header(fields="x y z intensity", size="4 4 4 4", typ="F F F F", count=None, n=1, data="ascii",
           extra=""):
    count = count or " ".join("1" for _ in fields.split())
    return (
        f"VERSION 0.7\nFIELDS {fields}\nSIZE {size}\nTYPE {typ}\nCOUNT {count}\n"
        f"WIDTH {n}\nHEIGHT 1\n{extra}POINTS {n}\nDATA {data}\n"
    ).encode()


@given(clouds, st.sampled_from(["ascii", "binary"]))
def test_pcd_round_trip_is_bitwise(pts, encoding):
    if encoding == "ascii":
        pts = quiet_nan_only(pts)
    cloud = PointCloud(pts, 2.5, "scan")
    raw = write_pcd(cloud, encoding)
    back = parse_pcd(raw, 2.5, "scan")
    assert back == cloud
    assert write_pcd(back, encoding) == raw


def test_ascii_keeps_nan_sign_but_not_payload():
    bits = np.array([[0x7FC00000, 0xFFC00000, 0x7FC00001, 0xFF800001]], dtype=np.uint32)
    cloud = PointCloud(bits.view(np.float32))
    raw = write_pcd(cloud, "ascii")
    assert raw.endswith(b"nan -nan nan -nan\n")
    back = parse_pcd(raw).points.view(np.uint32)
    np.testing.assert_array_equal(back, [[0x7FC00000, 0xFFC00000, 0x7FC00000, 0xFFC00000]])
    assert parse_pcd(write_pcd(cloud, "binary")) == cloud


def test_ascii_and_binary_decode_identically(rng):
    cloud = PointCloud(rng.normal(size=(30, 4)).astype(np.float32))
    assert parse_pcd(write_pcd(cloud, "ascii")) == parse_pcd(write_pcd(cloud, "binary"))


def test_empty_cloud(tmp_path):
    empty = PointCloud(np.zeros((0, 4), np.float32))
    save_pcd(tmp_path / "e.pcd", empty, "binary")
    assert len(read_pcd(tmp_path / "e.pcd")) == 0


def test_missing_intensity_defaults_to_zero():
    raw = header("x y z", "4 4 4", "F F F", n=2) + b"1 2 3\n4 5 6\n"
    cloud = parse_pcd(raw)
    np.testing.assert_array_equal(cloud.points, [[1, 2, 3, 0], [4, 5, 6, 0]])


def test_extra_fields_padding_and_integer_types():
    raw = header("x y z _ intensity rgb", "4 4 4 1 2 4", "F F F U U U", count="1 1 1 3 1 1", n=1)
    raw += b"1.5 2.5 3.5 9 9 9 70 123\n"
    cloud = parse_pcd(raw)
    np.testing.assert_array_equal(cloud.points, [[1.5, 2.5, 3.5, 70.0]])


def test_binary_with_float64_fields():
    rec = np.array([(1.0, 2.0, 3.0, 4.0)], dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("i", "<f8")])
    raw = header("x y z intensity", "8 8 8 8", data="binary") + rec.tobytes()
    np.testing.assert_array_equal(parse_pcd(raw).points, [[1, 2, 3, 4]])


def test_binary_truncation_reports_sizes():
    raw = header(n=3, data="binary") + b"\0" * 20
    with pytest.raises(PcdTruncatedError) as exc:
        parse_pcd(raw)
    assert exc.value.expected == 48 and exc.value.actual == 20


def test_ascii_truncation():
    with pytest.raises(PcdTruncatedError):
        parse_pcd(header(n=3) + b"1 2 3 4\n")


def test_binary_compressed_is_unsupported():
    with pytest.raises(PcdUnsupportedError):
        parse_pcd(header(data="binary_compressed") + b"\0" * 64)


def test_malformed_header_carries_line_number():
    raw = header(size="4 4 4") + b"1 2 3 4\n"
    with pytest.raises(PcdParseError) as exc:
        parse_pcd(raw)
    assert exc.value.line == 3


def test_missing_xyz_is_rejected():
    with pytest.raises(PcdParseError):
        parse_pcd(header("a b c", "4 4 4", "F F F") + b"1 2 3\n")


def test_nan_points_survive_parsing():
    cloud = parse_pcd(header(n=1) + b"nan 1 2 3\n")
    assert np.isnan(cloud.points[0, 0])


def test_points_are_read_only():
    cloud = PointCloud(np.zeros((2, 4), np.float32))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_three_column_input_is_padded():
    assert PointCloud(np.ones((2, 3))).points.shape == (2, 4)


def test_crop_is_half_open_and_preserves_order():
    b = CropBounds(0, 1, 0, 1, 0, 1)
    pts = np.array([[0.5, 0.5, 0.5, 1], [1.0, 0.5, 0.5, 2], [0, 0, 0, 3], [0.2, np.nan, 0.1, 4],
                    [0.9, 0.1, 0.999, 5]], np.float32)
    out = crop(PointCloud(pts), b)
    np.testing.assert_array_equal(out.points[:, 3], [1, 3, 5])


@given(clouds)
def test_crop_keeps_exactly_the_points_inside(pts):
    b = CropBounds(-1, 1, -2, 2, -0.5, 0.5)
    out = crop(PointCloud(pts), b).points
    with np.errstate(invalid="ignore"):
        inside = (
            np.all(np.isfinite(pts), axis=1)
            & (pts[:, 0] >= -1) & (pts[:, 0] < 1)
            & (pts[:, 1] >= -2) & (pts[:, 1] < 2)
            & (pts[:, 2] >= -0.5) & (pts[:, 2] < 0.5)
        )
    assert out.tobytes() == pts[inside].tobytes()


def test_crop_bounds_validation():
    with pytest.raises(ConfigError):
        CropBounds(1, 0, 0, 1, 0, 1)


def test_manifest_round_trip(tmp_path):
    recs = [(tmp_path / "clouds" / f"f{i}.pcd", i * 0.1) for i in range(5)]
    write_manifest(tmp_path / "m.csv", recs)
    text = (tmp_path / "m.csv").read_text()
    assert text.startswith("clouds/f0.pcd,0.0\n")
    assert read_manifest(tmp_path / "m.csv") == recs


def test_manifest_rejects_bad_rows(tmp_path):
    (tmp_path / "m.csv").write_text("a.pcd,notanumber\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.csv")


def test_short_fuzz_finds_no_crash():
    n, failures = fuzz(2.0, seed=1)
    assert n > 100
    assert not failures, failures[0]
