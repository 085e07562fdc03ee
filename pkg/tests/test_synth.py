import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavloc.cloud_io import read_manifest, read_pcd
from uavloc.cluster import read_ranges
from uavloc.geometry import read_estimates, read_labels
from uavloc.synth import SceneSpec, generate_dataset, generate_frame, split_indices
from uavloc.validation import ConfigError, ContractError

SPEC = SceneSpec(tunnel_length=14.0, wall_density=5.0,
                 waypoints=((0.0, 4.0, -1.0, 0.5), (2.0, 6.0, 0.5, 0.6)))

times = st.floats(0.0, 2.0, allow_nan=False)


@given(times)
@settings(max_examples=25)
def test_drone_points_inside_truth_box(t):
    f = generate_frame(SPEC, t)
    drone = f.cloud.xyz[f.drone_mask].astype(np.float64)
    assert len(drone) == 60
    half = np.array([f.truth_box.x_len, f.truth_box.y_len, f.truth_box.z_len]) / 2
    # float32 storage rounds points on the faces by a few ulps
    assert np.all(np.abs(drone - f.truth_box.center) <= half + 1e-5)
    np.testing.assert_allclose(f.truth_box.center, SPEC.position_at(t))


@given(times)
@settings(max_examples=25)
def test_drone_mean_near_trajectory(t):
    f = generate_frame(SPEC, t)
    mean = f.cloud.xyz[f.drone_mask].astype(np.float64).mean(axis=0)
    assert np.linalg.norm(mean - SPEC.position_at(t)) < 0.05


@given(times, st.floats(0.0, 0.05))
@settings(max_examples=25)
def test_scenery_clear_of_inflated_box(t, sigma):
    spec = SceneSpec(tunnel_length=14.0, wall_density=5.0, noise_sigma=sigma, clutter_count=5,
                     waypoints=SPEC.waypoints)
    f = generate_frame(spec, t)
    scene = f.cloud.xyz[~f.drone_mask].astype(np.float64)
    half = np.array([0.5, 0.5, 0.3]) / 2 + 0.1
    inside = np.all(np.abs(scene - f.truth_box.center) < half - 1e-6, axis=1)
    assert not inside.any()


def test_frame_is_deterministic_and_range_is_distance():
    a, b = generate_frame(SPEC, 1.3), generate_frame(SPEC, 1.3)
    assert a.cloud == b.cloud
    assert a.range_m == pytest.approx(np.linalg.norm(SPEC.position_at(1.3)))
    assert a.cloud.timestamp == 1.3


def test_time_outside_span():
    with pytest.raises(ContractError):
        generate_frame(SPEC, 2.5)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(tunnel_width=0)
    with pytest.raises(ConfigError):
        SceneSpec(waypoints=((1.0, 0, 0, 0), (0.0, 1, 1, 1)))
    with pytest.raises(ConfigError):
        SceneSpec(drone_points=3)


def test_split_examples():
    tr, te = split_indices(100, 0.75, seed=4)
    assert len(tr) == 75 and len(te) == 25
    assert set(tr) | set(te) == set(range(100)) and not set(tr) & set(te)
    tr2, te2 = split_indices(100, 0.75, seed=4)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    with pytest.raises(ConfigError):
        split_indices(10, 1.0)


def test_dataset_files_round_trip(tmp_path):
    ds = generate_dataset(SPEC, frame_rate=5.0, out_dir=tmp_path, encoding="ascii")
    assert len(ds.frames) == 10
    manifest = read_manifest(ds.files["manifest"])
    assert len(manifest) == 10
    for (path, ts), frame in zip(manifest, ds.frames):
        assert ts == frame.cloud.timestamp
        back = read_pcd(path, ts)
        assert back.points.tobytes() == frame.cloud.points.tobytes() and back.timestamp == ts
    labels = read_labels(ds.files["labels"])
    assert [c for _, c in labels] == [f.truth_box for f in ds.frames]
    assert read_estimates(ds.files["truth"]) == [f.truth for f in ds.frames]
    ranges = read_ranges(ds.files["range"])
    assert [r[1] for r in ranges] == [f.range_m for f in ds.frames]
    n_train = len(read_manifest(ds.files["manifest_train"]))
    assert n_train == len(ds.train) and n_train + len(read_manifest(ds.files["manifest_test"])) == 10
