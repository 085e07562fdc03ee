import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from _oracles import union_find_clusters
from uavloc.cloud_io import PointCloud
from uavloc.cluster import (
    Cluster,
    ClusterLocalizer,
    HeuristicConfig,
    ShellParams,
    VelocityGateState,
    apply_heuristics,
    euclidean_cluster,
    kmeans_cluster,
    localize_clustering,
    radius_pairs,
    read_ranges,
    shell_segment,
    velocity_gate,
    write_ranges,
)
from uavloc.geometry import PositionEstimate
from uavloc.synth import SceneSpec, generate_frame
from uavloc.validation import ConfigError, ContractError

CFG = HeuristicConfig(altimeter_height=0.5, height_tolerance=0.3, min_volume=0.01, max_aspect_diff=0.5)


def box_shell(center, extent=(0.5, 0.5, 0.3), n=60, seed=0):
    """Points on the surface of a box, with the eight corners included so the
    bbox is exactly ``extent``."""
    rng = np.random.default_rng(seed)
    half = np.asarray(extent) / 2
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = rng.integers(3, size=n)
    pts[np.arange(n), axis] = np.where(rng.random(n) < 0.5, -1, 1) * half[axis]
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * half
    return np.concatenate([pts, corners]) + center


def cloud_of(*parts):
    xyz = np.concatenate(parts)
    return PointCloud(np.c_[xyz, np.zeros(len(xyz))])


# -- shell -----------------------------------------------------------------------

def test_shell_examples():
    shell = ShellParams(10.0, 2.0)
    cloud = cloud_of(np.array([[9.0, 0, 0], [3.0, 0, 0], [12.0, 0, 0], [8.0, 0, 0]]))
    np.testing.assert_array_equal(shell_segment(cloud, shell).xyz[:, 0], [9, 12, 8])
    assert ShellParams(1.0, 2.0).inner == 0.0


def test_shell_params_validation():
    with pytest.raises(ConfigError):
        ShellParams(0.0)
    with pytest.raises(ConfigError):
        ShellParams(5.0, margin=-1.0)


@given(st.floats(0.5, 20), st.floats(0.1, 5), st.integers(0, 2**31))
def test_shell_matches_norm_filter_and_is_idempotent(rng_m, margin, seed):
    rng = np.random.default_rng(seed)
    cloud = cloud_of(rng.uniform(-25, 25, size=(300, 3)))
    shell = ShellParams(rng_m, margin)
    out = shell_segment(cloud, shell)
    r = np.sqrt((cloud.xyz.astype(np.float64) ** 2).sum(axis=1))
    keep = (r >= max(rng_m - margin, 0)) & (r <= rng_m + margin)
    assert out.points.tobytes() == cloud.points[keep].tobytes()
    assert shell_segment(out, shell) == out


# -- clustering ---------------------------------------------------------------

def test_two_groups_far_apart():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.05, (20, 3))
    b = rng.normal(0, 0.05, (20, 3)) + [10, 0, 0]
    clusters = euclidean_cluster(cloud_of(a, b), 0.5, 5)
    assert len(clusters) == 2
    assert [len(c) for c in clusters] == [20, 20]


def test_single_point_below_min_points():
    assert euclidean_cluster(cloud_of(np.zeros((1, 3))), 0.3, 2) == []
    assert euclidean_cluster(cloud_of(np.zeros((0, 3))), 0.3, 1) == []


def test_link_radius_is_inclusive():
    pts = np.array([[0, 0, 0], [0.25, 0, 0], [0.5, 0, 0]], float)
    assert len(euclidean_cluster(cloud_of(pts), 0.25, 1)) == 1
    assert len(euclidean_cluster(cloud_of(pts), 0.24, 1)) == 3


@given(st.integers(0, 2**31), st.floats(0.05, 1.0), st.integers(1, 6))
def test_clustering_matches_union_find(seed, radius, min_points):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 150))
    xyz = np.concatenate([rng.uniform(-2, 2, (n, 3)), rng.normal(0, 0.1, (n // 2, 3))])
    cloud = cloud_of(xyz)
    got = sorted(tuple(int(i) for i in c.point_indices) for c in euclidean_cluster(cloud, radius, min_points))
    assert got == union_find_clusters(cloud.xyz.astype(np.float64).tolist(), radius, min_points)


def test_radius_pairs_matches_brute_force(rng):
    xyz = rng.uniform(-1, 1, (200, 3))
    i, j = radius_pairs(xyz, 0.2)
    got = set(zip(np.minimum(i, j).tolist(), np.maximum(i, j).tolist()))
    d = np.linalg.norm(xyz[:, None] - xyz[None], axis=2)
    want = {(a, b) for a, b in zip(*np.nonzero(np.triu(d <= 0.2, 1)))}
    assert got == want


def test_cluster_bbox_is_tight_and_centroid_is_mean(rng):
    xyz = rng.normal(size=(30, 3))
    c = Cluster.from_points(np.arange(30), xyz)
    np.testing.assert_allclose(c.centroid, xyz.mean(axis=0))
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    np.testing.assert_allclose(c.bbox.center, (lo + hi) / 2)
    np.testing.assert_allclose([c.bbox.x_len, c.bbox.y_len, c.bbox.z_len], hi - lo)
    with pytest.raises(ContractError):
        Cluster.from_points([], xyz)


def test_kmeans_mode_partitions_points():
    a = box_shell([5, 0, 0.5], seed=1)
    b = box_shell([5, 3, 0.5], seed=2)
    clusters = kmeans_cluster(cloud_of(a, b), n_clusters=2, min_points=1)
    assert sorted(len(c) for c in clusters) == [len(a), len(b)]


# -- heuristics ---------------------------------------------------------------

def test_drone_kept_wall_dropped():
    drone = Cluster.from_points(np.arange(68), box_shell([5, 0, 0.5]))
    wall = Cluster.from_points(np.arange(68), box_shell([5, 0, 0.5], extent=(5, 0.2, 3)))
    assert apply_heuristics([wall, drone], CFG) == [drone]


@given(st.integers(0, 2**31))
def test_heuristics_match_predicate_oracle_and_are_monotone(seed):
    rng = np.random.default_rng(seed)
    clusters = [
        Cluster.from_points(np.arange(10), rng.uniform(-1, 1, (10, 3)) * rng.uniform(0.05, 2, 3)
                            + [0, 0, rng.uniform(-0.5, 1.5)])
        for _ in range(12)
    ]

    def ok(c):
        b = c.bbox
        lens = [b.x_len, b.y_len, b.z_len]
        diffs = [abs(p - q) for p in lens for q in lens]
        return abs(b.z_ctr - 0.5) <= 0.3 and b.x_len * b.y_len * b.z_len >= 0.01 and max(diffs) <= 0.5

    kept = apply_heuristics(clusters, CFG)
    assert [id(c) for c in kept] == [id(c) for c in clusters if ok(c)]
    loose = HeuristicConfig(0.5, 0.6, 0.005, 1.0)
    assert {id(c) for c in kept} <= {id(c) for c in apply_heuristics(clusters, loose)}


# -- localization ---------------------------------------------------------------

def test_single_drone_returns_its_bbox_center():
    drone = box_shell([9.0, 0.0, 0.5])
    wall = np.c_[np.linspace(0, 20, 400), np.full(400, 3.0), np.linspace(-1, 2, 400)]
    est = localize_clustering(cloud_of(wall, drone), ShellParams(9.0), CFG)
    np.testing.assert_allclose(est.xyz, [9.0, 0.0, 0.5], atol=1e-12)
    assert est.source == "clustering"


def test_empty_cloud_gives_no_estimate():
    assert localize_clustering(cloud_of(np.zeros((0, 3))), ShellParams(5.0), CFG) is None


def test_tie_break_prefers_range_closest_blob():
    near = box_shell([9.8, 0, 0.5], seed=1)
    far = box_shell([11.9, 0, 0.5], seed=2)
    est = localize_clustering(cloud_of(far, near), ShellParams(10.0), CFG)
    assert est.x == pytest.approx(9.8)


def test_unknown_method_is_config_error():
    with pytest.raises(ConfigError):
        localize_clustering(cloud_of(box_shell([5, 0, 0.5])), ShellParams(5.0), CFG, method="dbscan")


def test_synthetic_frame_within_5cm():
    frame = generate_frame(SceneSpec(noise_sigma=0.005), 4.0)
    est = localize_clustering(frame.cloud, ShellParams(frame.range_m), HeuristicConfig(frame.truth.z))
    centroid = frame.cloud.xyz[frame.drone_mask].astype(np.float64).mean(axis=0)
    assert np.linalg.norm(est.xyz - centroid) < 0.05


# -- velocity gate ----------------------------------------------------------------

def est(z, t):
    return PositionEstimate(0.0, 0.0, z, t)


def test_gate_examples():
    ok, s = velocity_gate(VelocityGateState(), est(1.0, 0.0))
    assert ok and s.last_estimate == est(1.0, 0.0)
    ok, s2 = velocity_gate(s, est(1.4, 1.0))
    assert ok and s2.last_estimate.z == 1.4
    ok, s3 = velocity_gate(s, est(2.0, 1.0))
    assert not ok and s3 == s


def test_gate_rejects_time_reversal_and_handles_zero_dt():
    _, s = velocity_gate(VelocityGateState(), est(1.0, 5.0))
    with pytest.raises(ContractError):
        velocity_gate(s, est(1.0, 4.0))
    assert velocity_gate(s, est(1.0, 5.0))[0]
    assert not velocity_gate(s, est(1.1, 5.0))[0]


@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(-1, 1)), min_size=1, max_size=30))
def test_accepted_sequence_obeys_speed_bound(steps):
    state, t, z = VelocityGateState(max_speed=0.5), 0.0, 0.0
    accepted = []
    for dt, dz in steps:
        t, z = t + dt, z + dz
        ok, state = velocity_gate(state, est(z, t))
        if ok:
            accepted.append(est(z, t))
    for a, b in zip(accepted, accepted[1:]):
        assert abs(b.z - a.z) <= 0.5 * (b.timestamp - a.timestamp) + 1e-12


# -- estimator -------------------------------------------------------------------

def test_estimator_params_and_clone():
    loc = ClusterLocalizer(margin=1.5, link_radius=0.25)
    params = loc.get_params()
    assert params["margin"] == 1.5 and params["link_radius"] == 0.25
    assert clone(loc).get_params() == params


def test_estimator_validates_on_fit():
    with pytest.raises(ConfigError):
        ClusterLocalizer(margin=-1).fit()
    with pytest.raises(ConfigError):
        ClusterLocalizer(method="nope").fit()


def test_estimator_predict_with_gate():
    clouds = [cloud_of(box_shell([9.0, 0, 0.5])), cloud_of(box_shell([9.0, 3.0, 0.5]))]
    clouds = [c.with_points(c.points) for c in clouds]
    clouds = [PointCloud(c.points, t) for c, t in zip(clouds, (0.0, 0.1))]
    free = ClusterLocalizer(altimeter_height=0.5).fit().predict(clouds, [9.0, 9.5])
    assert all(p is not None for p in free)
    gated = ClusterLocalizer(altimeter_height=0.5, velocity_gate=True).fit().predict(clouds, [9.0, 9.5])
    assert gated[0] is not None and gated[1] is None


def test_missing_or_bad_range_gives_none():
    loc = ClusterLocalizer(altimeter_height=0.5).fit()
    c = cloud_of(box_shell([9.0, 0, 0.5]))
    assert loc.localize(c, float("nan")) is None
    assert loc.localize(c, 0.0) is None


def test_range_file_round_trip(tmp_path):
    rows = [(0.0, 5.0, 0.5), (0.1, 5.1, None)]
    write_ranges(tmp_path / "r.csv", rows)
    assert read_ranges(tmp_path / "r.csv") == rows
    (tmp_path / "bad.csv").write_text("0.0\n")
    with pytest.raises(ValueError):
        read_ranges(tmp_path / "bad.csv")
