import csv
import io

import numpy as np
import pytest

from uavloc import cli
from uavloc.cloud_io import read_manifest
from uavloc.detector.network import NetworkConfig, PillarNet
from uavloc.detector.train import TrainingDivergedError
from uavloc.detector.weights import dump_weights, load_weights
from uavloc.geometry import read_estimates
from uavloc.pillars import GridParams

SCENE = """
[scene]
tunnel_length = 14.0
wall_density = 5.0
waypoints = ((0.0, 4.0, -1.0, 0.5), (2.0, 4.6, -0.8, 0.5))
frame_rate = 10
split = 0.75
"""
GRID = """
[grid]
x_min = 0.0
x_max = 8.0
y_min = -4.0
y_max = 4.0
z_min = -2.0
z_max = 2.0
x_step = 0.25
y_step = 0.25
[pillars]
max_pillars = 800
max_points_per_pillar = 16
"""
NET = "[network]\npfn_channels = 4\nbackbone_blocks = ((1, 4, 2),)\nupsample_channels = (4,)\n"


def run(*argv, env=None):
    return cli.main([str(a) for a in argv], environ=env or {})


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.cfg").write_text(SCENE)
    (root / "grid.cfg").write_text(GRID)
    (root / "net.cfg").write_text(NET)
    assert run("synth", "--scene-config", root / "scene.cfg", "--out", root / "ds", "--seed", 3) == 0
    return root


def files_of(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_layout_and_determinism(data, tmp_path):
    ds = data / "ds"
    for name in ("manifest.csv", "labels.csv", "truth.csv", "range.csv", "scene.cfg"):
        assert (ds / name).is_file()
    # 10 Hz over a 2 s trajectory
    assert len(read_manifest(ds / "manifest.csv")) == 20
    assert run("synth", "--scene-config", data / "scene.cfg", "--out", tmp_path / "again", "--seed", 3) == 0
    assert files_of(tmp_path / "again") == files_of(ds)


def test_cluster_updates_and_seed_header(data, capsys):
    ds = data / "ds"
    out = data / "cluster.csv"
    assert run("cluster", "--manifest", ds / "manifest.csv", "--range", ds / "range.csv", "--out", out) == 0
    assert "updates" in capsys.readouterr().out
    est = read_estimates(out)
    assert len(est) >= 0.95 * 20
    assert out.read_text().startswith("# seed: 0\n")


def test_cluster_velocity_gate_bound(data):
    ds = data / "ds"
    out = data / "gated.csv"
    assert run("cluster", "--manifest", ds / "manifest.csv", "--range", ds / "range.csv", "--out", out,
               "--velocity-gate") == 0
    est = read_estimates(out)
    assert est
    for a, b in zip(est, est[1:]):
        assert np.linalg.norm(b.xyz - a.xyz) <= 0.5 * (b.timestamp - a.timestamp) + 1e-9


def test_cluster_missing_range_rows_are_skipped(data, tmp_path, caplog):
    ds = data / "ds"
    lines = (ds / "range.csv").read_text().splitlines(keepends=True)
    (tmp_path / "r.csv").write_text("".join(lines[:5]))
    out = tmp_path / "e.csv"
    assert run("cluster", "--manifest", ds / "manifest.csv", "--range", tmp_path / "r.csv", "--out", out) == 0
    assert len(read_estimates(out)) <= 5
    assert "frame skipped" in caplog.text


def test_empty_manifest_gives_empty_csv(data, tmp_path):
    (tmp_path / "m.csv").write_text("")
    out = tmp_path / "e.csv"
    assert run("cluster", "--manifest", tmp_path / "m.csv", "--range", data / "ds" / "range.csv",
               "--out", out) == 0
    assert read_estimates(out) == []


def test_environment_overrides(data, tmp_path):
    ds = data / "ds"
    out = tmp_path / "env.csv"
    env = {"UAVLOC_MANIFEST": str(ds / "manifest.csv"), "UAVLOC_RANGE": str(ds / "range.csv"),
           "UAVLOC_OUT": str(out)}
    assert run("cluster", env=env) == 0
    assert out.is_file()
    # the command line wins
    other = tmp_path / "flag.csv"
    assert run("cluster", "--out", other, env=env) == 0
    assert other.is_file()


def test_encode_writes_pillar_dumps(data, tmp_path):
    assert run("encode", "--manifest", data / "ds" / "manifest.csv", "--grid-config", data / "grid.cfg",
               "--out", tmp_path) == 0
    dumps = sorted(tmp_path.glob("*.pil"))
    assert len(dumps) == 20 and dumps[0].read_bytes()[:4] == b"PILT"


def test_train_then_detect(data, tmp_path):
    ds = data / "ds"
    (tmp_path / "train.cfg").write_text("[train]\nepochs = 2\n")
    w = tmp_path / "w.bin"
    common = ["--grid-config", data / "grid.cfg", "--net-config", data / "net.cfg"]
    assert run("train", "--manifest", ds / "manifest_train.csv", "--labels", ds / "labels.csv",
               "--train-config", tmp_path / "train.cfg", "--out", w, "--seed", 5, *common) == 0
    trace = (tmp_path / "w.bin.loss.csv").read_text().splitlines()
    assert trace[0] == "# seed: 5" and len(trace) == 2 + 2
    assert set(load_weights(w.read_bytes())) >= {"pfn.linear.weight", "head.cls.bias"}
    assert run("detect", "--manifest", ds / "manifest_test.csv", "--weights", w, "--out",
               tmp_path / "d.csv", *common) == 0
    read_estimates(tmp_path / "d.csv")


def test_untrained_detector_is_all_np(data, tmp_path, capsys):
    ds = data / "ds"
    grid = GridParams(0.0, 8.0, -4.0, 4.0, -2.0, 2.0, 0.25, 0.25, ds_factor=2)
    net = NetworkConfig(pfn_channels=4, backbone_blocks=((1, 4, 2),), upsample_channels=(4,))
    (tmp_path / "w.bin").write_bytes(dump_weights(PillarNet(net, grid).state_dict()))
    out = tmp_path / "d.csv"
    assert run("detect", "--manifest", ds / "manifest.csv", "--weights", tmp_path / "w.bin", "--out", out,
               "--grid-config", data / "grid.cfg", "--net-config", data / "net.cfg") == 0
    assert read_estimates(out) == []
    capsys.readouterr()
    assert run("evaluate", "--truth", ds / "truth.csv", "--estimates", f"net={out}") == 0
    assert "NP" in capsys.readouterr().out


def test_detect_with_mismatched_weights_is_config_error(data, tmp_path):
    grid = GridParams(0.0, 8.0, -4.0, 4.0, -2.0, 2.0, 0.25, 0.25, ds_factor=2)
    (tmp_path / "w.bin").write_bytes(dump_weights(PillarNet(NetworkConfig(), grid).state_dict()))
    assert run("detect", "--manifest", data / "ds" / "manifest.csv", "--weights", tmp_path / "w.bin",
               "--out", tmp_path / "d.csv", "--grid-config", data / "grid.cfg",
               "--net-config", data / "net.cfg") == cli.EXIT_CONFIG


def test_evaluate_two_methods(data, tmp_path, capsys):
    ds = data / "ds"
    clus = data / "cluster.csv"
    if not clus.is_file():
        run("cluster", "--manifest", ds / "manifest.csv", "--range", ds / "range.csv", "--out", clus)
    shifted = tmp_path / "shifted.csv"
    rows = [l for l in clus.read_text().splitlines() if not l.startswith("#")]
    parts = [r.split(",") for r in rows]
    shifted.write_text("".join(f"{p[0]},{p[1]},{p[2]},{float(p[3]) - 2.42!r},network\n" for p in parts))
    out = tmp_path / "report.csv"
    assert run("evaluate", "--truth", ds / "truth.csv", "--estimates", f"clustering={clus}",
               "--estimates", f"network={shifted}", "--z-offset", "fit", "--manifest", ds / "manifest.csv",
               "--out", out) == 0
    table = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["method"] for r in table] == ["clustering", "network"]
    assert float(table[1]["z_offset"]) == pytest.approx(2.42 + float(table[0]["z_offset"]), abs=1e-6)
    assert table[0]["scans"] == "20"
    assert (tmp_path / "report.txt").read_text() in capsys.readouterr().out


def test_exit_codes(data, tmp_path, monkeypatch):
    ds = data / "ds"
    # missing input file
    assert run("cluster", "--manifest", tmp_path / "nope.csv", "--range", ds / "range.csv",
               "--out", tmp_path / "e.csv") == cli.EXIT_DATA
    # missing required flag, bad config key, bad z offset
    assert run("cluster", "--range", ds / "range.csv", "--out", tmp_path / "e.csv") == cli.EXIT_CONFIG
    (tmp_path / "bad.cfg").write_text("[cluster]\nradius = 1\n")
    assert run("cluster", "--manifest", ds / "manifest.csv", "--range", ds / "range.csv",
               "--cluster-config", tmp_path / "bad.cfg", "--out", tmp_path / "e.csv") == cli.EXIT_CONFIG
    assert run("evaluate", "--truth", ds / "truth.csv", "--estimates", ds / "truth.csv",
               "--z-offset", "up") == cli.EXIT_CONFIG
    # acceptance gate
    assert run("evaluate", "--truth", ds / "truth.csv", "--estimates", ds / "truth.csv",
               "--rms-ceiling", 0.1) == 0
    (tmp_path / "far.csv").write_text("0.0,0,0,0,clustering\n")
    assert run("evaluate", "--truth", ds / "truth.csv", "--estimates", tmp_path / "far.csv",
               "--rms-ceiling", 0.1) == cli.EXIT_GATE

    # divergence
    def boom(*a, **k):
        raise TrainingDivergedError(3, float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--manifest", ds / "manifest.csv", "--labels", ds / "labels.csv",
               "--out", tmp_path / "w.bin", "--grid-config", data / "grid.cfg",
               "--net-config", data / "net.cfg") == cli.EXIT_DIVERGED
    assert not (tmp_path / "w.bin").exists()
