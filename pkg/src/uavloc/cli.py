"""``uavloc`` command line: synth, cluster, encode, train, detect, evaluate.

Every flag can also be set through an environment variable named ``UAVLOC_``
plus the flag name upper-cased with dashes turned into underscores, for example
``UAVLOC_MANIFEST`` or ``UAVLOC_Z_OFFSET``. Flags given on the command line
win over the environment.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed input), 4 training divergence, 5 acceptance-gate failure.
"""

import argparse
import dataclasses
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from ._fileio import atomic_write
from .cloud_io import PcdError, crop, read_manifest, read_pcd
from .cluster import ClusterLocalizer, VelocityGateState, read_ranges, velocity_gate
from .detector.estimator import detect
from .detector.network import PillarNet
from .detector.train import TrainingDivergedError, train
from .detector.weights import WeightsFormatError, dump_weights, load_weights
from .evaluation import (
    DEFAULT_MAX_DT,
    align_nearest,
    evaluate_method,
    fit_z_offset,
    report,
)
from .geometry import read_estimates, read_labels, write_estimates
from .pillars import dump_pillars, encode_pillars
from .synth import generate_dataset
from .validation import ConfigError, ContractError

log = logging.getLogger("uavloc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_GATE = 5

ENV_PREFIX = "UAVLOC_"
TIME_TOL = 1e-6


class DataError(Exception):
    pass


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            flag = "--" + name.replace("_", "-")
            raise ConfigError(f"{args.command} needs {flag} (or {ENV_PREFIX}{name.upper()})")


def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _match_times(times, query, tol=TIME_TOL):
    """Index into sorted ``times`` of the entry equal to ``query`` within ``tol``, or -1."""
    if len(times) == 0:
        return -1
    k = int(np.searchsorted(times, query))
    best = -1
    for j in (k - 1, k):
        if 0 <= j < len(times) and abs(times[j] - query) <= tol:
            if best < 0 or abs(times[j] - query) < abs(times[best] - query):
                best = j
    return best


def _load_frames(manifest):
    for path, ts in read_manifest(_existing(manifest, "manifest")):
        if not Path(path).is_file():
            raise DataError(f"point cloud listed in manifest not found: {path}")
        yield path, read_pcd(path, timestamp=ts)


def _seed_header(args):
    return [f"seed: {args.seed}"]


# -- subcommands -------------------------------------------------------------

def cmd_synth(args):
    _require(args, "out")
    cfg = cfgmod.read_config(args.scene_config)
    spec, frame_rate, split = cfgmod.scene_from_config(cfg)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.frame_rate is not None:
        frame_rate = args.frame_rate
    out = Path(args.out)
    ds = generate_dataset(spec, frame_rate, split, out_dir=out, encoding=args.encoding)
    scene_text = cfgmod.to_section("scene", spec).rstrip("\n")
    atomic_write(out / "scene.cfg", f"{scene_text}\nframe_rate = {frame_rate!r}\nsplit = {split!r}\n")
    print(f"wrote {len(ds.frames)} frames ({len(ds.train_idx)} train / {len(ds.test_idx)} test) to {out}")
    return EXIT_OK


def cmd_cluster(args):
    _require(args, "manifest", "range", "out")
    cfg = cfgmod.read_config(args.cluster_config)
    params = cfgmod.cluster_from_config(cfg)
    if args.velocity_gate:
        params["velocity_gate"] = True
    loc = ClusterLocalizer(**params, random_state=args.seed).fit()
    ranges = read_ranges(_existing(args.range, "range file"))
    r_times = np.array([r[0] for r in ranges])
    state = VelocityGateState(max_speed=loc.max_speed)
    estimates, scans, rejected = [], 0, 0
    for path, cloud in _load_frames(args.manifest):
        scans += 1
        k = _match_times(r_times, cloud.timestamp)
        if k < 0:
            log.warning("no range sample for %s (t=%r); frame skipped", path, cloud.timestamp)
            continue
        _, rng, alt = ranges[k]
        est = loc.localize(cloud, rng, alt)
        if est is None:
            continue
        if loc.velocity_gate:
            accepted, state = velocity_gate(state, est)
            if not accepted:
                rejected += 1
                continue
        estimates.append(est)
    write_estimates(args.out, estimates, header=_seed_header(args))
    gate = f", {rejected} rejected by velocity gate" if loc.velocity_gate else ""
    print(f"updates {len(estimates)} / scans {scans}{gate}")
    return EXIT_OK


def _grid_and_limits(args):
    cfg = cfgmod.read_config(args.grid_config)
    grid = cfgmod.grid_from_config(cfg, args.preset)
    max_p, max_n = cfgmod.pillar_limits_from_config(cfg, args.preset)
    return grid, max_p, max_n


def cmd_encode(args):
    _require(args, "manifest", "out")
    grid, max_p, max_n = _grid_and_limits(args)
    out = Path(args.out)
    n = 0
    for path, cloud in _load_frames(args.manifest):
        t = encode_pillars(crop(cloud, grid.bounds), grid, max_p, max_n, args.seed)
        atomic_write(out / (Path(path).stem + ".pil"), dump_pillars(t))
        n += 1
    print(f"encoded {n} clouds into {out} (grid {grid.x_n} x {grid.y_n})")
    return EXIT_OK


def _model_configs(args):
    grid, max_p, max_n = _grid_and_limits(args)
    net = cfgmod.network_from_config(cfgmod.read_config(args.net_config))
    return grid, net, max_p, max_n


def cmd_train(args):
    _require(args, "manifest", "labels", "out")
    grid, net, max_p, max_n = _model_configs(args)
    tr = cfgmod.train_from_config(cfgmod.read_config(args.train_config), args.preset)
    if args.seed is not None:
        tr = dataclasses.replace(tr, seed=args.seed)
    labels = read_labels(_existing(args.labels, "labels file"))
    l_times = np.array(sorted({ts for ts, _ in labels}))
    by_time = {}
    for ts, box in labels:
        by_time.setdefault(ts, []).append(box)
    dataset = []
    for path, cloud in _load_frames(args.manifest):
        k = _match_times(l_times, cloud.timestamp)
        if k < 0:
            log.warning("no label for %s (t=%r); frame skipped", path, cloud.timestamp)
            continue
        pillars = encode_pillars(crop(cloud, grid.bounds), grid, max_p, max_n, tr.seed)
        dataset.append((pillars, by_time[l_times[k]]))
    if not dataset:
        raise DataError("no labelled frames to train on")

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.5f", epoch + 1, tr.epochs, loss)

    result = train(dataset, tr, net, grid, callback=progress)
    atomic_write(args.out, dump_weights(result.net.state_dict()))
    trace = Path(args.loss_trace) if args.loss_trace else Path(str(args.out) + ".loss.csv")
    rows = [f"# seed: {tr.seed}\n", "epoch,learning_rate,loss\n"]
    rows += [f"{e},{lr!r},{loss!r}\n" for e, (lr, loss) in enumerate(zip(result.lr_trace, result.loss_trace))]
    atomic_write(trace, "".join(rows))
    print(f"trained {tr.epochs} epochs on {len(dataset)} frames; "
          f"loss {result.loss_trace[0]:.4f} -> {result.loss_trace[-1]:.4f}; weights {args.out}")
    return EXIT_OK


def cmd_detect(args):
    _require(args, "manifest", "weights", "out")
    grid, net, max_p, max_n = _model_configs(args)
    model = PillarNet(net, grid)
    try:
        model.load_state_dict(load_weights(_existing(args.weights, "weights file").read_bytes()))
    except (KeyError, ContractError) as exc:
        raise ConfigError(f"weights do not match the network config: {exc}") from None
    estimates, scans = [], 0
    for _, cloud in _load_frames(args.manifest):
        scans += 1
        _, est = detect(cloud, model, max_p, max_n, args.seed)
        if est is not None:
            estimates.append(est)
    write_estimates(args.out, estimates, header=_seed_header(args))
    print(f"updates {len(estimates)} / scans {scans}")
    return EXIT_OK


def _parse_z_offset(text):
    if text is None or text == "":
        return 0.0
    if text == "fit":
        return "fit"
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"--z-offset must be a number or 'fit', got {text!r}") from None
    if not math.isfinite(v):
        raise ConfigError("--z-offset must be finite")
    return v


def cmd_evaluate(args):
    _require(args, "truth", "estimates")
    truth = read_estimates(_existing(args.truth, "truth file"))
    z_arg = _parse_z_offset(args.z_offset)
    scans = None
    if args.manifest:
        scans = len(read_manifest(_existing(args.manifest, "manifest")))
    rows = []
    for spec in args.estimates:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        est = read_estimates(_existing(path, "estimate file"))
        z = z_arg
        if z == "fit":
            pairs = align_nearest(est, truth, args.max_dt)
            z = fit_z_offset(pairs) if pairs else 0.0
        rows.append(evaluate_method(name, est, truth, scans, args.max_dt, z))
    csv_text, text = report(rows)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        atomic_write(out, csv_text)
        atomic_write(out.with_suffix(".txt"), text)
    if args.rms_ceiling is not None:
        failed = [r.name for r in rows if not r.total.rms <= args.rms_ceiling]
        if failed:
            print(f"gate failed: 3D RMS above {args.rms_ceiling} m for {', '.join(failed)}",
                  file=sys.stderr)
            return EXIT_GATE
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--preset", choices=("desk", "tunnel"), default="desk",
                   help="grid / pillar / training preset (default desk)")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_model(p):
    p.add_argument("--manifest", help="manifest CSV of <pcd path>,<timestamp>")
    p.add_argument("--grid-config", help="config with [grid] / [pillars] sections")
    p.add_argument("--net-config", help="config with a [network] section")


def build_parser():
    parser = argparse.ArgumentParser(prog="uavloc", description="UAV localization in LiDAR scans.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tunnel flight")
    _add_common(p)
    p.add_argument("--scene-config", help="config with a [scene] section")
    p.add_argument("--frame-rate", type=float)
    p.add_argument("--encoding", choices=("binary", "ascii"), default="binary")
    p.set_defaults(func=cmd_synth, seed=None)

    p = sub.add_parser("cluster", help="clustering localizer over a manifest")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--range", help="range CSV of <timestamp>,<range_m>[,<altimeter_m>]")
    p.add_argument("--cluster-config", help="config with [shell] / [heuristics] / [cluster] sections")
    p.add_argument("--velocity-gate", action="store_true", help="reject estimates faster than max_speed")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("encode", help="dump pillar tensors for each cloud")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--grid-config")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train the pillar detector")
    _add_common(p)
    _add_model(p)
    p.add_argument("--labels", help="label CSV")
    p.add_argument("--train-config", help="config with a [train] section")
    p.add_argument("--loss-trace", help="loss trace CSV (default <out>.loss.csv)")
    p.set_defaults(func=cmd_train, seed=None)

    p = sub.add_parser("detect", help="run a trained detector over a manifest")
    _add_common(p)
    _add_model(p)
    p.add_argument("--weights", help="weights file from 'train'")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score estimate files against the truth")
    _add_common(p)
    p.add_argument("--truth", help="truth CSV (timestamp,x,y,z,truth)")
    p.add_argument("--estimates", action="append",
                   help="[name=]path of an estimate CSV; repeat for several methods")
    p.add_argument("--manifest", help="count scans from this manifest instead of the truth")
    p.add_argument("--z-offset", help="constant z correction in meters, or 'fit'")
    p.add_argument("--max-dt", type=float, default=DEFAULT_MAX_DT)
    p.add_argument("--rms-ceiling", type=float, help="fail (exit 5) when a 3D RMS exceeds this")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_env(parser, argv, environ):
    """Use ``UAVLOC_*`` variables as defaults for flags not given on the command line."""
    if not argv or argv[0].startswith("-"):
        return
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    p = sub.choices.get(argv[0])
    if p is None:
        return
    for action in p._actions:
        flags = [s for s in action.option_strings if s.startswith("--")]
        if not flags or action.dest == "help":
            continue
        value = environ.get(ENV_PREFIX + flags[0][2:].upper().replace("-", "_"))
        if value is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = value.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._CountAction):
            value = int(value)
        elif isinstance(action, argparse._AppendAction):
            value = [v for v in value.split(os.pathsep) if v]
        elif action.type is not None:
            try:
                value = action.type(value)
            except ValueError:
                parser.error(f"bad value for {ENV_PREFIX}{action.dest.upper()}: {value!r}")
        if action.choices is not None and value not in action.choices:
            parser.error(f"{ENV_PREFIX}{action.dest.upper()} must be one of {list(action.choices)}")
        p.set_defaults(**{action.dest: value})


def main(argv=None, environ=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    environ = os.environ if environ is None else environ
    parser = build_parser()
    _apply_env(parser, argv, environ)
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError, PcdError, WeightsFormatError, ContractError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
