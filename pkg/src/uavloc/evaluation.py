"""Position-error evaluation: outcome categories, error statistics, time
alignment against the reference trajectory, and constant-offset correction.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import PositionEstimate, position_error
from .validation import ContractError, check_sorted

__all__ = [
    "Outcome",
    "ErrorStats",
    "AlignedPair",
    "RP_THRESHOLD",
    "CP_THRESHOLD",
    "classify",
    "axis_stats",
    "align_nearest",
    "apply_offset",
    "fit_z_offset",
    "MethodReport",
    "evaluate_method",
    "report",
]

RP_THRESHOLD = 0.20
CP_THRESHOLD = 0.40
DEFAULT_MAX_DT = 0.15
PAPER_Z_OFFSET = (0.0, 0.0, 2.42)


class Outcome(str, Enum):
    NP = "NP"  # no prediction
    WP = "WP"  # wrong: d > 0.40 m
    CP = "CP"  # close: 0.20 <= d <= 0.40 m
    RP = "RP"  # right: d < 0.20 m


def classify(prediction, truth):
    if truth is None:
        raise ContractError("classify needs a truth sample")
    if prediction is None:
        return Outcome.NP
    d = position_error(prediction, truth)
    if d < RP_THRESHOLD:
        return Outcome.RP
    if d <= CP_THRESHOLD:
        return Outcome.CP
    return Outcome.WP


@dataclass(frozen=True)
class ErrorStats:
    rms: float
    mean: float
    std: float
    max: float
    n: int

    @classmethod
    def empty(cls):
        return cls(math.nan, math.nan, math.nan, math.nan, 0)


def axis_stats(errors, signed=False):
    """RMS, mean, standard deviation and maximum of an error series.

    ``errors`` of shape (n,) gives one ErrorStats; (n, k) gives a list with one
    per column. By default mean/std/max are taken over absolute errors; with
    ``signed=True`` mean and std use the signed values (max stays absolute).
    The standard deviation uses the n - 1 denominator (0 when n == 1).
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim == 2:
        return [axis_stats(e[:, k], signed) for k in range(e.shape[1])]
    if e.ndim != 1 or e.size == 0:
        raise ContractError("axis_stats needs a non-empty 1-D series")
    n = e.size
    vals = e if signed else np.abs(e)
    std = float(np.std(vals, ddof=1)) if n > 1 else 0.0
    return ErrorStats(
        rms=float(np.sqrt(np.mean(e * e))),
        mean=float(np.mean(vals)),
        std=std,
        max=float(np.max(np.abs(e))),
        n=int(n),
    )


@dataclass(frozen=True)
class AlignedPair:
    estimate: PositionEstimate
    truth: PositionEstimate
    dt: float


def _times(series, name):
    return check_sorted([s.timestamp for s in series], name)


def align_nearest(estimates, truth, max_dt=DEFAULT_MAX_DT):
    """Pair each estimate with the truth sample nearest in time.

    Pairs further apart than ``max_dt`` seconds are dropped; equidistant truth
    samples resolve to the earlier one. Both series must be time-sorted.
    """
    te = _times(estimates, "estimates")
    tt = _times(truth, "truth")
    if len(tt) == 0 or len(te) == 0:
        return []
    hi = np.clip(np.searchsorted(tt, te, side="left"), 0, len(tt) - 1)
    lo = np.clip(hi - 1, 0, len(tt) - 1)
    d_hi = np.abs(tt[hi] - te)
    d_lo = np.abs(te - tt[lo])
    pick = np.where(d_lo <= d_hi, lo, hi)
    out = []
    for k, j in enumerate(pick):
        dt = abs(te[k] - tt[j])
        if dt <= max_dt:
            out.append(AlignedPair(estimates[k], truth[j], float(dt)))
    return out


def apply_offset(estimates, offset):
    """Add a constant ``(dx, dy, dz)`` to every estimate."""
    return [e.shifted(offset) for e in estimates]


def fit_z_offset(pairs):
    """Least-squares constant z correction: mean of ``z_truth - z_estimate``."""
    if not pairs:
        raise ContractError("fit_z_offset needs at least one aligned pair")
    return float(np.mean([p.truth.z - p.estimate.z for p in pairs]))


@dataclass
class MethodReport:
    name: str
    updates: int
    scans: int
    axis: list  # ErrorStats for x, y, z
    total: ErrorStats  # 3D error
    outcomes: dict = field(default_factory=dict)
    z_offset: float = 0.0


def evaluate_method(name, estimates, truth, scans=None, max_dt=DEFAULT_MAX_DT, z_offset=0.0):
    """Build a :class:`MethodReport` for one estimate series against the truth.

    Per-axis and 3D statistics come from estimate-to-truth nearest-epoch pairs.
    Outcome counts are per truth sample, so RP + CP + WP never exceeds the
    number of updates.
    """
    estimates = sorted(estimates, key=lambda e: e.timestamp)
    truth = sorted(truth, key=lambda e: e.timestamp)
    if z_offset:
        estimates = apply_offset(estimates, (0.0, 0.0, z_offset))
    pairs = align_nearest(estimates, truth, max_dt)
    if pairs:
        res = np.array([p.estimate.xyz - p.truth.xyz for p in pairs])
        axis = axis_stats(res)
        total = axis_stats(np.linalg.norm(res, axis=1))
    else:
        axis = [ErrorStats.empty()] * 3
        total = ErrorStats.empty()

    # each estimate counts for its own nearest truth sample; where several land
    # on one sample the closest in time is used, and samples left over are NP
    best = {}
    for p in pairs:
        key = id(p.truth)
        if key not in best or p.dt < best[key].dt:
            best[key] = p
    counts = {o.value: 0 for o in Outcome}
    for t in truth:
        p = best.get(id(t))
        counts[classify(p.estimate if p else None, t).value] += 1
    return MethodReport(
        name=name,
        updates=len(estimates),
        scans=len(truth) if scans is None else int(scans),
        axis=axis,
        total=total,
        outcomes=counts,
        z_offset=z_offset,
    )


_CSV_COLUMNS = [
    "method", "updates", "scans", "z_offset",
    "rms_3d", "mean_3d", "std_3d", "max_3d",
    "rms_x", "mean_x", "std_x", "max_x",
    "rms_y", "mean_y", "std_y", "max_y",
    "rms_z", "mean_z", "std_z", "max_z",
    "NP", "WP", "CP", "RP",
]


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _txt(v, width=8):
    return f"{'-':>{width}}" if math.isnan(v) else f"{v:>{width}.2f}"


def report(rows):
    """Render reports as ``(csv_text, plain_text)``.

    The plain text mirrors the usual layout: one 3D row per method with update
    and scan counts, a per-axis block, and the outcome histogram.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_CSV_COLUMNS)
    for r in rows:
        stats = [r.total, *r.axis]
        w.writerow(
            [r.name, r.updates, r.scans, repr(float(r.z_offset))]
            + [_fmt(getattr(s, k)) for s in stats for k in ("rms", "mean", "std", "max")]
            + [r.outcomes.get(o.value, 0) for o in Outcome]
        )

    lines = ["3D positioning error", f"{'':<16}{'# updates':>10}{'# scans':>9}{'RMS(m)':>8}{'mean(m)':>8}{'std(m)':>8}{'max(m)':>8}"]
    for r in rows:
        t = r.total
        lines.append(
            f"{r.name:<16}{r.updates:>10}{r.scans:>9}{_txt(t.rms)}{_txt(t.mean)}{_txt(t.std)}{_txt(t.max)}"
        )
    for r in rows:
        if r.z_offset:
            lines.append(f"({r.name}: z offset {r.z_offset:+.3f} m applied)")
    lines += ["", "Per-axis error", f"{'':<16}{'axis':>6}{'RMS(m)':>8}{'mean(m)':>8}{'std(m)':>8}{'max(m)':>8}"]
    for r in rows:
        for label, s in zip(("X_err", "Y_err", "Z_err"), r.axis):
            lines.append(f"{r.name:<16}{label:>6}{_txt(s.rms)}{_txt(s.mean)}{_txt(s.std)}{_txt(s.max)}")
    lines += ["", "Outcomes", f"{'':<16}" + "".join(f"{o.value:>6}" for o in Outcome)]
    for r in rows:
        lines.append(f"{r.name:<16}" + "".join(f"{r.outcomes.get(o.value, 0):>6}" for o in Outcome))
    return buf.getvalue(), "\n".join(lines) + "\n"
