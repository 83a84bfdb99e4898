"""Depth accuracy and trajectory drift metrics, plus CSV report rows."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import invert_matrix

DEFAULT_CLAMP = (0.1, 100.0)
DEFAULT_SEGMENTS = (1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    scale: float = 1.0


def depth_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
    median_scaling: bool = True,
    valid: np.ndarray | None = None,
) -> DepthMetrics:
    """RMSE and threshold accuracies of ``pred`` against ``gt``.

    Pixels count when ``gt`` is finite and positive (and ``valid``, if
    given). The prediction is optionally rescaled by
    ``median(gt) / median(pred)`` before both maps are clamped to ``clamp``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    lo, hi = clamp
    if not 0 < lo < hi:
        raise ValueError(f"invalid clamp range {clamp}")
    mask = np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("no valid ground-truth pixels")
    p, g = pred[mask], gt[mask]
    scale = 1.0
    if median_scaling:
        scale = float(np.median(g) / np.median(p))
        p = p * scale
    p = np.clip(p, lo, hi)
    g = np.clip(g, lo, hi)
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    ratio = np.maximum(p / g, g / p)
    d1, d2, d3 = (float(np.mean(ratio < 1.25**k)) for k in (1, 2, 3))
    return DepthMetrics(rmse, d1, d2, d3, scale)


# ----------------------------------------------------------------------
# odometry
# ----------------------------------------------------------------------
@dataclass
class OdometryMetrics:
    t_err: float  # percent
    r_err: float  # degrees per 100 units
    per_length: dict[float, tuple[float, float, int]] = field(default_factory=dict)
    skipped_lengths: list[float] = field(default_factory=list)


def path_lengths(poses: np.ndarray) -> np.ndarray:
    """Cumulative distance travelled by camera centres of ``(N, 4, 4)`` cam-to-world poses."""
    centres = np.asarray(poses)[:, :3, 3]
    steps = np.linalg.norm(np.diff(centres, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rotation_angle(R: np.ndarray) -> float:
    return float(math.acos(max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))))


def odometry_metrics(
    pred_poses: np.ndarray,
    gt_poses: np.ndarray,
    segment_lengths: Sequence[float] = DEFAULT_SEGMENTS,
    step: int = 1,
) -> OdometryMetrics:
    """Segment-wise relative drift between two camera-to-world trajectories.

    For every start frame (every ``step`` frames) and segment length ``L``,
    the segment ends at the first frame whose ground-truth path distance is
    at least ``L`` further on. The relative-motion error
    ``inv(pred_delta) @ gt_delta`` contributes its translation norm and
    rotation angle, both divided by the ground-truth length actually
    covered by the segment.
    """
    pred = np.asarray(pred_poses, dtype=np.float64)
    gt = np.asarray(gt_poses, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[1:] != (4, 4):
        raise ValueError(f"trajectories must both be (N, 4, 4), got {pred.shape} and {gt.shape}")
    dist = path_lengths(gt)
    t_all, r_all = [], []
    per_length: dict[float, tuple[float, float, int]] = {}
    skipped: list[float] = []
    for L in segment_lengths:
        t_l, r_l = [], []
        for first in range(0, len(gt), step):
            # tolerance absorbs accumulated floating error in the path sum
            last = int(np.searchsorted(dist, dist[first] + L - 1e-9, side="left"))
            if last >= len(gt):
                break
            covered = dist[last] - dist[first]
            d_gt = invert_matrix(gt[first]) @ gt[last]
            d_pred = invert_matrix(pred[first]) @ pred[last]
            err = invert_matrix(d_pred) @ d_gt
            t_l.append(np.linalg.norm(err[:3, 3]) / covered)
            r_l.append(rotation_angle(err[:3, :3]) / covered)
        if not t_l:
            skipped.append(float(L))
            continue
        per_length[float(L)] = (100.0 * float(np.mean(t_l)), math.degrees(float(np.mean(r_l))) * 100.0, len(t_l))
        t_all += t_l
        r_all += r_l
    if not t_all:
        raise ValueError(
            f"trajectory of length {dist[-1]:.3f} is too short for every segment length {list(segment_lengths)}"
        )
    return OdometryMetrics(
        100.0 * float(np.mean(t_all)), math.degrees(float(np.mean(r_all))) * 100.0, per_length, skipped
    )


def trajectory_from_relative(relative: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
    """Chain frame-to-frame transforms into camera-to-world poses.

    ``relative[k]`` maps points in camera ``k`` to camera ``k+1``.
    """
    relative = np.asarray(relative, dtype=np.float64)
    out = [np.eye(4) if start is None else np.asarray(start, dtype=np.float64)]
    for M in relative:
        out.append(out[-1] @ invert_matrix(M))
    return np.array(out)


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------
@dataclass
class MetricRow:
    run_id: str
    suite: str
    perturbation: str
    level: str
    region: str
    image: int
    rmse: float
    delta1: float
    delta2: float
    delta3: float

    @classmethod
    def from_metrics(cls, m: DepthMetrics, **kw) -> "MetricRow":
        return cls(rmse=m.rmse, delta1=m.delta1, delta2=m.delta2, delta3=m.delta3, **kw)


CSV_COLUMNS = [f.name for f in fields(MetricRow)]


def rows_to_csv(rows: Iterable[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        for k in ("rmse", "delta1", "delta2", "delta3"):
            d[k] = repr(float(d[k]))
        w.writerow(d)
    return buf.getvalue()


def write_csv(rows: Iterable[MetricRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_to_csv(rows))
    return path


def read_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(
                MetricRow(
                    d["run_id"], d["suite"], d["perturbation"], d["level"], d["region"], int(d["image"]),
                    float(d["rmse"]), float(d["delta1"]), float(d["delta2"]), float(d["delta3"]),
                )
            )
        return out


def summarize(rows: Iterable[MetricRow]) -> dict[tuple[str, str, str, str], DepthMetrics]:
    """Mean metrics per (suite, perturbation, level, region)."""
    groups: dict[tuple[str, str, str, str], list[MetricRow]] = {}
    for r in rows:
        groups.setdefault((r.suite, r.perturbation, r.level, r.region), []).append(r)
    return {
        k: DepthMetrics(
            float(np.mean([r.rmse for r in v])),
            float(np.mean([r.delta1 for r in v])),
            float(np.mean([r.delta2 for r in v])),
            float(np.mean([r.delta3 for r in v])),
        )
        for k, v in groups.items()
    }
