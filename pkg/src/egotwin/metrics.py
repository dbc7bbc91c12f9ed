"""Evaluation metrics: articulation errors, failure rate, ADD/ADD-S, Chamfer, mIoU."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.distance import pdist

from .errors import DimMismatch, EmptyGeometry, FrameMismatch, KindMismatch, NotRevolute
from .geometry import Pose
from .joints import REVOLUTE, JointModel
from .mesh import TriangleMesh, sample_surface


def axis_direction_error(estimated: JointModel, gt: JointModel) -> float:
    """Angle between the two axis lines in degrees (sign of the axis ignored)."""
    if estimated.kind != gt.kind:
        raise KindMismatch(f"{estimated.kind} vs {gt.kind}")
    c = abs(float(estimated.axis @ gt.axis)) / (np.linalg.norm(estimated.axis) * np.linalg.norm(gt.axis))
    return float(np.degrees(np.arccos(np.clip(c, 0.0, 1.0))))


def axis_position_error(estimated: JointModel, gt: JointModel) -> float:
    """Distance from the ground-truth pivot to the estimated axis line, in meters."""
    if estimated.kind != REVOLUTE or gt.kind != REVOLUTE:
        raise NotRevolute("axis position is defined for revolute joints only")
    d = gt.pivot - estimated.pivot
    return float(np.linalg.norm(d - (d @ estimated.axis) * estimated.axis))


def state_error(estimated: JointModel, gt: JointModel) -> float:
    """Mean absolute error of state increments from frame 0, sign-aligned.

    Degrees for revolute joints, meters for prismatic.
    """
    if estimated.kind != gt.kind:
        raise KindMismatch(f"{estimated.kind} vs {gt.kind}")
    if estimated.num_frames != gt.num_frames:
        raise FrameMismatch("state sequences differ in length")
    e = estimated.states - estimated.states[0]
    g = gt.states - gt.states[0]
    err = min(np.mean(np.abs(e - g)), np.mean(np.abs(-e - g)))
    return float(np.degrees(err)) if gt.kind == REVOLUTE else float(err)


def model_diameter(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) > 4:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # flat or degenerate sets: fall back to all points
            pass
    return float(pdist(pts).max()) if len(pts) > 1 else 0.0


def add_metrics(estimated_poses, gt_poses, model_points, diameter_fraction: float = 0.1, per_frame: bool = False):
    """Percent of frames whose ADD / ADD-S distance is below ``fraction * diameter``."""
    if len(estimated_poses) != len(gt_poses):
        raise FrameMismatch("pose sequences differ in length")
    pts = np.asarray(model_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyGeometry("no model points")
    thr = diameter_fraction * model_diameter(pts)
    add, adds = [], []
    for Te, Tg in zip(estimated_poses, gt_poses):
        pe, pg = Te.apply(pts), Tg.apply(pts)
        add.append(float(np.mean(np.linalg.norm(pe - pg, axis=1))))
        dist, _ = cKDTree(pe).query(pg)
        adds.append(float(np.mean(dist)))
    add, adds = np.array(add), np.array(adds)
    res = (100.0 * float(np.mean(add < thr)), 100.0 * float(np.mean(adds < thr)))
    if per_frame:
        return res + (add, adds)
    return res


def _points(x, samples: int, seed: int) -> np.ndarray:
    if isinstance(x, TriangleMesh):
        return sample_surface(x, samples, seed)
    return np.asarray(x, dtype=float).reshape(-1, 3)


def chamfer(a, b, samples: int = 10000, seed: int = 0) -> float:
    """Symmetric mean nearest-neighbour distance in centimeters."""
    pa, pb = _points(a, samples, seed), _points(b, samples, seed + 1)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyGeometry("chamfer needs two non-empty geometries")
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    return float(100.0 * 0.5 * (dab.mean() + dba.mean()))


def miou(pred_masks, gt_masks) -> float:
    pred = np.asarray(pred_masks, dtype=bool)
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.shape != gt.shape:
        raise DimMismatch(f"{pred.shape} vs {gt.shape}")
    ious = []
    for p, g in zip(pred, gt):
        if not g.any():
            continue
        ious.append(np.logical_and(p, g).sum() / np.logical_or(p, g).sum())
    return float(np.mean(ious)) if ious else float("nan")


OK, CRASH, WRONG_KIND = "ok", "crash", "wrong_kind"


def failure_rate(outcomes) -> float:
    """Percent of sequences that crashed or got the joint kind wrong."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("need at least one sequence outcome")
    bad = sum(1 for o in outcomes if o in (CRASH, WRONG_KIND))
    return 100.0 * bad / len(outcomes)


@dataclass
class EvalReport:
    sequence: str
    kind: str | None = None
    failure: bool = False
    failure_reason: str = ""
    axis_error_deg: float | None = None
    axis_position_error_m: float | None = None
    state_error: float | None = None
    add_percent: float | None = None
    adds_percent: float | None = None
    chamfer_cm: float | None = None
    static_chamfer_cm: float | None = None
    miou: float | None = None
    per_frame: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(v, spec):
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else format(v, spec)


def summarize(reports: list[EvalReport]) -> dict:
    """Averages over successful sequences plus the failure rate."""
    ok = [r for r in reports if not r.failure]

    def mean(attr):
        vals = [getattr(r, attr) for r in ok if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    out = {"sequences": len(reports), "failure_rate": failure_rate([WRONG_KIND if r.failure and r.failure_reason == WRONG_KIND else CRASH if r.failure else OK for r in reports]) if reports else None}
    for attr in ("axis_error_deg", "axis_position_error_m", "state_error", "add_percent", "adds_percent", "chamfer_cm", "static_chamfer_cm", "miou"):
        out[attr] = mean(attr)
    return out


def reports_to_json(reports: list[EvalReport]) -> str:
    payload = {"sequences": [r.to_dict() for r in reports], "summary": summarize(reports)}
    return json.dumps(payload, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def reports_to_table(reports: list[EvalReport]) -> str:
    """Plain-text table: articulation | pose | reconstruction | segmentation columns."""
    head = f"{'sequence':<24} {'kind':<10} {'axis(deg)':>9} {'pos(m)':>8} {'state':>8} {'ADD':>7} {'ADD-S':>7} {'CD(cm)':>7} {'mIoU':>6}"
    lines = [head, "-" * len(head)]
    for r in reports:
        if r.failure:
            lines.append(f"{r.sequence:<24} {r.kind or '-':<10} FAILED ({r.failure_reason})")
            continue
        lines.append(
            f"{r.sequence:<24} {r.kind or '-':<10} {_fmt(r.axis_error_deg, '9.3f')} {_fmt(r.axis_position_error_m, '8.4f')} "
            f"{_fmt(r.state_error, '8.4f')} {_fmt(r.add_percent, '7.2f')} {_fmt(r.adds_percent, '7.2f')} {_fmt(r.chamfer_cm, '7.3f')} {_fmt(r.miou, '6.3f')}"
        )
    s = summarize(reports)
    lines.append("-" * len(head))
    lines.append(
        f"{'mean':<24} {'':<10} {_fmt(s['axis_error_deg'], '9.3f')} {_fmt(s['axis_position_error_m'], '8.4f')} {_fmt(s['state_error'], '8.4f')} "
        f"{_fmt(s['add_percent'], '7.2f')} {_fmt(s['adds_percent'], '7.2f')} {_fmt(s['chamfer_cm'], '7.3f')} {_fmt(s['miou'], '6.3f')}"
    )
    lines.append(f"failure rate: {_fmt(s['failure_rate'], '.1f')}%")
    return "\n".join(lines) + "\n"
