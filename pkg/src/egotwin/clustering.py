"""Motion clustering of per-track hypotheses and interacted-part selection."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, project
from .errors import KindMismatch, MissingCameraPose, NoClusters
from .geometry import Pose
from .joints import REVOLUTE, JointModel, canonicalize
from .trackfit import TrackHypothesis, TrackSet

SIGMA_ANG = np.radians(15.0)
SIGMA_PIV = 0.10


@dataclass
class MotionCluster:
    track_indices: list[int]
    representative: TrackHypothesis
    score: float = 0.0

    def __len__(self):
        return len(self.track_indices)


@dataclass
class InteractionEvidence:
    masks: np.ndarray  # (frames, H, W) bool
    confidence: np.ndarray  # (frames,)
    camera_poses: list[Pose | None]
    intrinsics: Intrinsics

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.masks.shape[1:] != self.intrinsics.shape:
            raise ValueError("mask dimensions do not match the frame size")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidences must lie in [0, 1]")


def _canonical(h: TrackHypothesis):
    """Canonical axis and states of a hypothesis (states keep their NaNs)."""
    c = canonicalize(JointModel(h.kind, h.axis, np.nan_to_num(h.states), h.pivot))
    states = h.states if c.axis @ h.axis > 0 else -h.states
    return c.axis, c.pivot, states


def _pattern_deficit(s1, s2) -> float:
    both = np.isfinite(s1) & np.isfinite(s2)
    if both.sum() < 3:
        return 0.0
    x, y = s1[both], s2[both]
    sx, sy = x.std(), y.std()
    if sx < 1e-12 or sy < 1e-12:
        return 0.0
    r = np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)
    return float(max(0.0, 1.0 - r))


def hypothesis_distance(h1: TrackHypothesis, h2: TrackHypothesis, sigma_ang: float = SIGMA_ANG, sigma_piv: float = SIGMA_PIV) -> float:
    if h1.kind != h2.kind:
        raise KindMismatch(f"{h1.kind} vs {h2.kind}")
    a1, p1, s1 = _canonical(h1)
    a2, p2, s2 = _canonical(h2)
    dot = float(a1 @ a2)
    if dot < 0:
        s2 = -s2
    ang = np.arccos(np.clip(abs(dot), 0.0, 1.0))
    d = ang / sigma_ang + _pattern_deficit(s1, s2)
    if h1.kind == REVOLUTE:
        d += np.linalg.norm(p1 - p2) / sigma_piv
    return float(d)


def distance_matrix(hyps: list[TrackHypothesis], **kw) -> np.ndarray:
    n = len(hyps)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = hypothesis_distance(hyps[i], hyps[j], **kw)
    return D


def _align_state_offsets(states: list[np.ndarray], anchors: list[int]) -> np.ndarray:
    """Shift per-track state sequences onto a common offset; returns ``(tracks, frames)``."""
    order = np.argsort(anchors, kind="stable")
    out = np.full((len(states), len(states[0])), np.nan)
    ref = None
    for k in order:
        s = states[k]
        if ref is None:
            out[k] = s
        else:
            both = np.isfinite(ref) & np.isfinite(s)
            if not both.any():
                continue
            out[k] = s + np.median(ref[both] - s[both])
        with np.errstate(all="ignore"):
            ref = _nanmedian(out[np.isfinite(out).any(axis=1)])
    return out


def _nanmedian(a: np.ndarray) -> np.ndarray:
    res = np.full(a.shape[1], np.nan)
    has = np.isfinite(a).any(axis=0)
    if has.any():
        res[has] = np.nanmedian(a[:, has], axis=0)
    return res


def _interpolate_missing(s: np.ndarray) -> np.ndarray:
    known = np.isfinite(s)
    if not known.any():
        return np.zeros_like(s)
    idx = np.arange(len(s))
    return np.interp(idx, idx[known], s[known])


def aggregate_hypotheses(hyps: list[TrackHypothesis]) -> TrackHypothesis:
    """Robust representative: spherical mean axis, median pivot, per-frame median states.

    States are anchored to zero at frame 0.
    """
    kind = hyps[0].kind
    canon = [_canonical(h) for h in hyps]
    ref = canon[0][0]
    axes, states = [], []
    for a, _, s in canon:
        if a @ ref < 0:
            a, s = -a, -s
        axes.append(a)
        states.append(s)
    axis = np.mean(axes, axis=0)
    axis /= np.linalg.norm(axis)
    pivot = None
    if kind == REVOLUTE:
        pivot = np.median(np.array([p for _, p, _ in canon]), axis=0)
        pivot = pivot - (axis @ pivot) * axis
    aligned = _align_state_offsets(states, [h.anchor_frame for h in hyps])
    med = _interpolate_missing(_nanmedian(aligned))
    med = med - med[0]
    model = canonicalize(JointModel(kind, axis, med, pivot))
    resid = float(np.mean([h.mean_residual for h in hyps]))
    return TrackHypothesis(kind, model.axis, model.states, resid, pivot=model.pivot, anchor_frame=0)


def cluster_tracks(hypotheses, eps: float = 1.0, min_pts: int = 4, **kw) -> list[MotionCluster]:
    """Density-connected clustering (DBSCAN semantics) over hypothesis distances.

    ``hypotheses`` is a ``{track_index: hypothesis}`` mapping or a list (indexed by position).
    """
    if not isinstance(hypotheses, dict):
        hypotheses = dict(enumerate(hypotheses))
    ids = sorted(hypotheses)
    if not ids:
        return []
    hyps = [hypotheses[i] for i in ids]
    kinds = {h.kind for h in hyps}
    if len(kinds) > 1:
        raise KindMismatch("hypotheses mix joint kinds")
    D = distance_matrix(hyps, **kw)
    neighbors = [np.flatnonzero(D[i] <= eps) for i in range(len(ids))]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(len(ids), -1)
    next_label = 0
    for i in range(len(ids)):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = next_label
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for k in neighbors[j]:
                if labels[k] == -1:
                    labels[k] = next_label
                    queue.append(k)
        next_label += 1
    clusters = []
    for c in range(next_label):
        members = np.flatnonzero(labels == c)
        if len(members) < min_pts:
            continue
        rep = aggregate_hypotheses([hyps[m] for m in members])
        clusters.append(MotionCluster([ids[m] for m in members], rep))
    return clusters


def score_cluster(cluster: MotionCluster, tracks: TrackSet, evidence: InteractionEvidence) -> float:
    """Visibility- and confidence-weighted count of projections inside the interaction mask."""
    if any(p is None for p in evidence.camera_poses) or len(evidence.camera_poses) < tracks.num_frames:
        raise MissingCameraPose("every frame needs a camera pose")
    idx = np.asarray(cluster.track_indices, dtype=int)
    score = 0.0
    for i in range(tracks.num_frames):
        o = tracks.visibility[idx, i]
        live = o > 0
        if not live.any() or evidence.confidence[i] == 0:
            continue
        row, col, ok = project(tracks.positions[idx[live], i], evidence.camera_poses[i], evidence.intrinsics)
        inside = np.zeros(live.sum(), dtype=bool)
        inside[ok] = evidence.masks[i][row[ok], col[ok]]
        score += evidence.confidence[i] * float(o[live][inside].sum())
    return score


def select_interacted(
    clusters: list[MotionCluster],
    tracks: TrackSet,
    evidence: InteractionEvidence,
    static_indices=None,
    gated_indices=None,
):
    """Pick the best-scoring cluster; returns ``(moving, static, winner)`` index arrays and cluster."""
    if not clusters:
        raise NoClusters("no motion clusters to select from")
    for c in clusters:
        c.score = score_cluster(c, tracks, evidence)
    winner = max(clusters, key=lambda c: (c.score, len(c), -c.representative.mean_residual))
    moving = np.array(sorted(winner.track_indices), dtype=int)
    if static_indices is None and gated_indices is None:
        static = np.setdiff1d(np.arange(tracks.num_tracks), moving)
    else:
        pool = [] if static_indices is None else list(static_indices)
        if gated_indices is not None:
            pool += [g for g in gated_indices if g not in set(moving.tolist())]
        static = np.array(sorted(set(int(x) for x in pool)), dtype=int)
    return moving, static, winner
