"""Per-track articulation hypotheses: line fits for prismatic motion, circle fits for revolute."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import Degenerate, RadiusTooSmall
from .joints import PRISMATIC, REVOLUTE, JointModel, canonicalize

VISIBILITY_FLOOR = 0.5


@dataclass
class TrackSet:
    """``positions`` is ``(tracks, frames, 3)``; ``visibility`` is ``(tracks, frames)``."""

    positions: np.ndarray
    visibility: np.ndarray
    birth_frame: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=float)
        self.birth_frame = np.asarray(self.birth_frame, dtype=int)
        T, N = self.visibility.shape
        if self.positions.shape != (T, N, 3) or self.birth_frame.shape != (T,):
            raise ValueError("inconsistent track array shapes")
        if np.any(self.visibility < 0) or np.any(self.visibility > 1):
            raise ValueError("visibility must lie in [0, 1]")
        if np.any(self.birth_frame >= N) or np.any(self.birth_frame < 0):
            raise ValueError("birth_frame out of range")
        seen = self.visibility > 0
        if not np.all(np.isfinite(self.positions[seen])):
            raise ValueError("positions must be finite where visibility > 0")

    @property
    def num_tracks(self) -> int:
        return self.visibility.shape[0]

    @property
    def num_frames(self) -> int:
        return self.visibility.shape[1]

    def subset(self, indices) -> "TrackSet":
        idx = np.asarray(indices, dtype=int)
        return TrackSet(self.positions[idx], self.visibility[idx], self.birth_frame[idx])


def tracks_to_world(tracks: TrackSet, camera_poses) -> TrackSet:
    """Map camera-frame track positions to the world with per-frame camera poses."""
    if len(camera_poses) < tracks.num_frames:
        raise ValueError("need one camera pose per frame")
    pos = np.empty_like(tracks.positions)
    for i in range(tracks.num_frames):
        pos[:, i] = camera_poses[i].apply(tracks.positions[:, i])
    return TrackSet(pos, tracks.visibility, tracks.birth_frame)


@dataclass
class TrackHypothesis:
    kind: str
    axis: np.ndarray
    states: np.ndarray  # NaN on frames the track was not observed
    mean_residual: float
    pivot: np.ndarray | None = None
    anchor_frame: int = 0
    radius: float | None = None

    def joint(self) -> JointModel:
        return JointModel(self.kind, self.axis, np.nan_to_num(self.states), self.pivot)


def visible_frames(tracks: TrackSet, l: int, floor: float = VISIBILITY_FLOOR) -> np.ndarray:
    frames = np.flatnonzero(tracks.visibility[l] >= floor)
    return frames[frames >= tracks.birth_frame[l]]


def filter_static(tracks: TrackSet, epsilon_s: float, floor: float = VISIBILITY_FLOOR):
    """Split track indices into (moving, static) by maximal visible displacement."""
    if epsilon_s <= 0:
        raise ValueError("epsilon_s must be positive")
    moving, static = [], []
    for l in range(tracks.num_tracks):
        pts = tracks.positions[l, visible_frames(tracks, l, floor)]
        if len(pts) < 2:
            static.append(l)
            continue
        span = np.ptp(pts, axis=0)
        if np.linalg.norm(span) < epsilon_s:
            static.append(l)
        elif span.max() >= epsilon_s or pdist(pts).max() >= epsilon_s:
            moving.append(l)
        else:
            static.append(l)
    return np.array(moving, dtype=int), np.array(static, dtype=int)


def _weighted_pca(pts, w):
    w = w / w.sum()
    c = w @ pts
    D = pts - c
    cov = (D * w[:, None]).T @ D
    evals, evecs = np.linalg.eigh(cov)
    return c, evals[::-1], evecs[:, ::-1]


def fit_prismatic_track(positions, visibility, birth_frame: int = 0, floor: float = VISIBILITY_FLOOR) -> TrackHypothesis:
    positions = np.asarray(positions, dtype=float)
    visibility = np.asarray(visibility, dtype=float)
    frames = np.flatnonzero(visibility >= floor)
    frames = frames[frames >= birth_frame]
    if len(frames) < 2:
        raise Degenerate("need >= 2 visible points")
    pts, w = positions[frames], visibility[frames]
    c, evals, evecs = _weighted_pca(pts, w)
    if evals[0] <= 1e-24:
        raise Degenerate("track points coincide")
    a = evecs[:, 0]
    anchor = frames[0]
    rel = pts - positions[anchor]
    far = np.argmax(np.linalg.norm(rel, axis=1))
    if a @ rel[far] < 0:
        a = -a
    states = np.full(len(visibility), np.nan)
    states[frames] = rel @ a
    D = pts - c
    perp = D - np.outer(D @ a, a)
    resid = float(np.average(np.linalg.norm(perp, axis=1), weights=w))
    return TrackHypothesis(PRISMATIC, a, states, resid, anchor_frame=int(anchor))


def _kasa(u, v, w):
    A = np.column_stack([u, v, np.ones_like(u)])
    b = -(u * u + v * v)
    sw = np.sqrt(w)
    sol, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    cx, cy = -sol[0] / 2, -sol[1] / 2
    r2 = cx * cx + cy * cy - sol[2]
    return cx, cy, np.sqrt(max(r2, 0.0))


def _refine_circle(u, v, w, cx, cy, r, iterations=10):
    for _ in range(iterations):
        du, dv = u - cx, v - cy
        d = np.hypot(du, dv)
        d = np.maximum(d, 1e-12)
        res = d - r
        J = np.column_stack([-du / d, -dv / d, -np.ones_like(d)])
        sw = np.sqrt(w)
        step, *_ = np.linalg.lstsq(J * sw[:, None], -res * sw, rcond=None)
        cx, cy, r = cx + step[0], cy + step[1], r + step[2]
        if np.linalg.norm(step) < 1e-14:
            break
    return cx, cy, abs(r)


def fit_revolute_track(
    positions,
    visibility,
    birth_frame: int = 0,
    floor: float = VISIBILITY_FLOOR,
    min_radius: float = 0.01,
) -> TrackHypothesis:
    positions = np.asarray(positions, dtype=float)
    visibility = np.asarray(visibility, dtype=float)
    frames = np.flatnonzero(visibility >= floor)
    frames = frames[frames >= birth_frame]
    if len(frames) < 3:
        raise Degenerate("need >= 3 visible points")
    pts, w = positions[frames], visibility[frames]
    c, evals, evecs = _weighted_pca(pts, w)
    if np.sqrt(max(evals[1], 0.0)) < 1e-6:
        raise Degenerate("track points are collinear")
    e1, e2 = evecs[:, 0], evecs[:, 1]
    n = np.cross(e1, e2)
    D = pts - c
    u, v = D @ e1, D @ e2
    cx, cy, r = _refine_circle(u, v, w, *_kasa(u, v, w))
    if r < min_radius:
        raise RadiusTooSmall(f"fitted radius {r:.4f} m")
    center = c + cx * e1 + cy * e2
    ang = np.unwrap(np.arctan2(v - cy, u - cx))
    states = np.full(len(visibility), np.nan)
    states[frames] = ang - ang[0]
    off_plane = D @ n
    radial = np.hypot(u - cx, v - cy) - r
    resid = float(np.average(np.hypot(off_plane, radial), weights=w))
    model = canonicalize(JointModel(REVOLUTE, n, np.nan_to_num(states), center))
    if model.axis @ n < 0:
        states = -states
    return TrackHypothesis(REVOLUTE, model.axis, states, resid, pivot=model.pivot, anchor_frame=int(frames[0]), radius=float(r))


def fit_track(tracks: TrackSet, l: int, kind: str, floor: float = VISIBILITY_FLOOR) -> TrackHypothesis:
    fit = fit_prismatic_track if kind == PRISMATIC else fit_revolute_track
    return fit(tracks.positions[l], tracks.visibility[l], int(tracks.birth_frame[l]), floor)


def fit_tracks(tracks: TrackSet, indices, kind: str, floor: float = VISIBILITY_FLOOR) -> dict[int, TrackHypothesis]:
    """Fit every listed track; tracks whose fit is degenerate are left out."""
    out = {}
    for l in indices:
        try:
            out[int(l)] = fit_track(tracks, int(l), kind, floor)
        except (Degenerate, RadiusTooSmall):
            continue
    return out


def predict_track(hypothesis: TrackHypothesis, birth_point) -> np.ndarray:
    """Move ``birth_point`` through the hypothesis states; NaN rows where the state is unknown."""
    birth_point = np.asarray(birth_point, dtype=float)
    h = hypothesis
    out = np.full((len(h.states), 3), np.nan)
    known = np.isfinite(h.states)
    s = h.states[known]
    if h.kind == PRISMATIC:
        out[known] = birth_point + s[:, None] * h.axis
        return out
    a, p = h.axis, h.pivot
    q = birth_point - p
    # Rodrigues applied to every state at once
    cos, sin = np.cos(s)[:, None], np.sin(s)[:, None]
    rot = q * cos + np.cross(a, q) * sin + np.outer(1 - np.cos(s), a) * (a @ q)
    out[known] = rot + p
    return out


def track_prediction_error(tracks: TrackSet, l: int, hypothesis: TrackHypothesis, floor: float = VISIBILITY_FLOOR) -> float:
    frames = visible_frames(tracks, l, floor)
    frames = frames[np.isfinite(hypothesis.states[frames])]
    if len(frames) == 0:
        return np.inf
    pred = predict_track(hypothesis, tracks.positions[l, hypothesis.anchor_frame])
    return float(np.mean(np.linalg.norm(tracks.positions[l, frames] - pred[frames], axis=1)))


def gate_by_residual(tracks: TrackSet, hypotheses: dict[int, TrackHypothesis], epsilon_f: float, floor: float = VISIBILITY_FLOOR) -> list[int]:
    if epsilon_f <= 0:
        raise ValueError("epsilon_f must be positive")
    return [l for l, h in hypotheses.items() if track_prediction_error(tracks, l, h, floor) < epsilon_f]
