"""Dense part masks from sparse tracks: region voting and pose-warped propagation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, lift, project
from .errors import InvalidCount, NoKeyframes
from .geometry import Pose
from .trackfit import VISIBILITY_FLOOR, TrackSet

ETA_M = 0.6
EPSILON = 1e-6
NUM_KEYFRAMES = 5
CLOSING_RADIUS = 2
DEPTH_TOLERANCE = 0.03
STATIC_STRIDE = 4


@dataclass
class RegionMap:
    labels: np.ndarray
    frame: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2 or (self.labels.size and self.labels.min() < 0):
            raise ValueError("region labels must be a non-negative 2D image")


@dataclass
class PartMask:
    mask: np.ndarray
    frame: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


def select_keyframes(fragment_length: int, count: int) -> np.ndarray:
    """``count`` evenly spaced frame indices including both endpoints."""
    if not 1 <= count <= fragment_length:
        raise InvalidCount(f"need 1 <= Q <= N, got Q={count}, N={fragment_length}")
    if count == 1:
        return np.array([0])
    return np.round(np.linspace(0, fragment_length - 1, count)).astype(int)


def _labels(regions) -> np.ndarray:
    return regions.labels if isinstance(regions, RegionMap) else np.asarray(regions, dtype=np.int64)


def _counts(labels: np.ndarray, proj, nreg: int) -> np.ndarray:
    proj = np.asarray(proj, dtype=np.int64).reshape(-1, 2)
    H, W = labels.shape
    ok = (proj[:, 0] >= 0) & (proj[:, 0] < H) & (proj[:, 1] >= 0) & (proj[:, 1] < W)
    p = proj[ok]
    return np.bincount(labels[p[:, 0], p[:, 1]], minlength=nreg).astype(float)


def motion_ratios(regions, moving_proj, static_proj, epsilon: float = EPSILON):
    """Per-region ``(n_m, n_s, gamma)``; ``gamma`` is NaN for regions without projections."""
    labels = _labels(regions)
    nreg = int(labels.max()) + 1 if labels.size else 0
    nm = _counts(labels, moving_proj, nreg)
    ns = _counts(labels, static_proj, nreg)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(nm + ns > 0, nm / (nm + ns + epsilon), np.nan)
    return nm, ns, gamma


def region_vote(regions, moving_proj, static_proj, eta_m: float = ETA_M, epsilon: float = EPSILON) -> PartMask:
    """Union of regions whose moving-track ratio exceeds ``eta_m``.

    Projections are integer ``(row, col)`` pairs; out-of-image entries are ignored.
    """
    labels = _labels(regions)
    _, _, gamma = motion_ratios(labels, moving_proj, static_proj, epsilon)
    chosen = np.nan_to_num(gamma, nan=0.0) > eta_m
    mask = chosen[labels] if labels.size else np.zeros(labels.shape, bool)
    return PartMask(mask, regions.frame if isinstance(regions, RegionMap) else 0)


def project_tracks(tracks: TrackSet, indices, frame: int, camera_pose: Pose, K: Intrinsics, floor: float = VISIBILITY_FLOOR) -> np.ndarray:
    """Integer pixel positions of the visible tracks in ``indices`` at ``frame``."""
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        return np.zeros((0, 2), int)
    idx = idx[tracks.visibility[idx, frame] >= floor]
    r, c, ok = project(tracks.positions[idx, frame], camera_pose, K)
    return np.column_stack([r[ok], c[ok]])


def keyframe_masks(tracks: TrackSet, moving, static, camera_poses, region_maps, K: Intrinsics, count: int = NUM_KEYFRAMES, eta_m: float = ETA_M, epsilon: float = EPSILON, floor: float = VISIBILITY_FLOOR) -> list[PartMask]:
    """Vote a mask on each of ``count`` uniformly spaced keyframes."""
    out = []
    for q in select_keyframes(len(camera_poses), count):
        mp = project_tracks(tracks, moving, q, camera_poses[q], K, floor)
        sp = project_tracks(tracks, static, q, camera_poses[q], K, floor)
        pm = region_vote(region_maps[q], mp, sp, eta_m, epsilon)
        out.append(PartMask(pm.mask, int(q)))
    return out


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def close_mask(mask: np.ndarray, radius: int = CLOSING_RADIUS) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    padded = np.pad(mask, radius)
    closed = ndimage.binary_closing(padded, structure=_disk(radius))
    return closed[radius:-radius, radius:-radius]


def _depth_consistent(rows, cols, z, depth, tol):
    d = depth[rows, cols]
    return (d > 0) & (np.abs(d - z) < tol)


def _warp(points_world: np.ndarray, camera_pose: Pose, depth: np.ndarray, K: Intrinsics, tol: float) -> np.ndarray:
    pc = camera_pose.inverse().apply(points_world)
    r, c, ok = project(points_world, camera_pose, K)
    ok[ok] &= _depth_consistent(r[ok], c[ok], pc[ok, 2], depth, tol)
    return np.column_stack([r[ok], c[ok]])


def propagate_masks(
    keyframe_masks: list[PartMask],
    fragment,
    part_poses: list[Pose],
    camera_poses: list[Pose],
    eta_m: float = ETA_M,
    epsilon: float = EPSILON,
    closing_radius: int = CLOSING_RADIUS,
    depth_tolerance: float = DEPTH_TOLERANCE,
    static_stride: int = STATIC_STRIDE,
) -> list[PartMask]:
    """Warp keyframe masks to every frame and merge them by pixel majority.

    ``fragment`` needs ``depths``, ``intrinsics`` and optionally ``region_maps``.
    Keyframe indices get their own mask back unchanged.
    """
    if not keyframe_masks:
        raise NoKeyframes("no keyframe masks to propagate")
    K = fragment.intrinsics
    depths = fragment.depths
    regions = getattr(fragment, "region_maps", None)
    n = len(depths)
    H, W = K.shape

    lifted = []
    for km in keyframe_masks:
        q = km.frame
        mpts, _, _ = lift(depths[q], K, km.mask)
        spts, _, _ = lift(depths[q], K, ~km.mask, stride=static_stride)
        lifted.append((q, camera_poses[q].apply(mpts), camera_poses[q].apply(spts)))

    exact = {km.frame: km.mask.copy() for km in keyframe_masks}
    out = []
    for i in range(n):
        if i in exact:
            out.append(PartMask(exact[i], i))
            continue
        votes = np.zeros((H, W), dtype=np.int32)
        contributors = 0
        for q, mw, sw in lifted:
            motion = part_poses[i] @ part_poses[q].inverse()
            mp = _warp(motion.apply(mw), camera_poses[i], depths[i], K, depth_tolerance) if len(mw) else np.zeros((0, 2), int)
            sp = _warp(sw, camera_poses[i], depths[i], K, depth_tolerance) if len(sw) else np.zeros((0, 2), int)
            if len(mp) == 0 and len(sp) == 0:
                continue
            contributors += 1
            if regions is not None:
                m = region_vote(regions[i], mp, sp, eta_m, epsilon).mask
            else:
                m = np.zeros((H, W), bool)
                m[mp[:, 0], mp[:, 1]] = True
                m = close_mask(m, closing_radius)
            votes += m
        mask = (2 * votes >= contributors) & (votes > 0) if contributors else np.zeros((H, W), bool)
        out.append(PartMask(mask, i))
    return out
