"""Truncated signed distance fusion, mesh extraction and scene composition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from skimage.measure import marching_cubes

from .camera import Intrinsics, lift
from .errors import IntrinsicsMismatch
from .geometry import Pose
from .mesh import TriangleMesh, concatenate

VOXEL_SIZE = 0.01
TRUNCATION = 0.04
WEIGHT_CAP = 64.0
MARGIN = 0.10
MAX_DEPTH = 3.0


@dataclass
class TsdfVolume:
    """Voxel ``(i, j, k)`` sits at ``origin + voxel_size * (i, j, k)``; sdf is in truncation units."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    truncation: float
    sdf: np.ndarray = None
    weight: np.ndarray = None
    weight_cap: float = WEIGHT_CAP

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or any(d <= 0 for d in self.dims):
            raise ValueError("voxel size and dims must be positive")
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least two voxels")
        if self.sdf is None:
            self.sdf = np.ones(self.dims, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float32)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float = VOXEL_SIZE, truncation: float = TRUNCATION, margin: float = 0.0) -> "TsdfVolume":
        lo = np.asarray(lo, float) - margin
        hi = np.asarray(hi, float) + margin
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2)
        return cls(lo, voxel_size, tuple(dims), truncation)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * (np.asarray(self.dims) - 1)

    def observed(self) -> np.ndarray:
        return self.weight > 0

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.truncation, self.sdf.copy(), self.weight.copy(), self.weight_cap)


@njit(cache=True)
def _integrate_kernel(sdf, weight, origin, voxel, trunc, cap, R, t, depth, fx, fy, cx, cy):
    nx, ny, nz = sdf.shape
    H, W = depth.shape
    inv_trunc = 1.0 / trunc
    # camera-frame coordinates are affine in the voxel index: base + i*ex + j*ey + k*ez
    ex0, ex1, ex2 = voxel * R[0, 0], voxel * R[0, 1], voxel * R[0, 2]
    ey0, ey1, ey2 = voxel * R[1, 0], voxel * R[1, 1], voxel * R[1, 2]
    ez0, ez1, ez2 = voxel * R[2, 0], voxel * R[2, 1], voxel * R[2, 2]
    ox, oy, oz = origin[0] - t[0], origin[1] - t[1], origin[2] - t[2]
    b0 = R[0, 0] * ox + R[1, 0] * oy + R[2, 0] * oz
    b1 = R[0, 1] * ox + R[1, 1] * oy + R[2, 1] * oz
    b2 = R[0, 2] * ox + R[1, 2] * oy + R[2, 2] * oz
    for i in range(nx):
        for j in range(ny):
            xc = b0 + i * ex0 + j * ey0
            yc = b1 + i * ex1 + j * ey1
            zc = b2 + i * ex2 + j * ey2
            for k in range(nz):
                if k > 0:
                    xc += ez0
                    yc += ez1
                    zc += ez2
                if zc <= 1e-6:
                    continue
                iz = 1.0 / zc
                u = int(np.floor(fx * xc * iz + cx + 0.5))
                if u < 0 or u >= W:
                    continue
                v = int(np.floor(fy * yc * iz + cy + 0.5))
                if v < 0 or v >= H:
                    continue
                d = depth[v, u]
                if d <= 0.0:
                    continue
                dist = d - zc
                if dist < -trunc:
                    continue
                val = min(1.0, dist * inv_trunc)
                w = weight[i, j, k]
                sdf[i, j, k] = (w * sdf[i, j, k] + val) / (w + 1.0)
                weight[i, j, k] = min(w + 1.0, cap)


def _check(depth: np.ndarray, K: Intrinsics, mask):
    if depth.shape != K.shape:
        raise IntrinsicsMismatch(f"depth is {depth.shape}, intrinsics expect {K.shape}")
    if mask is not None and np.asarray(mask).shape != depth.shape:
        raise IntrinsicsMismatch("mask and depth dimensions differ")


def _fuse(volume: TsdfVolume, depth: np.ndarray, K: Intrinsics, extrinsic: Pose, max_depth: float):
    d = np.where(depth <= max_depth, depth, 0.0).astype(np.float64)
    if not np.any(d > 0):
        return volume
    _integrate_kernel(volume.sdf, volume.weight, volume.origin, float(volume.voxel_size), float(volume.truncation), float(volume.weight_cap), np.ascontiguousarray(extrinsic.rotation), extrinsic.translation.copy(), d, K.fx, K.fy, K.cx, K.cy)
    return volume


def integrate_static(volume: TsdfVolume, depth: np.ndarray, intrinsics: Intrinsics, camera_pose: Pose, exclusion_mask=None, max_depth: float = MAX_DEPTH) -> TsdfVolume:
    """Fuse one frame in the world frame, skipping excluded pixels (no carving)."""
    _check(depth, intrinsics, exclusion_mask)
    d = depth if exclusion_mask is None else np.where(exclusion_mask, 0.0, depth)
    return _fuse(volume, d, intrinsics, camera_pose, max_depth)


def integrate_part(volume: TsdfVolume, depth: np.ndarray, intrinsics: Intrinsics, camera_pose: Pose, part_pose: Pose, part_mask, max_depth: float = MAX_DEPTH) -> TsdfVolume:
    """Fuse the part-mask pixels in the canonical part frame, extrinsic ``(T^m)^-1 T^c``."""
    _check(depth, intrinsics, part_mask)
    d = np.where(np.asarray(part_mask, dtype=bool), depth, 0.0)
    return _fuse(volume, d, intrinsics, part_pose.inverse() @ camera_pose, max_depth)


def fit_bounds(depths, intrinsics: Intrinsics, poses, masks=None, stride: int = 4, max_depth: float = MAX_DEPTH):
    """Axis-aligned bounds of lifted depth (optionally masked) over all frames."""
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for k, (d, P) in enumerate(zip(depths, poses)):
        dd = np.where(d <= max_depth, d, 0.0)
        pts, _, _ = lift(dd, intrinsics, None if masks is None else np.asarray(masks[k], bool), stride)
        if len(pts) == 0:
            continue
        w = P.apply(pts)
        lo = np.minimum(lo, w.min(axis=0))
        hi = np.maximum(hi, w.max(axis=0))
    if not np.all(np.isfinite(lo)):
        return None
    return lo, hi


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes at sdf = 0 over cells whose 8 corners are all observed."""
    obs = volume.weight > 0
    if min(volume.dims) < 2 or not obs.any():
        return TriangleMesh.empty()
    cell = obs[:-1, :-1, :-1] & obs[1:, :-1, :-1] & obs[:-1, 1:, :-1] & obs[:-1, :-1, 1:]
    cell &= obs[1:, 1:, :-1] & obs[1:, :-1, 1:] & obs[:-1, 1:, 1:] & obs[1:, 1:, 1:]
    if not cell.any():
        return TriangleMesh.empty()
    # skimage gates a cell on the mask value at its far corner
    mask = np.zeros(volume.dims, dtype=bool)
    mask[1:, 1:, 1:] = cell
    vol = np.where(obs, volume.sdf, 1.0).astype(np.float32)
    try:
        verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(volume.voxel_size,) * 3, mask=mask)
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    if len(faces) == 0:
        return TriangleMesh.empty()
    return TriangleMesh(verts + volume.origin, faces)


def compose_scene(static_mesh: TriangleMesh, part_mesh: TriangleMesh, part_pose: Pose) -> TriangleMesh:
    """``P_i = P^s + T_i^m(P^m)`` without merging vertices."""
    if part_mesh is None or part_mesh.is_empty():
        return TriangleMesh(static_mesh.vertices.copy(), static_mesh.triangles.copy(), None if static_mesh.colors is None else static_mesh.colors.copy())
    return concatenate([static_mesh, part_mesh.transformed(part_pose)])


def fuse_static(depths, intrinsics: Intrinsics, camera_poses, exclusion_masks=None, voxel_size: float = VOXEL_SIZE, truncation: float = TRUNCATION, margin: float = MARGIN, max_depth: float = MAX_DEPTH) -> TsdfVolume | None:
    keep = None
    if exclusion_masks is not None:
        keep = [~np.asarray(m, bool) for m in exclusion_masks]
    b = fit_bounds(depths, intrinsics, camera_poses, keep, max_depth=max_depth)
    if b is None:
        return None
    vol = TsdfVolume.from_bounds(*b, voxel_size, truncation, margin)
    for k, (d, P) in enumerate(zip(depths, camera_poses)):
        integrate_static(vol, d, intrinsics, P, None if exclusion_masks is None else exclusion_masks[k], max_depth)
    return vol


def fuse_part(depths, intrinsics: Intrinsics, camera_poses, part_poses, part_masks, voxel_size: float = VOXEL_SIZE, truncation: float = TRUNCATION, margin: float = MARGIN, max_depth: float = MAX_DEPTH) -> TsdfVolume | None:
    """Canonical part volume; bounds come from a pre-pass over masked depth in the part frame."""
    extr = [m.inverse() @ c for m, c in zip(part_poses, camera_poses)]
    b = fit_bounds(depths, intrinsics, extr, part_masks, max_depth=max_depth)
    if b is None:
        return None
    vol = TsdfVolume.from_bounds(*b, voxel_size, truncation, margin)
    for d, c, m, pm in zip(depths, camera_poses, part_poses, part_masks):
        integrate_part(vol, d, intrinsics, c, m, pm, max_depth)
    return vol
