"""Pinhole camera helpers. Pixel centers sit at integer coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))

    def rays(self) -> np.ndarray:
        """Unnormalized camera-frame ray per pixel, ``(H, W, 3)`` with z = 1."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def project(points_world, camera_pose: Pose, K: Intrinsics):
    """Project world points; returns integer ``(row, col)`` and a validity mask."""
    pc = camera_pose.inverse().apply(np.asarray(points_world, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[:, 0] / z + K.cx
        v = K.fy * pc[:, 1] / z + K.cy
    ok = np.isfinite(u) & np.isfinite(v) & (z > 1e-9)
    col = np.full(len(z), -1)
    row = np.full(len(z), -1)
    col[ok] = np.floor(u[ok] + 0.5).astype(int)
    row[ok] = np.floor(v[ok] + 0.5).astype(int)
    ok &= (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    return row, col, ok


def lift(depth: np.ndarray, K: Intrinsics, mask: np.ndarray | None = None, stride: int = 1):
    """Back-project valid depth pixels to camera-frame points.

    Returns ``(points, rows, cols)``; zero depth marks invalid pixels.
    """
    d = depth[::stride, ::stride]
    rows, cols = np.nonzero((d > 0) if mask is None else (d > 0) & mask[::stride, ::stride])
    z = d[rows, cols]
    rows, cols = rows * stride, cols * stride
    pts = np.column_stack([(cols - K.cx) / K.fx * z, (rows - K.cy) / K.fy * z, z])
    return pts, rows, cols
