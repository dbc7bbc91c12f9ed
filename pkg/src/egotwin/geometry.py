"""Rigid-body math on SO(3)/SE(3) and weighted / robust point-set alignment.

Twists are ordered ``(rotational, translational)`` throughout, both as
:class:`Twist` fields and as flat 6-vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CutLocus, Degenerate, NoConsensus, NonUnitAxis

CUT_LOCUS_TOL = 1e-6
_SMALL = 1e-10


def hat(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-vector or an ``(n, 3)`` array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=tol, rtol=0)
        )

    def to_quaternion(self) -> np.ndarray:
        """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
        return matrix_to_quaternion(self.rotation)

    @classmethod
    def from_quaternion(cls, q, translation) -> "Pose":
        return cls(quaternion_to_matrix(q), translation)

    def __repr__(self):
        return f"Pose(q={np.round(self.to_quaternion(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class Twist:
    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotational", np.array(self.rotational, dtype=float).reshape(3))
        object.__setattr__(self, "translational", np.array(self.translational, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotational, self.translational])


@dataclass(frozen=True)
class Correspondence:
    source: np.ndarray
    target: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        w = float(self.weight)
        if not np.isfinite(w) or w < 0:
            raise ValueError(f"correspondence weight must be finite and >= 0, got {w}")
        object.__setattr__(self, "weight", w)


def matrix_to_quaternion(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# --- SO(3) -----------------------------------------------------------------


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    W = hat(w)
    if th < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(th) / th * W + (1 - np.cos(th)) / th**2 * W @ W


def rotation_angle(R) -> float:
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def so3_log(R, check_cut_locus: bool = True) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    th = rotation_angle(R)
    if check_cut_locus and th >= np.pi - CUT_LOCUS_TOL:
        raise CutLocus(f"rotation angle {th:.9f} is at the cut locus")
    if th < 1e-8:
        return vee(R - R.T) / 2.0
    if th > np.pi - 1e-4:
        # near pi the antisymmetric part vanishes; recover the axis from the symmetric part
        c = np.cos(th)
        B = ((R + R.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(vee(R - R.T), axis) < 0:
            axis = -axis
        return axis * th
    return vee(R - R.T) * (th / (2.0 * np.sin(th)))


def so3_left_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    W = hat(w)
    if th < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return np.eye(3) + (1 - np.cos(th)) / th**2 * W + (th - np.sin(th)) / th**3 * W @ W


def so3_right_jacobian(w) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(w, dtype=float))


def so3_left_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    W = hat(w)
    if th < 1e-6:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    c = 1.0 / th**2 - (1 + np.cos(th)) / (2 * th * np.sin(th))
    return np.eye(3) - 0.5 * W + c * W @ W


def rotation_about_axis(a, theta: float) -> np.ndarray:
    """Rodrigues rotation by ``theta`` about the unit axis ``a``."""
    a = np.asarray(a, dtype=float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-6:
        raise NonUnitAxis(f"|a| = {np.linalg.norm(a)}")
    K = hat(a)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


# --- SE(3) -----------------------------------------------------------------


def se3_exp(x) -> Pose:
    xi = x.vector() if isinstance(x, Twist) else np.asarray(x, dtype=float)
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def se3_log(p: Pose) -> Twist:
    return Twist.from_vector(se3_log_vec(p))


def se3_log_vec(p: Pose, check_cut_locus: bool = True) -> np.ndarray:
    w = so3_log(p.rotation, check_cut_locus)
    v = so3_left_jacobian_inv(w) @ p.translation
    return np.concatenate([w, v])


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint for ``(rotational, translational)`` twists."""
    R, t = p.rotation, p.translation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = hat(t) @ R
    return A


def _q_matrix(w, v) -> np.ndarray:
    th = np.linalg.norm(w)
    P, V = hat(w), hat(v)
    PV, VP, PVP = P @ V, V @ P, P @ V @ P
    if th < 1e-2:
        t2 = th * th
        c1 = 1.0 / 6 - t2 / 120 + t2 * t2 / 5040
        c2 = 1.0 / 24 - t2 / 720 + t2 * t2 / 40320
        c3 = 1.0 / 120 - t2 / 2520 + t2 * t2 / 120960
    else:
        s, c = np.sin(th), np.cos(th)
        c1 = (th - s) / th**3
        c2 = -(1 - th**2 / 2 - c) / th**4
        c3 = -0.5 * ((1 - th**2 / 2 - c) / th**4 - 3 * (th - s - th**3 / 6) / th**5)
    return 0.5 * V + c1 * (PV + VP + PVP) + c2 * (P @ PV + VP @ P - 3 * PVP) + c3 * (PVP @ P + P @ PVP)


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    Jw = so3_left_jacobian(w)
    J = np.zeros((6, 6))
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[3:, :3] = _q_matrix(w, v)
    return J


def se3_right_jacobian_inv(xi) -> np.ndarray:
    """Inverse right Jacobian: ``log(X exp(d)) ~= log(X) + Jr^-1(log X) d``."""
    xi = -np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(w)
    J = np.zeros((6, 6))
    J[:3, :3] = Jinv
    J[3:, 3:] = Jinv
    J[3:, :3] = -Jinv @ _q_matrix(w, v) @ Jinv
    return J


# --- point-set alignment -----------------------------------------------------


def _as_arrays(corrs):
    if isinstance(corrs, tuple) and len(corrs) == 3:
        src, tgt, w = corrs
        return np.asarray(src, float).reshape(-1, 3), np.asarray(tgt, float).reshape(-1, 3), np.asarray(w, float).reshape(-1)
    corrs = list(corrs)
    if not corrs:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    src = np.array([c.source for c in corrs], dtype=float)
    tgt = np.array([c.target for c in corrs], dtype=float)
    w = np.array([c.weight for c in corrs], dtype=float)
    return src, tgt, w


def kabsch_arrays(src: np.ndarray, tgt: np.ndarray, w: np.ndarray) -> Pose:
    usable = w > 0
    if usable.sum() < 3:
        raise Degenerate(f"need >= 3 positively weighted points, got {int(usable.sum())}")
    src, tgt, w = src[usable], tgt[usable], w[usable]
    w = w / w.sum()
    cs = w @ src
    ct = w @ tgt
    S = src - cs
    H = (S * w[:, None]).T @ (tgt - ct)
    U, s, Vt = np.linalg.svd(H)
    scale = max(float(w @ np.einsum("ij,ij->i", S, S)), 1e-300)
    if s[1] <= 1e-12 * scale:
        raise Degenerate("weighted covariance has rank < 2 (collinear points)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, ct - R @ cs)


def weighted_kabsch(corrs: Sequence[Correspondence] | tuple) -> Pose:
    """Least-squares rigid pose minimizing ``sum w |P(source) - target|^2``.

    ``corrs`` is a list of :class:`Correspondence` or a ``(src, tgt, w)``
    tuple of arrays.
    """
    return kabsch_arrays(*_as_arrays(corrs))


def _batched_kabsch(S: np.ndarray, T: np.ndarray):
    """Unweighted Kabsch on a batch of minimal samples, ``S, T: (B, 3, 3)``."""
    cs = S.mean(axis=1, keepdims=True)
    ct = T.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", S - cs, T - ct)
    U, _, Vt = np.linalg.svd(H)
    V = np.transpose(Vt, (0, 2, 1))
    d = np.sign(np.linalg.det(V @ np.transpose(U, (0, 2, 1))))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ np.transpose(U, (0, 2, 1))
    t = ct[:, 0, :] - np.einsum("bij,bj->bi", R, cs[:, 0, :])
    return R, t


def robust_register(
    corrs,
    inlier_threshold: float = 0.02,
    max_iterations: int = 1024,
    seed: int = 0,
) -> tuple[Pose, np.ndarray]:
    """Sampling-consensus rigid registration over :func:`weighted_kabsch`.

    Minimal samples of three correspondences are drawn without replacement
    with probability proportional to weight. The hypothesis with the largest
    weighted inlier support is refined on its inliers.
    """
    src, tgt, w = _as_arrays(corrs)
    n = len(w)
    if n < 3:
        raise Degenerate(f"need >= 3 correspondences, got {n}")
    positive = np.flatnonzero(w > 0)
    if len(positive) < 3:
        raise Degenerate("fewer than 3 correspondences carry positive weight")

    rng = np.random.Generator(np.random.PCG64(seed))
    logw = np.log(w[positive])
    batch = 256
    best_support, best_mask = -1.0, None
    thr2 = inlier_threshold**2
    done = 0
    while done < max_iterations:
        b = min(batch, max_iterations - done)
        done += b
        # Gumbel top-k == weighted sampling without replacement
        keys = logw[None, :] + rng.gumbel(size=(b, len(positive)))
        idx = positive[np.argpartition(-keys, 2, axis=1)[:, :3]] if len(positive) > 3 else np.tile(positive, (b, 1))
        S, T = src[idx], tgt[idx]
        area = np.linalg.norm(np.cross(S[:, 1] - S[:, 0], S[:, 2] - S[:, 0]), axis=1)
        ok = area > 1e-9
        if not ok.any():
            continue
        R, t = _batched_kabsch(S[ok], T[ok])
        pred = np.einsum("bij,nj->bni", R, src) + t[:, None, :]
        inl = np.sum((pred - tgt[None]) ** 2, axis=2) < thr2
        support = inl.astype(float) @ w
        k = int(np.argmax(support))
        if support[k] > best_support:
            best_support, best_mask = float(support[k]), inl[k]

    if best_mask is None or np.count_nonzero(best_mask & (w > 0)) < 3:
        raise NoConsensus("best hypothesis has fewer than 3 inliers")
    pose = kabsch_arrays(src, tgt, np.where(best_mask, w, 0.0))
    for _ in range(2):
        resid = np.sum((pose.apply(src) - tgt) ** 2, axis=1)
        mask = resid < thr2
        if np.count_nonzero(mask & (w > 0)) < 3 or np.array_equal(mask, best_mask):
            break
        best_mask = mask
        pose = kabsch_arrays(src, tgt, np.where(best_mask, w, 0.0))
    return pose, best_mask
