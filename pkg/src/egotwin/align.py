"""Global alignment of fragment submaps into one functional scene."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import Intrinsics
from .dataset import DYNAMIC_FRAGMENT, STATIC_FRAGMENT
from .errors import Degenerate, DisconnectedScene, TooFewPoints
from .geometry import Pose, kabsch_arrays, rotation_angle
from .joints import JointModel, MotionRange, motion_range, transport
from .mesh import TriangleMesh, concatenate
from .posegraph import Edge, PoseGraph, solve_pose_graph
from .tsdf import TRUNCATION, VOXEL_SIZE, extract_mesh, fuse_static

log = logging.getLogger(__name__)

RMSE_THRESHOLD = 0.03
TRIM_FRACTION = 0.8
MIN_POINTS = 100


@dataclass
class PartEntry:
    joint: JointModel
    mesh: TriangleMesh  # canonical part geometry, placed as at the fragment's first frame
    poses: list[Pose]


@dataclass
class FusionInputs:
    """What is needed to re-integrate a fragment's static geometry in another frame."""

    depths: list[np.ndarray]
    intrinsics: Intrinsics
    camera_poses: list[Pose]
    exclusion_masks: list[np.ndarray] | None = None


@dataclass
class Submap:
    fragment_id: str
    kind: str
    static_points: np.ndarray
    part_entries: list[PartEntry] = field(default_factory=list)
    static_mesh: TriangleMesh | None = None
    fusion: FusionInputs | None = None


@dataclass
class ScenePart:
    joint: JointModel
    mesh: TriangleMesh
    motion_range: MotionRange
    fragment_id: str
    poses: list[Pose]


@dataclass
class SceneModel:
    static_mesh: TriangleMesh
    parts: list[ScenePart]
    submap_poses: list[Pose]
    fragment_ids: list[str]


@dataclass
class Registration:
    pose: Pose  # maps source coordinates to target coordinates
    rmse: float
    inliers: int


@dataclass
class Rejected:
    pose: Pose
    rmse: float
    reason: str = "rmse"


def observed_by(points: np.ndarray, submap: Submap, frame_step: int = 5, truncation: float = TRUNCATION) -> np.ndarray | None:
    """Which points (submap coordinates) lie in space the submap's cameras observed.

    A point counts when some sampled frame sees it inside the image, on valid static
    depth, and not hidden more than ``truncation`` behind the measured surface.
    ``None`` when the submap carries no fusion inputs.
    """
    f = submap.fusion
    if f is None:
        return None
    K = f.intrinsics
    H, W = K.shape
    seen = np.zeros(len(points), dtype=bool)
    for k in range(0, len(f.depths), frame_step):
        pc = f.camera_poses[k].inverse().apply(points)
        z = pc[:, 2]
        ok = z > 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            col = np.floor(K.fx * pc[:, 0] / z + K.cx + 0.5)
            row = np.floor(K.fy * pc[:, 1] / z + K.cy + 0.5)
        ok &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
        r, c = row[ok].astype(int), col[ok].astype(int)
        d = np.asarray(f.depths[k], dtype=float)[r, c]
        if f.exclusion_masks is not None:
            d = np.where(np.asarray(f.exclusion_masks[k], bool)[r, c], 0.0, d)
        idx = np.flatnonzero(ok)
        seen[idx[(d > 0) & (z[ok] <= d + truncation)]] = True
    return seen


def register_submaps(
    source: Submap,
    target: Submap,
    init: Pose | None = None,
    max_iterations: int = 100,
    rmse_threshold: float = RMSE_THRESHOLD,
    trim: float = TRIM_FRACTION,
    tol: float = 1e-9,
) -> Registration | Rejected:
    """Trimmed point-to-point ICP of ``source`` static points onto ``target``.

    When the target carries fusion inputs, only source points inside the target's
    observed space (at the initial pose) take part.
    """
    src = np.asarray(source.static_points, dtype=float)
    tgt = np.asarray(target.static_points, dtype=float)
    if len(src) < MIN_POINTS or len(tgt) < MIN_POINTS:
        raise TooFewPoints(f"need {MIN_POINTS} static points per submap, have {len(src)} and {len(tgt)}")
    tree = cKDTree(tgt)
    T = Pose.identity() if init is None else init
    overlap = observed_by(T.apply(src), target)
    if overlap is not None:
        if overlap.sum() < MIN_POINTS:
            return Rejected(T, np.inf, "overlap")
        src = src[overlap]
    keep_n = max(3, int(np.ceil(trim * len(src))))
    rmse = np.inf
    for _ in range(max_iterations):
        p = T.apply(src)
        d, idx = tree.query(p)
        keep = np.argpartition(d, keep_n - 1)[:keep_n]
        try:
            step = kabsch_arrays(p[keep], tgt[idx[keep]], np.ones(keep_n))
        except Degenerate:
            return Rejected(T, float(rmse), "degenerate")
        T = step @ T
        rmse = float(np.sqrt(np.mean(d[keep] ** 2)))
        if np.linalg.norm(step.translation) < tol and rotation_angle(step.rotation) < tol:
            break
    # report the residual at the final pose
    d, _ = tree.query(T.apply(src))
    rmse = float(np.sqrt(np.mean(np.partition(d, keep_n - 1)[:keep_n] ** 2)))
    if not rmse < rmse_threshold:
        return Rejected(T, rmse)
    return Registration(T, rmse, keep_n)


def _components(n: int, edges) -> list[list[int]]:
    adj = [[] for _ in range(n)]
    for i, j, *_ in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp, queue = [], deque([s])
        seen[s] = True
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def _spanning_poses(n: int, edges) -> list[Pose]:
    """Submap-to-world poses from a BFS tree rooted at submap 0."""
    W = [None] * n
    W[0] = Pose.identity()
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for i, j, Z, *_ in edges:
            # Z maps submap i coordinates into submap j: W_i = W_j Z
            if i == u and W[j] is None:
                W[j] = W[i] @ Z.inverse()
                queue.append(j)
            elif j == u and W[i] is None:
                W[i] = W[j] @ Z
                queue.append(i)
    return W


def solve_scene_graph(n: int, edges) -> list[Pose]:
    """Submap poses from accepted ``(i, j, Z, inliers)`` edges; submap 0 is the world frame."""
    comps = _components(n, edges)
    if len(comps) > 1:
        raise DisconnectedScene(comps)
    if n == 1:
        return [Pose.identity()]
    init = _spanning_poses(n, edges)
    graph = PoseGraph(n, [Edge(i, j, Z, float(cnt) * np.eye(6)) for i, j, Z, cnt in edges], [], 0.1, False, init)
    return solve_pose_graph(graph, fixed_confidences=True).poses


def build_scene(submaps: list[Submap], accepted_edges, voxel_size: float = VOXEL_SIZE, refuse: bool = True) -> SceneModel:
    """Optimize submap poses, fuse static geometry in the world frame and transport joints.

    ``accepted_edges`` holds ``(i, j, Registration)`` or ``(i, j, Pose, inliers)`` with the
    pose mapping submap ``i`` into submap ``j``; rejected registrations are skipped.
    """
    if not submaps:
        raise DisconnectedScene([])
    edges = []
    for e in accepted_edges:
        i, j, r = e[0], e[1], e[2]
        if isinstance(r, Rejected):
            continue
        if isinstance(r, Registration):
            edges.append((i, j, r.pose, r.inliers))
        else:
            edges.append((i, j, r, e[3] if len(e) > 3 else 1))
    W = solve_scene_graph(len(submaps), edges)
    W[0] = Pose.identity()

    static = None
    if refuse and all(s.fusion is not None for s in submaps):
        depths, poses, masks = [], [], []
        K = submaps[0].fusion.intrinsics
        same_k = all(s.fusion.intrinsics == K for s in submaps)
        if same_k:
            for s, Wk in zip(submaps, W):
                f = s.fusion
                depths += list(f.depths)
                poses += [Wk @ c for c in f.camera_poses]
                masks += list(f.exclusion_masks) if f.exclusion_masks is not None else [np.zeros(K.shape, bool)] * len(f.depths)
            vol = fuse_static(depths, K, poses, masks, voxel_size=voxel_size)
            static = TriangleMesh.empty() if vol is None else extract_mesh(vol)
    if static is None:
        static = concatenate([s.static_mesh.transformed(Wk) for s, Wk in zip(submaps, W) if s.static_mesh is not None])

    parts = []
    for s, Wk in zip(submaps, W):
        inv = Wk.inverse()
        for pe in s.part_entries:
            j = transport(pe.joint, Wk)
            parts.append(ScenePart(j, pe.mesh.transformed(Wk), motion_range(j), s.fragment_id, [Wk @ P @ inv for P in pe.poses]))
    return SceneModel(static, parts, W, [s.fragment_id for s in submaps])


def candidate_pairs(submaps: list[Submap], adjacency: dict[str, list[str]] | None = None, all_pairs_limit: int = 8) -> list[tuple[int, int]]:
    """Manifest adjacency plus every pair when the scene is small."""
    n = len(submaps)
    index = {s.fragment_id: k for k, s in enumerate(submaps)}
    pairs = set()
    if n <= all_pairs_limit:
        pairs |= {(i, j) for i in range(n) for j in range(i + 1, n)}
    for fid, nbrs in (adjacency or {}).items():
        for nb in nbrs:
            if fid in index and nb in index and index[fid] != index[nb]:
                pairs.add(tuple(sorted((index[fid], index[nb]))))
    return sorted(pairs)


def continuity_poses(submaps: list[Submap]) -> list[Pose]:
    """Coarse submap-to-world poses assuming the camera is continuous across fragments.

    Fragment ``k + 1`` starts where fragment ``k`` ended, so its frame sits at the last
    camera pose of fragment ``k``; fragments without camera poses start at identity.
    """
    W = [Pose.identity()]
    for s in submaps[:-1]:
        last = s.fusion.camera_poses[-1] if s.fusion is not None and s.fusion.camera_poses else Pose.identity()
        W.append(W[-1] @ last)
    return W


def align_submaps(
    submaps: list[Submap],
    adjacency=None,
    rmse_threshold: float = RMSE_THRESHOLD,
    max_iterations: int = 100,
    trim: float = TRIM_FRACTION,
    **kw,
) -> SceneModel:
    """Register candidate pairs from the continuity guess, keep those passing the RMSE gate, build the scene."""
    W0 = continuity_poses(submaps)
    accepted = []
    for i, j in candidate_pairs(submaps, adjacency):
        try:
            r = register_submaps(submaps[i], submaps[j], W0[j].inverse() @ W0[i], max_iterations, rmse_threshold, trim)
        except TooFewPoints as exc:
            log.warning("pair (%d, %d) skipped: %s", i, j, exc)
            continue
        if isinstance(r, Registration):
            accepted.append((i, j, r))
        else:
            log.info("pair (%d, %d) rejected, rmse %.4f", i, j, r.rmse)
    return build_scene(submaps, accepted, **kw)
