"""Procedural articulated scenes with analytic box raycasting and full ground truth.

Scenes are authored in a room frame (z up). Everything written out, including
ground truth, is expressed in the first camera frame, which is the pipeline's
world frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .camera import Intrinsics, lift
from .dataset import DYNAMIC_FRAGMENT, STATIC_FRAGMENT, Fragment, FragmentManifest, write_fragment, write_mask_png
from .errors import InvalidSpec
from .geometry import Pose, se3_exp
from .joints import PRISMATIC, REVOLUTE, JointModel, canonicalize, joint_pose, transport
from .mesh import TriangleMesh, box_mesh, concatenate
from .trackfit import TrackSet

MAX_DEPTH = 8.0


@dataclass(frozen=True)
class Box:
    """Oriented box: ``pose`` places the box center, ``size`` holds full extents."""

    size: tuple
    pose: Pose = field(default_factory=Pose.identity)

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls(tuple(hi - lo), Pose(np.eye(3), (lo + hi) / 2))

    def moved(self, T: Pose) -> "Box":
        return Box(self.size, T @ self.pose)

    def mesh(self) -> TriangleMesh:
        h = np.asarray(self.size) / 2
        return box_mesh(-h, h, self.pose)


@dataclass
class Furniture:
    body: list[Box]
    part: Box
    joint: JointModel  # room frame, states = interaction schedule


@dataclass
class SceneSpec:
    room: list[Box]
    furniture: list[Furniture]
    camera_path: list[Pose]  # room frame, camera x right, y down, z forward
    intrinsics: Intrinsics
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    depth_noise: float = 0.0
    track_spacing: int = 40
    track_period: int = 20
    track_noise: float = 0.0
    seed: int = 0
    name: str = "scene"
    interaction_dilation: int = 12

    @property
    def num_frames(self) -> int:
        return len(self.camera_path)

    def validate(self) -> None:
        if not self.camera_path:
            raise InvalidSpec("empty camera path")
        for s in (self.sigma_rot, self.sigma_trans, self.depth_noise, self.track_noise):
            if s < 0:
                raise InvalidSpec("noise levels must be non-negative")
        if self.track_spacing <= 0 or self.track_period <= 0:
            raise InvalidSpec("track spacing and period must be positive")
        for f in self.furniture:
            if f.joint.num_frames != self.num_frames:
                raise InvalidSpec("interaction schedule length differs from frame count")


@dataclass
class GroundTruth:
    camera_poses: list[Pose]
    part_poses: list[Pose]
    joint: JointModel | None
    part_masks: np.ndarray  # (N, H, W) bool
    region_maps: np.ndarray
    part_mesh: TriangleMesh | None  # canonical frame
    static_mesh: TriangleMesh
    track_labels: np.ndarray  # 1 moving, 0 static
    part_surface: np.ndarray  # visible part surface points, canonical frame
    room_from_world: Pose = field(default_factory=Pose.identity)
    clean_depths: list[np.ndarray] | None = None
    static_surface: np.ndarray | None = None  # visible static surface, world frame

    def to_dict(self) -> dict:
        return {
            "camera_poses": [p.matrix().tolist() for p in self.camera_poses],
            "part_poses": [p.matrix().tolist() for p in self.part_poses],
            "joint": None if self.joint is None else self.joint.to_dict(),
            "part_mesh": None if self.part_mesh is None else {"vertices": self.part_mesh.vertices.tolist(), "triangles": self.part_mesh.triangles.tolist()},
            "static_mesh": {"vertices": self.static_mesh.vertices.tolist(), "triangles": self.static_mesh.triangles.tolist()},
            "track_labels": self.track_labels.astype(int).tolist(),
            "part_surface": np.round(self.part_surface, 6).tolist(),
            "room_from_world": self.room_from_world.matrix().tolist(),
            "part_masks": "gt_masks",
            "static_surface": "static_surface.npy",
        }

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "GroundTruth":
        masks = np.zeros((0, 0, 0), bool)
        if root is not None and d.get("part_masks"):
            from .dataset import read_mask_png

            files = sorted((Path(root) / d["part_masks"]).glob("*.png"))
            masks = np.stack([read_mask_png(f) for f in files]) if files else masks
        pm = d.get("part_mesh")
        surf = None
        if root is not None and d.get("static_surface") and (Path(root) / d["static_surface"]).exists():
            surf = np.load(Path(root) / d["static_surface"])
        return cls(
            camera_poses=[Pose.from_matrix(np.array(m)) for m in d["camera_poses"]],
            part_poses=[Pose.from_matrix(np.array(m)) for m in d["part_poses"]],
            joint=None if d.get("joint") is None else JointModel.from_dict(d["joint"]),
            part_masks=masks,
            region_maps=np.zeros((0, 0, 0), int),
            part_mesh=None if pm is None else TriangleMesh(np.array(pm["vertices"]), np.array(pm["triangles"])),
            static_mesh=TriangleMesh(np.array(d["static_mesh"]["vertices"]), np.array(d["static_mesh"]["triangles"])),
            track_labels=np.array(d["track_labels"], dtype=int),
            part_surface=np.array(d["part_surface"], dtype=float).reshape(-1, 3),
            room_from_world=Pose.from_matrix(np.array(d["room_from_world"])),
            static_surface=surf,
        )


# --- camera paths ----------------------------------------------------------------------


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


def arc_path(n: int, target, radius: float, height: float, az_start: float, az_end: float) -> list[Pose]:
    """Camera orbit around ``target``; azimuth 0 looks along +y, positive swings toward +x."""
    target = np.asarray(target, float)
    poses = []
    for az in np.radians(np.linspace(az_start, az_end, n)):
        eye = np.array([target[0] + radius * np.sin(az), target[1] - radius * np.cos(az), height])
        poses.append(look_at(eye, target))
    return poses


def perturb_camera(path: list[Pose], sigma_rot: float, sigma_trans: float, seed: int = 0) -> list[Pose]:
    """Independent right-multiplied Gaussian twist per frame."""
    if sigma_rot < 0 or sigma_trans < 0:
        raise InvalidSpec("sigma must be non-negative")
    if sigma_rot == 0 and sigma_trans == 0:
        return list(path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    xi = rng.normal(size=(len(path), 6)) * np.array([sigma_rot] * 3 + [sigma_trans] * 3)
    return [P @ se3_exp(x) for P, x in zip(path, xi)]


def smoothstep_schedule(n: int, lo: float, hi: float, start: float = 0.1, end: float = 0.9) -> np.ndarray:
    t = np.clip((np.arange(n) / max(n - 1, 1) - start) / (end - start), 0.0, 1.0)
    return lo + (hi - lo) * t * t * (3 - 2 * t)


# --- raycasting ---------------------------------------------------------------------------


@njit(cache=True)
def _raycast_kernel(origin, dirs, rots, centers, halves):
    """Nearest box hit per ray: slab test in each box frame. ``dirs`` is ``(P, 3)``."""
    P = dirs.shape[0]
    B = rots.shape[0]
    best = np.full(P, np.inf)
    box_id = np.full(P, -1, np.int64)
    face_id = np.full(P, -1, np.int64)
    o = np.empty(3)
    d = np.empty(3)
    for b in range(B):
        for k in range(3):
            o[k] = 0.0
            for m in range(3):
                o[k] += rots[b, m, k] * (origin[m] - centers[b, m])
        for p in range(P):
            for k in range(3):
                d[k] = rots[b, 0, k] * dirs[p, 0] + rots[b, 1, k] * dirs[p, 1] + rots[b, 2, k] * dirs[p, 2]
            tmin = -np.inf
            tmax = np.inf
            face = -1
            miss = False
            for k in range(3):
                h = halves[b, k]
                if d[k] == 0.0:
                    if abs(o[k]) > h:
                        miss = True
                        break
                    continue
                t1 = (-h - o[k]) / d[k]
                t2 = (h - o[k]) / d[k]
                near = min(t1, t2)
                far = max(t1, t2)
                if near > tmin:
                    tmin = near
                    # entering through the -face when moving along +axis
                    face = 2 * k + (1 if d[k] <= 0 else 0)
                if far < tmax:
                    tmax = far
            if miss or tmax < tmin or tmin <= 1e-9:
                continue
            if tmin < best[p]:
                best[p] = tmin
                box_id[p] = b
                face_id[p] = face
    return best, box_id, face_id


def raycast(boxes: list[Box], camera: Pose, K: Intrinsics, rays_cam: np.ndarray | None = None):
    """Depth (z in camera frame), box index and face index per pixel; -1 where nothing is hit."""
    rc = K.rays().reshape(-1, 3) if rays_cam is None else rays_cam
    dirs = np.ascontiguousarray(rc @ camera.rotation.T)
    rots = np.array([b.pose.rotation for b in boxes]).reshape(-1, 3, 3)
    centers = np.array([b.pose.translation for b in boxes]).reshape(-1, 3)
    halves = np.array([np.asarray(b.size) / 2 for b in boxes]).reshape(-1, 3)
    best, box_id, face_id = _raycast_kernel(camera.translation.astype(float), dirs, rots, centers, halves)
    depth = np.where(np.isfinite(best) & (best < MAX_DEPTH), best, 0.0)
    box_id[depth == 0] = -1
    face_id[depth == 0] = -1
    H, W = K.shape
    return depth.reshape(H, W), box_id.reshape(H, W), face_id.reshape(H, W)


_PALETTE = np.random.default_rng(7).integers(40, 230, size=(4096, 3)).astype(np.uint8)


# --- generation ---------------------------------------------------------------------------


@dataclass
class _Rendered:
    depth: np.ndarray
    box: np.ndarray
    face: np.ndarray


def _scene_boxes(spec: SceneSpec, frame: int):
    boxes, part_index = list(spec.room), []
    for f in spec.furniture:
        boxes.extend(f.body)
    for f in spec.furniture:
        part_index.append(len(boxes))
        boxes.append(f.part.moved(joint_pose(f.joint, frame)))
    return boxes, part_index


def render_fragment(spec: SceneSpec) -> tuple[Fragment, GroundTruth]:
    """Render every frame, spawn and advect tracks, and assemble the ground truth."""
    spec.validate()
    n, K = spec.num_frames, spec.intrinsics
    H, W = K.shape
    cams_room = perturb_camera(spec.camera_path, spec.sigma_rot, spec.sigma_trans, spec.seed)
    C0 = cams_room[0]
    to_world = C0.inverse()
    cams = [to_world @ C for C in cams_room]

    fur = spec.furniture[0] if spec.furniture else None
    joint_w = None if fur is None else transport(fur.joint, to_world)
    part_poses = [joint_pose(joint_w, i) if joint_w is not None else Pose.identity() for i in range(n)]

    rays = K.rays().reshape(-1, 3)
    renders = []
    part_box_index = None
    for i in range(n):
        boxes, part_index = _scene_boxes(spec, i)
        part_box_index = part_index[0] if part_index else None
        d, b, f = raycast(boxes, cams_room[i], K, rays)
        renders.append(_Rendered(d, b, f))

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD3]))
    depths, regions, masks, colors = [], [], [], []
    for r in renders:
        noise = rng.normal(scale=spec.depth_noise, size=r.depth.shape) if spec.depth_noise > 0 else 0.0
        depths.append(np.where(r.depth > 0, np.maximum(r.depth + noise, 1e-3), 0.0).astype(np.float32))
        reg = np.where(r.box >= 0, r.box * 6 + r.face + 1, 0).astype(np.uint16)
        regions.append(reg)
        colors.append(_PALETTE[reg % len(_PALETTE)])
        masks.append(r.box == part_box_index if part_box_index is not None else np.zeros((H, W), bool))
    masks = np.stack(masks)
    regions = np.stack(regions)

    tracks, labels = _make_tracks(spec, renders, cams_room, part_box_index)

    hand = [np.zeros((H, W), bool) for _ in range(n)]
    conf = np.full(n, 0.2)
    inter = []
    if fur is not None:
        moving = np.abs(np.gradient(fur.joint.states)) > 1e-9
        conf = np.where(moving, 1.0, 0.2)
        struct = np.ones((3, 3), bool)
        for i in range(n):
            inter.append(ndimage.binary_dilation(masks[i], struct, iterations=spec.interaction_dilation) if moving[i] else np.zeros((H, W), bool))
    else:
        inter = [np.zeros((H, W), bool) for _ in range(n)]

    frag = Fragment(depths=depths, intrinsics=K, hand_masks=hand, interaction_masks=inter, confidence=conf, region_maps=list(regions), tracks=tracks, colors=colors)

    static_boxes = list(spec.room) + [b for f in spec.furniture for b in f.body]
    static_mesh = concatenate([b.mesh() for b in static_boxes]).transformed(to_world)
    part_mesh = None if fur is None else fur.part.moved(joint_pose(fur.joint, 0)).mesh().transformed(to_world)
    surface = _visible_surface([r.depth for r in renders], masks, cams, part_poses, K)
    dynamic = fur is not None and np.ptp(fur.joint.states) > 0
    static_surface = _visible_static([r.depth for r in renders], masks if dynamic else None, cams, K)
    gt = GroundTruth(
        camera_poses=cams,
        part_poses=part_poses,
        joint=None if joint_w is None else canonicalize(joint_w),
        part_masks=masks,
        region_maps=regions,
        part_mesh=part_mesh,
        static_mesh=static_mesh,
        track_labels=labels,
        part_surface=surface,
        room_from_world=C0,
        clean_depths=[r.depth.astype(np.float32) for r in renders],
        static_surface=static_surface,
    )
    return frag, gt


def _visible_surface(clean_depths, masks, cams, part_poses, K, stride: int = 4, voxel: float = 0.005) -> np.ndarray:
    """Observed part surface in the canonical frame, thinned on a 5 mm grid."""
    pts = []
    for i, d in enumerate(clean_depths):
        p, _, _ = lift(d, K, masks[i], stride)
        if len(p):
            pts.append((part_poses[i].inverse() @ cams[i]).apply(p))
    if not pts:
        return np.zeros((0, 3))
    allp = np.concatenate(pts)
    _, keep = np.unique(np.floor(allp / voxel).astype(np.int64), axis=0, return_index=True)
    return allp[np.sort(keep)]


def _visible_static(clean_depths, masks, cams, K, stride: int = 8, voxel: float = 0.01, max_depth: float = 3.0) -> np.ndarray:
    """Observed static surface in the world frame, thinned on a 1 cm grid."""
    pts = []
    for i, d in enumerate(clean_depths):
        keep = d <= max_depth if masks is None else (d <= max_depth) & ~masks[i]
        p, _, _ = lift(d, K, keep, stride)
        if len(p):
            pts.append(cams[i].apply(p))
    if not pts:
        return np.zeros((0, 3))
    allp = np.concatenate(pts)
    _, keep = np.unique(np.floor(allp / voxel).astype(np.int64), axis=0, return_index=True)
    return allp[np.sort(keep)]


def _make_tracks(spec: SceneSpec, renders, cams_room, part_box_index):
    """Grid-spawned surface points advected by the true motion; occlusion sets visibility."""
    n, K = spec.num_frames, spec.intrinsics
    H, W = K.shape
    s = spec.track_spacing
    gv, gu = np.mgrid[s // 2 : H : s, s // 2 : W : s]
    gv, gu = gv.ravel(), gu.ravel()
    fur = spec.furniture[0] if spec.furniture else None

    anchors, births, on_part = [], [], []
    for b in range(0, n, spec.track_period):
        r = renders[b]
        z = r.depth[gv, gu]
        ok = z > 0
        pc = np.column_stack([(gu - K.cx) / K.fx * z, (gv - K.cy) / K.fy * z, z])[ok]
        pw = cams_room[b].apply(pc)
        part = (r.box[gv, gu] == part_box_index)[ok] if part_box_index is not None else np.zeros(ok.sum(), bool)
        if fur is not None and part.any():
            # store part points in the part's rest frame (state 0)
            pw[part] = joint_pose(fur.joint, b).inverse().apply(pw[part])
        anchors.append(pw)
        births.append(np.full(len(pw), b))
        on_part.append(part)
    anchors = np.concatenate(anchors) if anchors else np.zeros((0, 3))
    births = np.concatenate(births).astype(int) if births else np.zeros(0, int)
    on_part = np.concatenate(on_part) if on_part else np.zeros(0, bool)
    T = len(anchors)

    true_room = np.repeat(anchors[:, None, :], n, axis=1)
    if fur is not None:
        for i in range(n):
            true_room[on_part, i] = joint_pose(fur.joint, i).apply(anchors[on_part])

    vis = np.zeros((T, n))
    for i in range(n):
        Ci = cams_room[i].inverse()
        pc = Ci.apply(true_room[:, i])
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * pc[:, 0] / z + K.cx
            v = K.fy * pc[:, 1] / z + K.cy
        ok = (z > 1e-6) & np.isfinite(u) & np.isfinite(v)
        col = np.where(ok, np.floor(u + 0.5), -1).astype(int)
        row = np.where(ok, np.floor(v + 0.5), -1).astype(int)
        ok &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
        # bilinear-free occlusion test against the clean render, 1.5 cm slack for pixel rounding on slanted faces
        dz = np.full(T, np.inf)
        dz[ok] = renders[i].depth[row[ok], col[ok]] - z[ok]
        ok &= (dz > -0.015) & (renders[i].depth[np.clip(row, 0, H - 1), np.clip(col, 0, W - 1)] > 0)
        ok &= np.arange(n)[i] >= births
        vis[ok, i] = 1.0

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A]))
    noise = np.zeros((T, n, 3))
    if spec.track_noise > 0:
        # persistent per-track offset plus frame jitter; marginal std equals track_noise
        bias = rng.normal(scale=spec.track_noise * np.sqrt(0.75), size=(T, 1, 3))
        jitter = rng.normal(scale=spec.track_noise * 0.5, size=(T, n, 3))
        noise = bias + jitter
    # a tracker reports points in the observing camera's frame
    pos = np.empty((T, n, 3))
    for i in range(n):
        pos[:, i] = cams_room[i].inverse().apply(true_room[:, i]) + noise[:, i]
    return TrackSet(pos, vis, births), on_part.astype(int)


def write_ground_truth(root, gt: GroundTruth) -> dict:
    root = Path(root)
    (root / "gt_masks").mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(gt.part_masks):
        write_mask_png(root / "gt_masks" / f"{i:06d}.png", m)
    np.save(root / "static_surface.npy", np.zeros((0, 3)) if gt.static_surface is None else gt.static_surface)
    return gt.to_dict()


def generate(spec: SceneSpec, out_dir, fragment_id: str | None = None, kind: str | None = None, adjacent=()) -> tuple[FragmentManifest, GroundTruth]:
    """Render ``spec`` and write it as a fragment directory with a ground-truth sidecar."""
    frag, gt = render_fragment(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = write_ground_truth(out_dir, gt)
    if kind is None:
        kind = DYNAMIC_FRAGMENT if spec.furniture and np.ptp(spec.furniture[0].joint.states) > 0 else STATIC_FRAGMENT
    jk = spec.furniture[0].joint.kind if kind == DYNAMIC_FRAGMENT else None
    m = write_fragment(out_dir, fragment_id or spec.name, kind, frag, joint_kind=jk, ground_truth=sidecar, adjacent=adjacent)
    return m, gt


# --- templates ----------------------------------------------------------------------------

TEMPLATES = ("cabinet-door", "drawer")
DEFAULT_K = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def _room() -> list[Box]:
    return [
        Box.from_bounds([-2.5, -3.0, -0.05], [2.5, 1.0, 0.0]),  # floor
        Box.from_bounds([-2.5, 0.40, 0.0], [2.5, 0.45, 2.4]),  # back wall
        Box.from_bounds([-1.3, -3.0, 0.0], [-1.25, 0.40, 2.4]),  # left wall
        Box.from_bounds([0.75, -0.25, 0.0], [1.15, 0.15, 0.75]),  # side table
        Box.from_bounds([0.85, -0.15, 0.75], [1.0, 0.0, 0.95]),  # box on the table
    ]


def cabinet_door(n: int, sweep: float = np.pi / 2) -> Furniture:
    body = [Box.from_bounds([-0.42, -0.25, 0.0], [0.42, 0.35, 0.9])]
    door = Box.from_bounds([-0.40, -0.28, 0.05], [0.40, -0.25, 0.85])
    pivot = np.array([-0.40, -0.265, 0.0])
    # axis -z so that positive states swing the free edge toward the camera
    joint = JointModel(REVOLUTE, np.array([0.0, 0.0, -1.0]), smoothstep_schedule(n, 0.0, sweep), pivot)
    return Furniture(body, door, joint)


def drawer(n: int, length: float = 0.4) -> Furniture:
    body = [
        Box.from_bounds([-0.42, -0.25, 0.0], [0.42, 0.35, 0.5]),
        Box.from_bounds([-0.42, -0.25, 0.85], [0.42, 0.35, 0.9]),
        Box.from_bounds([-0.42, -0.25, 0.5], [-0.38, 0.35, 0.85]),
        Box.from_bounds([0.38, -0.25, 0.5], [0.42, 0.35, 0.85]),
        Box.from_bounds([-0.38, 0.30, 0.5], [0.38, 0.35, 0.85]),
    ]
    part = Box.from_bounds([-0.37, -0.27, 0.52], [0.37, 0.25, 0.83])
    joint = JointModel(PRISMATIC, np.array([0.0, -1.0, 0.0]), smoothstep_schedule(n, 0.0, length))
    return Furniture(body, part, joint)


def make_template(
    name: str,
    seed: int = 0,
    n: int = 60,
    noisy: bool = True,
    sigma_rot: float = np.radians(0.5),
    sigma_trans: float = 0.005,
    depth_noise: float = 0.005,
    track_noise: float = 0.005,
    azimuth: tuple = (20.0, 50.0),
    static: bool = False,
    intrinsics: Intrinsics = DEFAULT_K,
    held_state: float = 0.0,
) -> SceneSpec:
    """One of the shipped scene templates; ``noisy=False`` zeroes every noise source.

    ``static=True`` keeps the part still at ``held_state``.
    """
    if name == "cabinet-door":
        fur = cabinet_door(n)
    elif name == "drawer":
        fur = drawer(n)
    else:
        raise InvalidSpec(f"unknown template {name!r}; choose from {TEMPLATES}")
    if static:
        fur = Furniture(fur.body, fur.part, fur.joint.with_states(np.full(n, float(held_state))))
    path = arc_path(n, [0.0, 0.0, 0.5], 1.6, 1.4, *azimuth)
    if not noisy:
        sigma_rot = sigma_trans = depth_noise = track_noise = 0.0
    return SceneSpec(
        room=_room(),
        furniture=[fur],
        camera_path=path,
        intrinsics=intrinsics,
        sigma_rot=sigma_rot,
        sigma_trans=sigma_trans,
        depth_noise=depth_noise,
        track_noise=track_noise,
        seed=seed,
        name=name,
    )


def make_scene(name: str, seed: int = 0, n: int = 60, noisy: bool = True, **kw) -> list[SceneSpec]:
    """Two fragments of one room: the interaction, then a static sweep continuing the camera arc.

    The part stays at its final state during the second fragment.
    """
    first = make_template(name, seed=seed, n=n, noisy=noisy, azimuth=(20.0, 50.0), **kw)
    end = float(first.furniture[0].joint.states[-1])
    second = make_template(name, seed=seed + 7919, n=n, noisy=noisy, azimuth=(50.0, 80.0), static=True, held_state=end, **kw)
    second.name = f"{name}-static"
    return [first, second]
