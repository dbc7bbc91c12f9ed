"""Fragment and scene orchestration on top of the library stages."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import FusionInputs, PartEntry, SceneModel, Submap, align_submaps
from .camera import Intrinsics
from .clustering import InteractionEvidence, cluster_tracks, select_interacted
from .config import PipelineConfig
from .dataset import DYNAMIC_FRAGMENT, STATIC_FRAGMENT, Fragment, FragmentManifest, load_fragment, write_mask_png
from .errors import EgotwinError, FragmentFailure, InvalidSpec
from .geometry import Pose
from .joints import JointModel, joint_pose
from .mesh import TriangleMesh, sample_surface, write_ply
from .posegraph import (
    ArticulatedSolution,
    build_part_graph,
    init_articulation,
    part_loop_pairs,
    refine_articulated,
    relative_part_transforms,
    solve_camera_graph,
)
from .segmentation import keyframe_masks, propagate_masks
from .trackfit import (
    TrackHypothesis,
    TrackSet,
    filter_static,
    fit_tracks,
    gate_by_residual,
    track_prediction_error,
    tracks_to_world,
    visible_frames,
)
from .tsdf import extract_mesh, fuse_part, fuse_static

log = logging.getLogger(__name__)


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _pose_hash(poses) -> str:
    return array_hash(np.array([p.matrix() for p in poses]))


@dataclass
class FragmentResult:
    fragment_id: str
    kind: str
    camera_poses: list[Pose]
    static_mesh: TriangleMesh
    submap: Submap
    joint: JointModel | None = None
    solution: ArticulatedSolution | None = None
    part_masks: list[np.ndarray] | None = None
    part_mesh: TriangleMesh | None = None
    moving_tracks: np.ndarray | None = None
    input_hashes: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def part_poses(self) -> list[Pose] | None:
        return None if self.solution is None else self.solution.poses


class _Stages:
    """Runs named stages, logging input hashes and turning errors into FragmentFailure."""

    def __init__(self, fragment_id: str):
        self.fragment_id = fragment_id
        self.hashes: dict = {}
        self.timings: dict = {}

    def run(self, stage: str, inputs: str, fn, *args, **kw):
        self.hashes[stage] = inputs
        log.info("%s: stage %s inputs %s", self.fragment_id, stage, inputs)
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except FragmentFailure:
            raise
        except (EgotwinError, ValueError, np.linalg.LinAlgError) as exc:
            raise FragmentFailure(stage, f"{type(exc).__name__}: {exc}") from exc
        self.timings[stage] = time.perf_counter() - t0
        return out


def _part_subset(tracks: TrackSet, idx) -> TrackSet:
    idx = np.asarray(idx, dtype=int)
    return TrackSet(tracks.positions[idx], tracks.visibility[idx], tracks.birth_frame[idx])


def recruit_tracks(tracks: TrackSet, candidates, joint: JointModel, epsilon_f: float, floor: float) -> list[int]:
    """Candidate tracks whose trajectory the joint predicts within ``epsilon_f``."""
    out = []
    for l in candidates:
        frames = visible_frames(tracks, l, floor)
        if len(frames) < 2:
            continue
        b = int(frames[0])
        h = TrackHypothesis(joint.kind, joint.axis, joint.states - joint.states[b], 0.0, joint.pivot, b)
        if track_prediction_error(tracks, l, h, floor) < epsilon_f:
            out.append(int(l))
    return out


def _static_submap(fragment_id, kind, frag: Fragment, cams, exclusion, cfg: PipelineConfig, stages: _Stages):
    vol = stages.run(
        "fusion",
        array_hash(*frag.depths) + _pose_hash(cams),
        fuse_static,
        frag.depths,
        frag.intrinsics,
        cams,
        exclusion,
        voxel_size=cfg.voxel_size,
        truncation=cfg.truncation,
        max_depth=cfg.max_depth,
    )
    if vol is None:
        raise FragmentFailure("fusion", "no static depth to fuse")
    mesh = extract_mesh(vol)
    if mesh.is_empty():
        raise FragmentFailure("fusion", "static volume produced no surface")
    pts = sample_surface(mesh, cfg.submap_points, cfg.seed)
    sub = Submap(fragment_id, kind, pts, [], mesh, FusionInputs(list(frag.depths), frag.intrinsics, list(cams), exclusion))
    return mesh, sub


def process_fragment(frag: Fragment, kind: str, config: PipelineConfig, fragment_id: str = "fragment", joint_kind: str | None = None) -> FragmentResult:
    """Run every stage on an in-memory fragment."""
    cfg = config
    stages = _Stages(fragment_id)
    K = frag.intrinsics
    n = frag.num_frames
    if kind not in (STATIC_FRAGMENT, DYNAMIC_FRAGMENT):
        raise FragmentFailure("ingest", f"unknown fragment kind {kind!r}")
    hand = frag.hand_masks
    cams, _ = stages.run(
        "camera",
        array_hash(*frag.depths),
        solve_camera_graph,
        frag.depths,
        K,
        hand,
        frag.interaction_masks if kind == DYNAMIC_FRAGMENT else None,
        inlier_threshold=cfg.camera_inlier_threshold,
        level_iterations=cfg.camera_level_iterations,
        stride=cfg.camera_stride,
        object_weight=cfg.camera_object_weight,
        mu=cfg.camera_mu,
    )

    if kind == STATIC_FRAGMENT:
        excl = None if hand is None else [np.asarray(h, bool) for h in hand]
        mesh, sub = _static_submap(fragment_id, kind, frag, cams, excl, cfg, stages)
        return FragmentResult(fragment_id, kind, cams, mesh, sub, input_hashes=stages.hashes, timings=stages.timings)

    if frag.tracks is None:
        raise FragmentFailure("tracks", "dynamic fragment has no track file")
    if joint_kind is None:
        raise FragmentFailure("ingest", "dynamic fragment without a joint kind")
    tracks = frag.tracks if frag.tracks_frame == "world" else tracks_to_world(frag.tracks, cams)
    floor = cfg.visibility_floor

    def gates():
        moving, static = filter_static(tracks, cfg.epsilon_s, floor)
        hyps = fit_tracks(tracks, moving, joint_kind, floor)
        gated = gate_by_residual(tracks, hyps, cfg.epsilon_f, floor)
        return moving, static, {g: hyps[g] for g in gated}

    displaced, static, hyps = stages.run("tracks", array_hash(tracks.positions, tracks.visibility) + _pose_hash(cams), gates)
    if not hyps:
        raise FragmentFailure("tracks", "no track passes the motion and fit gates")

    def choose():
        clusters = cluster_tracks(hyps, cfg.cluster_eps, cfg.cluster_min_pts, sigma_ang=np.radians(cfg.sigma_ang_deg), sigma_piv=cfg.sigma_piv)
        masks = np.zeros((n,) + K.shape, bool) if frag.interaction_masks is None else np.stack(frag.interaction_masks)
        conf = np.ones(n) if frag.confidence is None else frag.confidence
        ev = InteractionEvidence(masks, conf, cams, K)
        return select_interacted(clusters, tracks, ev, static_indices=static)

    moving, static_idx, _ = stages.run("clustering", array_hash(np.array(sorted(hyps))), choose)

    def articulate():
        sub = _part_subset(tracks, moving)
        init = init_articulation(sub, joint_kind, floor, [hyps[m] for m in moving])
        pairs = [(i, i + 1) for i in range(n - 1)]
        kw = dict(inlier_threshold=cfg.part_inlier_threshold, seed=cfg.seed, max_iterations=cfg.ransac_iterations, floor=floor, with_information=True)
        odo = relative_part_transforms(sub, pairs, **kw)
        have = {(e[0], e[1]) for e in odo}
        bridged = [p for p in pairs if p not in have]
        if bridged:
            # no track spans these frames: a weak edge predicted by the initial joint keeps the chain connected
            log.info("%s: %d odometry edges bridged by the initial joint", fragment_id, len(bridged))
            odo += [(i, j, joint_pose(init, j) @ joint_pose(init, i).inverse(), 1, np.eye(6)) for i, j in bridged]
            odo.sort(key=lambda e: e[0])
        loops = relative_part_transforms(sub, part_loop_pairs(n), **kw)
        graph = build_part_graph(odo, loops, cfg.part_mu, num_nodes=n)
        return refine_articulated(graph, init, cfg.lm_iterations)

    sol = stages.run("posegraph", array_hash(moving), articulate)
    joint = sol.joint

    def segment():
        if frag.region_maps is None:
            raise InvalidSpec("segmentation needs region maps")
        # short-arc tracks fit poorly on their own but follow the refined joint
        extra = recruit_tracks(tracks, np.setdiff1d(displaced, moving), joint, cfg.epsilon_f, floor)
        part = np.union1d(moving, extra).astype(int)
        kms = keyframe_masks(tracks, part, static_idx, cams, frag.region_maps, K, cfg.keyframes, cfg.eta_m, cfg.ratio_epsilon, floor)
        out = propagate_masks(kms, frag, sol.poses, cams, cfg.eta_m, cfg.ratio_epsilon, cfg.closing_radius, cfg.mask_depth_tolerance)
        return [pm.mask for pm in out], part

    masks, moving = stages.run("segmentation", array_hash(moving, static_idx) + _pose_hash(sol.poses), segment)

    excl = [m | np.asarray(h, bool) for m, h in zip(masks, hand)] if hand is not None else masks
    static_mesh, submap = _static_submap(fragment_id, kind, frag, cams, excl, cfg, stages)
    pvol = stages.run(
        "part_fusion",
        array_hash(*masks) + _pose_hash(sol.poses),
        fuse_part,
        frag.depths,
        K,
        cams,
        sol.poses,
        masks,
        voxel_size=cfg.voxel_size,
        truncation=cfg.truncation,
        max_depth=cfg.max_depth,
    )
    part_mesh = TriangleMesh.empty() if pvol is None else extract_mesh(pvol)
    submap.part_entries.append(PartEntry(joint, part_mesh, list(sol.poses)))
    return FragmentResult(
        fragment_id, kind, cams, static_mesh, submap, joint, sol, masks, part_mesh, moving, stages.hashes, stages.timings
    )


# --- on-disk outputs --------------------------------------------------------------------


def _poses_json(poses) -> list:
    return [p.matrix().tolist() for p in poses]


def _poses_from_json(rows) -> list[Pose]:
    return [Pose.from_matrix(np.array(m)) for m in rows]


def write_fragment_outputs(result: FragmentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(result.static_mesh, out / "static.ply")
    doc = {
        "fragment_id": result.fragment_id,
        "kind": result.kind,
        "camera_poses": _poses_json(result.camera_poses),
        "input_hashes": result.input_hashes,
        "static_mesh": "static.ply",
        "joint": None,
    }
    if result.joint is not None:
        write_ply(result.part_mesh, out / "part.ply")
        (out / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(result.part_masks):
            write_mask_png(out / "masks" / f"{i:06d}.png", m)
        doc.update(
            joint=result.joint.to_dict(),
            part_poses=_poses_json(result.part_poses),
            part_mesh="part.ply",
            masks="masks",
            moving_tracks=[int(t) for t in result.moving_tracks],
        )
    (out / "result.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def _ingest(manifest: FragmentManifest) -> Fragment:
    try:
        manifest.validate()
        return load_fragment(manifest)
    except (OSError, InvalidSpec, ValueError) as exc:
        raise FragmentFailure("ingest", f"{type(exc).__name__}: {exc}") from exc


def run_fragment(manifest: FragmentManifest, config: PipelineConfig, out_dir=None) -> FragmentResult:
    """Load, process and (optionally) write one fragment."""
    frag = _ingest(manifest)
    res = process_fragment(frag, manifest.kind, config, manifest.fragment_id, manifest.joint_kind)
    if out_dir is not None:
        write_fragment_outputs(res, out_dir)
    return res


def _run_one(args):
    manifest, config, out_dir = args
    try:
        return run_fragment(manifest, config, out_dir)
    except FragmentFailure as exc:
        return exc


@dataclass
class SceneRun:
    scene: SceneModel | None
    results: list[FragmentResult]
    failures: dict  # fragment_id -> FragmentFailure


def run_fragments(manifests: list[FragmentManifest], config: PipelineConfig, out_dir=None) -> tuple[list[FragmentResult], dict]:
    jobs = [(m, config, None if out_dir is None else Path(out_dir) / m.fragment_id) for m in manifests]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(config.workers)) as pool:
            outs = list(pool.map(_run_one, jobs))
    else:
        outs = [_run_one(j) for j in jobs]
    results, failures = [], {}
    for m, o in zip(manifests, outs):
        if isinstance(o, FragmentFailure):
            log.warning("fragment %s failed: %s", m.fragment_id, o)
            failures[m.fragment_id] = o
        else:
            results.append(o)
    return results, failures


def run_scene(manifests: list[FragmentManifest], config: PipelineConfig, out_dir=None) -> SceneRun:
    """Process fragments (in capture order), then align their submaps into one scene."""
    if not manifests:
        raise InvalidSpec("a scene needs at least one fragment")
    results, failures = run_fragments(manifests, config, out_dir)
    if not results:
        return SceneRun(None, [], failures)
    adjacency = {m.fragment_id: list(m.adjacent) for m in manifests}
    scene = align_submaps(
        [r.submap for r in results],
        adjacency,
        rmse_threshold=config.rmse_threshold,
        max_iterations=config.icp_iterations,
        trim=config.trim_fraction,
        voxel_size=config.voxel_size,
    )
    return SceneRun(scene, results, failures)


# --- scene files ---------------------------------------------------------------------------


def write_scene(scene: SceneModel, out_dir) -> Path:
    """Scene manifest (JSON) next to PLY meshes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(scene.static_mesh, out / "static.ply")
    parts = []
    for k, p in enumerate(scene.parts):
        write_ply(p.mesh, out / f"part_{k}.ply")
        parts.append(
            {
                "fragment_id": p.fragment_id,
                "joint": p.joint.to_dict(),
                "mesh": f"part_{k}.ply",
                "motion_range": [p.motion_range.lower, p.motion_range.upper],
                "poses": _poses_json(p.poses),
            }
        )
    doc = {"static_mesh": "static.ply", "parts": parts, "submap_poses": _poses_json(scene.submap_poses), "fragment_ids": scene.fragment_ids}
    path = out / "scene.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_scene(path) -> SceneModel:
    from .align import ScenePart
    from .joints import MotionRange
    from .mesh import read_ply

    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    try:
        doc = json.loads(path.read_text())
        root = path.parent
        parts = [
            ScenePart(JointModel.from_dict(p["joint"]), read_ply(root / p["mesh"]), MotionRange(*p["motion_range"]), p["fragment_id"], _poses_from_json(p["poses"]))
            for p in doc["parts"]
        ]
        return SceneModel(read_ply(root / doc["static_mesh"]), parts, _poses_from_json(doc["submap_poses"]), list(doc["fragment_ids"]))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InvalidSpec(f"cannot read scene {path}: {exc}") from exc


# --- evaluation ------------------------------------------------------------------------------


def evaluate_fragment(fragment_id: str, joint, part_poses, part_mesh, masks, gt, config: PipelineConfig):
    """EvalReport of one dynamic fragment against its ground truth."""
    from .metrics import (
        WRONG_KIND,
        EvalReport,
        add_metrics,
        axis_direction_error,
        axis_position_error,
        chamfer,
        miou,
        state_error,
    )
    from .joints import REVOLUTE

    if gt.joint is None or joint is None:
        return EvalReport(fragment_id, None if joint is None else joint.kind)
    if joint.kind != gt.joint.kind:
        return EvalReport(fragment_id, joint.kind, True, WRONG_KIND)
    r = EvalReport(fragment_id, joint.kind)
    r.axis_error_deg = axis_direction_error(joint, gt.joint)
    if joint.kind == REVOLUTE:
        r.axis_position_error_m = axis_position_error(joint, gt.joint)
    r.state_error = state_error(joint, gt.joint)
    if len(gt.part_surface):
        r.add_percent, r.adds_percent = add_metrics(part_poses, gt.part_poses, gt.part_surface, config.add_fraction)
        if part_mesh is not None and not part_mesh.is_empty():
            r.chamfer_cm = chamfer(part_mesh, gt.part_surface, config.chamfer_samples, config.seed)
    if masks is not None and len(gt.part_masks):
        r.miou = miou(np.stack(masks), gt.part_masks)
    return r


def failure_report(fragment_id: str, failure: FragmentFailure):
    from .metrics import CRASH, EvalReport

    return EvalReport(fragment_id, None, True, f"{CRASH}:{failure.stage}")


def gt_submap_poses(gts) -> list[Pose]:
    """Ground-truth fragment frames relative to the first fragment."""
    C0 = gts[0].room_from_world
    return [C0.inverse() @ g.room_from_world for g in gts]


def evaluate_scene(scene: SceneModel, gts, config: PipelineConfig) -> dict:
    """Static reconstruction and submap pose errors of an aligned scene."""
    from .geometry import rotation_angle
    from .metrics import chamfer

    W = gt_submap_poses(gts)
    out = {"submap_rotation_error_deg": [], "submap_translation_error_m": []}
    for est, ref in zip(scene.submap_poses, W):
        E = ref.inverse() @ est
        out["submap_rotation_error_deg"].append(float(np.degrees(rotation_angle(E.rotation))))
        out["submap_translation_error_m"].append(float(np.linalg.norm(E.translation)))
    surf = [Wk.apply(g.static_surface) for g, Wk in zip(gts, W) if g.static_surface is not None and len(g.static_surface)]
    out["static_chamfer_cm"] = None
    if surf and not scene.static_mesh.is_empty():
        out["static_chamfer_cm"] = chamfer(scene.static_mesh, np.concatenate(surf), config.scene_chamfer_samples, config.seed)
    return out


def report_json(reports, scene_metrics: dict | None = None) -> str:
    from .metrics import _jsonable, summarize

    payload = {"fragments": [r.to_dict() for r in reports], "summary": summarize(reports) if reports else None, "scene": scene_metrics}
    return json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n"
