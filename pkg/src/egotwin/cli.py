"""Batch command-line interface: synth, fragment, scene, eval, export-urdf."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .dataset import load_manifest
from .errors import DisconnectedScene, EgotwinError, FragmentFailure, InvalidSpec, WriteError

log = logging.getLogger("egotwin")

EXIT_OK, EXIT_INVALID, EXIT_FRAGMENT, EXIT_SCENE = 0, 2, 3, 4


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig().validate()
    return cfg.with_seed(args.seed)


def _scene_inputs(paths) -> list[Path]:
    """Fragment manifests from manifest paths, fragment dirs, or a scene list file."""
    out = []
    for p in map(Path, paths):
        if p.is_file() and p.name != "manifest.json" and p.suffix == ".json":
            doc = json.loads(p.read_text())
            if "fragments" not in doc:
                raise InvalidSpec(f"{p} lists no fragments")
            out += [(p.parent / f).resolve() for f in doc["fragments"]]
        else:
            out.append(p.resolve())
    return out


def cmd_synth(args) -> int:
    from .synth import generate, make_scene, make_template

    out = Path(args.out)
    noisy = not args.noise_free
    if args.scene:
        specs = make_scene(args.template, seed=args.seed or 0, n=args.frames, noisy=noisy)
    else:
        specs = [make_template(args.template, seed=args.seed or 0, n=args.frames, noisy=noisy)]
    rels = []
    for k, spec in enumerate(specs):
        adj = [s.name for i, s in enumerate(specs) if abs(i - k) == 1]
        m, _ = generate(spec, out / spec.name, spec.name, adjacent=adj)
        rels.append(f"{spec.name}/manifest.json")
        print(f"wrote {m.root / 'manifest.json'}")
    (out / "scene.json").write_text(json.dumps({"fragments": rels}, indent=1) + "\n")
    return EXIT_OK


def cmd_fragment(args) -> int:
    from .pipeline import run_fragment

    cfg = _config(args)
    m = load_manifest(args.manifest)
    out = Path(args.out)
    res = run_fragment(m, cfg, out)
    if res.joint is not None:
        j = res.joint
        print(f"{m.fragment_id}: {j.kind} axis {j.axis.round(4).tolist()} range [{j.states.min():.4f}, {j.states.max():.4f}]")
    else:
        print(f"{m.fragment_id}: static fragment, {len(res.static_mesh.vertices)} vertices")
    return EXIT_OK


def _load_gts(manifests):
    from .synth import GroundTruth

    gts = []
    for m in manifests:
        if m.ground_truth is None:
            return None
        d = json.loads((m.root / m.ground_truth).read_text())
        gts.append(GroundTruth.from_dict(d, m.root))
    return gts


def cmd_scene(args) -> int:
    from .pipeline import evaluate_fragment, evaluate_scene, failure_report, report_json, run_scene, write_scene

    cfg = _config(args)
    manifests = [load_manifest(p) for p in _scene_inputs(args.inputs)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = run_scene(manifests, cfg, out / "fragments")
    (out / "inputs.json").write_text(json.dumps({"fragments": [str(m.root / "manifest.json") for m in manifests]}, indent=1) + "\n")
    if run.scene is None:
        log.error("every fragment failed")
        return EXIT_FRAGMENT
    write_scene(run.scene, out / "scene")
    gts = _load_gts(manifests)
    if gts is not None:
        by_id = {r.fragment_id: r for r in run.results}
        reports = []
        for m, gt in zip(manifests, gts):
            r = by_id.get(m.fragment_id)
            if r is None:
                reports.append(failure_report(m.fragment_id, run.failures[m.fragment_id]))
            elif r.joint is not None:
                reports.append(evaluate_fragment(m.fragment_id, r.joint, r.part_poses, r.part_mesh, r.part_masks, gt, cfg))
        ok = [g for m, g in zip(manifests, gts) if m.fragment_id in by_id]
        (out / "report.json").write_text(report_json(reports, evaluate_scene(run.scene, ok, cfg)))
        print(f"report: {out / 'report.json'}")
    print(f"scene: {len(run.scene.parts)} parts over {len(run.scene.fragment_ids)} fragments -> {out / 'scene'}")
    return EXIT_FRAGMENT if run.failures else EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import read_mask_png
    from .geometry import Pose
    from .joints import JointModel
    from .mesh import read_ply
    from .metrics import reports_to_table
    from .pipeline import evaluate_fragment, evaluate_scene, read_scene, report_json

    import numpy as np

    cfg = _config(args)
    out = Path(args.outputs)
    inputs = json.loads((out / "inputs.json").read_text())["fragments"]
    manifests = [load_manifest(p) for p in inputs]
    gts = _load_gts(manifests)
    if gts is None:
        print("no ground truth: nothing to evaluate")
        return EXIT_OK
    reports = []
    for m, gt in zip(manifests, gts):
        fdir = out / "fragments" / m.fragment_id
        doc = json.loads((fdir / "result.json").read_text())
        if doc.get("joint") is None:
            continue
        masks = [read_mask_png(p) for p in sorted((fdir / doc["masks"]).glob("*.png"))]
        poses = [Pose.from_matrix(np.array(x)) for x in doc["part_poses"]]
        reports.append(evaluate_fragment(m.fragment_id, JointModel.from_dict(doc["joint"]), poses, read_ply(fdir / doc["part_mesh"]), masks, gt, cfg))
    scene = read_scene(out / "scene")
    text = report_json(reports, evaluate_scene(scene, gts, cfg))
    (out / "eval.json").write_text(text)
    sys.stdout.write(reports_to_table(reports))
    return EXIT_OK


def cmd_export_urdf(args) -> int:
    from .pipeline import read_scene
    from .urdf import export_urdf

    scene = read_scene(args.scene)
    export_urdf(scene, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egotwin", description="Articulated scene reconstruction from egocentric RGB-D fragments.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="plain-text key = value configuration file")
        sp.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("synth", help="render a synthetic fragment (or two-fragment scene) with ground truth")
    s.add_argument("--template", choices=("cabinet-door", "drawer"), default="drawer")
    s.add_argument("--scene", action="store_true", help="two fragments: the interaction and a static sweep")
    s.add_argument("--noise-free", action="store_true")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fragment", help="process one fragment")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_fragment)

    s = sub.add_parser("scene", help="process fragments and align them into one scene")
    s.add_argument("inputs", nargs="+", help="fragment manifests, fragment directories or a scene list")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_scene)

    s = sub.add_parser("eval", help="re-evaluate scene outputs against ground truth")
    s.add_argument("outputs", help="output directory of the scene command")
    common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-urdf", help="export a scene as URDF")
    s.add_argument("scene", help="scene directory or scene.json")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_export_urdf)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FragmentFailure as exc:
        print(f"fragment failure: {exc}", file=sys.stderr)
        return EXIT_FRAGMENT
    except DisconnectedScene as exc:
        print(f"scene failure: {exc}", file=sys.stderr)
        return EXIT_SCENE
    except (InvalidSpec, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except WriteError as exc:
        print(f"write failure: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except EgotwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENE


if __name__ == "__main__":
    sys.exit(main())
