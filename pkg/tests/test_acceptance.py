"""Acceptance suite: end-to-end targets on the synthetic templates plus the property suites.

One PASS/FAIL line per criterion is printed in the terminal summary.
"""
import gc
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from egotwin.align import SceneModel, ScenePart
from egotwin.cli import main
from egotwin.config import PipelineConfig
from egotwin.dataset import DYNAMIC_FRAGMENT
from egotwin.errors import FragmentFailure
from egotwin.joints import REVOLUTE, joint_pose, motion_range
from egotwin.metrics import add_metrics, axis_direction_error, axis_position_error, chamfer, miou, state_error
from egotwin.pipeline import process_fragment, read_scene
from egotwin.synth import make_template, render_fragment
from egotwin.urdf import export_urdf, parse_urdf

from conftest import ACCEPTANCE

TEMPLATES = ("cabinet-door", "drawer")
SEEDS = range(10)
TESTS = Path(__file__).parent


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def run_template(name: str, seed: int, noisy: bool) -> dict:
    frag, gt = render_fragment(make_template(name, seed=seed, noisy=noisy))
    cfg = PipelineConfig(seed=seed)
    t0 = time.perf_counter()
    try:
        res = process_fragment(frag, DYNAMIC_FRAGMENT, cfg, name, gt.joint.kind)
    except FragmentFailure as exc:
        return {"name": name, "seed": seed, "failed": f"crash:{exc.stage}"}
    seconds = time.perf_counter() - t0
    if res.joint is None or res.joint.kind != gt.joint.kind:
        return {"name": name, "seed": seed, "failed": "wrong_kind"}
    j = res.joint
    add, adds = add_metrics(res.part_poses, gt.part_poses, gt.part_surface, cfg.add_fraction)
    row = {
        "name": name,
        "seed": seed,
        "failed": None,
        "seconds": seconds,
        "axis": axis_direction_error(j, gt.joint),
        "pivot": axis_position_error(j, gt.joint) if j.kind == REVOLUTE else 0.0,
        "state": state_error(j, gt.joint),  # degrees or meters
        "miou": miou(np.stack(res.part_masks), gt.part_masks),
        "add": add,
        "adds": adds,
        "chamfer_cm": chamfer(res.part_mesh, gt.part_surface, samples=cfg.chamfer_samples, seed=seed),
        "joint": j,
        "mesh": res.part_mesh,
        "poses": res.part_poses,
    }
    del frag, gt, res
    gc.collect()
    return row


@pytest.fixture(scope="session")
def noise_free():
    return {name: run_template(name, 0, noisy=False) for name in TEMPLATES}


@pytest.fixture(scope="session")
def noisy_suite():
    return [run_template(name, seed, noisy=True) for name in TEMPLATES for seed in SEEDS]


def state_tol(name):
    return 0.5 if name == "cabinet-door" else 0.002


def test_criterion_1_noise_free_accuracy(noise_free):
    ok, parts = True, []
    for name, r in noise_free.items():
        if r["failed"]:
            ok = False
            parts.append(f"{name} failed ({r['failed']})")
            continue
        good = r["axis"] < 0.5 and r["pivot"] < 0.005 and r["state"] < state_tol(name) and r["seconds"] < 60
        ok &= good
        unit = "deg" if name == "cabinet-door" else "m"
        parts.append(f"{name}: axis {r['axis']:.3f} deg, pivot {r['pivot'] * 1000:.2f} mm, state {r['state']:.4f} {unit}, {r['seconds']:.1f} s")
    record(1, ok, "; ".join(parts))


def test_criterion_2_noisy_accuracy(noisy_suite):
    failed = [r for r in noisy_suite if r["failed"]]
    rate = 100.0 * len(failed) / len(noisy_suite)
    ok, parts = rate <= 5.0, [f"failure rate {rate:.1f}%"]
    for name in TEMPLATES:
        rows = [r for r in noisy_suite if r["name"] == name and not r["failed"]]
        if not rows:
            ok = False
            parts.append(f"{name}: no successful runs")
            continue
        ax, piv, st = (float(np.median([r[k] for r in rows])) for k in ("axis", "pivot", "state"))
        ok &= ax <= 5.0 and piv <= 0.03 and st <= (5.0 if name == "cabinet-door" else 0.02)
        parts.append(f"{name} median axis {ax:.2f} deg, pivot {piv * 100:.2f} cm, state {st:.4f}")
    record(2, ok, "; ".join(parts))


def test_criterion_3_segmentation(noisy_suite):
    rows = [r for r in noisy_suite if not r["failed"]]
    m = float(np.mean([r["miou"] for r in rows]))
    record(3, m >= 0.75, f"mean mIoU {m:.3f} over {len(rows)} sequences")


def test_criterion_4_pose_accuracy(noisy_suite):
    rows = [r for r in noisy_suite if not r["failed"]]
    adds = float(np.mean([r["adds"] for r in rows]))
    add = float(np.mean([r["add"] for r in rows]))
    record(4, adds >= 75.0 and add >= 65.0, f"ADD-S {adds:.1f}%, ADD {add:.1f}%")


def test_criterion_5_reconstruction(noise_free, noisy_suite):
    voxel_cm = 100 * PipelineConfig().voxel_size
    noisy = [r["chamfer_cm"] for r in noisy_suite if not r["failed"]]
    clean = [r["chamfer_cm"] for r in noise_free.values() if not r["failed"]]
    ok = len(clean) == len(TEMPLATES) and max(noisy) <= 2.0 and max(clean) <= 2 * voxel_cm
    record(5, ok, f"noisy Chamfer max {max(noisy):.2f} cm, noise-free max {max(clean):.2f} cm")


def run_pytest(*args) -> tuple[bool, str]:
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args], cwd=TESTS.parent, capture_output=True, text=True)
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    return proc.returncode == 0, last


def test_criterion_6_optimizer_properties():
    ok, line = run_pytest(
        str(TESTS / "test_posegraph.py"),
        "-k",
        "cost_non_increasing_on_random_graphs or corrupted_edge_is_suppressed or articulated_jacobian_matches_finite_differences",
    )
    record(6, ok, f"descent, edge suppression (20 seeds), Jacobian check: {line}")


def test_criterion_7_property_suites():
    modules = ("geometry", "joints", "trackfit", "clustering", "segmentation", "metrics")
    ok, line = run_pytest(*(str(TESTS / f"test_{m}.py") for m in modules))
    record(7, ok, f"{', '.join(modules)}: {line}")


@pytest.fixture(scope="session")
def scene_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("determinism")
    assert main(["synth", "--template", "drawer", "--scene", "--frames", "20", "--seed", "3", "--out", str(root / "in")]) == 0
    codes = [main(["scene", str(root / "in" / "scene.json"), "--seed", "3", "--out", str(root / f"run{k}")]) for k in range(2)]
    return root, codes


def test_criterion_8_determinism(scene_runs):
    root, codes = scene_runs
    a, b = ((root / f"run{k}" / "report.json").read_bytes() for k in range(2))
    sa, sb = ((root / f"run{k}" / "scene" / "scene.json").read_bytes() for k in range(2))
    ok = codes == [0, 0] and a == b and sa == sb
    record(8, ok, f"exit codes {codes}, report.json identical: {a == b}, scene.json identical: {sa == sb}")


def test_criterion_9_urdf_round_trip(noise_free, scene_runs, tmp_path):
    root, _ = scene_runs
    scene = read_scene(root / "run0" / "scene")
    # add the noise-free fragment joints so both joint types are exercised
    for name, r in noise_free.items():
        if not r["failed"]:
            scene.parts.append(ScenePart(r["joint"], r["mesh"], motion_range(r["joint"]), name, r["poses"]))
    model = parse_urdf(export_urdf(SceneModel(scene.static_mesh, scene.parts, scene.submap_poses, scene.fragment_ids), tmp_path / "scene.urdf"))
    worst, kinds = 0.0, set()
    for part, uj in zip(scene.parts, model.joints):
        j = part.joint
        kinds.add(uj.kind)
        for f in np.linspace(0, j.num_frames - 1, 20).round().astype(int):
            d = uj.world_motion(j.states[f]).matrix() - joint_pose(j, f).matrix()
            worst = max(worst, float(np.abs(d).max()))
    ok = len(model.joints) == len(scene.parts) >= 3 and kinds == {"revolute", "prismatic"} and worst < 1e-6
    record(9, ok, f"{len(model.joints)} joints ({', '.join(sorted(kinds))}), max deviation {worst:.2e}")
