import json

import numpy as np
import pytest

from egotwin.config import PipelineConfig
from egotwin.dataset import STATIC_FRAGMENT, load_manifest
from egotwin.errors import FragmentFailure, InvalidSpec
from egotwin.joints import PRISMATIC, JointModel
from egotwin.pipeline import (
    _Stages,
    array_hash,
    read_scene,
    recruit_tracks,
    run_fragment,
    run_scene,
    write_scene,
)
from egotwin.synth import generate, make_scene
from egotwin.trackfit import TrackSet

from conftest import drawer_joint, part_tracks


@pytest.fixture(scope="module")
def static_dir(tmp_path_factory):
    spec = make_scene("drawer", n=16, noisy=False)[1]
    root = tmp_path_factory.mktemp("frag") / spec.name
    generate(spec, root, spec.name)
    return root


def test_array_hash_is_content_addressed():
    a = np.arange(6.0)
    assert array_hash(a) == array_hash(a.copy())
    assert array_hash(a) != array_hash(a.reshape(2, 3))
    assert array_hash(a) != array_hash(a.astype(np.float32))


def test_stage_errors_become_fragment_failures():
    stages = _Stages("f")

    def boom():
        raise ValueError("bad")

    with pytest.raises(FragmentFailure) as info:
        stages.run("clustering", "h", boom)
    assert info.value.stage == "clustering" and stages.hashes["clustering"] == "h"
    assert stages.run("fusion", "h2", lambda x: x + 1, 1) == 2 and "fusion" in stages.timings


def test_recruit_tracks_keeps_only_predicted_trajectories(rng):
    j = drawer_joint(12)
    moving = part_tracks(j, 6, 0.0, rng)
    still = TrackSet(np.repeat(rng.normal(size=(4, 1, 3)), 12, axis=1), np.ones((4, 12)), np.zeros(4, int))
    # a track that moves the other way
    wrong = part_tracks(JointModel(PRISMATIC, -j.axis, j.states), 2, 0.0, rng)
    ts = TrackSet(
        np.concatenate([moving.positions, still.positions, wrong.positions]),
        np.ones((12, 12)),
        np.zeros(12, int),
    )
    got = recruit_tracks(ts, range(12), j, 0.03, 0.5)
    assert got == list(range(6))
    # a late-born track is judged from its first visible frame
    vis = ts.visibility.copy()
    vis[0, :5] = 0
    assert 0 in recruit_tracks(TrackSet(ts.positions, vis, ts.birth_frame), [0], j, 0.03, 0.5)


def test_static_fragment_emits_no_joint(static_dir, tmp_path):
    m = load_manifest(static_dir)
    assert m.kind == STATIC_FRAGMENT
    res = run_fragment(m, PipelineConfig(), tmp_path / "out")
    assert res.joint is None and res.part_mesh is None and res.part_masks is None
    assert len(res.camera_poses) == 16
    assert np.allclose(res.camera_poses[0].matrix(), np.eye(4), atol=1e-9)
    assert not res.static_mesh.is_empty()
    doc = json.loads((tmp_path / "out" / "result.json").read_text())
    assert doc["joint"] is None and doc["kind"] == STATIC_FRAGMENT


def test_missing_depth_fails_at_ingest(static_dir, tmp_path):
    m = load_manifest(static_dir)
    m.frames = [dict(m.frames[0], depth="depth/nothing.png")] + m.frames[1:]
    with pytest.raises(FragmentFailure) as info:
        run_fragment(m, PipelineConfig())
    assert info.value.stage == "ingest"


def test_single_fragment_scene_is_anchored(static_dir, tmp_path):
    run = run_scene([load_manifest(static_dir)], PipelineConfig())
    assert not run.failures and run.scene.parts == []
    assert np.allclose(run.scene.submap_poses[0].matrix(), np.eye(4))
    write_scene(run.scene, tmp_path / "scene")
    back = read_scene(tmp_path / "scene")
    assert back.fragment_ids == run.scene.fragment_ids
    assert np.allclose(back.static_mesh.vertices, run.scene.static_mesh.vertices, atol=1e-5)
    with pytest.raises(InvalidSpec):
        run_scene([], PipelineConfig())


def test_scene_survives_a_failed_fragment(static_dir):
    good = load_manifest(static_dir)
    bad = load_manifest(static_dir)
    bad.fragment_id = "broken"
    bad.frames = [dict(fr, depth="depth/nothing.png") for fr in bad.frames]
    run = run_scene([bad, good], PipelineConfig())
    assert list(run.failures) == ["broken"] and run.failures["broken"].stage == "ingest"
    assert run.scene.fragment_ids == [good.fragment_id]
