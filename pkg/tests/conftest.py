import functools

import numpy as np
import pytest

from egotwin.joints import PRISMATIC, REVOLUTE, JointModel, joint_pose
from egotwin.trackfit import TrackSet


def smoothstep(t):
    t = np.clip(t, 0, 1)
    return t * t * (3 - 2 * t)


def door_joint(n=30, sweep=np.pi / 2):
    a = np.array([0.0, 0.0, 1.0])
    p = np.array([-0.4, 0.5, 0.0])
    return JointModel(REVOLUTE, a, sweep * smoothstep(np.linspace(0, 1, n)), p)


def drawer_joint(n=30, length=0.4):
    return JointModel(PRISMATIC, np.array([0.0, -1.0, 0.0]) , length * smoothstep(np.linspace(0, 1, n)))


def part_tracks(model: JointModel, n_tracks, noise, rng, extent=((-0.35, 0.35), (0.45, 0.5), (0.1, 0.8))):
    """Points sampled on a part, moved by ``model`` with isotropic per-frame noise."""
    lo = np.array([e[0] for e in extent])
    hi = np.array([e[1] for e in extent])
    base = rng.uniform(lo, hi, size=(n_tracks, 3))
    if model.kind == REVOLUTE:
        base[:, 0] = np.maximum(base[:, 0], model.pivot[0] + 0.1)
    n = model.num_frames
    pos = np.zeros((n_tracks, n, 3))
    for i in range(n):
        pos[:, i] = joint_pose(model, i).apply(base)
    pos += rng.normal(scale=noise, size=pos.shape) if noise > 0 else 0.0
    return TrackSet(pos, np.ones((n_tracks, n)), np.zeros(n_tracks, int))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@functools.lru_cache(maxsize=4)
def rendered(name: str, seed: int = 0, noisy: bool = False, n: int = 60):
    """Small cache of synthetic fragments: ``(Fragment, GroundTruth)``."""
    from egotwin.synth import make_template, render_fragment

    return render_fragment(make_template(name, seed=seed, noisy=noisy, n=n))


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
