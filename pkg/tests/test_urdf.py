import tempfile
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egotwin.align import SceneModel, ScenePart
from egotwin.errors import InvalidSpec
from egotwin.geometry import Pose, rotation_about_axis
from egotwin.joints import PRISMATIC, REVOLUTE, JointModel, motion_range
from egotwin.mesh import TriangleMesh, box_mesh
from egotwin.urdf import export_urdf, joint_origin, parse_urdf, validate_urdf


def part(joint, mesh=None):
    mesh = box_mesh([0, 0, 0], [0.3, 0.02, 0.5]) if mesh is None else mesh
    return ScenePart(joint, mesh, motion_range(joint), "f0", [joint.transform(s) for s in joint.states])


def scene(parts):
    return SceneModel(box_mesh([-1, -1, -0.1], [1, 1, 0]), parts, [Pose.identity()], ["f0"])


def read_obj(path):
    rows = [l.split()[1:] for l in Path(path).read_text().splitlines() if l.startswith("v ")]
    return np.array(rows, float)


def test_drawer_exports_prismatic_joint(tmp_path):
    j = JointModel(PRISMATIC, [0.0, -1.0, 0.0], np.linspace(0, 0.4, 5))
    text = export_urdf(scene([part(j)]), tmp_path / "s.urdf")
    assert '<joint name="joint_0" type="prismatic">' in text
    assert 'lower="0" upper="0.4"' in text
    assert 'axis xyz="0 -1 0"' in text
    assert (tmp_path / "meshes" / "static.obj").exists() and (tmp_path / "meshes" / "part_0.obj").exists()


def test_no_parts_gives_single_link(tmp_path):
    model = parse_urdf(export_urdf(scene([]), tmp_path / "s.urdf"))
    assert list(model.links) == ["base"] and model.joints == []
    assert model.links["base"] == ["meshes/static.obj", "meshes/static.obj"]


def random_joint(rng, kind):
    a = rng.normal(size=3)
    a /= np.linalg.norm(a)
    states = np.sort(rng.uniform(-1.5, 1.5, size=6))
    states -= states[0]
    if kind == PRISMATIC:
        return JointModel(PRISMATIC, a, 0.3 * states)
    p = rng.normal(size=3)
    return JointModel(REVOLUTE, a, states, p - (a @ p) * a)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_export_parse_reproduces_joint_motion(seed):
    rng = np.random.default_rng(seed)
    joints = [random_joint(rng, REVOLUTE), random_joint(rng, PRISMATIC)]
    parts = [part(j, box_mesh(rng.uniform(-1, 0, 3), rng.uniform(0.1, 1, 3))) for j in joints]
    with tempfile.TemporaryDirectory() as d:
        model = parse_urdf(export_urdf(scene(parts), Path(d) / "s.urdf"))
        for k, (j, uj) in enumerate(zip(joints, model.joints)):
            assert uj.kind == ("revolute" if j.kind == REVOLUTE else "prismatic")
            assert (uj.lower, uj.upper) == (j.states.min(), j.states.max())
            link_pts = read_obj(Path(d) / "meshes" / f"part_{k}.obj")
            for q in np.linspace(uj.lower, uj.upper, 20):
                assert np.abs(uj.world_motion(q).matrix() - j.transform(q).matrix()).max() < 1e-6
            # the link mesh, posed at the first state, is the canonical mesh
            placed = (uj.origin @ uj.motion(j.states[0])).apply(link_pts)
            assert np.abs(placed - parts[k].mesh.vertices).max() < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_joint_origin_gauge_leaves_motion_unchanged(seed):
    rng = np.random.default_rng(seed)
    j = random_joint(rng, REVOLUTE)
    g = rng.normal(size=3)
    G = Pose(rotation_about_axis(g / np.linalg.norm(g), rng.uniform(-np.pi, np.pi)), rng.normal(size=3))
    O = joint_origin(j, G)
    q = rng.uniform(-2, 2)
    M = Pose(rotation_about_axis(O.rotation.T @ j.axis, q), np.zeros(3))
    assert np.abs((O @ M @ O.inverse()).matrix() - j.transform(q).matrix()).max() < 1e-9


GOOD = """<robot name="r">
  <link name="base"/><link name="p"/>
  <joint name="j" type="revolute"><parent link="base"/><child link="p"/>
    <axis xyz="0 0 1"/><limit lower="0" upper="1" effort="1" velocity="1"/></joint>
</robot>"""


@pytest.mark.parametrize(
    "old,new",
    [
        ('type="revolute"', 'type="hinge"'),
        ('<child link="p"/>', '<child link="q"/>'),
        ('xyz="0 0 1"', 'xyz="0 0 0"'),
        ('xyz="0 0 1"', 'xyz="0 1"'),
        ('lower="0" upper="1"', 'lower="2" upper="1"'),
        (' effort="1"', ""),
        ('<link name="p"/>', '<link name="base"/>'),
        ('<link name="p"/>', '<link name="p"/><link name="orphan"/>'),
        ('<link name="p"/>', '<link name="p"><visual><geometry><mesh filename="/abs/p.obj"/></geometry></visual></link>'),
        ('<robot name="r">', '<robot>'),
    ],
)
def test_validator_rejects_malformed(old, new):
    validate_urdf(ET.fromstring(GOOD))
    with pytest.raises(InvalidSpec):
        validate_urdf(ET.fromstring(GOOD.replace(old, new)))


def test_parse_rejects_non_xml():
    with pytest.raises(InvalidSpec):
        parse_urdf("<robot name='x'>")


def test_empty_part_mesh_is_allowed(tmp_path):
    j = JointModel(PRISMATIC, [1.0, 0, 0], [0.0, 0.1])
    model = parse_urdf(export_urdf(scene([part(j, TriangleMesh.empty())]), tmp_path / "s.urdf"))
    assert model.links["part_0"] == []
