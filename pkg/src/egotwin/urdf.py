"""URDF export of a functional scene, plus a small parser used for kinematic checks."""
from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidSpec, WriteError
from .geometry import Pose, rotation_about_axis
from .joints import PRISMATIC, REVOLUTE
from .mesh import write_obj

JOINT_TYPES = ("revolute", "continuous", "prismatic", "fixed", "floating", "planar")
BASE_LINK = "base"


def _num(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _vec(v) -> str:
    return " ".join(_num(x) for x in v)


def _origin(parent: ET.Element, pose: Pose) -> None:
    rpy = Rotation.from_matrix(pose.rotation).as_euler("xyz")
    ET.SubElement(parent, "origin", xyz=_vec(pose.translation), rpy=_vec(rpy))


def _mesh_link(robot: ET.Element, name: str, mesh_path: str | None) -> None:
    link = ET.SubElement(robot, "link", name=name)
    if mesh_path is None:
        return
    for tag in ("visual", "collision"):
        el = ET.SubElement(link, tag)
        geom = ET.SubElement(el, "geometry")
        ET.SubElement(geom, "mesh", filename=mesh_path)


def joint_origin(joint, gauge: Pose | None = None) -> Pose:
    """Joint frame in the base frame: the gauge pose, shifted onto the pivot for revolute joints."""
    G = Pose.identity() if gauge is None else gauge
    if joint.kind == REVOLUTE:
        return G @ Pose(np.eye(3), G.inverse().apply(joint.pivot))
    return G


def export_urdf(scene, path, robot_name: str = "scene", mesh_dir: str = "meshes") -> str:
    """Write ``scene`` as URDF with OBJ meshes next to it; returns the document text."""
    path = Path(path)
    mdir = path.parent / mesh_dir
    try:
        mdir.mkdir(parents=True, exist_ok=True)
        robot = ET.Element("robot", name=robot_name)
        static_rel = None
        if scene.static_mesh is not None and not scene.static_mesh.is_empty():
            static_rel = f"{mesh_dir}/static.obj"
            write_obj(scene.static_mesh, path.parent / static_rel)
        _mesh_link(robot, BASE_LINK, static_rel)
        for k, part in enumerate(scene.parts):
            j = part.joint
            O = joint_origin(j, getattr(part, "gauge", None))
            rel = None
            if part.mesh is not None and not part.mesh.is_empty():
                rel = f"{mesh_dir}/part_{k}.obj"
                # canonical mesh sits at the first-frame state; the link holds it at zero state in the joint frame
                to_link = O.inverse() @ j.transform(j.states[0]).inverse()
                write_obj(part.mesh.transformed(to_link), path.parent / rel)
            _mesh_link(robot, f"part_{k}", rel)
            el = ET.SubElement(robot, "joint", name=f"joint_{k}", type="revolute" if j.kind == REVOLUTE else "prismatic")
            ET.SubElement(el, "parent", link=BASE_LINK)
            ET.SubElement(el, "child", link=f"part_{k}")
            _origin(el, O)
            ET.SubElement(el, "axis", xyz=_vec(O.rotation.T @ j.axis))
            ET.SubElement(el, "limit", lower=_num(part.motion_range.lower), upper=_num(part.motion_range.upper), effort="100", velocity="1")
        validate_urdf(robot)
        ET.indent(robot)
        text = ET.tostring(robot, encoding="unicode") + "\n"
        path.write_text('<?xml version="1.0"?>\n' + text)
    except OSError as exc:
        raise WriteError(f"cannot write URDF {path}: {exc}") from exc
    return path.read_text()


def _floats(s: str | None, n: int, what: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in (s or "").split()])
    except ValueError as exc:
        raise InvalidSpec(f"{what}: not numeric") from exc
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise InvalidSpec(f"{what}: expected {n} finite numbers")
    return v


def validate_urdf(robot: ET.Element) -> None:
    """Structural checks of the URDF format: names, tree shape, joint fields, relative meshes."""
    if robot.tag != "robot" or not robot.get("name"):
        raise InvalidSpec("root element must be <robot name=...>")
    links = [l.get("name") for l in robot.findall("link")]
    if not links or any(not n for n in links) or len(set(links)) != len(links):
        raise InvalidSpec("links need unique non-empty names")
    for m in robot.iter("mesh"):
        fn = m.get("filename")
        if not fn or os.path.isabs(fn):
            raise InvalidSpec(f"mesh path must be relative: {fn!r}")
    parent_of = {}
    names = set()
    for j in robot.findall("joint"):
        name, kind = j.get("name"), j.get("type")
        if not name or name in names:
            raise InvalidSpec("joints need unique non-empty names")
        names.add(name)
        if kind not in JOINT_TYPES:
            raise InvalidSpec(f"joint {name}: unknown type {kind!r}")
        p, c = j.find("parent"), j.find("child")
        if p is None or c is None or p.get("link") not in links or c.get("link") not in links:
            raise InvalidSpec(f"joint {name}: parent and child must name existing links")
        if c.get("link") in parent_of:
            raise InvalidSpec(f"link {c.get('link')} has two parents")
        parent_of[c.get("link")] = p.get("link")
        o = j.find("origin")
        if o is not None:
            _floats(o.get("xyz", "0 0 0"), 3, f"joint {name} origin xyz")
            _floats(o.get("rpy", "0 0 0"), 3, f"joint {name} origin rpy")
        if kind in ("revolute", "continuous", "prismatic", "planar"):
            ax = j.find("axis")
            a = _floats(ax.get("xyz") if ax is not None else "1 0 0", 3, f"joint {name} axis")
            if np.linalg.norm(a) == 0:
                raise InvalidSpec(f"joint {name}: zero axis")
        if kind in ("revolute", "prismatic"):
            lim = j.find("limit")
            if lim is None or lim.get("effort") is None or lim.get("velocity") is None:
                raise InvalidSpec(f"joint {name}: limit with effort and velocity required")
            lo, hi = float(lim.get("lower", 0)), float(lim.get("upper", 0))
            if lo > hi:
                raise InvalidSpec(f"joint {name}: lower limit above upper")
    roots = [l for l in links if l not in parent_of]
    if len(roots) != 1:
        raise InvalidSpec(f"URDF must have exactly one root link, found {roots}")
    for l in links:
        seen, cur = set(), l
        while cur in parent_of:
            if cur in seen:
                raise InvalidSpec("joint graph has a cycle")
            seen.add(cur)
            cur = parent_of[cur]


@dataclass
class UrdfJoint:
    name: str
    kind: str
    parent: str
    child: str
    origin: Pose
    axis: np.ndarray
    lower: float
    upper: float

    def motion(self, q: float) -> Pose:
        """Child-frame motion at joint value ``q``, in the joint frame."""
        a = self.axis / np.linalg.norm(self.axis)
        if self.kind in ("revolute", "continuous"):
            return Pose(rotation_about_axis(a, q), np.zeros(3))
        if self.kind == "prismatic":
            return Pose(np.eye(3), q * a)
        return Pose.identity()

    def world_motion(self, q: float) -> Pose:
        """Displacement of the child link in the parent frame relative to ``q = 0``."""
        return self.origin @ self.motion(q) @ self.origin.inverse()


@dataclass
class UrdfModel:
    name: str
    links: dict  # name -> list of mesh filenames
    joints: list[UrdfJoint]


def parse_urdf(source) -> UrdfModel:
    """Parse URDF text or a path into links and joints (validated)."""
    text = Path(source).read_text() if not str(source).lstrip().startswith("<") else str(source)
    try:
        robot = ET.fromstring(text)
    except ET.ParseError as exc:
        raise InvalidSpec(f"malformed URDF: {exc}") from exc
    validate_urdf(robot)
    links = {l.get("name"): [m.get("filename") for m in l.iter("mesh")] for l in robot.findall("link")}
    joints = []
    for j in robot.findall("joint"):
        o = j.find("origin")
        xyz = _floats(o.get("xyz", "0 0 0"), 3, "xyz") if o is not None else np.zeros(3)
        rpy = _floats(o.get("rpy", "0 0 0"), 3, "rpy") if o is not None else np.zeros(3)
        ax = j.find("axis")
        axis = _floats(ax.get("xyz"), 3, "axis") if ax is not None else np.array([1.0, 0, 0])
        lim = j.find("limit")
        lo = float(lim.get("lower", 0)) if lim is not None else 0.0
        hi = float(lim.get("upper", 0)) if lim is not None else 0.0
        joints.append(UrdfJoint(j.get("name"), j.get("type"), j.find("parent").get("link"), j.find("child").get("link"), Pose(Rotation.from_euler("xyz", rpy).as_matrix(), xyz), axis, lo, hi))
    return UrdfModel(robot.get("name"), links, joints)
