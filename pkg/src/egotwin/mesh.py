"""Triangle meshes: surface sampling and PLY/OBJ export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import WriteError
from .geometry import Pose


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), int))

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.triangles.copy(), None if self.colors is None else self.colors.copy())

    def area(self) -> float:
        return float(_triangle_areas(self).sum())


def _triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def concatenate(meshes: list[TriangleMesh]) -> TriangleMesh:
    verts, tris, cols = [], [], []
    offset = 0
    with_color = all(m.colors is not None for m in meshes) and meshes
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        if with_color:
            cols.append(m.colors)
        offset += len(m.vertices)
    if not meshes:
        return TriangleMesh.empty()
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(cols) if with_color else None)


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    areas = _triangle_areas(mesh)
    if len(areas) == 0 or areas.sum() <= 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    v = mesh.vertices[mesh.triangles[tri]]
    return (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]


def box_mesh(lo, hi, pose: Pose | None = None) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    faces = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),  # -x, +x
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),  # -y, +y
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),  # -z, +z
    ]
    m = TriangleMesh(corners, np.array(faces))
    return m.transformed(pose) if pose is not None else m


def write_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with float32 vertices and optional uchar RGB."""
    path = Path(path)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}", "property float x", "property float y", "property float z"]
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        vdt += [("r", "u1"), ("g", "u1"), ("b", "u1")]
    verts = np.zeros(len(mesh.vertices), dtype=vdt)
    verts["x"], verts["y"], verts["z"] = mesh.vertices.T.astype("<f4")
    if mesh.colors is not None:
        verts["r"], verts["g"], verts["b"] = mesh.colors.T
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    faces["n"] = 3
    faces["i"] = mesh.triangles
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(verts.tobytes())
            fh.write(faces.tobytes())
    except OSError as exc:
        raise WriteError(str(exc)) from exc


def read_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    color = False
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
        elif line.startswith("property uchar red"):
            color = True
    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + ([("r", "u1"), ("g", "u1"), ("b", "u1")] if color else [])
    verts = np.frombuffer(data, dtype=vdt, count=nv, offset=end)
    off = end + verts.nbytes
    faces = np.frombuffer(data, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=nf, offset=off)
    V = np.column_stack([verts["x"], verts["y"], verts["z"]]).astype(float)
    C = np.column_stack([verts["r"], verts["g"], verts["b"]]) if color else None
    return TriangleMesh(V, faces["i"].astype(np.int64), C)


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise WriteError(str(exc)) from exc
