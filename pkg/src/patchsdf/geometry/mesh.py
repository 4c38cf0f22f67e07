"""Triangle meshes: container, OBJ / binary PLY I/O, normalization, primitives."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import (EmptyMeshError, FaceTriangulationError, IndexOutOfRangeError,
                      MeshFileNotFound, MeshFormatError)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise IndexOutOfRangeError(
                f"triangle index out of range for {len(v)} vertices")
        if not np.all(np.isfinite(v)):
            raise MeshFormatError("non-finite vertex coordinates")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return self.n_triangles == 0

    def corners(self):
        """(F, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def face_normals(self, unit=True):
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        if unit:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def volume(self):
        """Signed enclosed volume; positive for outward-oriented closed meshes."""
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def edges(self):
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])

    def open_edge_count(self):
        """Directed edges without an opposite partner (0 for closed, consistently
        oriented, edge-manifold meshes)."""
        if self.is_empty:
            return 0
        e = self.edges()
        n = self.n_vertices
        fwd = e[:, 0] * n + e[:, 1]
        rev = e[:, 1] * n + e[:, 0]
        _, counts = np.unique(fwd, return_counts=True)
        return int(np.sum(counts > 1) + np.sum(~np.isin(rev, fwd)))

    def is_watertight(self):
        """Every edge shared by exactly two triangles with opposite orientation."""
        return not self.is_empty and self.open_edge_count() == 0

    def transformed(self, rotation=None, translation=None, scale=1.0):
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriMesh(v, self.triangles.copy())


def empty_mesh():
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


# ---------------------------------------------------------------------------
# I/O

def load_mesh(path) -> TriMesh:
    """Read an OBJ or binary little-endian PLY file; polygons are fan-triangulated."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MeshFileNotFound(f"mesh file not found: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return _load_obj(path)
    if ext == ".ply":
        return _load_ply(path)
    raise MeshFormatError(f"unsupported mesh extension {ext!r}")


def _fan(face):
    if len(face) < 3:
        raise FaceTriangulationError(f"face with {len(face)} vertices")
    return [(face[0], face[k], face[k + 1]) for k in range(1, len(face) - 1)]


def _load_obj(path):
    verts, tris = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    k = int(tok.split("/")[0])
                    # negative indices are relative to the vertices read so far
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                for tri in _fan(idx):
                    if min(tri) < 0 or max(tri) >= len(verts):
                        raise IndexOutOfRangeError(
                            f"{path}:{lineno}: face index out of range "
                            f"({len(verts)} vertices)")
                    tris.append(tri)
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(tris, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshFormatError("missing PLY magic")
        elements = []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise MeshFormatError("unterminated PLY header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise MeshFormatError(f"only binary_little_endian PLY is supported, got {fmt}")
        data = fh.read()

    verts = np.zeros((0, 3))
    tris = []
    offset = 0
    for name, count, props in elements:
        if all(p[0] != "list" for p in props):
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            continue
        if name != "face" or len(props) != 1:
            raise MeshFormatError(f"unsupported list element {name!r}")
        _, ctype, itype, _ = props[0]
        cdt = np.dtype("<" + _PLY_TYPES[ctype])
        idt = np.dtype("<" + _PLY_TYPES[itype])
        # fast path: all faces are triangles
        rec_dt = np.dtype([("n", cdt), ("i", idt, (3,))])
        if len(data) - offset >= rec_dt.itemsize * count:
            rec = np.frombuffer(data, dtype=rec_dt, count=count, offset=offset)
            if np.all(rec["n"] == 3):
                tris = rec["i"].astype(np.int64)
                offset += rec_dt.itemsize * count
                continue
        out = []
        for _ in range(count):
            n = int(np.frombuffer(data, dtype=cdt, count=1, offset=offset)[0])
            offset += cdt.itemsize
            idx = np.frombuffer(data, dtype=idt, count=n, offset=offset).astype(np.int64)
            offset += idt.itemsize * n
            out.extend(_fan(list(idx)))
        tris = np.array(out, dtype=np.int64).reshape(-1, 3)
    tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
        raise IndexOutOfRangeError(f"{path}: face index out of range ({len(verts)} vertices)")
    return TriMesh(verts, tris)


def save_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        np.savetxt(fh, mesh.vertices, fmt="v %.9g %.9g %.9g")
        np.savetxt(fh, mesh.triangles + 1, fmt="f %d %d %d")


def save_ply(mesh: TriMesh, path):
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {mesh.n_vertices}\n"
              "property float x\nproperty float y\nproperty float z\n"
              f"element face {mesh.n_triangles}\n"
              "property list uchar int vertex_indices\nend_header\n")
    face_dt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
    faces = np.zeros(mesh.n_triangles, dtype=face_dt)
    faces["n"] = 3
    faces["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        fh.write(faces.tobytes())


def save_mesh(mesh: TriMesh, path):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".ply":
        save_ply(mesh, path)
    else:
        save_obj(mesh, path)


# ---------------------------------------------------------------------------
# normalization

def normalize_unit_sphere(mesh: TriMesh):
    """Center the bounding box at the origin and scale the farthest vertex to norm 1.

    Returns ``(mesh', scale, offset)`` with ``x' = (x - offset) * scale``.
    """
    if mesh.n_vertices == 0:
        raise EmptyMeshError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    offset = 0.5 * (lo + hi)
    centered = mesh.vertices - offset
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0:
        raise EmptyMeshError("all vertices coincide")
    scale = 1.0 / radius
    return TriMesh(centered * scale, mesh.triangles.copy()), float(scale), offset


# ---------------------------------------------------------------------------
# primitives (outward oriented, closed)

def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        v = np.concatenate([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return TriMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def box_mesh(half_extents=(0.5, 0.5, 0.5), divisions=1, center=(0.0, 0.0, 0.0)):
    """Closed box with each face split into ``divisions`` x ``divisions`` quads."""
    h = np.asarray(half_extents, dtype=np.float64)
    n = int(divisions)
    s = np.linspace(-1.0, 1.0, n + 1)
    verts, tris = [], []
    index = {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    # (normal axis, sign); the two tangent axes are ordered so u x v = outward normal
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
            if sign < 0:
                u_ax, v_ax = v_ax, u_ax
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[u_ax] = s[i + di]
                        p[v_ax] = s[j + dj]
                        quad.append(vid(p))
                    tris.append([quad[0], quad[1], quad[2]])
                    tris.append([quad[0], quad[2], quad[3]])
    v = np.array(verts) * h + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(tris, dtype=np.int64))


def torus_mesh(major=0.6, minor=0.25, n_major=96, n_minor=48):
    """Torus around the z axis."""
    u = np.arange(n_major) * (2 * np.pi / n_major)
    v = np.arange(n_minor) * (2 * np.pi / n_minor)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    pts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], -1)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                           np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriMesh(pts.reshape(-1, 3), tris)


def sphere_chord_height(mesh: TriMesh, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Largest gap between an inscribed triangle mesh and its circumscribed sphere."""
    c = mesh.corners() - np.asarray(center)
    n = mesh.face_normals()
    plane = np.abs(np.einsum("ij,ij->i", n, c[:, 0]))
    return float(radius - plane.min())

