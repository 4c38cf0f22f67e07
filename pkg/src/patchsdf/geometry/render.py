"""Pinhole ray casting against triangle meshes (partial observations)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyObservationError
from .mesh import TriMesh
from .sampling import SurfaceSamples


@dataclass(frozen=True, eq=False)
class CameraView:
    origin: np.ndarray
    look_at: np.ndarray
    resolution: tuple = (64, 64)      # (width, height)
    fov: float = np.pi / 3            # vertical, radians
    up: np.ndarray = None

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        t = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        if np.allclose(o, t):
            raise ValueError("camera origin and look-at coincide")
        w, h = (int(x) for x in self.resolution)
        if w < 1 or h < 1:
            raise ValueError("resolution must be at least 1x1")
        if not 0 < self.fov < np.pi:
            raise ValueError("field of view must lie in (0, pi)")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "look_at", t)
        object.__setattr__(self, "resolution", (w, h))

    def basis(self):
        fwd = self.look_at - self.origin
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0]) if self.up is None else np.asarray(self.up, float)
        if abs(np.dot(up, fwd)) > 1 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def ray_directions(self, jitter_rng=None):
        w, h = self.resolution
        fwd, right, up = self.basis()
        jx = jy = 0.5
        i, j = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
        i = i.ravel().astype(np.float64)
        j = j.ravel().astype(np.float64)
        if jitter_rng is not None:
            jx = jitter_rng.random(i.shape)
            jy = jitter_rng.random(j.shape)
        half = np.tan(self.fov / 2)
        u = (2 * (i + jx) / w - 1) * half * (w / h)
        v = (1 - 2 * (j + jy) / h) * half
        d = fwd + u[:, None] * right + v[:, None] * up
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def ray_mesh_first_hit(mesh: TriMesh, origin, directions, chunk=128):
    """Moller-Trumbore; returns ``(t, face)`` with ``t = inf`` / ``face = -1`` on miss."""
    tri = mesh.corners()
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    s = np.asarray(origin, dtype=np.float64) - a               # (F, 3)
    q = np.cross(s, e1)                                        # (F, 3)
    t_num = np.einsum("fi,fi->f", e2, q)
    n = len(directions)
    t_best = np.full(n, np.inf)
    f_best = np.full(n, -1, dtype=np.int64)
    eps = 1e-12
    for st in range(0, n, chunk):
        d = directions[st:st + chunk]                          # (R, 3)
        p = np.cross(d[:, None, :], e2[None])                  # (R, F, 3)
        det = np.einsum("rfi,fi->rf", p, e1)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("rfi,fi->rf", p, s) * inv
        v = (d @ q.T) * inv
        t = t_num[None] * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(d)), k]
        t_best[st:st + chunk] = tk
        f_best[st:st + chunk] = np.where(np.isfinite(tk), k, -1)
    return t_best, f_best


def render_partial(mesh: TriMesh, cam: CameraView, seed: int = 0, jitter=False):
    """First-hit points of one ray per pixel, with the hit triangles' normals.

    Returns ``(SurfaceSamples, camera_origin)``. With ``jitter`` the ray passes
    through a seeded random location inside its pixel instead of the center.
    """
    rng = np.random.default_rng(seed) if jitter else None
    dirs = cam.ray_directions(rng)
    t, face = ray_mesh_first_hit(mesh, cam.origin, dirs)
    hit = face >= 0
    if not np.any(hit):
        raise EmptyObservationError("no camera ray hit the mesh")
    pts = cam.origin + t[hit, None] * dirs[hit]
    normals = mesh.face_normals()[face[hit]]
    return SurfaceSamples(pts, normals, face[hit]), cam.origin.copy()
