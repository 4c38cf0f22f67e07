"""Closed-form signed distance functions for sphere, box and torus."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh, box_mesh, icosphere, torus_mesh

KINDS = ("sphere", "box", "torus")


@dataclass(frozen=True, eq=False)
class AnalyticShape:
    """``params``: sphere ``(radius,)``, box ``(hx, hy, hz)``, torus ``(major, minor)``.

    The pose maps shape coordinates to world: ``x_world = rotation @ x + translation``.
    """
    kind: str
    params: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        params = tuple(float(p) for p in np.atleast_1d(self.params))
        want = {"sphere": 1, "box": 3, "torus": 2}[self.kind]
        if len(params) != want:
            raise ValueError(f"{self.kind} takes {want} parameters, got {len(params)}")
        if min(params) <= 0:
            raise ValueError("shape sizes must be positive")
        if self.kind == "torus" and params[1] >= params[0]:
            raise ValueError("torus minor radius must be below the major radius")
        R = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.bounding_radius() > 1.0 + 1e-12:
            raise ValueError("shape does not fit inside the unit sphere")

    def bounding_radius(self):
        p = self.params
        if self.kind == "box":
            local = float(np.linalg.norm(p))
        elif self.kind == "torus":
            local = p[0] + p[1]
        else:
            local = p[0]
        return local + float(np.linalg.norm(self.translation))

    def to_local(self, x):
        return (np.asarray(x, dtype=np.float64) - self.translation) @ self.rotation

    def mesh(self, detail=None) -> TriMesh:
        """Outward-oriented tessellation; ``detail`` is the kind-specific density."""
        p = self.params
        if self.kind == "sphere":
            m = icosphere(5 if detail is None else detail, radius=p[0])
        elif self.kind == "box":
            m = box_mesh(p, divisions=16 if detail is None else detail)
        else:
            n = 128 if detail is None else detail
            m = torus_mesh(p[0], p[1], n_major=n, n_minor=max(8, n // 2))
        return m.transformed(self.rotation, self.translation)


def analytic_sdf(shape: AnalyticShape, x):
    """Exact signed distance (negative inside). Accepts (3,) or (N, 3)."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    q = shape.to_local(np.atleast_2d(pts))
    p = shape.params
    if shape.kind == "sphere":
        d = np.linalg.norm(q, axis=1) - p[0]
    elif shape.kind == "box":
        e = np.abs(q) - np.asarray(p)
        outside = np.linalg.norm(np.maximum(e, 0.0), axis=1)
        inside = np.minimum(e.max(axis=1), 0.0)
        d = outside + inside
    else:
        ring = np.hypot(q[:, 0], q[:, 1]) - p[0]
        d = np.hypot(ring, q[:, 2]) - p[1]
    return float(d[0]) if single else d


def analytic_normal(shape: AnalyticShape, x, h=1e-6):
    """Unit gradient of the SDF by central differences (used for test fixtures)."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    grad = np.empty_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (analytic_sdf(shape, pts + e) - analytic_sdf(shape, pts - e)) / (2 * h)
    return grad / np.linalg.norm(grad, axis=1, keepdims=True)
