"""Surface and signed-distance sampling, plus the PNSD sample-set file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DegenerateMeshError, FileFormatError
from .distance import MeshIndex
from .mesh import TriMesh

DEFAULT_TRUNCATION = 0.1
NEAR_SIGMAS = (0.005, 0.0005)
UNIFORM_FRACTION = 0.05
SURFACE_SET_SIZE = 10_000


@dataclass
class SurfaceSamples:
    points: np.ndarray            # (N, 3)
    normals: np.ndarray           # (N, 3), unit length
    faces: Optional[np.ndarray] = None  # source triangle per point, when known

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        return SurfaceSamples(self.points[idx], self.normals[idx],
                              None if self.faces is None else self.faces[idx])


@dataclass
class SdfSampleSet:
    points: np.ndarray                       # (N, 3)
    sdf: np.ndarray                          # (N,), within [-truncation, truncation]
    truncation: float = DEFAULT_TRUNCATION
    free_space: Optional[np.ndarray] = None  # (N,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.sdf = np.asarray(self.sdf, dtype=np.float64).reshape(-1)
        if len(self.sdf) != len(self.points):
            raise ValueError("points and sdf lengths differ")
        if self.free_space is not None:
            self.free_space = np.asarray(self.free_space, dtype=bool).reshape(-1)
            if len(self.free_space) != len(self.points):
                raise ValueError("free-space flags must have one entry per point")

    def __len__(self):
        return len(self.points)

    def subset(self, idx):
        return SdfSampleSet(self.points[idx], self.sdf[idx], self.truncation,
                            None if self.free_space is None else self.free_space[idx])


def sample_surface(mesh: TriMesh, count: int, seed: int) -> SurfaceSamples:
    """Area-uniform surface points with the outward normals of their triangles."""
    if count < 1:
        raise ValueError("count must be >= 1")
    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    face = np.minimum(np.searchsorted(cdf, rng.random(count), side="right"), len(areas) - 1)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.corners()[face]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    normals = mesh.face_normals()[face]
    return SurfaceSamples(pts, normals, face)


def uniform_in_ball(rng, count, radius=1.0):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / 3.0)
    return d * r[:, None]


def sample_sdf_set(mesh: TriMesh, count: int, truncation: float = DEFAULT_TRUNCATION,
                   seed: int = 0, near_sigmas=NEAR_SIGMAS,
                   uniform_fraction=UNIFORM_FRACTION, index: MeshIndex = None) -> SdfSampleSet:
    """Mostly near-surface points with truncated signed distances.

    ``1 - uniform_fraction`` of the budget comes from surface samples, each
    spawning one perturbed copy per entry of ``near_sigmas``; the rest is
    uniform in the unit ball.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    rng = np.random.default_rng(seed)
    n_uniform = int(round(uniform_fraction * count))
    n_near = count - n_uniform
    k = len(near_sigmas)
    n_surf = -(-n_near // k)
    surf = sample_surface(mesh, max(n_surf, 1), int(rng.integers(2**31)))
    near = [surf.points + rng.normal(scale=s, size=surf.points.shape) for s in near_sigmas]
    near = np.stack(near, axis=1).reshape(-1, 3)[:n_near]
    pts = np.concatenate([near, uniform_in_ball(rng, n_uniform)])
    index = index or MeshIndex(mesh)
    sdf = np.clip(index.signed_distance(pts), -truncation, truncation)
    return SdfSampleSet(pts, sdf, float(truncation))


def add_sdf_noise(samples: SdfSampleSet, sigma: float, seed: int) -> SdfSampleSet:
    """Gaussian noise on the SDF values, re-clamped to the truncation band."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return samples.subset(slice(None))
    rng = np.random.default_rng(seed)
    noisy = samples.sdf + rng.normal(scale=sigma, size=len(samples))
    t = samples.truncation
    return SdfSampleSet(samples.points.copy(), np.clip(noisy, -t, t), t,
                        None if samples.free_space is None else samples.free_space.copy())


# ---------------------------------------------------------------------------
# PNSD: magic, u32 version, u64 count, u64 flags-present, f32 truncation, records

_PNSD_MAGIC = b"PNSD"
_PNSD_HEADER = struct.Struct("<4sIQQf")


def write_sdf_samples(path, samples: SdfSampleSet):
    flags = samples.free_space is not None
    fields = [("p", "<f4", (3,)), ("s", "<f4")]
    if flags:
        fields.append(("f", "u1"))
    rec = np.zeros(len(samples), dtype=np.dtype(fields))
    rec["p"] = samples.points
    rec["s"] = samples.sdf
    if flags:
        rec["f"] = samples.free_space
    with open(path, "wb") as fh:
        fh.write(_PNSD_HEADER.pack(_PNSD_MAGIC, 1, len(samples), int(flags),
                                   samples.truncation))
        fh.write(rec.tobytes())


def read_sdf_samples(path) -> SdfSampleSet:
    with open(path, "rb") as fh:
        head = fh.read(_PNSD_HEADER.size)
        if len(head) != _PNSD_HEADER.size:
            raise FileFormatError("truncated PNSD header")
        magic, version, count, flags, trunc = _PNSD_HEADER.unpack(head)
        if magic != _PNSD_MAGIC or version != 1:
            raise FileFormatError(f"not a PNSD v1 file: {magic!r} v{version}")
        fields = [("p", "<f4", (3,)), ("s", "<f4")]
        if flags:
            fields.append(("f", "u1"))
        dt = np.dtype(fields)
        body = fh.read()
    if len(body) != dt.itemsize * count:
        raise FileFormatError("PNSD record block has the wrong size")
    rec = np.frombuffer(body, dtype=dt, count=count)
    return SdfSampleSet(rec["p"].astype(np.float64), rec["s"].astype(np.float64),
                        float(np.float32(trunc)),
                        rec["f"].astype(bool) if flags else None)


def save_surface_samples(path, surface: SurfaceSamples):
    np.savez(path, points=surface.points, normals=surface.normals)


def load_surface_samples(path) -> SurfaceSamples:
    with np.load(path) as z:
        return SurfaceSamples(z["points"], z["normals"])
