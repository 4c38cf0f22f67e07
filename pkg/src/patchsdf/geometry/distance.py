"""Point-to-mesh distance, winding numbers and signed distance.

Two inside tests are provided:

* :func:`winding_number` sums the signed solid angle of every triangle
  (generalized winding number). It is exact for any triangle soup but costs
  O(queries x triangles).
* :meth:`MeshIndex.crossing_winding` counts signed crossings of a +z ray with a
  grid-bucketed triangle set. For closed meshes this equals the winding number
  and is fast enough for 10^5 queries against 10^5 triangles.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh

_PAIR_CHUNK = 2_000_000
# xy jitter for the ray test; moves queries off shared edges / vertices
_RAY_JITTER = np.array([np.pi * 1e-10, np.e * 1e-10])


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all (N, 3).

    Region-based evaluation (vertex, edge and face Voronoi regions).
    Returns ``(closest, squared_distance)``.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        face = a + v[:, None] * ab + w[:, None] * ac
    rest = ~done
    out[rest] = face[rest]
    diff = p - out
    return out, np.einsum("ij,ij->i", diff, diff)


def winding_number(mesh: TriMesh, points, chunk=256):
    """Generalized winding number via signed solid angles (Van Oosterom-Strackee)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.corners()
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        q = pts[s:s + chunk, None, None, :]
        r = tri[None] - q                      # (Q, F, 3, 3)
        a, b, c = r[..., 0, :], r[..., 1, :], r[..., 2, :]
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
        det = np.einsum("qfi,qfi->qf", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("qfi,qfi->qf", a, b) * lc
               + np.einsum("qfi,qfi->qf", b, c) * la + np.einsum("qfi,qfi->qf", c, a) * lb)
        out[s:s + chunk] = (2.0 * np.arctan2(det, den)).sum(axis=1) / (4.0 * np.pi)
    return out


class MeshIndex:
    """Acceleration structures for repeated queries against one mesh."""

    def __init__(self, mesh: TriMesh, grid=None):
        if mesh.is_empty:
            raise ValueError("cannot index an empty mesh")
        self.mesh = mesh
        self.tri = mesh.corners()
        self.centroids = self.tri.mean(axis=1)
        self.reach = float(np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max())
        self.tree = cKDTree(self.centroids)
        self.watertight = mesh.is_watertight()
        self._grid_size = grid
        self._grid = None

    # -- nearest points ------------------------------------------------------

    def closest(self, points):
        """Exact nearest surface points. Returns ``(closest, distance, face)``."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nq = len(pts)
        k = min(8, len(self.tri))
        _, idx = self.tree.query(pts, k=k)
        idx = idx.reshape(nq, k)
        qi = np.repeat(np.arange(nq), k)
        fi = idx.ravel()
        _, d2 = closest_point_on_triangles(pts[qi], *self._abc(fi))
        ub = np.sqrt(d2.reshape(nq, k).min(axis=1))
        # any closer triangle has its centroid within ub + reach of the query
        cand = self.tree.query_ball_point(pts, ub + self.reach + 1e-12)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=nq)
        flat = np.fromiter((i for c in cand for i in c), dtype=np.int64, count=lens.sum())
        qi = np.repeat(np.arange(nq), lens)
        best_d2 = np.full(nq, np.inf)
        best_p = np.zeros((nq, 3))
        best_f = np.zeros(nq, dtype=np.int64)
        for s in range(0, len(flat), _PAIR_CHUNK):
            q = qi[s:s + _PAIR_CHUNK]
            f = flat[s:s + _PAIR_CHUNK]
            cp, d2 = closest_point_on_triangles(pts[q], *self._abc(f))
            order = np.lexsort((d2, q))
            q, f, cp, d2 = q[order], f[order], cp[order], d2[order]
            first = np.ones(len(q), dtype=bool)
            first[1:] = q[1:] != q[:-1]
            q, f, cp, d2 = q[first], f[first], cp[first], d2[first]
            better = d2 < best_d2[q]
            q, f, cp, d2 = q[better], f[better], cp[better], d2[better]
            best_d2[q] = d2
            best_p[q] = cp
            best_f[q] = f
        return best_p, np.sqrt(best_d2), best_f

    def _abc(self, f):
        t = self.tri[f]
        return t[:, 0], t[:, 1], t[:, 2]

    # -- inside test ------------------------------------------------------------

    def _build_grid(self):
        xy = self.tri[:, :, :2]
        lo = xy.reshape(-1, 2).min(axis=0)
        hi = xy.reshape(-1, 2).max(axis=0)
        n = self._grid_size or int(np.clip(np.sqrt(len(self.tri) / 2.0), 1, 512))
        span = np.maximum(hi - lo, 1e-12)
        cell = span / n
        tlo = np.clip(((xy.min(axis=1) - lo) / cell).astype(np.int64), 0, n - 1)
        thi = np.clip(((xy.max(axis=1) - lo) / cell).astype(np.int64), 0, n - 1)
        nx = thi[:, 0] - tlo[:, 0] + 1
        ny = thi[:, 1] - tlo[:, 1] + 1
        cnt = nx * ny
        tri_id = np.repeat(np.arange(len(self.tri)), cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        cx = tlo[tri_id, 0] + local % nx[tri_id]
        cy = tlo[tri_id, 1] + local // nx[tri_id]
        cell_id = cx * n + cy
        order = np.argsort(cell_id, kind="stable")
        tri_sorted = tri_id[order]
        starts = np.searchsorted(cell_id[order], np.arange(n * n + 1))
        self._grid = (lo, cell, n, tri_sorted, starts)

    def crossing_winding(self, points):
        """Signed count of +z ray crossings; equals the winding number on closed meshes."""
        if self._grid is None:
            self._build_grid()
        lo, cell, n, tri_sorted, starts = self._grid
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        q_xy = pts[:, :2] + _RAY_JITTER
        cidx = np.floor((q_xy - lo) / cell).astype(np.int64)
        inside = np.all((cidx >= 0) & (cidx < n), axis=1)
        wn = np.zeros(len(pts))
        qids = np.nonzero(inside)[0]
        if len(qids) == 0:
            return wn
        cid = cidx[qids, 0] * n + cidx[qids, 1]
        counts = starts[cid + 1] - starts[cid]
        # process in chunks of bounded pair count
        csum = np.cumsum(counts)
        bounds = np.searchsorted(csum, np.arange(0, csum[-1] + _PAIR_CHUNK, _PAIR_CHUNK),
                                 side="right")
        bounds = np.unique(np.concatenate([[0], bounds, [len(qids)]]))
        for s, e in zip(bounds[:-1], bounds[1:]):
            if e <= s:
                continue
            q = qids[s:e]
            cnt = counts[s:e]
            if cnt.sum() == 0:
                continue
            qrep = np.repeat(q, cnt)
            base = np.repeat(starts[cid[s:e]], cnt)
            local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            t = tri_sorted[base + local]
            wn += np.bincount(qrep, weights=self._ray_hits(q_xy[qrep], pts[qrep, 2], t),
                              minlength=len(pts))
        return wn

    def _ray_hits(self, qxy, qz, t):
        a, b, c = self.tri[t, 0], self.tri[t, 1], self.tri[t, 2]

        def cross2(u, v):
            return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

        area = cross2(b[:, :2] - a[:, :2], c[:, :2] - a[:, :2])
        e0 = cross2(b[:, :2] - a[:, :2], qxy - a[:, :2])
        e1 = cross2(c[:, :2] - b[:, :2], qxy - b[:, :2])
        e2 = cross2(a[:, :2] - c[:, :2], qxy - c[:, :2])
        pos = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        neg = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
        hit = (pos | neg) & (area != 0)
        safe = np.where(area != 0, area, 1.0)
        z = (e1 * a[:, 2] + e2 * b[:, 2] + e0 * c[:, 2]) / safe
        hit &= z > qz
        return np.where(hit, np.sign(area), 0.0)

    def winding(self, points):
        """Winding number: ray crossings when watertight, solid angles otherwise."""
        if self.watertight:
            return self.crossing_winding(points)
        warnings.warn("mesh is not watertight; inside test uses solid-angle winding "
                      "numbers and is best effort", RuntimeWarning, stacklevel=2)
        return winding_number(self.mesh, points)

    def contains(self, points):
        return self.winding(points) > 0.5

    def signed_distance(self, points):
        _, d, _ = self.closest(points)
        return np.where(self.contains(points), -d, d)


def signed_distance(mesh: TriMesh, x):
    """Exact distance to the nearest triangle, negative inside (winding number > 0.5)."""
    pts = np.asarray(x, dtype=np.float64)
    d = MeshIndex(mesh).signed_distance(np.atleast_2d(pts))
    return float(d[0]) if pts.ndim == 1 else d


def point_mesh_distance(mesh: TriMesh, points):
    return MeshIndex(mesh).closest(points)[1]
