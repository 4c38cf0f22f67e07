"""Patch extrinsics, canonical frames and Gaussian-blended SDF evaluation.

A shape is ``N_P`` patches. Patch ``p`` owns a latent code ``z_p`` and
extrinsics: center ``c_p``, radius ``r_p`` and XYZ-intrinsic Euler angles
``phi_p`` with ``R(phi) = R_x(phi_1) R_y(phi_2) R_z(phi_3)`` mapping the patch
frame to world. A world point ``x`` is seen by the decoder as
``x_local = R^T (x - c) / r``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RadiusError
from .networks import MLP, mlp_backward, mlp_forward

R_MIN = 1e-4
_EZ = np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# rotations

def _axis_mats(angles):
    a = np.asarray(angles, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    one, zero = np.ones_like(c[..., 0]), np.zeros_like(c[..., 0])

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    ca, cb, cc = c[..., 0], c[..., 1], c[..., 2]
    sa, sb, sc = s[..., 0], s[..., 1], s[..., 2]
    Rx = mat([[one, zero, zero], [zero, ca, -sa], [zero, sa, ca]])
    Ry = mat([[cb, zero, sb], [zero, one, zero], [-sb, zero, cb]])
    Rz = mat([[cc, -sc, zero], [sc, cc, zero], [zero, zero, one]])
    dRx = mat([[zero, zero, zero], [zero, -sa, -ca], [zero, ca, -sa]])
    dRy = mat([[-sb, zero, cb], [zero, zero, zero], [-cb, zero, -sb]])
    dRz = mat([[-sc, -cc, zero], [cc, -sc, zero], [zero, zero, zero]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def rotation_matrix(angles):
    """R(phi) for angles of shape (..., 3)."""
    (Rx, Ry, Rz), _ = _axis_mats(angles)
    return Rx @ Ry @ Rz


def rotation_derivatives(angles):
    """``(R, dR)`` where ``dR[..., k, :, :]`` is dR / dphi_k."""
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _axis_mats(angles)
    R = Rx @ Ry @ Rz
    dR = np.stack([dRx @ Ry @ Rz, Rx @ dRy @ Rz, Rx @ Ry @ dRz], axis=-3)
    return R, dR


def euler_from_matrix(R):
    """Inverse of :func:`rotation_matrix` (away from the cos(phi_2) = 0 gimbal)."""
    R = np.asarray(R, dtype=np.float64)
    b = np.arcsin(np.clip(R[..., 0, 2], -1.0, 1.0))
    a = np.arctan2(-R[..., 1, 2], R[..., 2, 2])
    c = np.arctan2(-R[..., 0, 1], R[..., 0, 0])
    return np.stack([a, b, c], axis=-1)


def euler_aligning_z(normals):
    """Angles whose rotation maps the patch z-axis onto the given unit normals."""
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    # R e_z = (sin b, -sin a cos b, cos a cos b)
    b = np.arcsin(np.clip(n[..., 0], -1.0, 1.0))
    a = np.arctan2(-n[..., 1], n[..., 2])
    return np.stack([a, b, np.zeros_like(a)], axis=-1)


# ---------------------------------------------------------------------------
# containers

@dataclass
class PatchExtrinsics:
    center: np.ndarray
    radius: float
    angles: np.ndarray

    def as_vector(self):
        """(r, c, phi) order, as stored in checkpoints."""
        return np.concatenate([[self.radius], self.center, self.angles])


@dataclass
class ShapeCodes:
    latents: np.ndarray   # (P, N_z)
    centers: np.ndarray   # (P, 3)
    radii: np.ndarray     # (P,)
    angles: np.ndarray    # (P, 3)

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1, 3)
        if self.latents.ndim == 1:
            self.latents = self.latents.reshape(len(self.radii), -1)
        P = len(self.radii)
        if not (len(self.latents) == len(self.centers) == len(self.angles) == P):
            raise ValueError("inconsistent patch counts in ShapeCodes")

    @property
    def n_patches(self):
        return len(self.radii)

    @property
    def latent_size(self):
        return self.latents.shape[1]

    def __len__(self):
        return self.n_patches

    def __getitem__(self, p):
        return self.latents[p], PatchExtrinsics(self.centers[p], float(self.radii[p]),
                                                self.angles[p])

    def copy(self):
        return ShapeCodes(self.latents.copy(), self.centers.copy(), self.radii.copy(),
                          self.angles.copy())

    def extrinsic_array(self):
        """(P, 7) in (r, c, phi) order."""
        return np.concatenate([self.radii[:, None], self.centers, self.angles], axis=1)

    @classmethod
    def from_arrays(cls, latents, extrinsics):
        e = np.asarray(extrinsics, dtype=np.float64).reshape(-1, 7)
        return cls(latents, e[:, 1:4], e[:, 0], e[:, 4:7])

    def clamp_radii(self, r_min=R_MIN):
        np.maximum(self.radii, r_min, out=self.radii)
        return self

    def params(self):
        """Name -> array mapping of the free variables (shared, not copied)."""
        return {"latents": self.latents, "centers": self.centers,
                "radii": self.radii, "angles": self.angles}


@dataclass
class CodeGrads:
    latents: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    angles: np.ndarray

    @classmethod
    def zeros_like(cls, codes: ShapeCodes):
        return cls(np.zeros_like(codes.latents), np.zeros_like(codes.centers),
                   np.zeros_like(codes.radii), np.zeros_like(codes.angles))

    def add_(self, other: "CodeGrads", scale=1.0):
        self.latents += scale * other.latents
        self.centers += scale * other.centers
        self.radii += scale * other.radii
        self.angles += scale * other.angles
        return self

    def as_dict(self):
        return {"latents": self.latents, "centers": self.centers,
                "radii": self.radii, "angles": self.angles}

    def extrinsics_zero_(self):
        self.centers[:] = 0
        self.radii[:] = 0
        self.angles[:] = 0
        return self


# ---------------------------------------------------------------------------
# initialization

def farthest_point_sampling(points, k, seed):
    """Greedy FPS. Returns ``(indices, pick_distances)``.

    The first index is drawn from ``seed``; ``pick_distances[j]`` is the
    distance of pick ``j`` to the previously chosen set (inf for the first).
    Ties go to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if k > len(pts):
        raise ValueError(f"cannot pick {k} patches from {len(pts)} surface points")
    rng = np.random.default_rng(seed)
    idx = np.empty(k, dtype=np.int64)
    picked = np.empty(k)
    idx[0] = rng.integers(len(pts))
    picked[0] = np.inf
    mind = np.linalg.norm(pts - pts[idx[0]], axis=1)
    for j in range(1, k):
        idx[j] = int(np.argmax(mind))
        picked[j] = mind[idx[j]]
        np.minimum(mind, np.linalg.norm(pts - pts[idx[j]], axis=1), out=mind)
    return idx, picked


def init_extrinsics(surface, n_patches: int, seed: int, latent_size: int = 128) -> ShapeCodes:
    """FPS centers, minimal covering radii, z-axis aligned with the surface normal.

    Latent codes start at zero.
    """
    pts = np.asarray(surface.points, dtype=np.float64)
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    if len(pts) == 0:
        raise ValueError("empty surface sample set")
    idx, _ = farthest_point_sampling(pts, n_patches, seed)
    centers = pts[idx].copy()
    dist = np.linalg.norm(pts[:, None, :] - centers[None], axis=2)
    nearest = np.argmin(dist, axis=1)
    radii = np.zeros(n_patches)
    np.maximum.at(radii, nearest, dist[np.arange(len(pts)), nearest])
    np.maximum(radii, R_MIN, out=radii)
    angles = euler_aligning_z(np.asarray(surface.normals)[idx])
    return ShapeCodes(np.zeros((n_patches, latent_size)), centers, radii, angles)


# ---------------------------------------------------------------------------
# canonical frame

def to_local(e: PatchExtrinsics, x):
    """Canonical coordinates of ``x`` and their Jacobians.

    Returns ``(x_local, jac)`` with ``jac`` keys ``x`` (3x3), ``c`` (3x3),
    ``r`` (3,), ``phi`` (3x3, column k = d x_local / d phi_k).
    """
    r = float(e.radius)
    if not r >= R_MIN:
        raise RadiusError(f"patch radius {r} below minimum {R_MIN}")
    R, dR = rotation_derivatives(e.angles)
    diff = np.asarray(x, dtype=np.float64) - np.asarray(e.center, dtype=np.float64)
    xl = R.T @ diff / r
    jac = {
        "x": R.T / r,
        "c": -R.T / r,
        "r": -xl / r,
        "phi": np.stack([dR[k].T @ diff / r for k in range(3)], axis=1),
    }
    return xl, jac


def patch_membership(codes: ShapeCodes, x):
    """Indices of patches whose open ball contains ``x``."""
    d = np.linalg.norm(codes.centers - np.asarray(x, dtype=np.float64), axis=1)
    return set(np.nonzero(d < codes.radii)[0].tolist())


def blend_weight(dist, radius):
    """Unnormalized blend weight, zero at the patch boundary (sigma = r / 3)."""
    sigma = radius / 3.0
    return np.exp(-0.5 * (dist / sigma) ** 2) - np.exp(-0.5 * (radius / sigma) ** 2)


def _blend_weight_grads(dist, radius, weight_core):
    """d w / d dist and d w / d radius (the boundary offset is constant in r)."""
    sigma = radius / 3.0
    dw_dd = -(dist / sigma ** 2) * weight_core
    dw_dr = weight_core * (dist / sigma) ** 2 / radius
    return dw_dd, dw_dr


# ---------------------------------------------------------------------------
# decoder on (point, patch) pairs

@dataclass
class PairContext:
    codes: ShapeCodes
    w: MLP
    points: np.ndarray
    pt: np.ndarray
    pp: np.ndarray
    R: np.ndarray
    dR: np.ndarray
    diff: np.ndarray
    xl: np.ndarray
    f: np.ndarray
    cache: object
    scale_sdf: bool


def eval_pairs(codes: ShapeCodes, w: MLP, points, pt, pp, scale_sdf=False):
    """Patch SDF of patch ``pp[k]`` at point ``points[pt[k]]`` for all k.

    With ``scale_sdf`` the canonical prediction is multiplied by the patch
    radius (world-unit distances); otherwise it is used as is.
    """
    R, dR = rotation_derivatives(codes.angles)
    diff = points[pt] - codes.centers[pp]
    r = codes.radii[pp]
    xl = np.einsum("nji,nj->ni", R[pp], diff) / r[:, None]
    out, cache = mlp_forward(w, np.concatenate([codes.latents[pp], xl], axis=1))
    f = out[:, 0]
    val = f * r if scale_sdf else f
    ctx = PairContext(codes, w, points, pt, pp, R, dR, diff, xl, f, cache, scale_sdf)
    return val, ctx


def backward_pairs(ctx: PairContext, upstream, want_theta=True, want_points=False):
    """Pull ``upstream`` (per pair) back to codes, decoder weights and points."""
    codes = ctx.codes
    P, nz = codes.n_patches, codes.latent_size
    pp = ctx.pp
    r = codes.radii[pp]
    up = np.asarray(upstream, dtype=np.float64)
    grads = CodeGrads.zeros_like(codes)
    if ctx.scale_sdf:
        grads.radii += np.bincount(pp, weights=up * ctx.f, minlength=P)
        up = up * r
    theta, d_in = mlp_backward(ctx.w, ctx.cache, up[:, None])
    dz = d_in[:, :nz]
    u = d_in[:, nz:]
    np.add.at(grads.latents, pp, dz)
    dx = np.einsum("nij,nj->ni", ctx.R[pp], u) / r[:, None]
    for k in range(3):
        grads.centers[:, k] -= np.bincount(pp, weights=dx[:, k], minlength=P)
    grads.radii -= np.bincount(pp, weights=np.einsum("ni,ni->n", u, ctx.xl) / r, minlength=P)
    for k in range(3):
        dxl = np.einsum("nji,nj->ni", ctx.dR[pp, k], ctx.diff) / r[:, None]
        grads.angles[:, k] += np.bincount(pp, weights=np.einsum("ni,ni->n", u, dxl),
                                          minlength=P)
    out = [grads, theta if want_theta else None]
    if want_points:
        dpts = np.zeros_like(ctx.points)
        for k in range(3):
            dpts[:, k] = np.bincount(ctx.pt, weights=dx[:, k], minlength=len(ctx.points))
        out.append(dpts)
    return tuple(out)


def patch_distances(codes: ShapeCodes, points):
    diff = points[:, None, :] - codes.centers[None]
    return np.sqrt(np.einsum("npi,npi->np", diff, diff))


# ---------------------------------------------------------------------------
# blending

@dataclass
class BlendContext:
    pair: PairContext
    dist: np.ndarray
    core: np.ndarray
    weights: np.ndarray
    total: np.ndarray
    values: np.ndarray
    g: np.ndarray
    covered: np.ndarray


def _blend(codes, w, points, scale_sdf=False):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    D = patch_distances(codes, pts)
    pt, pp = np.nonzero(D < codes.radii[None])
    val, pair = eval_pairs(codes, w, pts, pt, pp, scale_sdf)
    d = D[pt, pp]
    r = codes.radii[pp]
    core = np.exp(-0.5 * (d / (r / 3.0)) ** 2)
    wts = blend_weight(d, r)
    total = np.bincount(pt, weights=wts, minlength=len(pts))
    num = np.bincount(pt, weights=wts * val, minlength=len(pts))
    covered = total > 0
    g = np.ones(len(pts))
    g[covered] = num[covered] / total[covered]
    return g, BlendContext(pair, d, core, wts, total, val, g, covered)


def blend_sdf(codes: ShapeCodes, w: MLP, x, scale_sdf=False):
    """Blended SDF; 1 where no patch overlaps the point. Accepts (3,) or (N, 3)."""
    xa = np.asarray(x, dtype=np.float64)
    g, _ = _blend(codes, w, xa, scale_sdf)
    return float(g[0]) if xa.ndim == 1 else g


def blend_sdf_backward(codes: ShapeCodes, w: MLP, x, upstream, scale_sdf=False,
                       want_theta=True, want_points=False):
    """Gradients of ``sum(upstream * g(x))`` w.r.t. codes (and decoder weights).

    Returns ``(g, CodeGrads, theta_grads_or_None[, point_grads])``.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g, ctx = _blend(codes, w, pts, scale_sdf)
    return (g,) + _blend_backward(ctx, upstream, want_theta, want_points)


def _blend_backward(ctx: BlendContext, upstream, want_theta=True, want_points=False):
    pair = ctx.pair
    codes = pair.codes
    P = codes.n_patches
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), ctx.g.shape)
    pt, pp = pair.pt, pair.pp
    W = ctx.total[pt]
    u = up[pt]
    d_val = u * ctx.weights / W
    d_w = u * (ctx.values - ctx.g[pt]) / W
    res = backward_pairs(pair, d_val, want_theta, want_points)
    grads = res[0]
    r = codes.radii[pp]
    dw_dd, dw_dr = _blend_weight_grads(ctx.dist, r, ctx.core)
    safe = np.where(ctx.dist > 0, ctx.dist, 1.0)
    unit = np.where(ctx.dist[:, None] > 0, -pair.diff / safe[:, None], 0.0)  # d dist / d c
    coef = d_w * dw_dd
    for k in range(3):
        grads.centers[:, k] += np.bincount(pp, weights=coef * unit[:, k], minlength=P)
    grads.radii += np.bincount(pp, weights=d_w * dw_dr, minlength=P)
    if want_points:
        dpts = res[2]
        for k in range(3):
            dpts[:, k] -= np.bincount(pt, weights=coef * unit[:, k], minlength=len(dpts))
    return res


def blend_normalized_weights(codes: ShapeCodes, x):
    """Normalized blend weights over the overlapping patches at ``x`` (dict p -> w)."""
    x = np.asarray(x, dtype=np.float64)
    d = np.linalg.norm(codes.centers - x, axis=1)
    inside = np.nonzero(d < codes.radii)[0]
    w = blend_weight(d[inside], codes.radii[inside])
    return dict(zip(inside.tolist(), (w / w.sum()).tolist())) if len(inside) else {}


def transform_codes(codes: ShapeCodes, rotation, translation, scale=None):
    """Apply a rigid motion (and optional per-patch radius scale) to every patch."""
    S = np.asarray(rotation, dtype=np.float64)
    out = codes.copy()
    out.centers = codes.centers @ S.T + np.asarray(translation, dtype=np.float64)
    out.angles = euler_from_matrix(S @ rotation_matrix(codes.angles))
    if scale is not None:
        out.radii = codes.radii * scale
    return out
