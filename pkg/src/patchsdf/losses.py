"""Training objectives with exact gradients.

Every function returns its value together with gradients for the free
variables it touches: :class:`~patchsdf.patchrep.CodeGrads` for patch codes
and a decoder-parameter dict for the network weights.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NonFiniteError
from .networks import MLP, zero_grads
from .patchrep import (CodeGrads, ShapeCodes, _blend, _blend_backward, backward_pairs,
                       eval_pairs, patch_distances, rotation_derivatives)

TERMS = ("recon", "sur", "cov", "rot", "scl", "var", "reg", "free_space")


@dataclass
class LossWeights:
    sur: float = 5.0
    cov: float = 200.0
    rot: float = 1.0
    scl: float = 0.01
    var: float = 0.01
    reg: float = 1e-4
    t: float = 0.06           # compared against the squared center-surface distance
    sigma_cov: float = 0.05
    free_space: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")
        if self.t <= 0 or self.sigma_cov <= 0:
            raise ValueError("t and sigma_cov must be positive")


@dataclass
class LossReport:
    total: float = 0.0
    terms: dict = field(default_factory=lambda: {k: 0.0 for k in TERMS})

    def add(self, name, value):
        self.terms[name] = self.terms.get(name, 0.0) + float(value)
        self.total = float(sum(self.terms.values()))

    def __getitem__(self, name):
        return self.terms[name]

    def row(self):
        return {"total": self.total, **self.terms}


class SurfaceIndex:
    """Surface samples O_i with a KD-tree for nearest-point queries."""

    def __init__(self, surface):
        self.points = np.asarray(surface.points, dtype=np.float64)
        self.normals = np.asarray(surface.normals, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def nearest(self, x):
        d, i = self.tree.query(x)
        return d, i


def _as_index(surface):
    return surface if isinstance(surface, SurfaceIndex) else SurfaceIndex(surface)


# ---------------------------------------------------------------------------
# reconstruction

def loss_recon(codes: ShapeCodes, w: MLP, samples, mixture=False, scale_sdf=False,
               want_theta=True):
    """L1 SDF error.

    Default: mean over patches of the mean error over the samples inside each
    patch ball (``|x - c_p| <= r_p``); patches without samples add 0.
    ``mixture``: mean over all samples of ``|g(x) - s(x)|`` with the blended field.
    Returns ``(value, CodeGrads, theta_grads)``.
    """
    pts = np.asarray(samples.points, dtype=np.float64)
    sdf = np.asarray(samples.sdf, dtype=np.float64)
    if mixture:
        g, ctx = _blend(codes, w, pts, scale_sdf)
        err = g - sdf
        n = len(pts)
        value = np.abs(err).sum() / n
        up = np.sign(err) / n
        up[~ctx.covered] = 0.0
        if len(ctx.pair.pt) == 0:
            return value, CodeGrads.zeros_like(codes), zero_grads(w) if want_theta else None
        grads, theta = _blend_backward(ctx, up, want_theta)[:2]
        return value, grads, theta
    P = codes.n_patches
    D = patch_distances(codes, pts)
    pt, pp = np.nonzero(D <= codes.radii[None])
    if len(pt) == 0:
        return 0.0, CodeGrads.zeros_like(codes), zero_grads(w) if want_theta else None
    counts = np.bincount(pp, minlength=P).astype(np.float64)
    val, ctx = eval_pairs(codes, w, pts, pt, pp, scale_sdf)
    err = val - sdf[pt]
    weight = 1.0 / (P * counts[pp])
    value = float(np.sum(weight * np.abs(err)))
    grads, theta = backward_pairs(ctx, weight * np.sign(err), want_theta)
    return value, grads, theta


# ---------------------------------------------------------------------------
# extrinsics

def loss_sur(codes: ShapeCodes, surface, weight, t):
    """weight * mean_p max(min_x |c_p - x|^2, t); zero gradient on the clamped branch."""
    idx = _as_index(surface)
    d, i = idx.nearest(codes.centers)
    d2 = d ** 2
    P = codes.n_patches
    value = weight * np.maximum(d2, t).sum() / P
    grad_c = np.zeros_like(codes.centers)
    active = d2 > t
    grad_c[active] = weight * 2.0 * (codes.centers[active] - idx.points[i[active]]) / P
    return float(value), grad_c


def coverage_mask(codes: ShapeCodes, points):
    """True where a surface point lies inside at least one patch ball (closed)."""
    D = patch_distances(codes, np.asarray(points, dtype=np.float64))
    return np.any(D <= codes.radii[None], axis=1)


def loss_cov(codes: ShapeCodes, surface, weight, sigma):
    """Coverage loss over uncovered surface points U.

    Per point x in U the patch gaps ``s_p = |c_p - x| - r_p`` are combined with
    weights ``exp(-0.5 (s_p / sigma)^2)`` normalized over all patches; the
    loss is ``weight`` times the mean over U. Returns ``(value, d_centers, d_radii)``.
    """
    idx = _as_index(surface)
    P = codes.n_patches
    D = patch_distances(codes, idx.points)
    uncovered = ~np.any(D <= codes.radii[None], axis=1)
    gc = np.zeros_like(codes.centers)
    gr = np.zeros_like(codes.radii)
    nu = int(uncovered.sum())
    if nu == 0:
        return 0.0, gc, gr
    x = idx.points[uncovered]
    dist = D[uncovered]
    gap = dist - codes.radii[None]
    logits = -0.5 * (gap / sigma) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    wn = np.exp(logits)
    wn /= wn.sum(axis=1, keepdims=True)
    term = np.sum(wn * gap, axis=1)
    value = weight * term.sum() / nu
    # d term / d gap_q = wn_q * (1 - gap_q (gap_q - term) / sigma^2)
    dgap = weight / nu * wn * (1.0 - gap * (gap - term[:, None]) / sigma ** 2)
    unit = (codes.centers[None] - x[:, None]) / dist[..., None]
    gc = np.einsum("np,npi->pi", dgap, unit)
    gr = -dgap.sum(axis=0)
    return float(value), gc, gr


def loss_rot(codes: ShapeCodes, surface, weight):
    """weight * mean_p (1 - <R(phi_p) e_z, n_p>)^2, n_p the normal nearest to c_p."""
    idx = _as_index(surface)
    _, i = idx.nearest(codes.centers)
    n = idx.normals[i]
    R, dR = rotation_derivatives(codes.angles)
    axis = R[:, :, 2]
    dot = np.einsum("pi,pi->p", axis, n)
    P = codes.n_patches
    value = weight * np.sum((1.0 - dot) ** 2) / P
    coef = -2.0 * weight * (1.0 - dot) / P
    grad_phi = coef[:, None] * np.einsum("pkij,pi->pk", dR[..., :, 2:3], n)
    return float(value), grad_phi


def loss_scl(codes: ShapeCodes, weight):
    P = codes.n_patches
    return float(weight * np.sum(codes.radii ** 2) / P), 2.0 * weight * codes.radii / P


def loss_var(codes: ShapeCodes, weight):
    P = codes.n_patches
    dev = codes.radii - codes.radii.mean()
    return float(weight * np.sum(dev ** 2) / P), 2.0 * weight * dev / P


EXT_TERMS = ("sur", "cov", "rot", "scl", "var")


def loss_ext(codes: ShapeCodes, surface, weights: LossWeights, terms=EXT_TERMS):
    """Sum of the selected extrinsic terms. Returns ``(value, per_term, CodeGrads)``."""
    idx = _as_index(surface)
    grads = CodeGrads.zeros_like(codes)
    out = {}
    if "sur" in terms:
        out["sur"], gc = loss_sur(codes, idx, weights.sur, weights.t)
        grads.centers += gc
    if "cov" in terms:
        out["cov"], gc, gr = loss_cov(codes, idx, weights.cov, weights.sigma_cov)
        grads.centers += gc
        grads.radii += gr
    if "rot" in terms:
        out["rot"], gphi = loss_rot(codes, idx, weights.rot)
        grads.angles += gphi
    if "scl" in terms:
        out["scl"], gr = loss_scl(codes, weights.scl)
        grads.radii += gr
    if "var" in terms:
        out["var"], gr = loss_var(codes, weights.var)
        grads.radii += gr
    return float(sum(out.values())), out, grads


# ---------------------------------------------------------------------------
# latent prior and free space

def loss_reg(latents, weight):
    """weight * mean_p |z_p|^2 over the rows of ``latents``."""
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    P = len(z)
    return float(weight * np.sum(z * z) / P), 2.0 * weight * z / P


def loss_free_space(codes: ShapeCodes, w: MLP, points, scale_sdf=False, want_theta=False):
    """Mean hinge ``max(0, -g(x))`` over free-space points (blended prediction)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        return 0.0, CodeGrads.zeros_like(codes), zero_grads(w) if want_theta else None
    g, ctx = _blend(codes, w, pts, scale_sdf)
    viol = np.maximum(0.0, -g)
    value = float(viol.mean())
    up = np.where(g < 0, -1.0 / len(pts), 0.0)
    if not np.any(up) or len(ctx.pair.pt) == 0:
        return value, CodeGrads.zeros_like(codes), zero_grads(w) if want_theta else None
    grads, theta = _blend_backward(ctx, up, want_theta)[:2]
    return value, grads, theta


# ---------------------------------------------------------------------------
# total

@dataclass
class LossFlags:
    mixture_recon: bool = False
    scale_sdf: bool = False
    use_ext: bool = True        # False: extrinsic losses skipped (frozen extrinsics)
    ext_terms: tuple = EXT_TERMS


def loss_total(codes: ShapeCodes, w: MLP, samples, surface, weights: LossWeights,
               flags: LossFlags = None, free_points=None, want_theta=True, context=""):
    """Weighted sum of all terms for one object. Returns ``(LossReport, CodeGrads, theta)``."""
    flags = flags or LossFlags()
    report = LossReport()
    grads = CodeGrads.zeros_like(codes)
    theta = zero_grads(w) if want_theta else None

    v, g, th = loss_recon(codes, w, samples, flags.mixture_recon, flags.scale_sdf, want_theta)
    report.add("recon", v)
    grads.add_(g)
    if want_theta:
        for k in theta:
            theta[k] += th[k]

    if flags.use_ext:
        _, ext_terms, g = loss_ext(codes, surface, weights, flags.ext_terms)
        for name, v in ext_terms.items():
            report.add(name, v)
        grads.add_(g)

    v, gz = loss_reg(codes.latents, weights.reg)
    report.add("reg", v)
    grads.latents += gz

    if free_points is not None and weights.free_space > 0:
        v, g, th = loss_free_space(codes, w, free_points, flags.scale_sdf, want_theta)
        report.add("free_space", weights.free_space * v)
        grads.add_(g, weights.free_space)
        if want_theta:
            for k in theta:
                theta[k] += weights.free_space * th[k]

    for name, value in report.terms.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss term {name!r}", context)
    return report, grads, theta
