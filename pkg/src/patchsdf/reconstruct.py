"""Surface extraction and the shape-editing applications built on it."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes as _skimage_mc

from .config import CompletionConfig, TrainConfig
from .errors import EmptyObservationError, PriorError, RadiusError
from .geometry.mesh import TriMesh, empty_mesh
from .geometry.sampling import DEFAULT_TRUNCATION, SdfSampleSet
from .losses import LossFlags, SurfaceIndex, loss_cov, loss_free_space, loss_recon, loss_reg
from .networks import MLP, AdamState, adam_step, mlp_backward, mlp_forward
from .patchrep import (ShapeCodes, blend_weight, euler_from_matrix, patch_distances,
                       rotation_matrix)
from .training import ObjectNetResult, _merge_grads, _split_output

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# grids and marching cubes

def grid_axes(resolution, bounds=DEFAULT_BOUNDS):
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("grid bounds must have positive extent")
    return [np.linspace(lo[k], hi[k], resolution) for k in range(3)]


def grid_points(resolution, bounds=DEFAULT_BOUNDS):
    ax = grid_axes(resolution, bounds)
    X = np.meshgrid(*ax, indexing="ij")
    return np.stack([x.ravel() for x in X], axis=1)


def marching_cubes(field, resolution=128, bounds=DEFAULT_BOUNDS, chunk=1 << 16):
    """Zero level set of ``field`` on a uniform grid.

    ``field`` is either a callable mapping (N, 3) points to N values or a
    precomputed (res, res, res) array sampled on ``grid_points``. The field is
    negative inside; output triangles are wound so normals point outward and
    vertices are shared between neighbouring cells. A field with no sign
    change yields an empty mesh (check ``mesh.is_empty``).
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if callable(field):
        pts = grid_points(resolution, bounds)
        vals = np.concatenate([np.asarray(field(pts[s:s + chunk]), dtype=np.float64)
                               for s in range(0, len(pts), chunk)])
        vol = vals.reshape((resolution,) * 3)
    else:
        vol = np.asarray(field, dtype=np.float64)
        if vol.shape != (resolution,) * 3:
            raise ValueError(f"field grid shape {vol.shape} does not match resolution")
        grid_axes(resolution, bounds)
    if not np.all(np.isfinite(vol)):
        raise ValueError("field contains non-finite values")
    if vol.min() >= 0.0 or vol.max() <= 0.0:
        log.warning("marching cubes: field has no sign change, returning an empty mesh")
        return empty_mesh()
    spacing = tuple((hi - lo) / (resolution - 1))
    verts, faces, _, _ = _skimage_mc(vol, level=0.0, spacing=spacing, allow_degenerate=True)
    return TriMesh(verts.astype(np.float64) + lo, faces.astype(np.int64))


# ---------------------------------------------------------------------------
# fast blended-field evaluation

def blended_field(codes: ShapeCodes, w: MLP, points, scale_sdf=False, dtype=np.float64,
                  chunk=1 << 15, return_covered=False):
    """Forward-only blended SDF over many points; 1 where no patch covers a point."""
    pts = np.asarray(points, dtype=np.float64)
    net = w.as_dtype(dtype)
    R = rotation_matrix(codes.angles)
    g = np.ones(len(pts))
    covered = np.zeros(len(pts), dtype=bool)
    for s in range(0, len(pts), chunk):
        x = pts[s:s + chunk]
        D = patch_distances(codes, x)
        pt, pp = np.nonzero(D < codes.radii[None])
        if len(pt) == 0:
            continue
        r = codes.radii[pp]
        xl = np.einsum("nji,nj->ni", R[pp], x[pt] - codes.centers[pp]) / r[:, None]
        f = net(np.concatenate([codes.latents[pp], xl], axis=1))[:, 0].astype(np.float64)
        if scale_sdf:
            f = f * r
        wts = blend_weight(D[pt, pp], r)
        tot = np.bincount(pt, weights=wts, minlength=len(x))
        num = np.bincount(pt, weights=wts * f, minlength=len(x))
        cov = tot > 0
        gx = g[s:s + chunk]
        gx[cov] = num[cov] / tot[cov]
        covered[s:s + chunk] = cov
    return (g, covered) if return_covered else g


def fill_enclosed_uncovered(values, covered):
    """Mark uncovered grid cells that cannot reach the grid boundary as inside (-1).

    Uncovered cells default to +1. Pockets of them sealed off from the grid
    boundary by covered cells lie inside the patch shell, so they get -1.
    """
    vol = values.copy()
    free = ~covered
    labels, n = ndimage.label(free)
    if n == 0:
        return vol
    border = np.zeros(n + 1, dtype=bool)
    for face in (labels[0], labels[-1], labels[:, 0], labels[:, -1], labels[:, :, 0],
                 labels[:, :, -1]):
        border[np.unique(face)] = True
    enclosed = free & ~border[labels]
    vol[enclosed] = -1.0
    return vol


def reconstruct_mesh(codes: ShapeCodes, w: MLP, resolution=128, bounds=DEFAULT_BOUNDS,
                     scale_sdf=False, fill_enclosed=True, dtype=np.float64):
    """Blended patch field -> triangle mesh via marching cubes.

    With ``fill_enclosed`` uncovered pockets fully surrounded by patches are
    treated as interior instead of producing a second, inner surface.
    """
    pts = grid_points(resolution, bounds)
    g, covered = blended_field(codes, w, pts, scale_sdf, dtype, return_covered=True)
    shape = (resolution,) * 3
    vol = g.reshape(shape)
    if fill_enclosed:
        vol = fill_enclosed_uncovered(vol, covered.reshape(shape))
    return marching_cubes(vol, resolution, bounds)


# ---------------------------------------------------------------------------
# articulated deformation

@dataclass
class DeformSpec:
    rotations: np.ndarray      # (P, 3) Euler angles
    translations: np.ndarray   # (P, 3)
    scales: np.ndarray         # (P,)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if not len(self.rotations) == len(self.translations) == len(self.scales):
            raise ValueError("deform spec entries have inconsistent lengths")
        if np.any(self.scales <= 0):
            raise RadiusError("deformation scale multipliers must be positive")

    def __len__(self):
        return len(self.scales)

    @classmethod
    def identity(cls, n_patches):
        return cls(np.zeros((n_patches, 3)), np.zeros((n_patches, 3)), np.ones(n_patches))

    @classmethod
    def global_motion(cls, n_patches, rotation=(0, 0, 0), translation=(0, 0, 0), scale=1.0):
        return cls(np.tile(rotation, (n_patches, 1)), np.tile(translation, (n_patches, 1)),
                   np.full(n_patches, float(scale)))

    def to_json(self):
        return json.dumps([{"rotation": r.tolist(), "translation": t.tolist(), "scale": float(s)}
                           for r, t, s in zip(self.rotations, self.translations, self.scales)],
                          indent=2)

    @classmethod
    def from_json(cls, text):
        items = json.loads(text)
        if not isinstance(items, list):
            raise ValueError("deform spec must be a list of per-patch edits")
        rot = [it.get("rotation", [0, 0, 0]) for it in items]
        tr = [it.get("translation", [0, 0, 0]) for it in items]
        sc = [it.get("scale", 1.0) for it in items]
        return cls(rot, tr, sc)


def deform_codes(codes: ShapeCodes, spec: DeformSpec) -> ShapeCodes:
    """Per-patch rigid edit of the extrinsics; latents are untouched."""
    if len(spec) != codes.n_patches:
        raise ValueError(f"deform spec has {len(spec)} entries for {codes.n_patches} patches")
    out = codes.copy()
    for p in range(codes.n_patches):
        if np.any(spec.rotations[p] != 0):
            S = rotation_matrix(spec.rotations[p])
            out.centers[p] = S @ codes.centers[p]
            out.angles[p] = euler_from_matrix(S @ rotation_matrix(codes.angles[p]))
        if np.any(spec.translations[p] != 0):
            out.centers[p] = out.centers[p] + spec.translations[p]
        if spec.scales[p] != 1.0:
            out.radii[p] = codes.radii[p] * spec.scales[p]
    return out


def deform(codes: ShapeCodes, spec: DeformSpec, w: MLP, resolution=128, **kw):
    return reconstruct_mesh(deform_codes(codes, spec), w, resolution, **kw)


# ---------------------------------------------------------------------------
# object-level latent space

def interpolate_codes(objnet: ObjectNetResult, latent_a, latent_b, t):
    if not 0.0 <= t <= 1.0:
        raise ValueError("interpolation parameter must lie in [0, 1]")
    a = np.asarray(latent_a, dtype=np.float64)
    b = np.asarray(latent_b, dtype=np.float64)
    return objnet.decode((1.0 - t) * a + t * b)


def interpolate(objnet: ObjectNetResult, decoder: MLP, latent_a, latent_b, t, resolution=128,
                **kw):
    return reconstruct_mesh(interpolate_codes(objnet, latent_a, latent_b, t), decoder,
                            resolution, **kw)


@dataclass
class GaussianPrior:
    mean: np.ndarray
    covariance: np.ndarray
    jitter: float = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = len(self.mean)
        if self.covariance.shape != (d, d):
            raise PriorError("covariance shape does not match the mean")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12):
            raise PriorError("covariance is not symmetric")

    @property
    def dim(self):
        return len(self.mean)

    def cholesky(self):
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise PriorError("covariance is not positive definite") from exc


def fit_prior(latents, jitter=1e-6) -> GaussianPrior:
    Z = np.asarray(latents, dtype=np.float64)
    if Z.ndim != 2 or len(Z) < 2:
        raise PriorError("fitting a prior needs at least two latent vectors")
    mean = Z.mean(axis=0)
    dev = Z - mean
    cov = dev.T @ dev / (len(Z) - 1)
    cov = 0.5 * (cov + cov.T) + jitter * np.eye(Z.shape[1])
    return GaussianPrior(mean, cov, jitter)


def sample_prior(prior: GaussianPrior, seed, count=None):
    """mean + L xi with L the Cholesky factor; one vector, or ``count`` rows."""
    L = prior.cholesky()
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(prior.dim if count is None else (count, prior.dim))
    return prior.mean + xi @ L.T


# ---------------------------------------------------------------------------
# partial point cloud completion

@dataclass
class CompletionResult:
    latent: np.ndarray
    codes: ShapeCodes
    mesh: TriMesh
    stage1_codes: ShapeCodes
    history: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.latent, self.codes, self.mesh))


def completion_targets(partial, sigma, seed, per_point=2):
    """Surface points with target 0 plus ``per_point`` offsets along the normal each."""
    rng = np.random.default_rng(seed)
    pts = np.asarray(partial.points, dtype=np.float64)
    nrm = np.asarray(partial.normals, dtype=np.float64)
    off = np.clip(rng.normal(0.0, sigma, size=(len(pts), per_point)), -DEFAULT_TRUNCATION,
                  DEFAULT_TRUNCATION)
    near = (pts[:, None, :] + off[..., None] * nrm[:, None, :]).reshape(-1, 3)
    return np.concatenate([pts, near]), np.concatenate([np.zeros(len(pts)), off.ravel()])


def free_space_points(cam_origin, hits, count, guard, rng):
    """Uniform points on camera-to-hit segments, stopping ``guard`` short of the surface."""
    o = np.asarray(cam_origin, dtype=np.float64)
    h = hits[rng.integers(len(hits), size=count)]
    seg = h - o
    length = np.linalg.norm(seg, axis=1)
    frac_max = np.clip((length - guard) / length, 0.0, 1.0)
    return o + (rng.random(count) * frac_max)[:, None] * seg


def _completion_step_losses(codes, decoder, batch, free, surf, cfg_c, weights, flags, cov):
    v_rec, g, _ = loss_recon(codes, decoder, batch, flags.mixture_recon, flags.scale_sdf,
                             want_theta=False)
    terms = {"recon": v_rec}
    if cov:
        v, gc, gr = loss_cov(codes, surf, weights.cov, weights.sigma_cov)
        terms["cov"] = v
        g.centers += gc
        g.radii += gr
    v, gf, _ = loss_free_space(codes, decoder, free, flags.scale_sdf)
    terms["free_space"] = cfg_c.free_space_weight * v
    g.add_(gf, cfg_c.free_space_weight)
    return terms, g


def complete_partial(objnet: ObjectNetResult, decoder: MLP, partial, cam_origin, train_latents,
                     cfg: TrainConfig = None, seed=0, resolution=128, reconstruct=True):
    """Fit an object latent to a partial observation, then refine patch latents."""
    cfg = cfg or TrainConfig()
    cc: CompletionConfig = cfg.completion
    if partial is None or len(partial.points) == 0:
        raise EmptyObservationError("partial observation has no points")
    rng = np.random.default_rng(seed)
    tgt_pts, tgt_sdf = completion_targets(partial, cc.near_sigma, seed)
    surf = SurfaceIndex(partial)
    hits = np.asarray(partial.points, dtype=np.float64)
    n_free = int(round(cc.free_space_fraction * cc.samples_per_iteration))
    n_rec = cc.samples_per_iteration - n_free
    flags = LossFlags(cfg.mixture_recon, cfg.scale_sdf)
    P, Nz, rs = objnet.n_patches, objnet.latent_size, objnet.radius_scale

    latent = np.asarray(train_latents, dtype=np.float64).mean(axis=0).copy()
    history = []
    adam = AdamState()
    stage1 = cc.iterations - cc.refine_iterations
    codes = None

    def draw():
        idx = rng.integers(len(tgt_pts), size=n_rec)
        batch = SdfSampleSet(tgt_pts[idx], tgt_sdf[idx], truncation=DEFAULT_TRUNCATION)
        return batch, free_space_points(cam_origin, hits, n_free, cc.free_space_guard, rng)

    for it in range(stage1):
        lr = cc.lr * 0.5 ** (it // cc.lr_halving_period)
        out, cache = mlp_forward(objnet.net, latent[None])
        codes = _split_output(out[0], P, Nz, rs)
        batch, free = draw()
        terms, g = _completion_step_losses(codes, decoder, batch, free, surf, cc, cfg.weights,
                                           flags, cov=True)
        v, gz = loss_reg(latent, cc.latent_reg)
        terms["reg"] = v
        _, d_lat = mlp_backward(objnet.net, cache, _merge_grads(g, rs)[None])
        grad = d_lat[0] + gz[0]
        adam_step(adam, {"latent": latent}, {"latent": grad}, lr)
        history.append({"iteration": it, "stage": 1, "lr": lr, "total": sum(terms.values()),
                        **terms})

    stage1_codes = objnet.decode(latent)
    codes = stage1_codes.copy()
    adam = AdamState()
    for k in range(cc.refine_iterations):
        it = stage1 + k
        batch, free = draw()
        terms, g = _completion_step_losses(codes, decoder, batch, free, surf, cc, cfg.weights,
                                           flags, cov=False)
        v, gz = loss_reg(codes.latents, cc.latent_reg)
        terms["reg"] = v
        adam_step(adam, {"latents": codes.latents}, {"latents": g.latents + gz}, cc.refine_lr)
        history.append({"iteration": it, "stage": 2, "lr": cc.refine_lr,
                        "total": sum(terms.values()), **terms})

    mesh = reconstruct_mesh(codes, decoder, resolution, scale_sdf=cfg.scale_sdf) \
        if reconstruct else None
    return CompletionResult(latent, codes, mesh, stage1_codes, history)
