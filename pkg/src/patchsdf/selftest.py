"""Fast built-in invariant checks, runnable without pytest (``patchsdf selftest``)."""
from __future__ import annotations

import os
import tempfile
import traceback
from dataclasses import dataclass

import numpy as np


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


_CHECKS = []


def check(fn):
    _CHECKS.append(fn)
    return fn


def _rel_err(a, n):
    a, n = np.ravel(a), np.ravel(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)))


def _central(f, x, idx, h=1e-6):
    out = []
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f()
        x.flat[i] = old - h
        fm = f()
        x.flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


@check
def decoder_gradients():
    from .networks import decoder_backward, decoder_forward, init_decoder

    rng = np.random.default_rng(1)
    w = init_decoder(8, seed=2, hidden=16, depth=4, skip=2)
    for b in w.b:
        b += rng.normal(0, 0.1, b.shape)
    z = rng.normal(0, 0.3, (5, 8))
    x = rng.normal(0, 0.5, (5, 3))
    up = rng.normal(size=5)
    grads, dz, dx = decoder_backward(w, z, x, up)
    f = lambda: float(np.dot(up, decoder_forward(w, z, x)))
    err = _rel_err(dz.ravel()[:10], _central(f, z, range(10)))
    err = max(err, _rel_err(dx.ravel(), _central(f, x, range(15))))
    for name in ("V0", "g2", "b4"):
        p = w.params()[name]
        idx = range(min(6, p.size))
        err = max(err, _rel_err(grads[name].ravel()[:6], _central(f, p, idx)))
    return err < 1e-5, f"max relative error {err:.2e}"


@check
def closed_form_losses():
    from .losses import loss_cov, loss_reg, loss_rot, loss_scl, loss_sur, loss_var
    from .geometry.sampling import SurfaceSamples
    from .patchrep import ShapeCodes

    surf = SurfaceSamples(np.array([[0.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]))
    one = lambda c, r=0.1, phi=(0, 0, 0): ShapeCodes(np.zeros((1, 2)), [c], [r], [phi])
    vals = [
        (loss_sur(one((0.3, 0, 0)), surf, 5.0, 0.06)[0], 0.45),
        (loss_sur(one((0.1, 0, 0)), surf, 5.0, 0.06)[0], 0.30),
        (loss_rot(one((0, 0, 0)), surf, 1.0)[0], 0.0),
        (loss_rot(one((0, 0, 0), phi=(np.pi, 0, 0)), surf, 1.0)[0], 4.0),
        (loss_rot(one((0, 0, 0), phi=(np.pi / 2, 0, 0)), surf, 1.0)[0], 1.0),
        (loss_scl(ShapeCodes(np.zeros((2, 1)), np.zeros((2, 3)), [0.2, 0.2], np.zeros((2, 3))),
                  0.01)[0], 4e-4),
        (loss_var(ShapeCodes(np.zeros((2, 1)), np.zeros((2, 3)), [0.1, 0.3], np.zeros((2, 3))),
                  0.01)[0], 1e-4),
        (loss_cov(one((0.25, 0, 0), r=0.2), surf, 200.0, 0.05)[0], 10.0),
        (loss_reg(np.array([[2.0, 0.0]]), 1e-4)[0], 4e-4),
    ]
    err = max(abs(a - b) for a, b in vals)
    return err <= 1e-12, f"max deviation {err:.1e}"


@check
def blending_contract():
    from .networks import init_decoder
    from .patchrep import ShapeCodes, blend_sdf, blend_weight, rotation_matrix, transform_codes

    ok = abs(blend_weight(0.0, 0.7) - (1 - np.exp(-4.5))) <= 1e-12
    ok &= blend_weight(0.7, 0.7) == 0.0
    rng = np.random.default_rng(3)
    w = init_decoder(4, seed=0, hidden=16, depth=4, skip=2)
    codes = ShapeCodes(rng.normal(size=(3, 4)), rng.uniform(-0.3, 0.3, (3, 3)),
                       rng.uniform(0.3, 0.6, 3), rng.uniform(-3, 3, (3, 3)))
    x = rng.uniform(-0.5, 0.5, (200, 3))
    S = rotation_matrix(rng.uniform(-3, 3, 3))
    t = rng.normal(size=3)
    moved = transform_codes(codes, S, t)
    dev = np.max(np.abs(blend_sdf(moved, w, x @ S.T + t) - blend_sdf(codes, w, x)))
    ok &= dev <= 1e-9
    ok &= blend_sdf(codes, w, np.array([5.0, 5.0, 5.0])) == 1.0
    return bool(ok), f"rigid deviation {dev:.1e}"


@check
def initialization_covers_surface():
    from .geometry import icosphere, sample_surface
    from .patchrep import init_extrinsics, rotation_matrix

    surf = sample_surface(icosphere(3), 2000, seed=0)
    codes = init_extrinsics(surf, 30, seed=0, latent_size=4)
    d = np.linalg.norm(surf.points[:, None] - codes.centers[None], axis=2)
    near = np.argmin(d, axis=1)
    covered = np.all(d[np.arange(len(d)), near] <= codes.radii[near])
    idx = [int(np.argmin(np.linalg.norm(surf.points - c, axis=1))) for c in codes.centers]
    axis = rotation_matrix(codes.angles)[:, :, 2]
    align = float(np.max(np.abs(axis - surf.normals[idx])))
    return bool(covered and align < 1e-9), f"normal alignment error {align:.1e}"


@check
def marching_cubes_sphere():
    from .reconstruct import marching_cubes

    res = 48
    mesh = marching_cubes(lambda p: np.linalg.norm(p, axis=1) - 0.8, res)
    err = float(np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.8)))
    bound = 2 * np.sqrt(3) / (res - 1)
    return bool(mesh.is_watertight() and err < bound), f"radial error {err:.2e}"


@check
def metrics_conventions():
    from .geometry import empty_mesh, icosphere
    from .metrics import chamfer, f_score, iou

    s = icosphere(2)
    ok = iou(s, s, count=2000) == 100.0 and f_score(s, s, count=2000) == 100.0
    ok &= chamfer(s, s, seed=(0, 0), count=2000) < 1e-8
    e = empty_mesh()
    ok &= iou(s, e) == 0.0 and chamfer(s, e) == 100.0 and f_score(s, e) == 0.0
    return bool(ok), ""


@check
def prior_fit():
    from .reconstruct import fit_prior

    u = np.arange(1.0, 5.0)
    p = fit_prior(np.stack([u, -u]))
    dev = float(np.max(np.abs(p.covariance - (2 * np.outer(u, u) + 1e-6 * np.eye(4)))))
    return bool(np.all(p.mean == 0) and dev < 1e-12), f"covariance deviation {dev:.1e}"


@check
def schedules():
    from .config import TrainConfig

    cfg = TrainConfig()
    lr = [cfg.lr_at(cfg.lr_net, e) for e in (0, 199, 200, 399, 400)]
    reg = [cfg.reg_at(e) for e in (0, 200, 400, 800)]
    ok = lr == [5e-4, 5e-4, 2.5e-4, 2.5e-4, 1.25e-4] and reg == [0.0, 5e-5, 1e-4, 1e-4]
    return ok, ""


@check
def file_round_trips():
    from .formats import Checkpoint, load_checkpoint, save_checkpoint
    from .geometry import icosphere, read_sdf_samples, sample_sdf_set, write_sdf_samples
    from .networks import init_decoder
    from .patchrep import ShapeCodes

    with tempfile.TemporaryDirectory() as tmp:
        s = sample_sdf_set(icosphere(2), 500, seed=0)
        write_sdf_samples(os.path.join(tmp, "a.pnsd"), s)
        back = read_sdf_samples(os.path.join(tmp, "a.pnsd"))
        ok = np.array_equal(back.points, s.points.astype(np.float32).astype(np.float64))
        w = init_decoder(4, seed=0, hidden=8, depth=3, skip=1)
        codes = ShapeCodes(np.ones((2, 4)), np.zeros((2, 3)), [0.5, 0.25], np.zeros((2, 3)))
        save_checkpoint(os.path.join(tmp, "w.pnwt"), Checkpoint(w, 4, 2, [codes]))
        ck = load_checkpoint(os.path.join(tmp, "w.pnwt"))
        ok &= ck.net.widths == w.widths and np.array_equal(ck.codes[0].radii, codes.radii)
    return bool(ok), ""


def run_selftest():
    results = []
    for fn in _CHECKS:
        try:
            ok, detail = fn()
        except Exception:                          # a crashing check is a failed check
            ok, detail = False, traceback.format_exc(limit=3).strip().splitlines()[-1]
        results.append(CheckResult(fn.__name__, bool(ok), detail))
    return results
