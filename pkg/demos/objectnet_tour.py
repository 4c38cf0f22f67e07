"""ObjectNet on a handful of toy shapes: interpolation, sampling, completion.

A patch decoder is trained first. ObjectNet then learns to emit all patch
codes of an object from one small latent vector, in three phases, with the
decoder frozen. Having a single latent per object buys three things this
script shows off:

  * walking between two objects in latent space,
  * drawing new latents from a Gaussian fitted to the training latents,
  * completing a shape seen from a single camera.

    python demos/objectnet_tour.py --quick    # a few minutes
    python demos/objectnet_tour.py            # closer to the acceptance run, ~20 min
"""
import argparse
from pathlib import Path

import numpy as np

from patchsdf.config import CompletionConfig, ObjectNetConfig, TrainConfig
from patchsdf.geometry import (AnalyticShape, CameraView, render_partial, sample_sdf_set,
                               sample_surface, save_mesh)
from patchsdf.metrics import mesh_accuracy
from patchsdf.reconstruct import (complete_partial, fit_prior, interpolate, reconstruct_mesh,
                                  sample_prior)
from patchsdf.training import train_objectnet, train_patchnet

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
parser.add_argument("--out", default="demo_out")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)
quick = args.quick

shapes = [AnalyticShape("sphere", (r,)) for r in (0.5, 0.6, 0.7, 0.8)]
shapes += [AnalyticShape("box", e) for e in ((0.5, 0.4, 0.3), (0.6, 0.3, 0.3),
                                             (0.4, 0.4, 0.4), (0.55, 0.45, 0.25))]
meshes = [s.mesh() for s in shapes]
data = [(sample_sdf_set(m, 20_000, seed=100 + i), sample_surface(m, 10_000, seed=200 + i))
        for i, m in enumerate(meshes)]

phase = 30 if quick else 150
cfg = TrainConfig(
    n_patches=8, latent_size=32, epochs=30 if quick else 100, batch_size=8, steps_per_epoch=5,
    samples_per_object=1000,
    objectnet=ObjectNetConfig(phase_epochs=(phase,) * 3, batch_size=8, latent_size=16,
                              hidden=256),
    completion=CompletionConfig(iterations=150 if quick else 600,
                                refine_iterations=50 if quick else 100,
                                samples_per_iteration=2000 if quick else 8000))

model = train_patchnet(data, cfg)
print(f"patch decoder trained; final total loss {model.history[-1]['total']:.4f}")
objnet = train_objectnet(model.decoder, data, cfg)
for name in ("I", "II", "III"):
    rows = [r for r in objnet.history if r["phase"] == name]
    print(f"phase {name:3s}: total {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f}")

res = 64 if quick else 96

# Interpolate from the smallest sphere to the flattest box.
a, b = objnet.latents[0], objnet.latents[7]
for t in (0.0, 0.5, 1.0):
    mesh = interpolate(objnet, model.decoder, a, b, t, res)
    save_mesh(mesh, out / f"interp_{t:.1f}.obj")
    print(f"interpolation t={t:.1f}: {mesh.n_vertices} vertices, volume {mesh.volume():.3f}")

# A Gaussian over eight latents is a crude prior, but samples stay recognisable.
prior = fit_prior(objnet.latents)
for seed in range(2):
    codes = objnet.decode(sample_prior(prior, seed))
    mesh = reconstruct_mesh(codes, model.decoder, res)
    save_mesh(mesh, out / f"prior_sample_{seed}.obj")
    print(f"prior sample {seed}: volume {mesh.volume():.3f}")

# Completion: one depth image of box 5, then optimise the object latent
# (stage 1) and refine the patch latents against the observation (stage 2).
target = 5
partial, origin = render_partial(meshes[target], CameraView([1.6, 1.2, 1.4], [0, 0, 0],
                                                            (64, 64)))
print(f"\ncamera sees {len(partial.points)} surface points of shape {target}")
result = complete_partial(objnet, model.decoder, partial, origin, objnet.latents, cfg,
                          seed=0, resolution=res)
stage1 = reconstruct_mesh(result.stage1_codes, model.decoder, res)
save_mesh(result.mesh, out / "completed.obj")
print(f"mesh accuracy, stage 1 only: {mesh_accuracy(meshes[target], stage1, seed=0):.4f}")
print(f"mesh accuracy, refined:      {mesh_accuracy(meshes[target], result.mesh, seed=0):.4f}")
