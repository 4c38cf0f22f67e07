"""Auto-decoder optimization loops.

``train_patchnet`` jointly optimizes the shared patch decoder and every
object's patch codes; ``fit_shape`` repeats the code optimization for a new
object against a frozen decoder; ``train_objectnet`` learns the object-level
regressor in three phases on top of a frozen decoder.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrainConfig
from .errors import EmptyMeshError, NonFiniteError
from .losses import EXT_TERMS, LossFlags, LossReport, SurfaceIndex, loss_ext, loss_recon, loss_reg
from .networks import (EXTRINSIC_SIZE, MLP, AdamState, adam_step, init_decoder, init_objectnet,
                       mlp_backward, mlp_forward, objectnet_forward_backward, zero_grads)
from .patchrep import R_MIN, CodeGrads, ShapeCodes, init_extrinsics

log = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    decoder: MLP
    codes: list
    config: TrainConfig
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.codes:
            raise ValueError("a trained model needs at least one object")


@dataclass
class ObjectNetResult:
    net: MLP
    latents: np.ndarray            # (N, object latent size)
    template: np.ndarray           # (N_P, 7) in (c, r, phi) order
    template_object: int
    decoder_checksum: str
    radius_scale: float = 1.0      # active scale on the regressed radii
    history: list = field(default_factory=list)
    n_patches: int = 0
    latent_size: int = 0

    def decode(self, latent):
        return decode_objectnet(self.net, latent, self.n_patches, self.latent_size,
                                self.radius_scale)


# ---------------------------------------------------------------------------
# shared helpers

def _check_dataset(dataset):
    if len(dataset) == 0:
        raise EmptyMeshError("training dataset is empty")
    for i, item in enumerate(dataset):
        if len(item) != 2 or item[0] is None or item[1] is None:
            raise ValueError(f"object {i} needs an SDF sample set and a surface sample set")
        if len(item[0]) == 0 or len(item[1]) == 0:
            raise EmptyMeshError(f"object {i} has no samples")


def _surface_index(surface, count, seed):
    if len(surface) > count:
        sel = np.random.default_rng(seed).choice(len(surface), size=count, replace=False)
        surface = surface.subset(np.sort(sel))
    return SurfaceIndex(surface)


def _object_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


class _StackedCodes:
    """All objects' codes in contiguous arrays; per-object ShapeCodes are views."""

    def __init__(self, codes):
        self.latents = np.stack([c.latents for c in codes])
        self.centers = np.stack([c.centers for c in codes])
        self.radii = np.stack([c.radii for c in codes])
        self.angles = np.stack([c.angles for c in codes])
        self.views = [ShapeCodes(self.latents[i], self.centers[i], self.radii[i], self.angles[i])
                      for i in range(len(codes))]

    def latent_params(self):
        return {"latents": self.latents}

    def extrinsic_params(self):
        return {"centers": self.centers, "radii": self.radii, "angles": self.angles}

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in
                {**self.latent_params(), **self.extrinsic_params()}.items()}

    def detached(self):
        return [v.copy() for v in self.views]


def _repeated_passes(rng, n, cfg):
    """(order, batch start) pairs for ``cfg.steps_per_epoch`` shuffled passes."""
    for _ in range(cfg.steps_per_epoch):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            yield order, start


def _history_row(epoch, reports, **extra):
    n = len(reports)
    row = {"epoch": epoch, **extra}
    row["total"] = sum(r.total for r in reports) / n
    for k in reports[0].terms:
        row[k] = sum(r.terms[k] for r in reports) / n
    return row


def _object_loss(codes, decoder, samples, surf, cfg, w_reg, flags, want_theta, context):
    """One object's training objective (reconstruction + extrinsics + latent prior)."""
    weights = replace(cfg.weights, reg=w_reg)
    report = LossReport()
    v, grads, theta = loss_recon(codes, decoder, samples, flags.mixture_recon, flags.scale_sdf,
                                 want_theta)
    report.add("recon", v)
    if flags.use_ext:
        _, terms, g = loss_ext(codes, surf, weights, flags.ext_terms)
        for name, val in terms.items():
            report.add(name, val)
        grads.add_(g)
    v, gz = loss_reg(codes.latents, weights.reg)
    report.add("reg", v)
    grads.latents += gz
    for name, value in report.terms.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss term {name!r}", context)
    return report, grads, theta


def _baseline_codes(cfg):
    return ShapeCodes(np.zeros((1, cfg.baseline_latent_size)), np.zeros((1, 3)),
                      np.ones(1), np.zeros((1, 3)))


def _initial_codes(surf_points, cfg, seed):
    if cfg.baseline_mode:
        return _baseline_codes(cfg)
    return init_extrinsics(surf_points, cfg.n_patches, seed, cfg.latent_size)


# ---------------------------------------------------------------------------
# PatchNet training

def train_patchnet(dataset, cfg: TrainConfig = None, decoder: MLP = None, checkpoint=None):
    """Jointly optimize decoder weights, patch latents and extrinsics.

    ``dataset`` is a list of ``(SdfSampleSet, SurfaceSamples)``. ``checkpoint``,
    if given, is called as ``checkpoint(epoch, model)`` every
    ``cfg.checkpoint_every`` epochs.
    """
    cfg = cfg or TrainConfig()
    _check_dataset(dataset)
    n = len(dataset)
    rng = np.random.default_rng(cfg.seed)
    seeds = _object_seeds(cfg.seed, n)
    surfs = [_surface_index(s, cfg.surface_samples, sd) for (_, s), sd in zip(dataset, seeds)]
    latent = cfg.baseline_latent_size if cfg.baseline_mode else cfg.latent_size
    w = decoder if decoder is not None else init_decoder(latent, seed=cfg.seed)
    if w.in_dim != latent + 3:
        raise ValueError(f"decoder expects latent size {w.in_dim - 3}, config says {latent}")
    stack = _StackedCodes([_initial_codes(s, cfg, sd) for s, sd in zip(surfs, seeds)])

    frozen_ext = cfg.fixed_extrinsics or cfg.baseline_mode
    flags = LossFlags(cfg.mixture_recon, cfg.scale_sdf, use_ext=not frozen_ext)
    adam_theta, adam_lat, adam_ext = AdamState(), AdamState(), AdamState()
    history = []

    for epoch in range(cfg.epochs):
        lr_net = cfg.lr_at(cfg.lr_net, epoch)
        lr_codes = cfg.lr_at(cfg.lr_codes, epoch)
        w_reg = cfg.reg_at(epoch)
        reports = [None] * n
        for order, start in _repeated_passes(rng, n, cfg):
            batch = np.sort(order[start:start + cfg.batch_size])
            theta = zero_grads(w)
            cgrads = stack.zero_grads()
            for i in batch:
                samples = dataset[i][0]
                sub = samples.subset(rng.integers(len(samples), size=cfg.samples_per_object))
                rep, g, th = _object_loss(stack.views[i], w, sub, surfs[i], cfg, w_reg, flags,
                                          True, f"epoch {epoch}, object {i}")
                reports[i] = rep
                for k in theta:
                    theta[k] += th[k]
                for k, arr in g.as_dict().items():
                    cgrads[k][i] += arr
            adam_step(adam_theta, w.params(), theta, lr_net)
            adam_step(adam_lat, stack.latent_params(), {"latents": cgrads["latents"]}, lr_codes)
            if not frozen_ext:
                adam_step(adam_ext, stack.extrinsic_params(),
                          {k: cgrads[k] for k in ("centers", "radii", "angles")}, lr_codes)
                np.maximum(stack.radii, R_MIN, out=stack.radii)
        history.append(_history_row(epoch, reports, lr_net=lr_net, lr_codes=lr_codes,
                                    w_reg=w_reg))
        log.debug("epoch %d total %.6g", epoch, history[-1]["total"])
        if checkpoint is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(epoch, TrainedModel(w.copy(), stack.detached(), cfg, list(history)))
    return TrainedModel(w, stack.detached(), cfg, history)


def fit_shape(w: MLP, samples, surface, cfg: TrainConfig = None, epochs=None,
              return_history=False):
    """Optimize patch codes for one object with the decoder held fixed."""
    cfg = cfg or TrainConfig()
    if len(samples) == 0 or len(surface) == 0:
        raise EmptyMeshError("fit_shape needs SDF samples and surface samples")
    epochs = cfg.fit_epochs if epochs is None else epochs
    seed = _object_seeds(cfg.seed, 1)[0]
    rng = np.random.default_rng(seed)
    surf = _surface_index(surface, cfg.surface_samples, seed)
    codes = _initial_codes(surf, cfg, seed)
    if w.in_dim != codes.latent_size + 3:
        raise ValueError("decoder latent size does not match the configuration")
    frozen_ext = cfg.fixed_extrinsics or cfg.baseline_mode
    flags = LossFlags(cfg.mixture_recon, cfg.scale_sdf, use_ext=not frozen_ext)
    adam_lat, adam_ext = AdamState(), AdamState()
    history = []
    for epoch in range(epochs):
        lr = cfg.lr_at(cfg.lr_codes, epoch)
        w_reg = cfg.reg_at(epoch)
        sub = samples.subset(rng.integers(len(samples), size=cfg.samples_per_object))
        rep, g, _ = _object_loss(codes, w, sub, surf, cfg, w_reg, flags, False,
                                 f"fit epoch {epoch}")
        adam_step(adam_lat, {"latents": codes.latents}, {"latents": g.latents}, lr)
        if not frozen_ext:
            adam_step(adam_ext, {"centers": codes.centers, "radii": codes.radii,
                                 "angles": codes.angles},
                      {"centers": g.centers, "radii": g.radii, "angles": g.angles}, lr)
            codes.clamp_radii()
        history.append(_history_row(epoch, [rep], lr_codes=lr, w_reg=w_reg))
    return (codes, history) if return_history else codes


# ---------------------------------------------------------------------------
# ObjectNet

def decode_objectnet(net: MLP, latent, n_patches, latent_size, radius_scale=1.0):
    """Object latent(s) -> ShapeCodes (a list for a batch of latents)."""
    out, _, _ = objectnet_forward_backward(net, latent)
    if np.ndim(latent) == 1:
        return _split_output(out, n_patches, latent_size, radius_scale)
    return [_split_output(o, n_patches, latent_size, radius_scale) for o in out]


def _split_output(vec, n_patches, latent_size, radius_scale):
    blk = np.asarray(vec).reshape(n_patches, latent_size + EXTRINSIC_SIZE)
    return ShapeCodes(blk[:, :latent_size].copy(), blk[:, latent_size:latent_size + 3].copy(),
                      radius_scale * blk[:, latent_size + 3], blk[:, latent_size + 4:].copy())


def _merge_grads(g: CodeGrads, radius_scale):
    """CodeGrads -> gradient w.r.t. the flat ObjectNet output block."""
    return np.concatenate([g.latents, g.centers, radius_scale * g.radii[:, None], g.angles],
                          axis=1).ravel()


@dataclass
class _PhaseSpec:
    name: str
    epochs: int
    weights: object
    use_recon: bool
    ext_terms: tuple
    lr_factor: float
    radius_scale: float
    tether: tuple = None          # (stored centers, stored radii) per object


def _objectnet_phases(cfg: TrainConfig, epochs):
    oc = cfg.objectnet
    ext = tuple(t for t in EXT_TERMS if t != "rot")
    w1 = replace(cfg.weights, var=oc.var_weight, scl=oc.scl_weight_phase1, rot=0.0)
    w3 = replace(cfg.weights, var=oc.var_weight, scl=oc.scl_weight_phase3, rot=0.0)
    return [
        _PhaseSpec("I", epochs[0], w1, False, ext, 1.0, 1.0),
        _PhaseSpec("II", epochs[1], w1, True, (), 1.0, oc.radius_scale),
        _PhaseSpec("III", epochs[2], w3, True, ext, oc.phase3_lr_factor, oc.radius_scale),
    ]


def _phase_object_loss(codes, decoder, samples, surf, cfg, phase, i, flags, context):
    oc = cfg.objectnet
    report = LossReport()
    grads = CodeGrads.zeros_like(codes)
    if phase.use_recon:
        v, g, _ = loss_recon(codes, decoder, samples, flags.mixture_recon, flags.scale_sdf,
                             want_theta=False)
        scale = oc.recon_weight_phase2 if phase.tether is not None else 1.0
        report.add("recon", scale * v)
        grads.add_(g, scale)
    if phase.ext_terms:
        _, terms, g = loss_ext(codes, surf, phase.weights, phase.ext_terms)
        for name, val in terms.items():
            report.add(name, val)
        grads.add_(g)
    if phase.tether is not None:
        c0, r0 = phase.tether[0][i], phase.tether[1][i]
        P = codes.n_patches
        dc = codes.centers - c0
        dr = codes.radii - r0
        report.add("tether_position", oc.position_tether * np.sum(dc * dc) / P)
        report.add("tether_scale", oc.scale_tether * np.sum(dr * dr) / P)
        grads.centers += 2.0 * oc.position_tether * dc / P
        grads.radii += 2.0 * oc.scale_tether * dr / P
    for name, value in report.terms.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss term {name!r}", context)
    return report, grads


def _run_objectnet_phases(net, latents, decoder, dataset, surfs, cfg, epochs, rng,
                          train_net, history, P, Nz, tether_from=None):
    """Shared phase driver for training (net + latents) and test-time encoding (latents)."""
    oc = cfg.objectnet
    flags = LossFlags(cfg.mixture_recon, cfg.scale_sdf)
    n = len(dataset)
    radius_scale = 1.0
    for phase in _objectnet_phases(cfg, epochs):
        adam_net, adam_lat = AdamState(), AdamState()
        radius_scale = phase.radius_scale
        if phase.name == "II":
            stored = decode_objectnet(net, latents, P, Nz, radius_scale)
            phase.tether = (np.stack([c.centers for c in stored]),
                            np.stack([c.radii for c in stored]))
        for epoch in range(phase.epochs):
            lr_net = phase.lr_factor * cfg.lr_at(cfg.lr_net, epoch)
            lr_lat = phase.lr_factor * cfg.lr_at(cfg.lr_codes, epoch)
            order = rng.permutation(n)
            reports = [None] * n
            for start in range(0, n, oc.batch_size):
                batch = np.sort(order[start:start + oc.batch_size])
                out, cache = mlp_forward(net, latents[batch])
                d_out = np.zeros_like(out)
                d_lat = np.zeros_like(latents)
                for j, i in enumerate(batch):
                    codes = _split_output(out[j], P, Nz, radius_scale)
                    samples = dataset[i][0]
                    sub = samples.subset(rng.integers(len(samples), size=cfg.samples_per_object))
                    rep, g = _phase_object_loss(codes, decoder, sub, surfs[i], cfg, phase, i,
                                                flags, f"phase {phase.name}, epoch {epoch}, "
                                                       f"object {i}")
                    v, gz = loss_reg(latents[i], oc.latent_reg)
                    rep.add("reg", v)
                    d_lat[i] += gz[0]
                    reports[i] = rep
                    d_out[j] = _merge_grads(g, radius_scale)
                g_net, g_lat = mlp_backward(net, cache, d_out)
                d_lat[batch] += g_lat
                if train_net:
                    adam_step(adam_net, net.params(), g_net, lr_net)
                adam_step(adam_lat, {"latents": latents}, {"latents": d_lat}, lr_lat)
            history.append(_history_row(epoch, reports, phase=phase.name, lr_net=lr_net,
                                        lr_codes=lr_lat, radius_scale=radius_scale,
                                        decoder_checksum=decoder.checksum()))
    return radius_scale


def train_objectnet(decoder: MLP, dataset, cfg: TrainConfig = None, epochs=None):
    """Three-phase ObjectNet training on top of a frozen patch decoder.

    Phase I fits the regressed extrinsics alone, Phase II enlarges the regressed
    radii and learns latents under tethers to the stored extrinsics, Phase III
    runs the full objective at reduced learning rates.
    """
    cfg = cfg or TrainConfig()
    _check_dataset(dataset)
    oc = cfg.objectnet
    epochs = tuple(oc.phase_epochs if epochs is None else epochs)
    n = len(dataset)
    P, Nz = cfg.n_patches, cfg.latent_size
    if decoder.in_dim != Nz + 3:
        raise ValueError("decoder latent size does not match the configuration")
    checksum = decoder.checksum()
    rng = np.random.default_rng(cfg.seed)
    seeds = _object_seeds(cfg.seed, n)
    surfs = [_surface_index(s, cfg.surface_samples, sd) for (_, s), sd in zip(dataset, seeds)]
    template_object = int(rng.permutation(n)[0])
    tcodes = init_extrinsics(surfs[template_object], P, seeds[template_object], Nz)
    template = np.concatenate([tcodes.centers, tcodes.radii[:, None], tcodes.angles], axis=1)
    net = init_objectnet(P, Nz, seed=cfg.seed, hidden=oc.hidden,
                         object_latent_size=oc.latent_size, template=template)
    latents = np.zeros((n, oc.latent_size))
    history = []
    scale = _run_objectnet_phases(net, latents, decoder, dataset, surfs, cfg, epochs, rng,
                                  True, history, P, Nz)
    if decoder.checksum() != checksum:
        raise RuntimeError("decoder weights changed during ObjectNet training")
    return ObjectNetResult(net, latents, template, template_object, checksum, scale, history,
                           P, Nz)


def encode_object(result: ObjectNetResult, decoder: MLP, samples, surface, cfg: TrainConfig = None,
                  epochs=None, seed=0):
    """Test-time object-latent fit through the frozen ObjectNet (same phase losses)."""
    cfg = cfg or TrainConfig()
    epochs = tuple(cfg.objectnet.test_phase_epochs if epochs is None else epochs)
    rng = np.random.default_rng(seed)
    surf = _surface_index(surface, cfg.surface_samples, seed)
    latents = np.zeros((1, cfg.objectnet.latent_size))
    history = []
    _run_objectnet_phases(result.net, latents, decoder, [(samples, surface)], [surf], cfg,
                          epochs, rng, False, history, result.n_patches, result.latent_size)
    return latents[0], history
