"""Command-line front end: ``patchsdf <command> ...``.

Numeric hyperparameters come from a JSON run config; flags select files,
seeds and grid resolutions. Every command writes a run manifest next to its
primary output before producing anything else.

Exit status: 0 success, 2 usage error, 3 config error, 4 unreadable or
malformed input, 5 violated contract (bad data for an operation),
6 selftest failure, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_CONTRACT = 5
EXIT_SELFTEST = 6

THREAD_ENV = "PATCHSDF_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("patchsdf")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = _Parser(prog="patchsdf", description="Patch-based implicit shape toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help=f"upper bound on BLAS worker threads (env {THREAD_ENV})")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker, fixed reduction order")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="mesh -> SDF samples + surface samples")
    s.add_argument("mesh")
    s.add_argument("--out", required=True, help="output PNSD file")
    s.add_argument("--surface-out", help="surface samples (.npz); default next to --out")
    s.add_argument("--count", type=int, default=200_000)
    s.add_argument("--truncation", type=float, default=0.1)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--surface-count", type=int, default=10_000)
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train the patch decoder and codes")
    _config_arg(s)
    _objects_arg(s)
    s.add_argument("--out", required=True, help="checkpoint (PNWT)")
    s.add_argument("--history", help="loss history CSV")

    s = sub.add_parser("train-objectnet", help="three-phase ObjectNet training")
    _config_arg(s)
    _objects_arg(s)
    s.add_argument("--decoder", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--history")

    s = sub.add_parser("fit", help="fit codes for one object with a frozen decoder")
    _config_arg(s)
    s.add_argument("--decoder", required=True)
    s.add_argument("--samples", required=True)
    s.add_argument("--surface", required=True)
    s.add_argument("--out", required=True, help="shape-codes file")

    s = sub.add_parser("reconstruct", help="codes -> OBJ mesh")
    _codes_source(s)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--out", required=True)

    s = sub.add_parser("complete", help="complete a partial observation")
    _config_arg(s)
    s.add_argument("--decoder", required=True)
    s.add_argument("--objectnet", required=True)
    s.add_argument("--mesh", help="render the partial view from this mesh")
    s.add_argument("--partial", help="partial surface samples (.npz) instead of --mesh")
    s.add_argument("--camera-origin", type=float, nargs=3, required=True)
    s.add_argument("--look-at", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--image-size", type=int, nargs=2, default=(64, 64))
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("deform", help="edit patch extrinsics and reconstruct")
    _codes_source(s)
    s.add_argument("--spec", required=True, help="JSON list of per-patch edits")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--out", required=True)

    s = sub.add_parser("interpolate", help="blend two ObjectNet latents")
    s.add_argument("--decoder", required=True)
    s.add_argument("--objectnet", required=True)
    s.add_argument("--a", type=int, required=True)
    s.add_argument("--b", type=int, required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--out", required=True)

    s = sub.add_parser("sample-prior", help="generate a shape from the latent prior")
    s.add_argument("--decoder", required=True)
    s.add_argument("--objectnet", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prior-out", help="also write the fitted prior (PNGP)")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="compare a predicted mesh with the ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="JSON report (stdout when omitted)")

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.add_argument("--out", help="write the check list as JSON")
    return p


def _config_arg(s):
    s.add_argument("--config", help="JSON run config; defaults when omitted")


def _objects_arg(s):
    s.add_argument("--object", nargs=2, action="append", required=True,
                   metavar=("SAMPLES", "SURFACE"), help="PNSD file and surface .npz")


def _codes_source(s):
    s.add_argument("--decoder", required=True, help="checkpoint with decoder weights")
    s.add_argument("--codes", help="shape-codes file; default: codes stored in --decoder")
    s.add_argument("--object-id", type=int, default=0)


# ---------------------------------------------------------------------------
# manifest, config, threads

def _configure_threads(args):
    n = args.threads
    if n is None and os.environ.get(THREAD_ENV):
        n = int(os.environ[THREAD_ENV])
    if args.deterministic:
        n = 1
    if n is not None:
        if n < 1:
            raise ConfigError("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def load_config(path):
    from .config import TrainConfig

    if path is None:
        return TrainConfig()
    try:
        return TrainConfig.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


def write_manifest(args, cfg, inputs, outputs):
    """Write ``<first output>.manifest.json`` and return its path."""
    config_json = cfg.to_json() if cfg is not None else "{}"
    manifest = {
        "command": args.command,
        "config_path": getattr(args, "config", None),
        "config_hash": hashlib.sha256(config_json.encode()).hexdigest(),
        "seed": getattr(args, "seed", None) if cfg is None else cfg.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs if p],
        "tool_version": __version__,
        "deterministic": bool(args.deterministic),
        "threads": os.environ.get("OMP_NUM_THREADS"),
    }
    path = f"{outputs[0]}.manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _load_objects(pairs):
    from .geometry import load_surface_samples, read_sdf_samples

    return [(read_sdf_samples(a), load_surface_samples(b)) for a, b in pairs]


def _decoder_and_codes(args):
    from .formats import load_checkpoint, load_codes

    ckpt = load_checkpoint(args.decoder)
    codes = load_codes(args.codes) if args.codes else ckpt.codes
    if not codes:
        raise ValueError("no shape codes available (pass --codes)")
    if not 0 <= args.object_id < len(codes):
        raise ValueError(f"object id {args.object_id} out of range 0..{len(codes) - 1}")
    return ckpt, codes[args.object_id]


def _scale_sdf(ckpt):
    if ckpt.config_json:
        return bool(json.loads(ckpt.config_json).get("scale_sdf", False))
    return False


def _objectnet(args):
    from .formats import load_checkpoint
    from .training import ObjectNetResult

    dec = load_checkpoint(args.decoder)
    on = load_checkpoint(args.objectnet)
    if on.net.kind != "objectnet" or on.object_latents is None:
        raise ValueError(f"{args.objectnet} is not an ObjectNet checkpoint")
    res = ObjectNetResult(on.net, on.object_latents, on.template, on.template_object,
                          dec.net.checksum(), on.radius_scale, [], on.n_patches,
                          on.latent_size)
    return dec, on, res


# ---------------------------------------------------------------------------
# commands

def cmd_preprocess(args):
    from .geometry import (add_sdf_noise, load_mesh, normalize_unit_sphere, sample_sdf_set,
                           sample_surface, save_surface_samples, write_sdf_samples)

    surface_out = args.surface_out or os.path.splitext(args.out)[0] + ".surface.npz"
    write_manifest(args, None, [args.mesh], [args.out, surface_out])
    mesh = load_mesh(args.mesh)
    if not args.no_normalize:
        mesh, _, _ = normalize_unit_sphere(mesh)
    samples = sample_sdf_set(mesh, args.count, args.truncation, seed=args.seed)
    if args.noise_sigma > 0:
        samples = add_sdf_noise(samples, args.noise_sigma, seed=args.seed + 1)
    write_sdf_samples(args.out, samples)
    save_surface_samples(surface_out, sample_surface(mesh, args.surface_count, args.seed + 2))
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train(args):
    from .formats import save_checkpoint, write_history_csv
    from .training import train_patchnet

    cfg = load_config(args.config)
    write_manifest(args, cfg, [x for pair in args.object for x in pair], [args.out, args.history])
    data = _load_objects(args.object)

    def checkpoint(epoch, model):
        save_checkpoint(f"{args.out}.epoch{epoch + 1}", _patchnet_ckpt(model))

    model = train_patchnet(data, cfg, checkpoint=checkpoint)
    save_checkpoint(args.out, _patchnet_ckpt(model))
    if args.history:
        write_history_csv(args.history, model.history)


def _patchnet_ckpt(model):
    from .formats import Checkpoint

    return Checkpoint(model.decoder, model.codes[0].latent_size, model.codes[0].n_patches,
                      model.codes, config_json=model.config.to_json())


def cmd_train_objectnet(args):
    from .formats import Checkpoint, load_checkpoint, save_checkpoint, write_history_csv
    from .training import train_objectnet

    cfg = load_config(args.config)
    write_manifest(args, cfg, [args.decoder] + [x for pair in args.object for x in pair],
                   [args.out, args.history])
    dec = load_checkpoint(args.decoder)
    res = train_objectnet(dec.net, _load_objects(args.object), cfg)
    save_checkpoint(args.out, Checkpoint(res.net, res.latent_size, res.n_patches,
                                         object_latents=res.latents, template=res.template,
                                         template_object=res.template_object,
                                         radius_scale=res.radius_scale,
                                         config_json=cfg.to_json()))
    if args.history:
        write_history_csv(args.history, res.history)


def cmd_fit(args):
    from .formats import load_checkpoint, save_codes
    from .geometry import load_surface_samples, read_sdf_samples
    from .training import fit_shape

    cfg = load_config(args.config)
    write_manifest(args, cfg, [args.decoder, args.samples, args.surface], [args.out])
    dec = load_checkpoint(args.decoder)
    codes = fit_shape(dec.net, read_sdf_samples(args.samples),
                      load_surface_samples(args.surface), cfg)
    save_codes(args.out, [codes])


def cmd_reconstruct(args):
    from .geometry import save_mesh
    from .reconstruct import reconstruct_mesh

    write_manifest(args, None, [args.decoder, args.codes or ""], [args.out])
    ckpt, codes = _decoder_and_codes(args)
    mesh = reconstruct_mesh(codes, ckpt.net, args.resolution, scale_sdf=_scale_sdf(ckpt))
    save_mesh(mesh, args.out)
    if mesh.is_empty:
        log.warning("reconstruction is empty")


def cmd_deform(args):
    from .geometry import save_mesh
    from .reconstruct import DeformSpec, deform

    write_manifest(args, None, [args.decoder, args.codes or "", args.spec], [args.out])
    ckpt, codes = _decoder_and_codes(args)
    with open(args.spec) as fh:
        spec = DeformSpec.from_json(fh.read())
    save_mesh(deform(codes, spec, ckpt.net, args.resolution, scale_sdf=_scale_sdf(ckpt)),
              args.out)


def cmd_complete(args):
    import numpy as np

    from .geometry import (CameraView, load_mesh, load_surface_samples, render_partial,
                           save_mesh)
    from .reconstruct import complete_partial

    cfg = load_config(args.config)
    write_manifest(args, cfg, [args.decoder, args.objectnet, args.mesh or args.partial],
                   [args.out])
    if (args.mesh is None) == (args.partial is None):
        raise ValueError("pass exactly one of --mesh and --partial")
    dec, _, res = _objectnet(args)
    if args.mesh:
        cam = CameraView(args.camera_origin, args.look_at, tuple(args.image_size))
        partial, origin = render_partial(load_mesh(args.mesh), cam, seed=args.seed)
    else:
        partial, origin = load_surface_samples(args.partial), np.asarray(args.camera_origin)
    out = complete_partial(res, dec.net, partial, origin, res.latents, cfg, seed=args.seed,
                           resolution=args.resolution)
    save_mesh(out.mesh, args.out)


def cmd_interpolate(args):
    from .geometry import save_mesh
    from .reconstruct import interpolate

    write_manifest(args, None, [args.decoder, args.objectnet], [args.out])
    dec, on, res = _objectnet(args)
    n = len(res.latents)
    for k in (args.a, args.b):
        if not 0 <= k < n:
            raise ValueError(f"object id {k} out of range 0..{n - 1}")
    mesh = interpolate(res, dec.net, res.latents[args.a], res.latents[args.b], args.t,
                       args.resolution, scale_sdf=_scale_sdf(dec))
    save_mesh(mesh, args.out)


def cmd_sample_prior(args):
    from .formats import save_prior
    from .geometry import save_mesh
    from .reconstruct import fit_prior, reconstruct_mesh, sample_prior

    write_manifest(args, None, [args.decoder, args.objectnet], [args.out, args.prior_out])
    dec, _, res = _objectnet(args)
    prior = fit_prior(res.latents)
    if args.prior_out:
        save_prior(args.prior_out, prior)
    codes = res.decode(sample_prior(prior, args.seed))
    save_mesh(reconstruct_mesh(codes, dec.net, args.resolution, scale_sdf=_scale_sdf(dec)),
              args.out)


def cmd_eval(args):
    from .geometry import load_mesh
    from .metrics import evaluate

    out = args.out or "eval-report"
    write_manifest(args, None, [args.gt, args.pred], [out])
    report = evaluate(load_mesh(args.gt), load_mesh(args.pred), seed=args.seed)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    else:
        print(report.to_json())


def cmd_selftest(args):
    from .selftest import run_selftest

    if args.out:
        write_manifest(args, None, [], [args.out])
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}  {r.detail}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([r.__dict__ for r in results], fh, indent=2)
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"selftest: {len(failed)} contract(s) failed: {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "train-objectnet": cmd_train_objectnet,
    "fit": cmd_fit,
    "reconstruct": cmd_reconstruct,
    "complete": cmd_complete,
    "deform": cmd_deform,
    "interpolate": cmd_interpolate,
    "sample-prior": cmd_sample_prior,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}


def run(argv=None):
    """Parse ``argv`` and execute one command; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads(args)
        status = COMMANDS[args.command](args)
        return EXIT_OK if status is None else status
    except ConfigError as exc:
        print(f"patchsdf {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"patchsdf {args.command}: missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:                       # classify package errors below
        from .errors import FileFormatError, MeshFormatError, PatchSDFError

        if isinstance(exc, (FileFormatError, MeshFormatError)):
            print(f"patchsdf {args.command}: malformed input: {exc}", file=sys.stderr)
            return EXIT_INPUT
        if isinstance(exc, (PatchSDFError, ValueError)):
            print(f"patchsdf {args.command}: contract violated: {exc}", file=sys.stderr)
            return EXIT_CONTRACT
        log.exception("unexpected failure")
        return EXIT_UNEXPECTED


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
