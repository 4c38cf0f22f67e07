import json
import os
import subprocess
import sys

import numpy as np
import pytest

from patchsdf import cli
from patchsdf.config import CompletionConfig, ObjectNetConfig, TrainConfig
from patchsdf.formats import (Checkpoint, load_checkpoint, load_codes, read_history_csv,
                              save_checkpoint, save_codes)
from patchsdf.geometry import AnalyticShape, load_mesh, read_sdf_samples, save_mesh
from patchsdf.networks import init_decoder
from patchsdf.patchrep import ShapeCodes
from patchsdf.reconstruct import DeformSpec


@pytest.fixture(autouse=True)
def keep_thread_env():
    saved = {k: os.environ.get(k) for k in cli._THREAD_VARS}
    yield
    for k, v in saved.items():
        if v is None:
            os.environ.pop(k, None)
        else:
            os.environ[k] = v


def test_usage_errors():
    assert cli.run([]) == cli.EXIT_USAGE
    assert cli.run(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.run(["eval", "--gt", "a.obj", "--pred", "b.obj", "--bogus"]) == cli.EXIT_USAGE
    assert cli.run(["--version"]) == 0


def test_distinct_failure_codes(tmp_path):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text("{not json")
    args = ["train", "--config", str(bad_cfg), "--object", "a", "b", "--out", str(tmp_path / "m")]
    assert cli.run(args) == cli.EXIT_CONFIG
    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"no_such_field": 1}')
    args[2] = str(unknown)
    assert cli.run(args) == cli.EXIT_CONFIG
    out = str(tmp_path / "r.json")
    assert cli.run(["eval", "--gt", str(tmp_path / "none.obj"), "--pred", "x.obj",
                    "--out", out]) == cli.EXIT_INPUT
    junk = tmp_path / "junk.pnwt"
    junk.write_bytes(b"garbage")
    assert cli.run(["reconstruct", "--decoder", str(junk), "--out",
                    str(tmp_path / "o.obj")]) == cli.EXIT_INPUT
    assert cli.run(["--threads", "0", "selftest"]) == cli.EXIT_CONFIG


def test_threads_and_deterministic_flags(tmp_path):
    gt = tmp_path / "s.obj"
    save_mesh(AnalyticShape("sphere", (0.5,)).mesh(detail=2), gt)
    out = tmp_path / "rep.json"
    assert cli.run(["--threads", "3", "eval", "--gt", str(gt), "--pred", str(gt),
                    "--out", str(out)]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "3"
    assert cli.run(["--threads", "3", "--deterministic", "eval", "--gt", str(gt),
                    "--pred", str(gt), "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "rep.json.manifest.json").read_text())
    assert manifest["deterministic"] and manifest["threads"] == "1"
    rep = json.loads(out.read_text())
    assert rep["iou"] == 100.0 and rep["f_score"] == 100.0


def test_manifest_is_written_before_outputs(tmp_path):
    mesh = tmp_path / "missing.obj"
    out = tmp_path / "s.pnsd"
    assert cli.run(["preprocess", str(mesh), "--out", str(out)]) == cli.EXIT_INPUT
    manifest = json.loads((tmp_path / "s.pnsd.manifest.json").read_text())
    assert manifest["command"] == "preprocess" and not out.exists()


def tiny_config():
    return TrainConfig(n_patches=4, latent_size=6, epochs=2, batch_size=2, samples_per_object=200,
                       surface_samples=300, fit_epochs=2,
                       objectnet=ObjectNetConfig(phase_epochs=(1, 1, 1), batch_size=2,
                                                 latent_size=3, hidden=8),
                       completion=CompletionConfig(iterations=3, refine_iterations=1,
                                                   samples_per_iteration=200))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.json"
    tiny_config().save(cfg)
    objs = []
    for name, shape in (("ball", AnalyticShape("sphere", (0.6,))),
                        ("brick", AnalyticShape("box", (0.5, 0.3, 0.3)))):
        save_mesh(shape.mesh(detail=3) if name == "ball" else shape.mesh(), d / f"{name}.obj")
        assert cli.run(["preprocess", str(d / f"{name}.obj"), "--out", str(d / f"{name}.pnsd"),
                        "--count", "2000", "--truncation", "0.1", "--surface-count", "500"]) == 0
        objs += ["--object", str(d / f"{name}.pnsd"), str(d / f"{name}.surface.npz")]
    assert cli.run(["--deterministic", "train", "--config", str(cfg), *objs,
                    "--out", str(d / "model.pnwt"), "--history", str(d / "hist.csv")]) == 0
    return d, cfg, objs


def test_preprocess_header(pipeline):
    d, _, _ = pipeline
    s = read_sdf_samples(d / "ball.pnsd")
    assert len(s) == 2000 and s.truncation == pytest.approx(0.1)
    assert np.all(np.abs(s.sdf) <= 0.1 + 1e-7)


def test_train_outputs(pipeline):
    d, _, _ = pipeline
    ck = load_checkpoint(d / "model.pnwt")
    assert ck.net.kind == "decoder" and len(ck.codes) == 2 and ck.n_patches == 4
    assert [r["epoch"] for r in read_history_csv(d / "hist.csv")] == [0, 1]
    manifest = json.loads((d / "model.pnwt.manifest.json").read_text())
    assert manifest["config_hash"] and manifest["outputs"][0].endswith("model.pnwt")


def test_reconstruct_and_identity_deform(pipeline):
    d, _, _ = pipeline
    base = ["--decoder", str(d / "model.pnwt"), "--object-id", "1", "--resolution", "24"]
    assert cli.run(["reconstruct", *base, "--out", str(d / "r.obj")]) == 0
    (d / "id.json").write_text(DeformSpec.identity(4).to_json())
    assert cli.run(["deform", *base, "--spec", str(d / "id.json"),
                    "--out", str(d / "d.obj")]) == 0
    assert (d / "r.obj").read_bytes() == (d / "d.obj").read_bytes()
    assert cli.run(["reconstruct", *base[:2], "--object-id", "7",
                    "--out", str(d / "x.obj")]) == cli.EXIT_CONTRACT


def test_identity_deform_matches_nonempty_reconstruction(tmp_path):
    w = init_decoder(4, seed=0, hidden=12, depth=4, skip=2)
    w.b[-1][:] = -0.2
    rng = np.random.default_rng(0)
    codes = ShapeCodes(rng.normal(size=(3, 4)), rng.uniform(-0.3, 0.3, (3, 3)),
                       rng.uniform(0.3, 0.6, 3), rng.uniform(-2, 2, (3, 3)))
    save_checkpoint(tmp_path / "w.pnwt", Checkpoint(w, 4, 3))
    save_codes(tmp_path / "c.pnsc", [codes])
    (tmp_path / "id.json").write_text(DeformSpec.identity(3).to_json())
    base = ["--decoder", str(tmp_path / "w.pnwt"), "--codes", str(tmp_path / "c.pnsc"),
            "--resolution", "32"]
    assert cli.run(["reconstruct", *base, "--out", str(tmp_path / "r.obj")]) == 0
    assert cli.run(["deform", *base, "--spec", str(tmp_path / "id.json"),
                    "--out", str(tmp_path / "d.obj")]) == 0
    assert load_mesh(tmp_path / "r.obj").n_vertices > 0
    assert (tmp_path / "r.obj").read_bytes() == (tmp_path / "d.obj").read_bytes()


def test_training_is_bitwise_reproducible(pipeline):
    d, cfg, objs = pipeline
    assert cli.run(["--deterministic", "train", "--config", str(cfg), *objs,
                    "--out", str(d / "again.pnwt")]) == 0
    assert (d / "again.pnwt").read_bytes() == (d / "model.pnwt").read_bytes()


def test_fit_command(pipeline):
    d, cfg, _ = pipeline
    assert cli.run(["fit", "--config", str(cfg), "--decoder", str(d / "model.pnwt"),
                    "--samples", str(d / "ball.pnsd"), "--surface", str(d / "ball.surface.npz"),
                    "--out", str(d / "ball.pnsc")]) == 0
    codes = load_codes(d / "ball.pnsc")
    assert len(codes) == 1 and codes[0].n_patches == 4


def test_objectnet_commands(pipeline):
    d, cfg, objs = pipeline
    dec = ["--decoder", str(d / "model.pnwt")]
    assert cli.run(["train-objectnet", "--config", str(cfg), *objs, *dec,
                    "--out", str(d / "on.pnwt"), "--history", str(d / "on.csv")]) == 0
    on = ["--objectnet", str(d / "on.pnwt")]
    assert [r["phase"] for r in read_history_csv(d / "on.csv")] == ["I", "II", "III"]
    assert cli.run(["interpolate", *dec, *on, "--a", "0", "--b", "1", "--t", "0.5",
                    "--resolution", "16", "--out", str(d / "i.obj")]) == 0
    assert cli.run(["interpolate", *dec, *on, "--a", "0", "--b", "5", "--t", "0.5",
                    "--out", str(d / "bad.obj")]) == cli.EXIT_CONTRACT
    assert cli.run(["sample-prior", *dec, *on, "--seed", "2", "--resolution", "16",
                    "--prior-out", str(d / "p.pngp"), "--out", str(d / "s.obj")]) == 0
    assert (d / "p.pngp").stat().st_size > 0
    assert cli.run(["complete", "--config", str(cfg), *dec, *on, "--mesh", str(d / "ball.obj"),
                    "--camera-origin", "0", "0", "2.5", "--image-size", "12", "12",
                    "--resolution", "16", "--out", str(d / "c.obj")]) == 0
    load_mesh(d / "c.obj")
    assert cli.run(["complete", "--config", str(cfg), *dec, *on, "--camera-origin", "0", "0",
                    "2", "--out", str(d / "c2.obj")]) == cli.EXIT_CONTRACT


def test_console_script_selftest(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "patchsdf.cli", "selftest",
                           "--out", str(tmp_path / "st.json")],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    checks = json.loads((tmp_path / "st.json").read_text())
    assert checks and all(c["ok"] for c in checks)
    assert all(line.startswith("PASS") for line in proc.stdout.strip().splitlines())
