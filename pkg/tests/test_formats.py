import numpy as np
import pytest

from patchsdf.errors import FileFormatError
from patchsdf.formats import (Checkpoint, load_checkpoint, load_codes, load_prior,
                              read_history_csv, save_checkpoint, save_codes, save_prior,
                              write_history_csv)
from patchsdf.networks import init_decoder, init_objectnet
from patchsdf.patchrep import ShapeCodes
from patchsdf.reconstruct import fit_prior


def codes(seed, P=3, nz=4):
    rng = np.random.default_rng(seed)
    return ShapeCodes(rng.normal(size=(P, nz)), rng.normal(size=(P, 3)),
                      rng.uniform(0.2, 0.8, P), rng.normal(size=(P, 3)))


def as_f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def test_decoder_checkpoint_round_trip(tmp_path):
    w = init_decoder(4, seed=1, hidden=10, depth=4, skip=2)
    ck = Checkpoint(w, 4, 3, codes=[codes(0), codes(1)], config_json='{"a": 1}')
    save_checkpoint(tmp_path / "m.pnwt", ck)
    back = load_checkpoint(tmp_path / "m.pnwt")
    assert back.net.kind == "decoder" and back.net.skip == 2 and back.net.out_tanh
    assert back.net.widths == w.widths
    for l in range(w.n_layers):
        np.testing.assert_array_equal(back.net.V[l], as_f32(w.V[l]))
        np.testing.assert_array_equal(back.net.b[l], as_f32(w.b[l]))
    for a, b in zip(ck.codes, back.codes):
        np.testing.assert_array_equal(b.latents, as_f32(a.latents))
        np.testing.assert_array_equal(b.extrinsic_array(), as_f32(a.extrinsic_array()))
    assert back.config_json == '{"a": 1}'
    save_checkpoint(tmp_path / "again.pnwt", back)
    assert (tmp_path / "again.pnwt").read_bytes() == (tmp_path / "m.pnwt").read_bytes()


def test_objectnet_checkpoint_round_trip(tmp_path):
    tmpl = np.random.default_rng(0).normal(size=(8, 7))
    net = init_objectnet(8, 6, seed=0, hidden=12, object_latent_size=5, template=tmpl)
    lat = np.random.default_rng(1).normal(size=(3, 5))
    save_checkpoint(tmp_path / "o.pnwt", Checkpoint(net, 6, 8, object_latents=lat, template=tmpl,
                                                    template_object=2, radius_scale=1.3))
    back = load_checkpoint(tmp_path / "o.pnwt")
    assert back.net.kind == "objectnet" and back.net.skip is None and not back.net.out_tanh
    np.testing.assert_array_equal(back.object_latents, as_f32(lat))
    np.testing.assert_array_equal(back.template, as_f32(tmpl))
    assert back.template_object == 2 and back.radius_scale == pytest.approx(1.3, rel=1e-7)


def test_corrupted_checkpoints(tmp_path):
    w = init_decoder(4, seed=1, hidden=10, depth=4, skip=2)
    save_checkpoint(tmp_path / "m.pnwt", Checkpoint(w, 4, 3, codes=[codes(0)]))
    good = (tmp_path / "m.pnwt").read_bytes()
    bad = tmp_path / "bad.pnwt"
    for blob in (b"", b"XXXX" + good[4:], good[:60], good[:-5], good + b"JUNK\x00"):
        bad.write_bytes(blob)
        with pytest.raises(FileFormatError):
            load_checkpoint(bad)


def test_codes_file(tmp_path):
    items = [codes(3), codes(4, P=5, nz=2)]
    save_codes(tmp_path / "c.pnsc", items)
    back = load_codes(tmp_path / "c.pnsc")
    assert [c.n_patches for c in back] == [3, 5]
    np.testing.assert_array_equal(back[1].latents, as_f32(items[1].latents))
    raw = (tmp_path / "c.pnsc").read_bytes()
    (tmp_path / "t.pnsc").write_bytes(raw[:-4])
    with pytest.raises(FileFormatError):
        load_codes(tmp_path / "t.pnsc")
    (tmp_path / "m.pnsc").write_bytes(b"PNWT" + raw[4:])
    with pytest.raises(FileFormatError):
        load_codes(tmp_path / "m.pnsc")


def test_prior_file_is_exact(tmp_path):
    prior = fit_prior(np.random.default_rng(0).normal(size=(10, 4)))
    save_prior(tmp_path / "p.pngp", prior)
    back = load_prior(tmp_path / "p.pngp")
    np.testing.assert_array_equal(back.mean, prior.mean)
    np.testing.assert_array_equal(back.covariance, prior.covariance)
    assert back.jitter == prior.jitter
    raw = (tmp_path / "p.pngp").read_bytes()
    (tmp_path / "t.pngp").write_bytes(raw[:-8])
    with pytest.raises(FileFormatError):
        load_prior(tmp_path / "t.pngp")


def test_history_csv(tmp_path):
    rows = [{"epoch": 0, "total": 1.5}, {"epoch": 1, "total": 0.25, "phase": "II"}]
    write_history_csv(tmp_path / "h.csv", rows)
    assert read_history_csv(tmp_path / "h.csv") == rows
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,total,phase"
