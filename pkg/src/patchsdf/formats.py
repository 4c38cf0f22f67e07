"""Binary checkpoint (PNWT), latent prior (PNGP) and CSV history files.

PNWT layout (little endian)::

    "PNWT" u32 version=1
    u32 kind (0 decoder, 1 objectnet)  u32 N_z  u32 N_P  i32 skip (-1 none)
    u32 out_tanh  u32 n_widths  u32 widths[n_widths]
    f32 tensors V0 g0 b0 V1 g1 b1 ...
    zero or more sections: 4-byte tag, u64 payload length, payload

Sections: ``CODE`` per-object patch codes (extrinsics in (r, c, phi) order),
``OLAT`` ObjectNet training latents and template, ``CONF`` UTF-8 JSON config.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError
from .networks import MLP
from .patchrep import ShapeCodes

_KINDS = {"decoder": 0, "objectnet": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}
_HEAD = struct.Struct("<4sI")
_DESC = struct.Struct("<IIIiII")
_SECTION = struct.Struct("<4sQ")


@dataclass
class Checkpoint:
    net: MLP
    latent_size: int
    n_patches: int
    codes: list = field(default_factory=list)
    object_latents: np.ndarray = None
    template: np.ndarray = None
    template_object: int = -1
    radius_scale: float = 1.0
    config_json: str = None


def _layer_inputs(widths, skip):
    return [widths[l] + (widths[0] if l == skip and l > 0 else 0) for l in range(len(widths) - 1)]


def _pack_codes(codes):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(codes)))
    for c in codes:
        buf.write(struct.pack("<II", c.n_patches, c.latent_size))
        buf.write(c.latents.astype("<f4").tobytes())
        buf.write(c.extrinsic_array().astype("<f4").tobytes())
    return buf.getvalue()


def _unpack_codes(payload):
    view = memoryview(payload)
    (n,), off = struct.unpack_from("<I", view), 4
    out = []
    for _ in range(n):
        P, nz = struct.unpack_from("<II", view, off)
        off += 8
        lat = np.frombuffer(view, "<f4", P * nz, off).reshape(P, nz)
        off += 4 * P * nz
        ext = np.frombuffer(view, "<f4", P * 7, off).reshape(P, 7)
        off += 4 * P * 7
        out.append(ShapeCodes.from_arrays(lat.astype(np.float64), ext.astype(np.float64)))
    if off != len(payload):
        raise FileFormatError("CODE section has trailing bytes")
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    net = ckpt.net
    skip = -1 if net.skip is None else int(net.skip)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(b"PNWT", 1))
        fh.write(_DESC.pack(_KINDS[net.kind], ckpt.latent_size, ckpt.n_patches, skip,
                            int(net.out_tanh), len(net.widths)))
        fh.write(np.asarray(net.widths, dtype="<u4").tobytes())
        for l in range(net.n_layers):
            for arr in (net.V[l], net.g[l], net.b[l]):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        sections = []
        if ckpt.codes:
            sections.append((b"CODE", _pack_codes(ckpt.codes)))
        if ckpt.object_latents is not None:
            lat = np.asarray(ckpt.object_latents, dtype="<f4")
            tmpl = np.asarray(ckpt.template, dtype="<f4")
            payload = (struct.pack("<IIiIf", lat.shape[0], lat.shape[1], ckpt.template_object,
                                   tmpl.shape[0], ckpt.radius_scale)
                       + lat.tobytes() + tmpl.tobytes())
            sections.append((b"OLAT", payload))
        if ckpt.config_json is not None:
            sections.append((b"CONF", ckpt.config_json.encode("utf-8")))
        for tag, payload in sections:
            fh.write(_SECTION.pack(tag, len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size + _DESC.size:
        raise FileFormatError("truncated PNWT header")
    magic, version = _HEAD.unpack_from(data)
    if magic != b"PNWT" or version != 1:
        raise FileFormatError(f"not a PNWT v1 file: {magic!r} v{version}")
    off = _HEAD.size
    kind, nz, npatch, skip, tanh, nw = _DESC.unpack_from(data, off)
    off += _DESC.size
    if kind not in _KIND_NAMES:
        raise FileFormatError(f"unknown network kind {kind}")
    widths = np.frombuffer(data, "<u4", nw, off).astype(int).tolist()
    off += 4 * nw
    skip = None if skip < 0 else skip
    V, g, b = [], [], []
    try:
        for l, fan_in in enumerate(_layer_inputs(widths, skip)):
            out = widths[l + 1]
            V.append(np.frombuffer(data, "<f4", out * fan_in, off).reshape(out, fan_in)
                     .astype(np.float64))
            off += 4 * out * fan_in
            g.append(np.frombuffer(data, "<f4", out, off).astype(np.float64))
            off += 4 * out
            b.append(np.frombuffer(data, "<f4", out, off).astype(np.float64))
            off += 4 * out
    except ValueError as exc:
        raise FileFormatError("PNWT tensor block is truncated") from exc
    net = MLP(V, g, b, skip=skip, out_tanh=bool(tanh), kind=_KIND_NAMES[kind])
    ckpt = Checkpoint(net, nz, npatch)
    while off < len(data):
        if off + _SECTION.size > len(data):
            raise FileFormatError("truncated PNWT section header")
        tag, length = _SECTION.unpack_from(data, off)
        off += _SECTION.size
        payload = data[off:off + length]
        if len(payload) != length:
            raise FileFormatError(f"truncated PNWT section {tag!r}")
        off += length
        if tag == b"CODE":
            ckpt.codes = _unpack_codes(payload)
        elif tag == b"OLAT":
            n, dim, tobj, tp, scale = struct.unpack_from("<IIiIf", payload)
            o = struct.calcsize("<IIiIf")
            ckpt.object_latents = np.frombuffer(payload, "<f4", n * dim, o).reshape(n, dim) \
                .astype(np.float64)
            o += 4 * n * dim
            ckpt.template = np.frombuffer(payload, "<f4", tp * 7, o).reshape(tp, 7) \
                .astype(np.float64)
            ckpt.template_object = tobj
            ckpt.radius_scale = float(scale)
        elif tag == b"CONF":
            ckpt.config_json = payload.decode("utf-8")
        else:
            raise FileFormatError(f"unknown PNWT section {tag!r}")
    return ckpt


def save_codes(path, codes):
    """Stand-alone ShapeCodes file: a PNWT-style container with only a CODE section."""
    with open(path, "wb") as fh:
        payload = _pack_codes(codes)
        fh.write(b"PNSC" + struct.pack("<IQ", 1, len(payload)) + payload)


def load_codes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"PNSC":
        raise FileFormatError("not a shape-codes file")
    version, length = struct.unpack_from("<IQ", data, 4)
    if version != 1 or len(data) != 16 + length:
        raise FileFormatError("malformed shape-codes file")
    return _unpack_codes(data[16:])


# ---------------------------------------------------------------------------
# PNGP: "PNGP" u32 version, u64 dim, f64 jitter, f64 mean[dim], f64 cov[dim*dim]

def save_prior(path, prior):
    d = prior.dim
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQd", b"PNGP", 1, d, prior.jitter))
        fh.write(np.asarray(prior.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(prior.covariance, dtype="<f8").tobytes())


def load_prior(path):
    from .reconstruct import GaussianPrior

    with open(path, "rb") as fh:
        data = fh.read()
    head = struct.calcsize("<4sIQd")
    if len(data) < head:
        raise FileFormatError("truncated PNGP header")
    magic, version, d, jitter = struct.unpack_from("<4sIQd", data)
    if magic != b"PNGP" or version != 1:
        raise FileFormatError("not a PNGP v1 file")
    if len(data) != head + 8 * (d + d * d):
        raise FileFormatError("PNGP body has the wrong size")
    mean = np.frombuffer(data, "<f8", d, head).copy()
    cov = np.frombuffer(data, "<f8", d * d, head + 8 * d).reshape(d, d).copy()
    return GaussianPrior(mean, cov, jitter)


# ---------------------------------------------------------------------------
# loss history

def write_history_csv(path, rows):
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        w.writerows(rows)


def read_history_csv(path):
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: _parse(v) for k, v in r.items() if v != ""})
        return rows


def _parse(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
