"""Weight-normalized MLPs with hand-written reverse mode, plus Adam.

Two fixed architectures are built from the same :class:`MLP` container:

* the patch decoder: ``[z, x_local] -> 8 x (128, ReLU) -> 1 -> tanh`` with the
  network input concatenated onto the input of the fifth layer;
* ObjectNet: ``256 -> 3 x (1024, ReLU) -> N_P * (N_z + 7)`` (linear output).

Every linear map is parametrized as ``W = g * V / ||V||_row`` and trained in
float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError

DECODER_HIDDEN = 128
DECODER_DEPTH = 8           # hidden layers; one more linear map produces the scalar
DECODER_SKIP = 4            # 0-based index of the layer receiving [h, z, x]
OBJECT_LATENT_SIZE = 256
OBJECTNET_HIDDEN = 1024
OBJECTNET_LAST_SCALE = 1e-4
EXTRINSIC_SIZE = 7


class MLP:
    """Fully connected weight-normalized network.

    ``skip`` is the index of the layer whose input is ``concat(h, x)`` where
    ``x`` is the network input; ``None`` disables the skip connection.
    """

    def __init__(self, V, g, b, skip=None, out_tanh=False, kind="mlp"):
        self.V = [np.asarray(v, dtype=np.float64) for v in V]
        self.g = [np.asarray(x, dtype=np.float64) for x in g]
        self.b = [np.asarray(x, dtype=np.float64) for x in b]
        self.skip = skip
        self.out_tanh = out_tanh
        self.kind = kind
        self._check()

    def _check(self):
        if not (len(self.V) == len(self.g) == len(self.b)):
            raise DimensionMismatchError("V, g and b must have one entry per layer")
        prev = self.V[0].shape[1]
        in_dim = prev
        for l, (V, g, b) in enumerate(zip(self.V, self.g, self.b)):
            expect = prev + (in_dim if l == self.skip and l > 0 else 0)
            if V.shape[1] != expect:
                raise DimensionMismatchError(
                    f"layer {l}: input width {V.shape[1]}, expected {expect}")
            if g.shape != (V.shape[0],) or b.shape != (V.shape[0],):
                raise DimensionMismatchError(f"layer {l}: gain/bias shape mismatch")
            prev = V.shape[0]

    @property
    def n_layers(self):
        return len(self.V)

    @property
    def in_dim(self):
        return self.V[0].shape[1]

    @property
    def out_dim(self):
        return self.V[-1].shape[0]

    @property
    def widths(self):
        return [self.in_dim] + [V.shape[0] for V in self.V]

    def params(self):
        """Name -> array mapping. Arrays are shared, so in-place updates stick."""
        out = {}
        for l in range(self.n_layers):
            out[f"V{l}"] = self.V[l]
            out[f"g{l}"] = self.g[l]
            out[f"b{l}"] = self.b[l]
        return out

    def copy(self):
        return MLP([v.copy() for v in self.V], [x.copy() for x in self.g],
                   [x.copy() for x in self.b], skip=self.skip,
                   out_tanh=self.out_tanh, kind=self.kind)

    def checksum(self):
        h = hashlib.sha256()
        for arr in self.params().values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def effective_weights(self):
        return [(g / np.linalg.norm(V, axis=1))[:, None] * V
                for V, g in zip(self.V, self.g)]

    def as_dtype(self, dtype):
        """Evaluation-only copy with effective weights folded in ``dtype``."""
        return _FoldedMLP(self, dtype)


class _FoldedMLP:
    """Forward-only view used for dense grid evaluation."""

    def __init__(self, mlp, dtype):
        self.W = [W.astype(dtype) for W in mlp.effective_weights()]
        self.b = [b.astype(dtype) for b in mlp.b]
        self.skip = mlp.skip
        self.out_tanh = mlp.out_tanh
        self.in_dim = mlp.in_dim
        self.dtype = dtype

    def __call__(self, x):
        x = np.asarray(x, dtype=self.dtype)
        h = x
        last = len(self.W) - 1
        for l, (W, b) in enumerate(zip(self.W, self.b)):
            if l == self.skip and l > 0:
                h = np.concatenate([h, x], axis=1)
            h = h @ W.T + b
            if l < last:
                np.maximum(h, 0, out=h)
        return np.tanh(h) if self.out_tanh else h


@dataclass
class MLPCache:
    inputs: np.ndarray
    layer_in: list
    preact: list
    weights: list
    norms: list
    output: np.ndarray


def mlp_forward(w: MLP, inputs):
    """Batched forward pass. ``inputs`` is (B, in_dim); returns (B, out_dim), cache."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.in_dim:
        raise DimensionMismatchError(f"input shape {x.shape}, expected (B, {w.in_dim})")
    layer_in, preact, weights, norms = [], [], [], []
    h = x
    last = w.n_layers - 1
    for l in range(w.n_layers):
        if l == w.skip and l > 0:
            h = np.concatenate([h, x], axis=1)
        norm = np.sqrt(np.einsum("ij,ij->i", w.V[l], w.V[l]))
        W = (w.g[l] / norm)[:, None] * w.V[l]
        a = h @ W.T + w.b[l]
        layer_in.append(h)
        preact.append(a)
        weights.append(W)
        norms.append(norm)
        h = np.maximum(a, 0.0) if l < last else a
    out = np.tanh(h) if w.out_tanh else h
    return out, MLPCache(x, layer_in, preact, weights, norms, out)


def mlp_backward(w: MLP, cache: MLPCache, upstream):
    """Reverse pass for ``sum(upstream * output)``.

    Returns ``(grads, d_inputs)``; ``grads`` uses the keys of :meth:`MLP.params`.
    """
    d = np.asarray(upstream, dtype=np.float64)
    if d.shape != cache.output.shape:
        raise DimensionMismatchError(
            f"upstream shape {d.shape} != output shape {cache.output.shape}")
    if w.out_tanh:
        d = d * (1.0 - cache.output ** 2)
    grads = {}
    d_skip = None
    for l in reversed(range(w.n_layers)):
        h = cache.layer_in[l]
        dW = d.T @ h
        vhat = w.V[l] / cache.norms[l][:, None]
        dg = np.einsum("ij,ij->i", dW, vhat)
        grads[f"V{l}"] = (w.g[l] / cache.norms[l])[:, None] * (dW - dg[:, None] * vhat)
        grads[f"g{l}"] = dg
        grads[f"b{l}"] = d.sum(axis=0)
        dh = d @ cache.weights[l]
        if l == w.skip and l > 0:
            n_in = cache.inputs.shape[1]
            d_skip = dh[:, -n_in:]
            dh = dh[:, :-n_in]
        if l > 0:
            d = dh * (cache.preact[l - 1] > 0)
        else:
            d_in = dh
    if d_skip is not None:
        d_in = d_in + d_skip
    return {k: grads[k] for k in w.params()}, d_in


def zero_grads(w: MLP):
    return {k: np.zeros_like(v) for k, v in w.params().items()}


# ---------------------------------------------------------------------------
# initialization

def _init_layers(widths, skip, rng):
    V, g, b = [], [], []
    in_dim = widths[0]
    for l in range(len(widths) - 1):
        fan_in = widths[l] + (in_dim if l == skip and l > 0 else 0)
        bound = 1.0 / np.sqrt(fan_in)
        v = rng.uniform(-bound, bound, size=(widths[l + 1], fan_in))
        V.append(v)
        g.append(np.linalg.norm(v, axis=1))
        b.append(np.zeros(widths[l + 1]))
    return V, g, b


def init_decoder(latent_size=128, seed=0, hidden=DECODER_HIDDEN, depth=DECODER_DEPTH,
                 skip=DECODER_SKIP):
    """Patch decoder: ``depth`` hidden layers of width ``hidden`` plus a scalar head."""
    rng = np.random.default_rng(seed)
    widths = [latent_size + 3] + [hidden] * depth + [1]
    V, g, b = _init_layers(widths, skip, rng)
    return MLP(V, g, b, skip=skip, out_tanh=True, kind="decoder")


def objectnet_output_size(n_patches, latent_size):
    return n_patches * (latent_size + EXTRINSIC_SIZE)


def init_objectnet(n_patches=30, latent_size=128, seed=0, hidden=OBJECTNET_HIDDEN,
                   object_latent_size=OBJECT_LATENT_SIZE, template=None):
    """ObjectNet with a near-zero last layer.

    Hidden biases get the usual fan-in uniform draw so that an all-zero object
    latent still produces non-zero ReLU activations. ``template`` (N_P, 7) in
    (c, r, phi) order fills the extrinsic slots of the output bias.
    """
    rng = np.random.default_rng(seed)
    out = objectnet_output_size(n_patches, latent_size)
    widths = [object_latent_size, hidden, hidden, hidden, out]
    V, g, b = _init_layers(widths, None, rng)
    for l in range(len(b) - 1):
        bound = 1.0 / np.sqrt(widths[l])
        b[l] = rng.uniform(-bound, bound, size=widths[l + 1])
    V[-1] *= OBJECTNET_LAST_SCALE
    g[-1] = np.linalg.norm(V[-1], axis=1)
    net = MLP(V, g, b, skip=None, out_tanh=False, kind="objectnet")
    if template is not None:
        set_objectnet_template(net, template, n_patches, latent_size)
    return net


def set_objectnet_template(net, template, n_patches, latent_size):
    block = np.zeros((n_patches, latent_size + EXTRINSIC_SIZE))
    block[:, latent_size:] = np.asarray(template, dtype=np.float64).reshape(n_patches, 7)
    net.b[-1][:] = block.ravel()


def init_weights(kind, seed, **kw):
    if kind == "decoder":
        return init_decoder(seed=seed, **kw)
    if kind == "objectnet":
        return init_objectnet(seed=seed, **kw)
    raise ValueError(f"unknown network kind {kind!r}")


# ---------------------------------------------------------------------------
# single-purpose wrappers

def _decoder_inputs(z, x_local):
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x_local, dtype=np.float64)
    single = z.ndim == 1 and x.ndim == 1
    z2 = np.atleast_2d(z)
    x2 = np.atleast_2d(x)
    if x2.shape[1] != 3:
        raise DimensionMismatchError(f"query points must be 3-vectors, got {x2.shape}")
    if z2.shape[0] == 1 and x2.shape[0] > 1:
        z2 = np.broadcast_to(z2, (x2.shape[0], z2.shape[1]))
    if z2.shape[0] != x2.shape[0]:
        raise DimensionMismatchError("latent and point batch sizes differ")
    return np.concatenate([z2, x2], axis=1), single


def decoder_forward(w: MLP, z, x_local):
    """SDF prediction for latent(s) ``z`` at canonical point(s) ``x_local``."""
    inp, single = _decoder_inputs(z, x_local)
    out, _ = mlp_forward(w, inp)
    return float(out[0, 0]) if single else out[:, 0]


def decoder_backward(w: MLP, z, x_local, upstream):
    """Gradients of ``upstream * f`` w.r.t. weights, ``z`` and ``x_local``."""
    inp, single = _decoder_inputs(z, x_local)
    out, cache = mlp_forward(w, inp)
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (inp.shape[0],))
    grads, d_in = mlp_backward(w, cache, up[:, None].copy())
    nz = inp.shape[1] - 3
    dz, dx = d_in[:, :nz], d_in[:, nz:]
    if single:
        return grads, dz[0], dx[0]
    return grads, dz, dx


def objectnet_forward_backward(w: MLP, obj_latent, upstream=None):
    """Forward ObjectNet and, if ``upstream`` is given, pull it back.

    Returns ``(output, grad_w, grad_latent)``; gradients are ``None`` when no
    upstream is supplied.
    """
    lat = np.asarray(obj_latent, dtype=np.float64)
    single = lat.ndim == 1
    out, cache = mlp_forward(w, np.atleast_2d(lat))
    if upstream is None:
        return (out[0] if single else out), None, None
    up = np.asarray(upstream, dtype=np.float64).reshape(out.shape)
    grads, d_lat = mlp_backward(w, cache, up)
    if single:
        return out[0], grads, d_lat[0]
    return out, grads, d_lat


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Blocks missing from ``grads`` are skipped entirely (no moment decay).
    """
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise NonFiniteError(f"gradient block {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        gr = grads.get(name)
        if gr is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape or gr.shape != p.shape:
            raise DimensionMismatchError(f"Adam block {name!r}: shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * gr * gr
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update
    return params, state
