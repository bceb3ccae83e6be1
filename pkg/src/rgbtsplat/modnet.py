"""Pixel-wise modulation network: shared encoder, thermal head, feature-wise
affine modulation and the two sigmoid decoders.

Every stage is a per-pixel MLP (linear layers with SiLU in between), so the
whole network has no spatial receptive field: permuting pixels permutes
outputs. The thermal head output drives two paths at once: it generates the
(gamma, beta) modulation parameters for the RGB branch and it is decoded
into the thermal image, so its gradient accumulates both.

The modulation generator is zero-initialized with bias (1...1, 0...0): at
initialization gamma == 1 and beta == 0, so the modulated branch is exactly
the unmodulated one and training starts from an identity conditioning.

Forward passes cache every layer input (ModulationTrace); the backward pass
is exact reverse mode over those caches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

from .errors import ShapeMismatch, StaleTrace

Layer = tuple[np.ndarray, np.ndarray]  # (weight (out,in), bias (out,))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class ModulationNet:
    shared: list          # feature_dim -> hidden -> hidden
    thermal_head: list    # hidden -> thermal_hidden
    film: Layer           # thermal_hidden -> 2*hidden, rows [gamma | beta]
    rgb_decoder: list     # hidden -> hidden -> 3
    thermal_decoder: list  # thermal_hidden -> thermal_hidden -> 1

    @property
    def feature_dim(self) -> int:
        return self.shared[0][0].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.shared[-1][0].shape[0]

    @property
    def thermal_dim(self) -> int:
        return self.thermal_head[-1][0].shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.shared[0][0].dtype

    def stages(self):
        return [("shared", self.shared), ("thermal_head", self.thermal_head),
                ("film", [self.film]), ("rgb_decoder", self.rgb_decoder),
                ("thermal_decoder", self.thermal_decoder)]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for stage, layers in self.stages():
            for i, (w, b) in enumerate(layers):
                out.append((f"{stage}.{i}.weight", w))
                out.append((f"{stage}.{i}.bias", b))
        return out

    def astype(self, dtype) -> "ModulationNet":
        conv = lambda layers: [(w.astype(dtype), b.astype(dtype)) for w, b in layers]
        return ModulationNet(shared=conv(self.shared), thermal_head=conv(self.thermal_head),
                             film=(self.film[0].astype(dtype), self.film[1].astype(dtype)),
                             rgb_decoder=conv(self.rgb_decoder),
                             thermal_decoder=conv(self.thermal_decoder))

    def copy(self) -> "ModulationNet":
        return self.astype(self.dtype)

    def validate(self) -> None:
        dims = [w.shape for stage, layers in self.stages() for w, b in layers]
        for stage, layers in self.stages():
            prev = None
            for w, b in layers:
                if w.ndim != 2 or b.shape != (w.shape[0],):
                    raise ShapeMismatch(f"{stage}: bad layer shapes {w.shape}, {b.shape}")
                if prev is not None and w.shape[1] != prev:
                    raise ShapeMismatch(f"{stage}: layer dims do not chain")
                prev = w.shape[0]
                if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                    raise ValueError(f"{stage}: non-finite weights")
        h = self.hidden_dim
        if self.film[0].shape != (2 * h, self.thermal_dim):
            raise ShapeMismatch("film layer must map thermal_hidden -> 2*hidden")
        if self.rgb_decoder[0][0].shape[1] != h:
            raise ShapeMismatch("rgb decoder must consume the hidden width")
        if self.rgb_decoder[-1][0].shape[0] != 3:
            raise ShapeMismatch("rgb decoder must end in 3 channels")
        if self.thermal_decoder[-1][0].shape[0] != 1:
            raise ShapeMismatch("thermal decoder must end in 1 channel")


def _init_layer(rng: np.random.Generator, n_in: int, n_out: int, dtype) -> Layer:
    k = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-k, k, (n_out, n_in)).astype(dtype)
    b = rng.uniform(-k, k, n_out).astype(dtype)
    return w, b


def init_modulation_net(feature_dim: int, hidden: int = 32, thermal_hidden: int = 16,
                        seed: int = 0, dtype=np.float32) -> ModulationNet:
    """Fresh network with identity modulation at initialization."""
    rng = np.random.default_rng(seed)
    shared = [_init_layer(rng, feature_dim, hidden, dtype),
              _init_layer(rng, hidden, hidden, dtype)]
    thermal_head = [_init_layer(rng, hidden, thermal_hidden, dtype)]
    film_w = np.zeros((2 * hidden, thermal_hidden), dtype=dtype)
    film_b = np.concatenate([np.ones(hidden, dtype=dtype), np.zeros(hidden, dtype=dtype)])
    rgb_decoder = [_init_layer(rng, hidden, hidden, dtype),
                   _init_layer(rng, hidden, 3, dtype)]
    thermal_decoder = [_init_layer(rng, thermal_hidden, thermal_hidden, dtype),
                       _init_layer(rng, thermal_hidden, 1, dtype)]
    net = ModulationNet(shared=shared, thermal_head=thermal_head, film=(film_w, film_b),
                        rgb_decoder=rgb_decoder, thermal_decoder=thermal_decoder)
    net.validate()
    return net


# ---------------------------------------------------------------------------
# MLP forward/backward over flattened pixels


def _mlp_forward(layers: list, x: np.ndarray) -> tuple[np.ndarray, list]:
    """x: (P, in). Returns (out, cache); cache[i] = (input, pre-act, sigmoid(pre-act))."""
    cache = []
    a = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if i == last:
            cache.append((a, z, None))
            a = z
        else:
            s = sigmoid(z)
            cache.append((a, z, s))
            a = z * s
    return a, cache


def _mlp_backward(layers: list, cache: list, d_out: np.ndarray) -> tuple[np.ndarray, list]:
    """Returns (d_input, [(dW, db), ...]) matching the layer list."""
    grads: list = [None] * len(layers)
    dz = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_in, z, s = cache[i]
        if i != len(layers) - 1:
            dz = dz * (s * (1.0 + z * (1.0 - s)))
        grads[i] = (dz.T @ a_in, dz.sum(axis=0))
        dz = dz @ w
    return dz, grads


def _flatten(a: np.ndarray) -> tuple[np.ndarray, tuple]:
    if a.ndim == 3:
        h, w, c = a.shape
        return a.reshape(h * w, c), (h, w)
    if a.ndim == 2:
        return a, None
    raise ShapeMismatch(f"expected (H,W,C) or (P,C), got shape {a.shape}")


def _unflatten(a: np.ndarray, hw) -> np.ndarray:
    if hw is None:
        return a
    return a.reshape(hw[0], hw[1], a.shape[-1])


# ---------------------------------------------------------------------------
# individual stage contracts (thin wrappers used directly by tests/tools)


def shared_encode(net: ModulationNet, feature_map: np.ndarray) -> np.ndarray:
    flat, hw = _flatten(feature_map)
    if flat.shape[1] != net.feature_dim:
        raise ShapeMismatch(f"expected {net.feature_dim} channels, got {flat.shape[1]}")
    out, _ = _mlp_forward(net.shared, flat)
    return _unflatten(out, hw)


def thermal_prior(net: ModulationNet, h: np.ndarray) -> np.ndarray:
    flat, hw = _flatten(h)
    if flat.shape[1] != net.hidden_dim:
        raise ShapeMismatch(f"expected {net.hidden_dim} channels, got {flat.shape[1]}")
    out, _ = _mlp_forward(net.thermal_head, flat)
    return _unflatten(out, hw)


def film_params(net: ModulationNet, h_th: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat, hw = _flatten(h_th)
    w, b = net.film
    z = flat @ w.T + b
    h = net.hidden_dim
    return _unflatten(z[:, :h], hw), _unflatten(z[:, h:], hw)


def film_modulate(h: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    if h.shape != gamma.shape or h.shape != beta.shape:
        raise ShapeMismatch("h, gamma, beta must share a shape")
    return gamma * h + beta


def decode_rgb(net: ModulationNet, h_mod: np.ndarray) -> np.ndarray:
    flat, hw = _flatten(h_mod)
    out, _ = _mlp_forward(net.rgb_decoder, flat)
    return _unflatten(sigmoid(out), hw)


def decode_thermal(net: ModulationNet, h_th: np.ndarray) -> np.ndarray:
    flat, hw = _flatten(h_th)
    out, _ = _mlp_forward(net.thermal_decoder, flat)
    return _unflatten(sigmoid(out), hw)


# ---------------------------------------------------------------------------
# full modulation graph


@dataclass
class ModulationTrace:
    """Cached activations of one modulate_forward call."""

    hw: tuple
    shared_cache_base: list
    shared_cache_thermal: list | None  # None when the thermal input is the base map
    thermal_cache: list
    rgb_cache: list
    thermal_dec_cache: list
    h: np.ndarray
    h_th: np.ndarray
    gamma: np.ndarray | None
    beta: np.ndarray | None
    c_implicit: np.ndarray  # sigmoid outputs, needed for the sigmoid adjoint
    c_thermal: np.ndarray
    disable_film: bool
    film_source: str
    feature_dim: int


def modulate_forward(net: ModulationNet, a_f: np.ndarray, a_ft: np.ndarray,
                     disable_film: bool = False, film_source: str = "thermal"
                     ) -> tuple[np.ndarray, np.ndarray, ModulationTrace]:
    """Run the full network over both rasterized feature maps.

    a_f drives the RGB branch; a_ft drives the thermal head (unless
    film_source == 'base', in which case the thermal head reads the shared
    encoding of a_f). Passing the same array object for a_f and a_ft skips
    the second encoder pass.
    """
    flat_f, hw = _flatten(a_f)
    if flat_f.shape[1] != net.feature_dim:
        raise ShapeMismatch(f"expected {net.feature_dim} channels, got {flat_f.shape[1]}")

    h, cache_base = _mlp_forward(net.shared, flat_f)

    same_input = a_ft is a_f or film_source == "base"
    if same_input:
        h_t, cache_th = h, None
    else:
        flat_ft, hw2 = _flatten(a_ft)
        if hw2 != hw or flat_ft.shape[1] != net.feature_dim:
            raise ShapeMismatch("thermal feature map shape mismatch")
        h_t, cache_th = _mlp_forward(net.shared, flat_ft)

    h_th, cache_head = _mlp_forward(net.thermal_head, h_t)

    if disable_film:
        gamma = beta = None
        h_mod = h
    else:
        w, b = net.film
        z = h_th @ w.T + b
        hd = net.hidden_dim
        gamma, beta = z[:, :hd], z[:, hd:]
        h_mod = gamma * h + beta

    rgb_pre, cache_rgb = _mlp_forward(net.rgb_decoder, h_mod)
    c_implicit = sigmoid(rgb_pre)
    th_pre, cache_dec = _mlp_forward(net.thermal_decoder, h_th)
    c_thermal = sigmoid(th_pre)

    trace = ModulationTrace(hw=hw, shared_cache_base=cache_base,
                            shared_cache_thermal=cache_th, thermal_cache=cache_head,
                            rgb_cache=cache_rgb, thermal_dec_cache=cache_dec,
                            h=h, h_th=h_th, gamma=gamma, beta=beta,
                            c_implicit=c_implicit, c_thermal=c_thermal,
                            disable_film=disable_film, film_source=film_source,
                            feature_dim=net.feature_dim)
    return _unflatten(c_implicit, hw), _unflatten(c_thermal, hw), trace


def zeros_like_net_grads(net: ModulationNet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in net.named_params()}


def modulation_backward(net: ModulationNet, trace: ModulationTrace,
                        d_c_implicit: np.ndarray, d_c_thermal: np.ndarray
                        ) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Exact reverse mode through the modulation graph.

    Returns (weight gradients keyed like named_params, dL/d a_f, dL/d a_ft).
    When the forward consumed a single feature map (shared input or base
    film source) the second gradient comes back zero and the combined
    gradient sits in dL/d a_f.
    """
    flat_rgb, hw = _flatten(d_c_implicit)
    flat_th, hw2 = _flatten(d_c_thermal)
    if hw != trace.hw or hw2 != trace.hw:
        raise StaleTrace("upstream gradient shape does not match the trace")
    if flat_rgb.shape[1] != 3 or flat_th.shape[1] != 1:
        raise StaleTrace("upstream gradients must have 3 and 1 channels")

    grads: dict[str, np.ndarray] = {}

    # sigmoid adjoints expressed through the cached outputs
    d_rgb_pre = flat_rgb * trace.c_implicit * (1.0 - trace.c_implicit)
    d_hmod, g_rgb = _mlp_backward(net.rgb_decoder, trace.rgb_cache, d_rgb_pre)
    for i, (dw, db) in enumerate(g_rgb):
        grads[f"rgb_decoder.{i}.weight"] = dw
        grads[f"rgb_decoder.{i}.bias"] = db

    hd = net.hidden_dim
    if trace.disable_film:
        d_h = d_hmod
        grads["film.0.weight"] = np.zeros_like(net.film[0])
        grads["film.0.bias"] = np.zeros_like(net.film[1])
        d_hth_film = 0.0
    else:
        d_gamma = d_hmod * trace.h
        d_beta = d_hmod
        d_h = d_hmod * trace.gamma
        d_z = np.concatenate([d_gamma, d_beta], axis=1)
        grads["film.0.weight"] = d_z.T @ trace.h_th
        grads["film.0.bias"] = d_z.sum(axis=0)
        d_hth_film = d_z @ net.film[0]

    d_th_pre = flat_th * trace.c_thermal * (1.0 - trace.c_thermal)
    d_hth_dec, g_dec = _mlp_backward(net.thermal_decoder, trace.thermal_dec_cache, d_th_pre)
    for i, (dw, db) in enumerate(g_dec):
        grads[f"thermal_decoder.{i}.weight"] = dw
        grads[f"thermal_decoder.{i}.bias"] = db

    # dual use of the thermal features: modulation source + decoder input
    d_hth = d_hth_dec + d_hth_film
    d_ht, g_head = _mlp_backward(net.thermal_head, trace.thermal_cache, d_hth)
    for i, (dw, db) in enumerate(g_head):
        grads[f"thermal_head.{i}.weight"] = dw
        grads[f"thermal_head.{i}.bias"] = db

    if trace.shared_cache_thermal is None:
        # one encoder pass fed both branches
        d_af_flat, g_shared = _mlp_backward(net.shared, trace.shared_cache_base, d_h + d_ht)
        d_aft_flat = np.zeros_like(d_af_flat)
    else:
        d_aft_flat, g_shared_t = _mlp_backward(net.shared, trace.shared_cache_thermal, d_ht)
        d_af_flat, g_shared = _mlp_backward(net.shared, trace.shared_cache_base, d_h)
        g_shared = [(dw + dw2, db + db2)
                    for (dw, db), (dw2, db2) in zip(g_shared, g_shared_t)]
    for i, (dw, db) in enumerate(g_shared):
        grads[f"shared.{i}.weight"] = dw
        grads[f"shared.{i}.bias"] = db

    return grads, _unflatten(d_af_flat, trace.hw), _unflatten(d_aft_flat, trace.hw)
