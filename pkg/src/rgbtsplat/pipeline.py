"""One full differentiable render and its mirrored backward pass.

Forward:
  1. base pass: rasterize fused [SH color | latent feature] attributes with
     the base opacity; the first 3 channels are the explicit color image,
     the remaining d channels the base feature map.
  2. thermal pass: re-blend the latent features over the same projected
     geometry and depth order with the offset opacity (skipped entirely
     when decoupling is disabled, in which case the base feature map is
     reused bit-for-bit).
  3. modulation network: encode, modulate, decode both spectra.
  4. hybrid compose: rgb = clamp(explicit + implicit, 0, 1).

Backward chains the adjoints of stages 4..1 and accumulates gradients for
every cloud parameter and network weight. The clamp is a stop-gradient
where saturated; the thermal-pass opacity gradient routes through
sigmoid'(logit + offset) into both the base logit and the offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import (
    Camera,
    GaussianCloud,
    covariance_backward,
    covariance_from_params,
    project_backward,
    sh_backward,
    sh_evaluate,
    sigmoid_grad,
    thermal_opacity,
    view_directions,
    view_directions_backward,
)
from .errors import ShapeMismatch
from .modnet import ModulationNet, ModulationTrace, modulate_forward, modulation_backward
from .raster import (
    PreparedView,
    RasterAux,
    prepare_view,
    rasterize_backward,
    rasterize_projected,
)
from scipy.special import expit as sigmoid


@dataclass
class RenderSettings:
    """The subset of the run configuration a single render needs."""

    tile_size: int = 16
    lowpass: float = 0.3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pixel_budget: int = 1 << 26
    disable_film: bool = False
    disable_decoupling: bool = False
    disable_hybrid: bool = False
    film_source: str = "thermal"

    @classmethod
    def from_config(cls, cfg) -> "RenderSettings":
        return cls(tile_size=cfg.tile_size, lowpass=cfg.lowpass,
                   background=tuple(cfg.background), pixel_budget=cfg.pixel_budget,
                   disable_film=cfg.disable_film,
                   disable_decoupling=cfg.disable_decoupling,
                   disable_hybrid=cfg.disable_hybrid, film_source=cfg.film_source)


@dataclass
class RenderTrace:
    prep: PreparedView
    aux_base: RasterAux
    aux_thermal: RasterAux | None
    mod_trace: ModulationTrace
    view_dirs: np.ndarray
    view_norms: np.ndarray
    alphas: np.ndarray
    alphas_t: np.ndarray | None
    clamp_inside: np.ndarray | None  # None when hybrid compose is disabled
    active_sh_degree: int
    settings: RenderSettings


@dataclass
class RenderOutputs:
    c_rgb: np.ndarray      # (H,W,3) final color
    c_thermal: np.ndarray  # (H,W,1) decoded thermal intensity
    a_f: np.ndarray        # (H,W,d) base feature map
    a_ft: np.ndarray       # (H,W,d) thermal feature map
    r_sh: np.ndarray       # (H,W,3) explicit SH color (incl. background)
    alpha: np.ndarray      # (H,W) base-pass accumulated opacity
    trace: RenderTrace


@dataclass
class CloudGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    thermal_opacity_offsets: np.ndarray
    sh_coeffs: np.ndarray
    features: np.ndarray

    def named(self):
        return [(f, getattr(self, f)) for f in ("positions", "log_scales", "rotations",
                                                "opacity_logits", "thermal_opacity_offsets",
                                                "sh_coeffs", "features")]


@dataclass
class Gradients:
    cloud: CloudGrads
    net: dict
    parts: dict  # diagnostic per-path opacity contributions


def render_frame(cloud: GaussianCloud, net: ModulationNet, camera: Camera,
                 settings: RenderSettings,
                 active_sh_degree: int | None = None) -> RenderOutputs:
    if net.feature_dim != cloud.feature_dim:
        raise ShapeMismatch(
            f"network expects {net.feature_dim} feature channels, cloud has {cloud.feature_dim}")
    if active_sh_degree is None:
        active_sh_degree = cloud.sh_degree

    cov = covariance_from_params(cloud.log_scales, cloud.rotations)
    prep = prepare_view(cloud.positions, cov, camera,
                        tile_size=settings.tile_size, lowpass=settings.lowpass)

    dirs, norms = view_directions(cloud.positions, camera.center)
    sh_rgb = sh_evaluate(cloud.sh_coeffs, dirs, degree=active_sh_degree)

    alphas = sigmoid(cloud.opacity_logits)
    attrs = np.concatenate([sh_rgb, cloud.features], axis=1)
    fm_base, aux_base = rasterize_projected(prep, alphas, attrs,
                                            pixel_budget=settings.pixel_budget)
    r_sh = fm_base.data[..., :3]
    a_f = fm_base.data[..., 3:]

    bg = np.asarray(settings.background, dtype=cloud.dtype)
    if np.any(bg != 0):
        r_sh = r_sh + bg * (1.0 - fm_base.alpha)[..., None]

    if settings.disable_decoupling:
        a_ft = a_f
        aux_thermal = None
        alphas_t = None
    else:
        alphas_t = thermal_opacity(cloud.opacity_logits, cloud.thermal_opacity_offsets)
        fm_th, aux_thermal = rasterize_projected(prep, alphas_t, cloud.features,
                                                 pixel_budget=settings.pixel_budget)
        a_ft = fm_th.data

    c_implicit, c_thermal, mod_trace = modulate_forward(
        net, a_f, a_ft, disable_film=settings.disable_film,
        film_source=settings.film_source)

    if settings.disable_hybrid:
        c_rgb = c_implicit
        clamp_inside = None
    else:
        pre = r_sh + c_implicit
        c_rgb = np.clip(pre, 0.0, 1.0)
        clamp_inside = (pre > 0.0) & (pre < 1.0)

    trace = RenderTrace(prep=prep, aux_base=aux_base, aux_thermal=aux_thermal,
                        mod_trace=mod_trace, view_dirs=dirs, view_norms=norms,
                        alphas=alphas, alphas_t=alphas_t, clamp_inside=clamp_inside,
                        active_sh_degree=active_sh_degree, settings=settings)
    return RenderOutputs(c_rgb=c_rgb, c_thermal=c_thermal, a_f=a_f, a_ft=a_ft,
                         r_sh=r_sh, alpha=fm_base.alpha, trace=trace)


def render_backward(cloud: GaussianCloud, net: ModulationNet, camera: Camera,
                    outputs: RenderOutputs, d_c_rgb: np.ndarray,
                    d_c_thermal: np.ndarray, d_a_f: np.ndarray,
                    d_a_ft: np.ndarray) -> Gradients:
    """Full-parameter gradients for one rendered frame.

    The four upstream gradients are those emitted by the total loss. Both
    raster passes, the modulation graph, the SH shading and the projection
    adjoints are chained here; the base and thermal opacity paths are also
    reported separately in Gradients.parts.
    """
    trace = outputs.trace
    settings = trace.settings

    # stage 4: hybrid compose (clamp saturation stops the gradient)
    if settings.disable_hybrid:
        d_implicit = d_c_rgb
        d_r_sh = np.zeros_like(d_c_rgb)
    else:
        masked = np.where(trace.clamp_inside, d_c_rgb, 0.0)
        d_implicit = masked
        d_r_sh = masked

    # background term: r_sh += bg * (1 - alpha)
    bg = np.asarray(settings.background, dtype=cloud.dtype)
    d_alpha_map = None
    if np.any(bg != 0):
        d_alpha_map = -np.einsum("hwc,c->hw", d_r_sh, bg)

    # stage 3: modulation network
    net_grads, d_af_net, d_aft_net = modulation_backward(
        net, trace.mod_trace, d_implicit, d_c_thermal)
    d_af_total = d_a_f + d_af_net
    d_aft_total = d_a_ft + d_aft_net

    # stage 2/1: raster passes
    if settings.disable_decoupling:
        upstream = np.concatenate([d_r_sh, d_af_total + d_aft_total], axis=2)
        g_base = rasterize_backward(trace.aux_base, upstream, d_alpha=d_alpha_map)
        g_thermal = None
    else:
        upstream = np.concatenate([d_r_sh, d_af_total], axis=2)
        g_base = rasterize_backward(trace.aux_base, upstream, d_alpha=d_alpha_map)
        g_thermal = rasterize_backward(trace.aux_thermal, d_aft_total)

    d_sh_rgb = g_base.d_attrs[:, :3]
    d_features = g_base.d_attrs[:, 3:].copy()
    d_mean2d = g_base.d_mean2d
    d_cov2d = g_base.d_cov2d

    d_opacity_logits = g_base.d_opacity * sigmoid_grad(trace.alphas)
    parts = {"opacity_base": d_opacity_logits.copy()}
    d_offsets = np.zeros_like(cloud.thermal_opacity_offsets)
    if g_thermal is not None:
        d_features += g_thermal.d_attrs
        d_mean2d = d_mean2d + g_thermal.d_mean2d
        d_cov2d = d_cov2d + g_thermal.d_cov2d
        d_alpha_t = g_thermal.d_opacity * sigmoid_grad(trace.alphas_t)
        parts["opacity_thermal"] = d_alpha_t
        d_opacity_logits = d_opacity_logits + d_alpha_t
        d_offsets = d_alpha_t.copy()
    else:
        parts["opacity_thermal"] = np.zeros_like(d_opacity_logits)

    # projection and covariance adjoints
    cov = covariance_from_params(cloud.log_scales, cloud.rotations)
    d_positions, d_sigma = project_backward(cloud.positions, cov, camera,
                                            trace.prep.proj, d_mean2d, d_cov2d)
    d_log_scales, d_rotations = covariance_backward(cloud.log_scales, cloud.rotations,
                                                    d_sigma)

    # SH shading adjoint (also feeds positions through the view direction)
    d_sh, d_dirs = sh_backward(cloud.sh_coeffs, trace.view_dirs, d_sh_rgb,
                               degree=trace.active_sh_degree)
    d_positions = d_positions + view_directions_backward(trace.view_dirs,
                                                         trace.view_norms, d_dirs)

    cloud_grads = CloudGrads(positions=d_positions, log_scales=d_log_scales,
                             rotations=d_rotations, opacity_logits=d_opacity_logits,
                             thermal_opacity_offsets=d_offsets, sh_coeffs=d_sh,
                             features=d_features)
    return Gradients(cloud=cloud_grads, net=net_grads, parts=parts)


def render_and_loss(cloud: GaussianCloud, net: ModulationNet, camera: Camera,
                    i_rgb: np.ndarray, i_th: np.ndarray, settings: RenderSettings,
                    weights, include_fea_rgb: bool = True, include_fea_th: bool = True,
                    active_sh_degree: int | None = None, with_grads: bool = True):
    """Render one frame, evaluate the objective and (optionally) backprop.

    Returns (outputs, breakdown, gradients-or-None). This is the single
    code path the trainer and the gradient checker share.
    """
    from .losses import total_loss

    outputs = render_frame(cloud, net, camera, settings, active_sh_degree=active_sh_degree)
    breakdown, lgrads = total_loss(outputs.c_rgb, outputs.c_thermal, outputs.a_f,
                                   outputs.a_ft, i_rgb, i_th, weights,
                                   include_fea_rgb=include_fea_rgb,
                                   include_fea_th=include_fea_th)
    if not with_grads:
        return outputs, breakdown, None
    grads = render_backward(cloud, net, camera, outputs, lgrads.d_c_rgb,
                            lgrads.d_c_thermal, lgrads.d_a_f, lgrads.d_a_ft)
    return outputs, breakdown, grads
