"""Finite-difference verification of every hand-derived gradient.

The forward model is piecewise smooth, with two kinds of boundary:

  * jumps: the 3-sigma influence cutoff, the 1/255 skip threshold, the
    0.99 cap and the transmittance stop change the output discontinuously.
    Scenes are screened so no (Gaussian, pixel) pair sits within a wide
    safety margin of any of these, and depths are pairwise separated so
    the blend order cannot flip.
  * kinks: L1 residuals, TV differences and the two clamps change slope,
    not value. Smooth images always contain near-zero differences (ridges
    and extrema), so kinks cannot be screened away. Instead every FD probe
    also records a sign signature of all kinked quantities; if the two
    probe points disagree, the step shrinks until they land on one smooth
    branch (where central differences estimate the true derivative).

Checks run in float64. End-to-end checks use 8x8 frames with the SSIM mix
weight at zero (the 11x11 SSIM window does not fit an 8x8 image); the SSIM
gradient itself is checked separately on 16x16 images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .cloud import Camera, GaussianCloud, covariance_from_params
from .config import LossWeights
from .fd import CheckResult, central_diff, compare_grads
from .modnet import init_modulation_net, modulate_forward, modulation_backward
from .pipeline import RenderSettings, render_and_loss, render_frame
from .raster import CUTOFF_Q, prepare_view, rasterize_backward, rasterize_projected
from . import losses

# tolerances per check family
TOL_END_TO_END = 1e-3
TOL_RASTER = 1e-4
TOL_NET = 1e-5
TOL_LOSS = 1e-4

# the end-to-end sweep uses a smaller step than the per-module checks:
# kink-flip windows shrink linearly with the step, and FD rounding noise
# (~1e-11 here) stays far below the gradient scales being compared
PIPELINE_FD_STEP = 1e-5
_KINK_RETRIES = 2  # step shrinks 8x per retry; noise stays under the abs floor

# jump-hazard margins: generous multiples of how far one FD step can move
# each quantity (worst-case sensitivity ~40/unit for the quadratic form)
_MARGIN_Q = 0.01          # distance of any q from the 3-sigma cutoff
_MARGIN_RAW = 5e-5        # distance of any alpha-weight from the skip threshold
_MARGIN_CAP = 0.98        # max allowed alpha-weight (cap is at 0.99)
_MARGIN_T = 0.01          # min allowed terminal transmittance (floor is 1e-4)
_MARGIN_DEPTH = 1e-3      # min pairwise depth separation (sort stability)
# module-level loss checks control their images directly and can afford a
# plain margin at the L1/TV kinks instead of signature retries
_MARGIN_KINK = 2e-3


@dataclass
class FdScene:
    cloud: GaussianCloud
    net: object
    camera: Camera
    i_rgb: np.ndarray
    i_th: np.ndarray
    weights: LossWeights
    settings: RenderSettings


def _make_camera(size: int) -> Camera:
    f = size * 5.0
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size,
                  world_to_cam=np.eye(4), near=0.1, far=50.0)


def _draw_scene(rng: np.random.Generator, size: int, n: int, d: int,
                hidden: int, thermal_hidden: int, settings: RenderSettings) -> FdScene:
    pos = rng.normal(0, 0.3, (n, 3))
    pos[:, 2] = 3.0 + rng.uniform(-0.8, 0.8, n)
    quat = rng.normal(0, 1, (n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    cloud = GaussianCloud(
        positions=pos,
        log_scales=rng.uniform(np.log(0.08), np.log(0.28), (n, 3)),
        rotations=quat,
        opacity_logits=rng.uniform(-1.2, 1.2, n),
        thermal_opacity_offsets=rng.uniform(-0.8, 0.8, n),
        sh_coeffs=rng.normal(0, 0.25, (n, 16, 3)),
        features=rng.normal(0, 0.5, (n, d)),
    )
    net = init_modulation_net(d, hidden=hidden, thermal_hidden=thermal_hidden,
                              seed=int(rng.integers(1 << 31)), dtype=np.float64)
    # move modulation off its identity init so the film path carries gradient
    net.film = (rng.normal(0, 0.3, net.film[0].shape),
                rng.normal(0, 0.3, net.film[1].shape))
    camera = _make_camera(size)
    i_rgb = rng.uniform(0.05, 0.95, (size, size, 3))
    i_th = rng.uniform(0.05, 0.95, (size, size, 1))
    weights = LossWeights(lambda_s=0.0, eta=0.5, lambda_rf=1.0, lambda_sm=0.3)
    return FdScene(cloud=cloud, net=net, camera=camera, i_rgb=i_rgb, i_th=i_th,
                   weights=weights, settings=settings)


def _blend_hazards(prep, opacities: np.ndarray, size: int) -> list[str]:
    """Threshold-proximity report for one blend pass over all pixels."""
    out: list[str] = []
    valid = np.nonzero(prep.proj.valid)[0]
    if valid.size == 0:
        return ["no visible gaussians"]
    order = valid[np.lexsort((valid, prep.proj.depth[valid]))]
    depths = prep.proj.depth[order]
    if depths.size > 1 and np.min(np.diff(np.sort(depths))) < _MARGIN_DEPTH:
        out.append("depth tie")
    xs = np.arange(size) + 0.5
    gx, gy = np.meshgrid(xs, xs)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mean = prep.proj.mean2d[order]
    conic = prep.proj.conic[order]
    dxy = pix[None, :, :] - mean[:, None, :]
    q = (conic[:, None, 0, 0] * dxy[:, :, 0] ** 2
         + (conic[:, None, 0, 1] + conic[:, None, 1, 0]) * dxy[:, :, 0] * dxy[:, :, 1]
         + conic[:, None, 1, 1] * dxy[:, :, 1] ** 2)
    if np.any(np.abs(q - CUTOFF_Q) < _MARGIN_Q):
        out.append("influence cutoff")
    raw = opacities[order][:, None] * np.exp(-0.5 * q)
    inside = q <= CUTOFF_Q
    if np.any(np.abs(raw[inside] - 1.0 / 255.0) < _MARGIN_RAW):
        out.append("skip threshold")
    if np.any(raw[inside] > _MARGIN_CAP):
        out.append("alpha cap")
    alpha_hat = np.where(inside & (raw >= 1.0 / 255.0), np.minimum(raw, 0.99), 0.0)
    T = np.prod(1.0 - alpha_hat, axis=0)
    if np.any(T < _MARGIN_T):
        out.append("transmittance floor")
    return out


def fd_hazards(scene: FdScene) -> list[str]:
    """Jump-type threshold hazards of a candidate scene; empty means FD-safe."""
    cloud, settings = scene.cloud, scene.settings
    cov = covariance_from_params(cloud.log_scales, cloud.rotations)
    prep = prepare_view(cloud.positions, cov, scene.camera,
                        tile_size=settings.tile_size, lowpass=settings.lowpass)
    hazards = _blend_hazards(prep, sigmoid(cloud.opacity_logits), scene.camera.width)
    if not settings.disable_decoupling:
        alphas_t = sigmoid(cloud.opacity_logits + cloud.thermal_opacity_offsets)
        hazards += ["thermal " + h for h in
                    _blend_hazards(prep, alphas_t, scene.camera.width)]
    return hazards


def _pipeline_signature(out, scene: FdScene) -> np.ndarray:
    """Signs of every kinked quantity in the objective at one evaluation point.

    Two FD probes on the same smooth branch produce identical signatures;
    any L1/TV sign flip or clamp-region change between them shows up here.
    """
    th = out.c_thermal[..., 0]
    feat_rgb = out.a_f[..., :3]
    parts = [
        np.sign(out.c_rgb - scene.i_rgb).ravel(),
        np.sign(out.c_thermal - scene.i_th).ravel(),
        np.sign(np.diff(th, axis=0)).ravel(),
        np.sign(np.diff(th, axis=1)).ravel(),
        ((feat_rgb > 0) & (feat_rgb < 1)).ravel(),
        np.sign(np.clip(feat_rgb, 0, 1) - scene.i_rgb).ravel(),
        np.sign(out.a_ft[..., 3:4] - scene.i_th).ravel(),
    ]
    if out.trace.clamp_inside is not None:
        parts.append(out.trace.clamp_inside.ravel())
    return np.concatenate([p.astype(np.int8) for p in parts])


def _guarded_central_diff(eval_fn, arr: np.ndarray, step: float,
                          retries: int = _KINK_RETRIES) -> tuple[np.ndarray, int]:
    """Central differences that shrink the step when probes straddle a kink.

    eval_fn returns (loss, signature). Elements whose probes still disagree
    after the retries are returned as NaN (the point sits essentially on a
    kink, where no derivative exists); callers count them.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    n_on_kink = 0
    for i in range(flat.size):
        h = step
        orig = flat[i]
        for _ in range(retries + 1):
            flat[i] = orig + h
            lp, sp = eval_fn()
            flat[i] = orig - h
            lm, sm = eval_fn()
            flat[i] = orig
            if np.array_equal(sp, sm):
                gflat[i] = (lp - lm) / (2.0 * h)
                break
            h /= 8.0
        else:
            gflat[i] = np.nan
            n_on_kink += 1
    return grad, n_on_kink


def build_fd_scene(seed: int, settings: RenderSettings | None = None, size: int = 8,
                   n: int = 6, d: int = 8, hidden: int = 6, thermal_hidden: int = 4,
                   max_tries: int = 200) -> FdScene:
    """Deterministically search sub-seeds until a threshold-free scene appears."""
    settings = settings or RenderSettings(tile_size=8)
    for attempt in range(max_tries):
        rng = np.random.default_rng((seed, attempt))
        scene = _draw_scene(rng, size, n, d, hidden, thermal_hidden, settings)
        if not fd_hazards(scene):
            return scene
    raise RuntimeError(f"no FD-safe scene found for seed {seed} after {max_tries} tries")


# ---------------------------------------------------------------------------
# check families


def check_pipeline(seed: int, settings: RenderSettings | None = None,
                   inject_sign_flip: bool = False) -> list[CheckResult]:
    """End-to-end FD of the total objective for every parameter class."""
    scene = build_fd_scene(seed, settings)
    cloud, net = scene.cloud, scene.net

    def evaluate():
        out, breakdown, _ = render_and_loss(cloud, net, scene.camera, scene.i_rgb,
                                            scene.i_th, scene.settings, scene.weights,
                                            with_grads=False)
        return breakdown.total, _pipeline_signature(out, scene)

    _, _, grads = render_and_loss(cloud, net, scene.camera, scene.i_rgb, scene.i_th,
                                  scene.settings, scene.weights)
    results = []

    def check_one(name, param, analytic):
        fd, n_on_kink = _guarded_central_diff(evaluate, param, PIPELINE_FD_STEP)
        usable = ~np.isnan(fd)
        res = compare_grads(name, np.asarray(analytic)[usable], fd[usable], TOL_END_TO_END)
        # a point exactly on a kink has no derivative to compare; tolerate
        # at most a token number of them
        if n_on_kink > max(1, param.size // 100):
            res.passed = False
            res.name = f"{name} (too many kink hits: {n_on_kink})"
        results.append(res)

    for name, param in cloud.named_params():
        analytic = getattr(grads.cloud, name)
        if inject_sign_flip and name == "thermal_opacity_offsets":
            analytic = -analytic
        check_one(name, param, analytic)
    for name, param in net.named_params():
        check_one(f"net.{name}", param, grads.net[name])
    return results


def check_raster(seed: int) -> list[CheckResult]:
    """FD of the blend pass w.r.t. its projected-space inputs."""
    scene = build_fd_scene(seed)
    cloud, cam = scene.cloud, scene.camera
    rng = np.random.default_rng((seed, 0x5A57E))
    cov = covariance_from_params(cloud.log_scales, cloud.rotations)
    base_prep = prepare_view(cloud.positions, cov, cam, tile_size=8)
    mean2d = base_prep.proj.mean2d.copy()
    cov2d = base_prep.proj.cov2d.copy()
    opac = sigmoid(cloud.opacity_logits)
    attrs = cloud.features[:, :2].copy()
    w_data = rng.normal(0, 1, (cam.height, cam.width, 2))
    w_alpha = rng.normal(0, 1, (cam.height, cam.width))

    def run():
        prep = prepare_view(cloud.positions, cov, cam, tile_size=8)
        prep.proj.mean2d[...] = mean2d
        prep.proj.cov2d[...] = cov2d
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
        prep.proj.conic[:, 0, 0] = cov2d[:, 1, 1] / det
        prep.proj.conic[:, 1, 1] = cov2d[:, 0, 0] / det
        prep.proj.conic[:, 0, 1] = -cov2d[:, 0, 1] / det
        prep.proj.conic[:, 1, 0] = -cov2d[:, 1, 0] / det
        return rasterize_projected(prep, opac, attrs)

    def loss():
        fmap, _ = run()
        return float(np.sum(w_data * fmap.data) + np.sum(w_alpha * fmap.alpha))

    _, aux = run()
    grads = rasterize_backward(aux, w_data, d_alpha=w_alpha)
    results = [
        compare_grads("raster.attrs", grads.d_attrs, central_diff(loss, attrs), TOL_RASTER),
        compare_grads("raster.opacity", grads.d_opacity, central_diff(loss, opac), TOL_RASTER),
        compare_grads("raster.mean2d", grads.d_mean2d, central_diff(loss, mean2d), TOL_RASTER),
    ]
    # symmetric FD over the 3 dof of each cov2d, against the summed adjoint
    step = 1e-4
    fd_sym = np.zeros((cov2d.shape[0], 3))
    for g in range(cov2d.shape[0]):
        for col, (i, j) in enumerate(((0, 0), (1, 1), (0, 1))):
            orig = cov2d[g, i, j]
            cov2d[g, i, j] = orig + step
            cov2d[g, j, i] = cov2d[g, i, j]
            lp = loss()
            cov2d[g, i, j] = orig - step
            cov2d[g, j, i] = cov2d[g, i, j]
            lm = loss()
            cov2d[g, i, j] = orig
            cov2d[g, j, i] = orig
            fd_sym[g, col] = (lp - lm) / (2 * step)
    ana_sym = np.stack([grads.d_cov2d[:, 0, 0], grads.d_cov2d[:, 1, 1],
                        grads.d_cov2d[:, 0, 1] + grads.d_cov2d[:, 1, 0]], axis=1)
    results.append(compare_grads("raster.cov2d", ana_sym, fd_sym, TOL_RASTER))
    return results


def check_modnet(seed: int) -> list[CheckResult]:
    """FD of the full modulation graph (weights and both feature maps)."""
    rng = np.random.default_rng(seed)
    d, hidden, th = 6, 5, 3
    net = init_modulation_net(d, hidden=hidden, thermal_hidden=th,
                              seed=seed, dtype=np.float64)
    net.film = (rng.normal(0, 0.4, net.film[0].shape),
                rng.normal(0, 0.4, net.film[1].shape))
    a_f = rng.normal(0, 1, (3, 3, d))
    a_ft = rng.normal(0, 1, (3, 3, d))
    w_rgb = rng.normal(0, 1, (3, 3, 3))
    w_th = rng.normal(0, 1, (3, 3, 1))

    def loss():
        c_rgb, c_th, _ = modulate_forward(net, a_f, a_ft)
        return float(np.sum(w_rgb * c_rgb) + np.sum(w_th * c_th))

    _, _, trace = modulate_forward(net, a_f, a_ft)
    grads, d_af, d_aft = modulation_backward(net, trace, w_rgb, w_th)
    results = []
    for name, param in net.named_params():
        results.append(compare_grads(f"net.{name}", grads[name],
                                     central_diff(loss, param), TOL_NET))
    results.append(compare_grads("net.d_a_f", d_af, central_diff(loss, a_f), TOL_NET))
    results.append(compare_grads("net.d_a_ft", d_aft, central_diff(loss, a_ft), TOL_NET))
    return results


def _kink_free_pair(rng, shape, margin=_MARGIN_KINK):
    """Two images whose pixel differences stay away from the L1 kink."""
    while True:
        a = rng.uniform(0, 1, shape)
        b = rng.uniform(0, 1, shape)
        if np.all(np.abs(a - b) > margin):
            return a, b


def check_losses(seed: int) -> list[CheckResult]:
    """FD of every loss operation at 16x16 (full SSIM window active)."""
    rng = np.random.default_rng(seed)
    size = 16
    results = []

    a, b = _kink_free_pair(rng, (size, size, 3))
    _, g = losses.l1_loss(a, b)
    results.append(compare_grads("loss.l1", g, central_diff(lambda: losses.l1_loss(a, b)[0], a),
                                 TOL_LOSS))

    x = rng.uniform(0.2, 0.8, (size, size))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    _, g = losses.ssim(x, y)
    results.append(compare_grads("loss.ssim", g, central_diff(lambda: losses.ssim(x, y)[0], x),
                                 TOL_LOSS))

    a, b = _kink_free_pair(rng, (size, size, 3))
    _, g = losses.rec_loss(a, b, 0.2)
    results.append(compare_grads("loss.rec", g,
                                 central_diff(lambda: losses.rec_loss(a, b, 0.2)[0], a),
                                 TOL_LOSS))

    while True:
        img = rng.uniform(0, 1, (size, size, 1))
        if (np.all(np.abs(np.diff(img, axis=0)) > _MARGIN_KINK)
                and np.all(np.abs(np.diff(img, axis=1)) > _MARGIN_KINK)):
            break
    _, g = losses.smooth_loss(img)
    results.append(compare_grads("loss.smooth", g,
                                 central_diff(lambda: losses.smooth_loss(img)[0], img),
                                 TOL_LOSS))

    while True:
        a_f = rng.uniform(-0.2, 1.2, (size, size, 8))
        a_ft = rng.uniform(-0.2, 1.2, (size, size, 8))
        i_rgb = rng.uniform(0, 1, (size, size, 3))
        i_th = rng.uniform(0, 1, (size, size, 1))
        raw = a_f[..., :3]
        ok = (np.all(np.abs(np.clip(raw, 0, 1) - i_rgb) > _MARGIN_KINK)
              and np.all(np.abs(raw) > _MARGIN_KINK)
              and np.all(np.abs(raw - 1.0) > _MARGIN_KINK)
              and np.all(np.abs(a_ft[..., 3:4] - i_th) > _MARGIN_KINK))
        if ok:
            break

    def feat_loss():
        return losses.feature_rec_loss(a_f, a_ft, i_rgb, i_th, eta=0.5, lambda_s=0.2)[0]

    _, d_af, d_aft = losses.feature_rec_loss(a_f, a_ft, i_rgb, i_th, eta=0.5, lambda_s=0.2)
    results.append(compare_grads("loss.feature.a_f", d_af, central_diff(feat_loss, a_f),
                                 TOL_LOSS))
    results.append(compare_grads("loss.feature.a_ft", d_aft, central_diff(feat_loss, a_ft),
                                 TOL_LOSS))
    return results


MODULES = ("raster", "net", "pipeline", "loss")


def run_gradcheck(module: str = "all", seed: int = 0, n_pipeline_seeds: int = 3,
                  inject_sign_flip: bool = False) -> tuple[bool, list[CheckResult]]:
    """Run the requested check families; returns (all_passed, results)."""
    results: list[CheckResult] = []
    if module not in MODULES and module != "all":
        raise ValueError(f"unknown gradcheck module {module!r}; pick one of {MODULES} or 'all'")
    if module in ("all", "raster"):
        results += check_raster(seed)
    if module in ("all", "net"):
        results += check_modnet(seed)
    if module in ("all", "loss"):
        results += check_losses(seed)
    if module in ("all", "pipeline"):
        for i in range(n_pipeline_seeds):
            sub = [CheckResult(f"seed{seed + i}.{r.name}", r.max_abs_err, r.max_rel_err,
                               r.worst_index, r.n_checked, r.passed)
                   for r in check_pipeline(seed + i, inject_sign_flip=inject_sign_flip)]
            results += sub
    return all(r.passed for r in results), results
