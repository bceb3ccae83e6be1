"""Training objective and image metrics, all with analytic gradients.

The composite reconstruction loss mixes mean L1 with (1 - SSIM); the same
composite supervises the raw feature maps (RGB channels 0..2 of the base
map, thermal proxy channel 3 of the thermal map), and an anisotropic
total-variation term smooths the predicted thermal image. Every term is
mean-normalized so the weights are resolution independent.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, C1=0.01^2,
C2=0.03^2 on a [0,1] range) evaluated at valid window positions only; a
uniform window is available for cross-checking other implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossWeights
from .errors import FeatureDimTooSmall, ImageTooSmall, ShapeMismatch

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

# channel layout of the supervised feature maps
FEAT_RGB_SLICE = slice(0, 3)
FEAT_THERMAL_CHANNEL = 3


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"shape mismatch: {pred.shape} vs {gt.shape}")


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute difference and its (sub)gradient w.r.t. pred; sign(0) := 0."""
    _check_same_shape(pred, gt)
    diff = pred - gt
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return loss, grad


# ---------------------------------------------------------------------------
# SSIM


def _window_1d(kind: str, size: int, sigma: float, dtype) -> np.ndarray:
    if kind == "gaussian":
        x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    elif kind == "uniform":
        k = np.ones(size, dtype=np.float64)
    else:
        raise ValueError(f"unknown window kind {kind!r}")
    k /= k.sum()
    return k.astype(dtype)


def _corr_valid_1d(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, k.size, axis=axis)
    return win @ k


def _corr_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D image with the symmetric kernel k (x) k."""
    return _corr_valid_1d(_corr_valid_1d(x, k, 0), k, 1)


def _corr_adjoint(g: np.ndarray, k: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _corr_valid: scatter a valid-domain gradient back to the image."""
    pad = k.size - 1
    gp = np.pad(g, ((pad, pad), (pad, pad)))
    # the kernel is symmetric, so the adjoint is again a valid correlation
    out = _corr_valid(gp, k)
    assert out.shape == out_shape
    return out


def ssim(pred: np.ndarray, gt: np.ndarray, window: str = "gaussian",
         win_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         c1: float = SSIM_C1, c2: float = SSIM_C2) -> tuple[float, np.ndarray]:
    """Mean SSIM over valid window positions (and channels) plus dSSIM/dpred."""
    _check_same_shape(pred, gt)
    squeeze = pred.ndim == 2
    if squeeze:
        pred = pred[..., None]
        gt = gt[..., None]
    h, w, ch = pred.shape
    if min(h, w) < win_size:
        raise ImageTooSmall(f"image {h}x{w} smaller than SSIM window {win_size}")
    k = _window_1d(window, win_size, sigma, np.float64)

    grad = np.zeros((h, w, ch), dtype=np.float64)
    total = 0.0
    n_pos = (h - win_size + 1) * (w - win_size + 1)
    upstream = 1.0 / (n_pos * ch)
    for c in range(ch):
        x = pred[..., c].astype(np.float64)
        y = gt[..., c].astype(np.float64)
        mu_x = _corr_valid(x, k)
        mu_y = _corr_valid(y, k)
        e_xx = _corr_valid(x * x, k)
        e_yy = _corr_valid(y * y, k)
        e_xy = _corr_valid(x * y, k)
        var_x = e_xx - mu_x * mu_x
        var_y = e_yy - mu_y * mu_y
        cov = e_xy - mu_x * mu_y

        a1 = 2 * mu_x * mu_y + c1
        a2 = 2 * cov + c2
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        b2 = var_x + var_y + c2
        s_map = (a1 * a2) / (b1 * b2)
        total += float(s_map.sum()) * upstream

        # per-position adjoints of the SSIM formula
        g_a1 = upstream * a2 / (b1 * b2)
        g_a2 = upstream * a1 / (b1 * b2)
        g_b1 = -upstream * s_map / b1
        g_b2 = -upstream * s_map / b2
        g_cov = 2 * g_a2
        g_exx = g_b2                      # var_x path
        g_exy = g_cov
        g_mux = 2 * mu_y * g_a1 + 2 * mu_x * g_b1 - 2 * mu_x * g_b2 - mu_y * g_cov
        grad[..., c] = (_corr_adjoint(g_mux, k, (h, w))
                        + 2 * x * _corr_adjoint(g_exx, k, (h, w))
                        + y * _corr_adjoint(g_exy, k, (h, w)))
    if pred.dtype != np.float64:
        grad = grad.astype(pred.dtype)
    return total, grad[..., 0] if squeeze else grad


def rec_loss(pred: np.ndarray, gt: np.ndarray, lambda_s: float,
             window: str = "gaussian") -> tuple[float, np.ndarray]:
    """(1 - lambda_s) * L1 + lambda_s * (1 - SSIM). lambda_s == 0 skips SSIM."""
    if not 0.0 <= lambda_s <= 1.0:
        raise ValueError("lambda_s must be in [0,1]")
    l1, g1 = l1_loss(pred, gt)
    if lambda_s == 0.0:
        return l1, g1
    s, gs = ssim(pred, gt, window=window)
    loss = (1.0 - lambda_s) * l1 + lambda_s * (1.0 - s)
    grad = (1.0 - lambda_s) * g1 - lambda_s * gs.reshape(pred.shape)
    return float(loss), grad


def smooth_loss(img: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic total variation: mean |dx| + mean |dy|, forward differences.

    Each direction is normalized by its own difference count (and channel
    count), so a constant image scores exactly zero.
    """
    if img.ndim == 2:
        img = img[..., None]
    h, w, ch = img.shape
    grad = np.zeros_like(img)
    loss = 0.0
    if w > 1:
        dx = img[:, 1:, :] - img[:, :-1, :]
        nx = dx.size
        loss += float(np.sum(np.abs(dx))) / nx
        sx = np.sign(dx) / nx
        grad[:, 1:, :] += sx
        grad[:, :-1, :] -= sx
    if h > 1:
        dy = img[1:, :, :] - img[:-1, :, :]
        ny = dy.size
        loss += float(np.sum(np.abs(dy))) / ny
        sy = np.sign(dy) / ny
        grad[1:, :, :] += sy
        grad[:-1, :, :] -= sy
    return loss, grad


def feature_rec_loss(a_f: np.ndarray, a_ft: np.ndarray, i_rgb: np.ndarray,
                     i_th: np.ndarray, eta: float, lambda_s: float,
                     include_rgb: bool = True, include_thermal: bool = True,
                     window: str = "gaussian") -> tuple[float, np.ndarray, np.ndarray]:
    """Supervise the raw feature maps: channels 0..2 of the base map against
    the RGB image (clamped to [0,1] with a stop-gradient at saturation) and
    channel 3 of the thermal map against the thermal intensity image.

    Returns (loss, dL/d a_f, dL/d a_ft); channels >= 4 receive zero gradient.
    """
    if a_f.shape[-1] < 4 or a_ft.shape[-1] < 4:
        raise FeatureDimTooSmall("feature maps need >= 4 channels for supervision")
    d_af = np.zeros_like(a_f)
    d_aft = np.zeros_like(a_ft)
    loss = 0.0
    if include_rgb:
        raw = a_f[..., FEAT_RGB_SLICE]
        clamped = np.clip(raw, 0.0, 1.0)
        l_rgb, g_rgb = rec_loss(clamped, i_rgb, lambda_s, window=window)
        inside = (raw > 0.0) & (raw < 1.0)
        d_af[..., FEAT_RGB_SLICE] = np.where(inside, g_rgb, 0.0)
        loss += l_rgb
    if include_thermal and eta != 0.0:
        sl = a_ft[..., FEAT_THERMAL_CHANNEL:FEAT_THERMAL_CHANNEL + 1]
        l_th, g_th = rec_loss(sl, i_th, lambda_s, window=window)
        d_aft[..., FEAT_THERMAL_CHANNEL:FEAT_THERMAL_CHANNEL + 1] = eta * g_th
        loss += eta * l_th
    return float(loss), d_af, d_aft


@dataclass
class LossBreakdown:
    total: float
    rec_rgb: float
    rec_thermal: float
    feature: float
    smooth: float


@dataclass
class LossGrads:
    d_c_rgb: np.ndarray
    d_c_thermal: np.ndarray
    d_a_f: np.ndarray
    d_a_ft: np.ndarray


def total_loss(c_rgb: np.ndarray, c_thermal: np.ndarray, a_f: np.ndarray,
               a_ft: np.ndarray, i_rgb: np.ndarray, i_th: np.ndarray,
               weights: LossWeights, include_fea_rgb: bool = True,
               include_fea_th: bool = True,
               window: str = "gaussian") -> tuple[LossBreakdown, LossGrads]:
    """Full objective: rec(rgb) + rec(thermal) + lambda_rf * feature + lambda_sm * TV.

    Zero weights short-circuit their term entirely, so the objective is
    exactly additive in its components. Emits the four upstream gradients
    the renderer's backward pass consumes.
    """
    l_rgb, g_rgb = rec_loss(c_rgb, i_rgb, weights.lambda_s, window=window)
    l_th, g_th = rec_loss(c_thermal, i_th, weights.lambda_s, window=window)

    if weights.lambda_rf != 0.0 and (include_fea_rgb or include_fea_th):
        l_feat, d_af, d_aft = feature_rec_loss(
            a_f, a_ft, i_rgb, i_th, weights.eta, weights.lambda_s,
            include_rgb=include_fea_rgb, include_thermal=include_fea_th,
            window=window)
        d_af = d_af * weights.lambda_rf
        d_aft = d_aft * weights.lambda_rf
    else:
        l_feat = 0.0
        d_af = np.zeros_like(a_f)
        d_aft = np.zeros_like(a_ft)

    if weights.lambda_sm != 0.0:
        l_sm, g_sm = smooth_loss(c_thermal)
        g_th = g_th + weights.lambda_sm * g_sm.reshape(c_thermal.shape)
    else:
        l_sm = 0.0

    total = l_rgb + l_th + weights.lambda_rf * l_feat + weights.lambda_sm * l_sm
    breakdown = LossBreakdown(total=float(total), rec_rgb=l_rgb, rec_thermal=l_th,
                              feature=l_feat, smooth=l_sm)
    grads = LossGrads(d_c_rgb=g_rgb, d_c_thermal=g_th, d_a_f=d_af, d_a_ft=d_aft)
    return breakdown, grads


# ---------------------------------------------------------------------------
# metrics

PSNR_CAP = 100.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on a [0,1] range, capped at 100."""
    _check_same_shape(pred, gt)
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))
