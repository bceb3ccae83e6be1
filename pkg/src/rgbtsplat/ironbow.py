"""Ironbow pseudo-color palette and its nearest-neighbor inverse.

Thermal cameras commonly export pseudo-colored frames; the palette below
is generated from the classic iron gradient (black -> deep purple ->
magenta -> orange -> yellow -> near-white) by piecewise-linear
interpolation of the control points onto 256 levels. The control points
are data, not physics: swap `IRONBOW_STOPS` to support a different
export palette.

The inverse maps an RGB pixel to the normalized temperature index of the
nearest LUT entry. All 256 entries are distinct, so the roundtrip
inverse(forward(t)) == t is exact for every level; single-channel inputs
are assumed to already be intensity and pass through unchanged.
"""

from __future__ import annotations

import numpy as np

# (position in [0,1], (r, g, b) in [0,1])
IRONBOW_STOPS = (
    (0.00, (0.000, 0.000, 0.000)),
    (0.10, (0.125, 0.000, 0.360)),
    (0.25, (0.470, 0.000, 0.590)),
    (0.40, (0.700, 0.093, 0.480)),
    (0.55, (0.880, 0.300, 0.195)),
    (0.70, (0.980, 0.540, 0.040)),
    (0.85, (1.000, 0.790, 0.110)),
    (1.00, (1.000, 0.995, 0.910)),
)


def _build_lut() -> np.ndarray:
    pos = np.array([p for p, _ in IRONBOW_STOPS])
    cols = np.array([c for _, c in IRONBOW_STOPS])
    t = np.arange(256) / 255.0
    lut = np.stack([np.interp(t, pos, cols[:, c]) for c in range(3)], axis=1)
    return lut


IRONBOW_LUT = _build_lut()  # (256, 3) float64

# half the minimum distance between any two entries; perturbations below
# this bound cannot change the nearest-neighbor inversion
_d = IRONBOW_LUT[:, None, :] - IRONBOW_LUT[None, :, :]
_dist = np.sqrt((_d ** 2).sum(-1)) + np.eye(256) * 1e9
LUT_MIN_SEPARATION = float(_dist.min())
del _d, _dist


def ironbow_forward(intensity: np.ndarray) -> np.ndarray:
    """Map normalized temperatures in [0,1] to palette RGB. (...,) or (...,1) -> (...,3)."""
    t = np.asarray(intensity, dtype=np.float64)
    if t.ndim and t.shape[-1] == 1:
        t = t[..., 0]
    idx = np.clip(np.round(t * 255.0).astype(np.int64), 0, 255)
    return IRONBOW_LUT[idx]


def ironbow_inverse(thermal: np.ndarray) -> np.ndarray:
    """Recover normalized intensity from pseudo-colored thermal pixels.

    (H,W,3) -> (H,W,1) by nearest LUT entry (squared RGB distance, first
    index wins ties). Single-channel input is returned as a copy.
    """
    img = np.asarray(thermal)
    if img.ndim == 3 and img.shape[-1] == 1:
        return img.astype(np.float64).copy()
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H,W,3) or (H,W,1), got {img.shape}")
    flat = img.reshape(-1, 3).astype(np.float64)
    # argmin of |p - lut|^2 = |p|^2 - 2 p.lut + |lut|^2; |p|^2 is constant in the argmin
    scores = flat @ IRONBOW_LUT.T * (-2.0) + (IRONBOW_LUT ** 2).sum(1)[None, :]
    idx = np.argmin(scores, axis=1)
    return (idx / 255.0).reshape(img.shape[0], img.shape[1], 1)
