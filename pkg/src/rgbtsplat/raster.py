"""Tile-based depth-ordered alpha blending of K-channel Gaussian attributes.

The same kernel serves both render passes: the base pass blends fused
[SH color | latent feature] vectors with the base opacity and the thermal
pass re-blends the latent features with the offset opacity over the same
projected geometry and depth order.

Blending semantics per pixel, applied in sorted (depth, index) order:

    alpha_hat = min(opacity * exp(-0.5 * d^T conic d), 0.99)
    skip the Gaussian when d^T conic d > 9 (outside its 3-sigma ellipse;
    this truncation is what makes 3-sigma tile binning exact)
    skip the Gaussian when opacity * g < 1/255
    stop before blending a Gaussian that would push the running
    transmittance below 1e-4

The brute-force reference path (`blend_forward` / `rasterize_reference`)
implements the identical semantics with plain per-pixel loops and is the
oracle the tiled path is validated against.

The backward pass replays blending in reverse from cached per-pixel
terminal transmittance. The 0.99 cap and the 1/255 skip are treated as
stop-gradients when active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import Camera, ProjectedGaussians, project_gaussians, DEFAULT_LOWPASS
from .errors import ImageTooLarge, ShapeMismatch, StaleAux

ALPHA_CAP = 0.99
SKIP_THRESHOLD = 1.0 / 255.0
STOP_TRANSMITTANCE = 1e-4
CUTOFF_Q = 9.0  # 3-sigma influence truncation, squared Mahalanobis distance
DEFAULT_TILE_SIZE = 16
DEFAULT_PIXEL_BUDGET = 1 << 26


@dataclass
class FeatureMap:
    """Blended attribute buffer plus per-pixel opacity diagnostics."""

    data: np.ndarray           # (H,W,K)
    alpha: np.ndarray          # (H,W) accumulated opacity = 1 - terminal transmittance
    contrib_count: np.ndarray  # (H,W) number of Gaussians actually blended


@dataclass
class PreparedView:
    """Projection, culling, binning and depth order for one camera.

    Shared by every blend pass over the same geometry; the per-tile index
    lists are sorted by (depth, original index). Pixel centers per tile are
    cached on first use.
    """

    width: int
    height: int
    tile_size: int
    proj: ProjectedGaussians
    tiles_x: int
    tiles_y: int
    tile_indices: list  # row-major list of int arrays (sorted by depth)
    order: np.ndarray   # global (depth, index) sort of the valid Gaussians
    tile_pixels: list | None = None

    def tile_bounds(self, tx: int, ty: int) -> tuple[int, int, int, int]:
        ts = self.tile_size
        return (tx * ts, ty * ts,
                min((tx + 1) * ts, self.width), min((ty + 1) * ts, self.height))

    def pixels_for(self, tile_index: int, tx: int, ty: int, dtype) -> np.ndarray:
        if self.tile_pixels is None:
            self.tile_pixels = [None] * (self.tiles_x * self.tiles_y)
        cached = self.tile_pixels[tile_index]
        if cached is None or cached.dtype != dtype:
            px0, py0, px1, py1 = self.tile_bounds(tx, ty)
            cached = _tile_pixel_centers(px0, py0, px1, py1, np.dtype(dtype))
            self.tile_pixels[tile_index] = cached
        return cached


@dataclass
class RasterAux:
    """Everything needed to replay one blend pass in reverse.

    The per-tile blend weights (alpha_hat, Gaussian falloff, pixel offsets,
    clamp masks) are cached rather than recomputed: exactness and speed over
    footprint at desk scale.
    """

    prep: PreparedView
    opacities: np.ndarray      # (N,) values used by this pass
    attrs: np.ndarray          # (N,K)
    transmittance: np.ndarray  # (H,W) terminal T per pixel
    n_processed: list          # per tile: (P,) count of sorted Gaussians consumed per pixel
    tile_cache: list           # per tile: (alpha_hat, gauss, diff, clamped) or None


def tile_grid(width: int, height: int, tile_size: int) -> tuple[int, int]:
    return (width + tile_size - 1) // tile_size, (height + tile_size - 1) // tile_size


def tile_bin(proj: ProjectedGaussians, width: int, height: int,
             tile_size: int) -> tuple[list, np.ndarray, int, int]:
    """Assign each valid Gaussian to every tile its 3-sigma AABB overlaps.

    Returns (tile_lists, order, tiles_x, tiles_y). Gaussians are first put
    in global (depth, index) order so each tile list is already depth
    sorted and independent of the input ordering.
    """
    tiles_x, tiles_y = tile_grid(width, height, tile_size)
    valid_idx = np.nonzero(proj.valid)[0]
    order = valid_idx[np.lexsort((valid_idx, proj.depth[valid_idx]))]

    tiles: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    mean2d = proj.mean2d
    half = proj.bbox_half
    for g in order:
        x0 = int(np.floor((mean2d[g, 0] - half[g, 0]) / tile_size))
        x1 = int(np.floor((mean2d[g, 0] + half[g, 0]) / tile_size))
        y0 = int(np.floor((mean2d[g, 1] - half[g, 1]) / tile_size))
        y1 = int(np.floor((mean2d[g, 1] + half[g, 1]) / tile_size))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tiles_x - 1)
        y1 = min(y1, tiles_y - 1)
        for ty in range(y0, y1 + 1):
            row = ty * tiles_x
            for tx in range(x0, x1 + 1):
                tiles[row + tx].append(int(g))
    tile_lists = [np.asarray(t, dtype=np.int64) for t in tiles]
    return tile_lists, order, tiles_x, tiles_y


def prepare_view(positions: np.ndarray, covariances: np.ndarray, camera: Camera,
                 tile_size: int = DEFAULT_TILE_SIZE,
                 lowpass: float = DEFAULT_LOWPASS) -> PreparedView:
    proj = project_gaussians(positions, covariances, camera,
                             lowpass=lowpass, cull_margin=float(tile_size))
    tile_lists, order, tiles_x, tiles_y = tile_bin(proj, camera.width, camera.height, tile_size)
    return PreparedView(width=camera.width, height=camera.height, tile_size=tile_size,
                        proj=proj, tiles_x=tiles_x, tiles_y=tiles_y,
                        tile_indices=tile_lists, order=order)


def _tile_pixel_centers(px0: int, py0: int, px1: int, py1: int, dtype) -> np.ndarray:
    """Pixel centers of a tile as a (P,2) array, row-major (y outer, x inner)."""
    xs = np.arange(px0, px1, dtype=dtype) + dtype.type(0.5)
    ys = np.arange(py0, py1, dtype=dtype) + dtype.type(0.5)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _tile_alpha_hats(prep: PreparedView, idx: np.ndarray, opacities: np.ndarray,
                     pix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per (gaussian, pixel) blend weights for one tile.

    Returns (alpha_hat, gauss_weight, diff, skip_or_cap_mask) where
    alpha_hat already has skipped entries zeroed and capped entries clamped.
    """
    mean = prep.proj.mean2d[idx]            # (G,2)
    conic = prep.proj.conic[idx]            # (G,2,2)
    d = pix[None, :, :] - mean[:, None, :]  # (G,P,2)
    # quadratic form d^T conic d
    q = (conic[:, None, 0, 0] * d[:, :, 0] * d[:, :, 0]
         + (conic[:, None, 0, 1] + conic[:, None, 1, 0]) * d[:, :, 0] * d[:, :, 1]
         + conic[:, None, 1, 1] * d[:, :, 1] * d[:, :, 1])
    g = np.exp(-0.5 * q)
    raw = opacities[idx][:, None] * g
    capped = raw > ALPHA_CAP
    skipped = (raw < SKIP_THRESHOLD) | (q > CUTOFF_Q)
    alpha_hat = np.where(capped, ALPHA_CAP, raw)
    alpha_hat = np.where(skipped, 0.0, alpha_hat)
    return alpha_hat, g, d, (capped | skipped)


def _blend_tile(alpha_hat: np.ndarray, attrs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Front-to-back compositing for one tile.

    alpha_hat: (G,P) sorted front-to-back; attrs: (G,K).
    Returns (out (P,K), T_final (P,), n_processed (P,), T_before (G,P), active (G,P)).
    """
    G, P = alpha_hat.shape
    one_minus = 1.0 - alpha_hat
    cum = np.cumprod(one_minus, axis=0)            # T after blending row i
    T_before = np.empty_like(cum)
    T_before[0] = 1.0
    T_before[1:] = cum[:-1]
    below = cum < STOP_TRANSMITTANCE
    stopped = below.any(axis=0)
    # first row whose post-blend transmittance would drop below the floor;
    # that row and everything behind it is not blended
    stop_row = np.where(stopped, np.argmax(below, axis=0), G)
    active = np.arange(G)[:, None] < stop_row[None, :]
    w = alpha_hat * T_before * active
    out = np.einsum("gp,gk->pk", w, attrs)
    T_final = np.where(stopped, T_before[np.minimum(stop_row, G - 1), np.arange(P)], cum[-1])
    n_processed = stop_row
    return out, T_final, n_processed, T_before, active


def rasterize_projected(prep: PreparedView, opacities: np.ndarray, attrs: np.ndarray,
                        pixel_budget: int = DEFAULT_PIXEL_BUDGET) -> tuple[FeatureMap, RasterAux]:
    """Blend one attribute set over an already prepared view."""
    n = prep.proj.mean2d.shape[0]
    if opacities.shape != (n,):
        raise ShapeMismatch(f"opacities must be ({n},), got {opacities.shape}")
    if attrs.ndim != 2 or attrs.shape[0] != n:
        raise ShapeMismatch(f"attrs must be ({n},K), got {attrs.shape}")
    k = attrs.shape[1]
    h, w = prep.height, prep.width
    if h * w * k > pixel_budget:
        raise ImageTooLarge(f"{h}x{w}x{k} exceeds pixel budget {pixel_budget}")

    dtype = attrs.dtype
    data = np.zeros((h, w, k), dtype=dtype)
    transmittance = np.ones((h, w), dtype=dtype)
    contrib = np.zeros((h, w), dtype=np.int32)
    n_processed: list = []
    tile_cache: list = []

    for tyi in range(prep.tiles_y):
        for txi in range(prep.tiles_x):
            tile_i = tyi * prep.tiles_x + txi
            idx = prep.tile_indices[tile_i]
            px0, py0, px1, py1 = prep.tile_bounds(txi, tyi)
            if idx.size == 0:
                n_processed.append(np.zeros((px1 - px0) * (py1 - py0), dtype=np.int64))
                tile_cache.append(None)
                continue
            pix = prep.pixels_for(tile_i, txi, tyi, dtype)
            alpha_hat, gval, diff, clamped = _tile_alpha_hats(prep, idx, opacities, pix)
            out, T_final, nproc, T_before, active = _blend_tile(alpha_hat, attrs[idx])
            th, tw = py1 - py0, px1 - px0
            data[py0:py1, px0:px1, :] = out.reshape(th, tw, k)
            transmittance[py0:py1, px0:px1] = T_final.reshape(th, tw)
            contrib[py0:py1, px0:px1] = ((alpha_hat > 0) & active).sum(axis=0).reshape(th, tw)
            n_processed.append(nproc)
            tile_cache.append((alpha_hat, gval, diff, clamped))

    fmap = FeatureMap(data=data, alpha=1.0 - transmittance, contrib_count=contrib)
    aux = RasterAux(prep=prep, opacities=opacities, attrs=attrs,
                    transmittance=transmittance, n_processed=n_processed,
                    tile_cache=tile_cache)
    return fmap, aux


def rasterize(positions: np.ndarray, covariances: np.ndarray, opacities: np.ndarray,
              attrs: np.ndarray, camera: Camera, tile_size: int = DEFAULT_TILE_SIZE,
              lowpass: float = DEFAULT_LOWPASS,
              pixel_budget: int = DEFAULT_PIXEL_BUDGET) -> tuple[FeatureMap, RasterAux]:
    """Project, bin, depth-sort and blend in one call."""
    prep = prepare_view(positions, covariances, camera, tile_size=tile_size, lowpass=lowpass)
    return rasterize_projected(prep, opacities, attrs, pixel_budget=pixel_budget)


@dataclass
class RasterGrads:
    d_attrs: np.ndarray    # (N,K)
    d_opacity: np.ndarray  # (N,)
    d_mean2d: np.ndarray   # (N,2)
    d_cov2d: np.ndarray    # (N,2,2)


def rasterize_backward(aux: RasterAux, d_data: np.ndarray,
                       d_alpha: np.ndarray | None = None) -> RasterGrads:
    """Exact reverse-mode gradients of the blended output.

    d_data is dL/dFeatureMap.data; d_alpha (optional) is dL/dFeatureMap.alpha.
    Gradients flow through each blend weight into the opacity and, via the
    exponential falloff, into mean2d and cov2d. Capped and skipped Gaussians
    contribute zero parameter gradient, matching the forward clamps.
    """
    prep = aux.prep
    n, k = aux.attrs.shape
    h, w = prep.height, prep.width
    if d_data.shape != (h, w, k):
        raise StaleAux(f"d_data shape {d_data.shape} does not match ({h},{w},{k})")
    if d_alpha is not None and d_alpha.shape != (h, w):
        raise StaleAux(f"d_alpha shape {d_alpha.shape} does not match ({h},{w})")

    dtype = aux.attrs.dtype
    d_attrs = np.zeros((n, k), dtype=dtype)
    d_opacity = np.zeros(n, dtype=dtype)
    d_mean2d = np.zeros((n, 2), dtype=dtype)
    d_cov2d = np.zeros((n, 2, 2), dtype=dtype)

    tile_i = 0
    for tyi in range(prep.tiles_y):
        for txi in range(prep.tiles_x):
            idx = prep.tile_indices[tyi * prep.tiles_x + txi]
            px0, py0, px1, py1 = prep.tile_bounds(txi, tyi)
            nproc = aux.n_processed[tile_i]
            cache = aux.tile_cache[tile_i]
            tile_i += 1
            if idx.size == 0:
                continue
            alpha_hat, gval, diff, clamped = cache
            G, P = alpha_hat.shape
            one_minus = 1.0 - alpha_hat
            cum = np.cumprod(one_minus, axis=0)
            T_before = np.empty_like(cum)
            T_before[0] = 1.0
            T_before[1:] = cum[:-1]
            active = np.arange(G)[:, None] < nproc[None, :]

            up = d_data[py0:py1, px0:px1, :].reshape(P, k)
            a_t = aux.attrs[idx]
            # c[g,p] = sum_k attrs[g,k] * upstream[p,k]
            c = a_t @ up.T
            wgt = alpha_hat * T_before * active
            d_attrs_tile = np.einsum("gp,pk->gk", wgt, up)

            # d out / d alpha_hat_g = a_g T_g - (suffix blended sum)/(1-alpha_hat_g)
            wc = c * wgt
            suffix = np.flip(np.cumsum(np.flip(wc, axis=0), axis=0), axis=0) - wc
            d_alpha_hat = (c * T_before - suffix / one_minus) * active

            if d_alpha is not None:
                # alpha map = 1 - T_final, T_final = prod over active rows
                up_a = d_alpha[py0:py1, px0:px1].reshape(P)
                T_final = aux.transmittance[py0:py1, px0:px1].reshape(P)
                d_alpha_hat += (up_a * T_final)[None, :] / one_minus * active

            live = active & ~clamped
            d_raw = np.where(live, d_alpha_hat, 0.0)
            d_opacity_tile = np.einsum("gp,gp->g", d_raw, gval)
            dg = d_raw * aux.opacities[idx][:, None]
            dq = dg * (-0.5) * gval

            conic = prep.proj.conic[idx]
            # q = d^T conic d  =>  dq/dd = (conic + conic^T) d, dq/dconic = d d^T
            cd0 = (conic[:, None, 0, 0] + conic[:, None, 0, 0]) * diff[:, :, 0] \
                + (conic[:, None, 0, 1] + conic[:, None, 1, 0]) * diff[:, :, 1]
            cd1 = (conic[:, None, 1, 1] + conic[:, None, 1, 1]) * diff[:, :, 1] \
                + (conic[:, None, 0, 1] + conic[:, None, 1, 0]) * diff[:, :, 0]
            d_mean_tile = np.stack([
                -np.einsum("gp,gp->g", dq, cd0),
                -np.einsum("gp,gp->g", dq, cd1),
            ], axis=1)
            d_conic_tile = np.empty((G, 2, 2), dtype=dtype)
            d_conic_tile[:, 0, 0] = np.einsum("gp,gp->g", dq, diff[:, :, 0] * diff[:, :, 0])
            d_conic_tile[:, 0, 1] = np.einsum("gp,gp->g", dq, diff[:, :, 0] * diff[:, :, 1])
            d_conic_tile[:, 1, 0] = d_conic_tile[:, 0, 1]
            d_conic_tile[:, 1, 1] = np.einsum("gp,gp->g", dq, diff[:, :, 1] * diff[:, :, 1])
            # conic = inv(cov2d): dL/dcov2d = -conic dL/dconic conic (conic symmetric)
            d_cov_tile = -conic @ d_conic_tile @ conic

            np.add.at(d_attrs, idx, d_attrs_tile)
            np.add.at(d_opacity, idx, d_opacity_tile)
            np.add.at(d_mean2d, idx, d_mean_tile)
            np.add.at(d_cov2d, idx, d_cov_tile)

    return RasterGrads(d_attrs=d_attrs, d_opacity=d_opacity,
                       d_mean2d=d_mean2d, d_cov2d=d_cov2d)


# ---------------------------------------------------------------------------
# brute-force reference path


def blend_forward(attrs: np.ndarray, opacities: np.ndarray, conics: np.ndarray,
                  means2d: np.ndarray, pixel: np.ndarray,
                  early_stop: bool = True) -> tuple[np.ndarray, float, int]:
    """Naive front-to-back compositing at a single pixel.

    Inputs must already be sorted front-to-back. Returns the blended
    K-vector, the terminal transmittance and the number of Gaussians
    consumed (including the one that triggered the stop).
    """
    out = np.zeros(attrs.shape[1], dtype=attrs.dtype)
    T = 1.0
    for i in range(attrs.shape[0]):
        dx = pixel[0] - means2d[i, 0]
        dy = pixel[1] - means2d[i, 1]
        c = conics[i]
        # same association as the tiled path so cap/skip/stop comparisons
        # can never disagree by a rounding ulp
        q = c[0, 0] * dx * dx + (c[0, 1] + c[1, 0]) * dx * dy + c[1, 1] * dy * dy
        if q > CUTOFF_Q:
            continue
        raw = opacities[i] * np.exp(-0.5 * q)
        if raw < SKIP_THRESHOLD:
            continue
        alpha_hat = min(raw, ALPHA_CAP)
        t_next = T * (1.0 - alpha_hat)
        if early_stop and t_next < STOP_TRANSMITTANCE:
            return out, T, i
        out = out + attrs[i] * (alpha_hat * T)
        T = t_next
    return out, T, attrs.shape[0]


def rasterize_reference(positions: np.ndarray, covariances: np.ndarray,
                        opacities: np.ndarray, attrs: np.ndarray, camera: Camera,
                        lowpass: float = DEFAULT_LOWPASS,
                        early_stop: bool = True) -> FeatureMap:
    """Per-pixel oracle renderer: no tiles, every pixel tests every Gaussian.

    Shares only the projection with the tiled path; blending is the plain
    loop in blend_forward.
    """
    proj = project_gaussians(positions, covariances, camera, lowpass=lowpass,
                             cull_margin=float(DEFAULT_TILE_SIZE))
    valid = np.nonzero(proj.valid)[0]
    order = valid[np.lexsort((valid, proj.depth[valid]))]
    h, w, k = camera.height, camera.width, attrs.shape[1]
    data = np.zeros((h, w, k), dtype=attrs.dtype)
    alpha = np.zeros((h, w), dtype=attrs.dtype)
    contrib = np.zeros((h, w), dtype=np.int32)
    so = attrs[order]
    oo = opacities[order]
    co = proj.conic[order]
    mo = proj.mean2d[order]
    for py in range(h):
        for px in range(w):
            pixel = np.array([px + 0.5, py + 0.5], dtype=attrs.dtype)
            out, T, _ = blend_forward(so, oo, co, mo, pixel, early_stop=early_stop)
            data[py, px] = out
            alpha[py, px] = 1.0 - T
    return FeatureMap(data=data, alpha=alpha, contrib_count=contrib)
