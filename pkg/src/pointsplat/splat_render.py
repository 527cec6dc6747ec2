"""Differentiable tile-based Gaussian rasterizer with analytic backward pass.

Forward pipeline per view:
  1. project every 3D Gaussian to screen space with the local affine
     (EWA) approximation of the perspective map,
  2. bin projected Gaussians into 16x16 pixel tiles by their 3-sigma
     axis-aligned screen bounds, sort each tile front to back,
  3. alpha-composite per pixel, retaining per-contributor alphas for the
     backward pass.

A Gaussian contributes to a pixel only when the pixel center lies inside
the Gaussian's 3-sigma bounding box; both the tiled renderer and the
brute-force reference apply this rule, so tiling is purely an
acceleration.  Compositing walks contributors front to back, skips alphas
below 1/255, and stops after the contributor that drives transmittance
below 1e-4 (that contributor is still included).

The backward pass treats the depth sort and tile binning as locally
constant and returns gradients in raw parameter space: d(mu),
d(quaternion) (pre-normalization), d(log scale), d(opacity logit), d(SH).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .camera import RgbdFrame
from .gaussian import (
    SCALE_MAX,
    SCALE_MIN,
    GaussianSet,
    build_covariance,
    eval_sh_backward,
    eval_sh_raw,
)
from .linalg import (
    quat_normalize_backward,
    quat_rotation_jacobian,
    quat_to_rotation,
    sym2_inverse,
)

TILE_SIZE = 16
LOW_PASS = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_STOP = 1e-4
NEAR_PLANE = 0.01  # metres
RADIUS_SIGMAS = 3.0


@dataclass(frozen=True)
class RenderOptions:
    """Rendering controls.

    `alpha_skip` and `use_support_box` exist for the finite-difference
    gradient harness, which needs a renderer without jump discontinuities;
    production rendering keeps the defaults (skip below 1/255, evaluate
    only inside the 3-sigma bounding box).
    """

    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_size: int = TILE_SIZE
    dtype: type = np.float64
    render_depth: bool = False
    threads: int = 1
    alpha_skip: float = ALPHA_SKIP
    use_support_box: bool = True


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians surviving the frustum and bounds culls.

    Struct-of-arrays over the M survivors; `source_index` maps each row
    back into the originating GaussianSet.  Camera-space centers, the
    projection Jacobians and the 3D covariances are retained for the
    backward pass.
    """

    mu2d: np.ndarray  # (M, 2) pixels
    cov2d: np.ndarray  # (M, 2, 2) pixels^2, low-pass included
    inv_cov2d: np.ndarray  # (M, 2, 2)
    depth: np.ndarray  # (M,) camera-space z, metres
    rgb: np.ndarray  # (M, 3) clamped SH color
    opacity: np.ndarray  # (M,)
    radius: np.ndarray  # (M,) pixels, 3 * sqrt(max eigenvalue)
    source_index: np.ndarray  # (M,) int
    t_cam: np.ndarray  # (M, 3)
    jacobian: np.ndarray  # (M, 2, 3)
    cov3d: np.ndarray  # (M, 3, 3)
    view_dir: np.ndarray  # (M, 3) unit, world frame
    view_dist: np.ndarray  # (M,)
    rgb_pre_clamp: np.ndarray  # (M, 3)

    def __len__(self) -> int:
        return len(self.mu2d)


@dataclass
class RenderGrads:
    """Loss gradients in raw Gaussian parameter space."""

    d_mu: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4) w.r.t. the unnormalized quaternion
    d_log_scale: np.ndarray  # (N, 3)
    d_opacity_logit: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, B, 3)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W) final per-pixel transmittance
    depth: np.ndarray | None
    proj: ProjectedGaussians
    tile_contributors: list  # per tile: (K_t,) indices into proj
    tile_alphas: list  # per tile: (P_t, K_t) effective alphas (0 = excluded)
    tile_rects: list  # per tile: (x0, y0, x1, y1) pixel bounds
    n_gaussians: int
    options: RenderOptions

    def pixel_contributors(self, col: int, row: int):
        """Front-to-back traversal record of one pixel.

        Returns (source_indices, alphas, transmittances) where
        transmittances[i] is the accumulated transmittance in front of
        contributor i.  Skipped and stopped contributors are omitted.
        """
        h, w = self.transmittance.shape
        ts = self.options.tile_size
        ntx = (w + ts - 1) // ts
        tile = (row // ts) * ntx + (col // ts)
        x0, y0, x1, _ = self.tile_rects[tile]
        alphas = self.tile_alphas[tile]
        if alphas.shape[1] == 0:
            return (np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))
        p = (row - y0) * (x1 - x0) + (col - x0)
        row_alpha = alphas[p].astype(np.float64)
        trans = np.concatenate([[1.0], np.cumprod(1.0 - row_alpha)[:-1]])
        included = row_alpha > 0
        sources = self.proj.source_index[self.tile_contributors[tile]]
        return sources[included], row_alpha[included], trans[included]


def _check_finite(gaussians: GaussianSet):
    if len(gaussians) == 0:
        return
    fields = (
        gaussians.mu,
        gaussians.rotation,
        gaussians.scale,
        gaussians.opacity,
        gaussians.sh_coeffs,
    )
    bad = np.zeros(len(gaussians), dtype=bool)
    for arr in fields:
        flat = arr.reshape(len(gaussians), -1)
        bad |= ~np.all(np.isfinite(flat), axis=1)
    if np.any(bad):
        idx = int(np.nonzero(bad)[0][0])
        raise ValueError(f"gaussian {idx} has non-finite parameters")


def project_gaussians(gaussians: GaussianSet, frame: RgbdFrame) -> ProjectedGaussians:
    """EWA projection of a Gaussian set into a camera.

    Culls Gaussians with camera-space z <= 0.01 m or whose 3-sigma screen
    bounds miss the image; culling is a normal outcome, not an error.
    """
    _check_finite(gaussians)
    intr = frame.intrinsics
    w_rot = frame.pose.rotation
    n = len(gaussians)
    t_cam = gaussians.mu @ w_rot.T + frame.pose.translation
    keep = t_cam[:, 2] > NEAR_PLANE
    idx = np.nonzero(keep)[0]

    t = t_cam[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z

    jac = np.zeros((len(idx), 2, 3), dtype=np.float64)
    jac[:, 0, 0] = intr.fx * inv_z
    jac[:, 0, 2] = -intr.fx * x * inv_z2
    jac[:, 1, 1] = intr.fy * inv_z
    jac[:, 1, 2] = -intr.fy * y * inv_z2

    cov3d = build_covariance(gaussians.rotation[idx], gaussians.scale[idx])
    m_mat = jac @ w_rot  # (.., 2, 3)
    cov2d = np.einsum("nij,njk,nlk->nil", m_mat, cov3d, m_mat)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    mu2d = np.stack(
        [intr.fx * x * inv_z + intr.cx, intr.fy * y * inv_z + intr.cy], axis=1
    )

    # Largest eigenvalue of the 2x2 covariance gives the screen radius.
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(lam_max)

    on_screen = (
        (mu2d[:, 0] + radius >= 0.0)
        & (mu2d[:, 0] - radius <= intr.width)
        & (mu2d[:, 1] + radius >= 0.0)
        & (mu2d[:, 1] - radius <= intr.height)
    )
    sel = np.nonzero(on_screen)[0]
    idx = idx[sel]

    cam_center = frame.pose.camera_center()
    offset = gaussians.mu[idx] - cam_center
    dist = np.sqrt(np.sum(offset * offset, axis=1))
    view_dir = offset / dist[:, None]
    rgb_pre, _ = eval_sh_raw(gaussians.sh_coeffs[idx], view_dir, gaussians.degree)
    rgb = np.clip(rgb_pre, 0.0, 1.0)

    return ProjectedGaussians(
        mu2d=mu2d[sel],
        cov2d=cov2d[sel],
        inv_cov2d=sym2_inverse(cov2d[sel]),
        depth=t_cam[idx, 2],
        rgb=rgb,
        opacity=gaussians.opacity[idx],
        radius=radius[sel],
        source_index=idx,
        t_cam=t_cam[idx],
        jacobian=jac[sel],
        cov3d=cov3d[sel],
        view_dir=view_dir,
        view_dist=dist,
        rgb_pre_clamp=rgb_pre,
    )


def project_gaussian(gaussians: GaussianSet, index: int, frame: RgbdFrame):
    """Project a single Gaussian; returns None when it is culled."""
    single = GaussianSet(
        mu=gaussians.mu[index : index + 1],
        rotation=gaussians.rotation[index : index + 1],
        scale=gaussians.scale[index : index + 1],
        opacity=gaussians.opacity[index : index + 1],
        sh_coeffs=gaussians.sh_coeffs[index : index + 1],
        anchor_point_index=gaussians.anchor_point_index[index : index + 1],
        raw_rotation=gaussians.raw_rotation[index : index + 1],
        log_scale=gaussians.log_scale[index : index + 1],
        opacity_logit=gaussians.opacity_logit[index : index + 1],
    )
    proj = project_gaussians(single, frame)
    return proj if len(proj) else None


def bin_and_sort(proj: ProjectedGaussians, width: int, height: int,
                 tile_size: int = TILE_SIZE,
                 unlimited: bool = False) -> list[np.ndarray]:
    """Assign projected Gaussians to tiles and depth-sort each tile list.

    A Gaussian enters every tile its 3-sigma bounding box overlaps (closed
    interval overlap); with `unlimited` it enters every tile.  Tile lists
    are sorted by ascending depth with ties broken by ascending source
    index; tiles are returned in row-major order.
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    n_tiles = ntx * nty
    m = len(proj)
    if m == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(n_tiles)]

    radius = proj.radius if not unlimited else np.full(m, width + height + 1.0)
    tx0 = np.clip(np.floor((proj.mu2d[:, 0] - radius) / tile_size), 0, ntx - 1)
    tx1 = np.clip(np.floor((proj.mu2d[:, 0] + radius) / tile_size), 0, ntx - 1)
    ty0 = np.clip(np.floor((proj.mu2d[:, 1] - radius) / tile_size), 0, nty - 1)
    ty1 = np.clip(np.floor((proj.mu2d[:, 1] + radius) / tile_size), 0, nty - 1)
    tx0, tx1 = tx0.astype(np.int64), tx1.astype(np.int64)
    ty0, ty1 = ty0.astype(np.int64), ty1.astype(np.int64)

    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    count = nx * ny
    total = int(count.sum())
    g_idx = np.repeat(np.arange(m), count)
    starts = np.cumsum(count) - count
    offs = np.arange(total) - np.repeat(starts, count)
    nx_rep = np.repeat(nx, count)
    tx = np.repeat(tx0, count) + offs % nx_rep
    ty = np.repeat(ty0, count) + offs // nx_rep
    tile_id = ty * ntx + tx

    # One global sort by (tile, depth, source index) makes per-tile lists
    # contiguous and already front-to-back ordered.
    order = np.lexsort(
        (proj.source_index[g_idx], proj.depth[g_idx], tile_id)
    )
    g_sorted = g_idx[order]
    tile_sorted = tile_id[order]
    bounds = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    return [g_sorted[bounds[t] : bounds[t + 1]] for t in range(n_tiles)]


def _tile_rects(width, height, tile_size):
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    rects = []
    for ty in range(nty):
        for tx in range(ntx):
            rects.append(
                (
                    tx * tile_size,
                    ty * tile_size,
                    min(width, (tx + 1) * tile_size),
                    min(height, (ty + 1) * tile_size),
                )
            )
    return rects


def _tile_alphas(rect, contrib, proj, dtype, alpha_skip=ALPHA_SKIP,
                 use_support_box=True):
    """Effective per-(pixel, contributor) alphas for one tile.

    Applies the 3-sigma box support rule, the 0.99 alpha clamp, the skip
    threshold and the 1e-4 transmittance stop.  Excluded entries are
    exactly zero.  Shape (P, K) with pixels flattened row-major.
    """
    x0, y0, x1, y1 = rect
    u = np.arange(x0, x1, dtype=dtype) + dtype(0.5)
    v = np.arange(y0, y1, dtype=dtype) + dtype(0.5)
    uu, vv = np.meshgrid(u, v)
    px = uu.reshape(-1)
    py = vv.reshape(-1)

    mu = proj.mu2d[contrib].astype(dtype)
    inv_cov = proj.inv_cov2d[contrib].astype(dtype)
    radius = proj.radius[contrib].astype(dtype)
    opacity = proj.opacity[contrib].astype(dtype)

    dx = px[:, None] - mu[None, :, 0]
    dy = py[:, None] - mu[None, :, 1]
    power = (
        -0.5 * (inv_cov[None, :, 0, 0] * dx * dx + inv_cov[None, :, 1, 1] * dy * dy)
        - inv_cov[None, :, 0, 1] * dx * dy
    )
    alpha = np.minimum(dtype(ALPHA_CLAMP), opacity[None, :] * np.exp(power))
    if use_support_box:
        support = (np.abs(dx) <= radius[None, :]) & (np.abs(dy) <= radius[None, :])
        alpha = np.where(support, alpha, dtype(0.0))
    if alpha_skip > 0.0:
        alpha[alpha < alpha_skip] = 0.0

    # Transmittance stop: the triggering contributor is included, later
    # ones are dropped.  Prefix products before the trigger are unchanged
    # by the zeroing, so one recompute suffices.
    trans_after = np.cumprod(1.0 - alpha, axis=1)
    stopped = (alpha > 0) & (trans_after < TRANSMITTANCE_STOP)
    after_stop = (np.cumsum(stopped, axis=1) - stopped) > 0
    alpha[after_stop] = 0.0
    return alpha


def _composite_tile(rect, contrib, proj, background, opts):
    dtype = opts.dtype
    want_depth = opts.render_depth
    x0, y0, x1, y1 = rect
    n_px = (x1 - x0) * (y1 - y0)
    if len(contrib) == 0:
        block = np.broadcast_to(background, (n_px, 3)).astype(dtype)
        trans = np.ones(n_px, dtype=dtype)
        depth_block = np.zeros(n_px, dtype=dtype) if want_depth else None
        return block.copy(), trans, depth_block, np.zeros((n_px, 0), dtype=dtype)

    alpha = _tile_alphas(rect, contrib, proj, dtype, opts.alpha_skip,
                         opts.use_support_box)
    trans_before = np.cumprod(1.0 - alpha, axis=1)
    trans_final = trans_before[:, -1].copy()
    trans_before = np.concatenate(
        [np.ones((alpha.shape[0], 1), dtype=dtype), trans_before[:, :-1]], axis=1
    )
    weights = alpha * trans_before
    rgb = proj.rgb[contrib].astype(dtype)
    block = weights @ rgb + background.astype(dtype) * trans_final[:, None]
    depth_block = None
    if want_depth:
        depth_block = weights @ proj.depth[contrib].astype(dtype)
    return block, trans_final, depth_block, alpha


def rasterize_forward(gaussians: GaussianSet, frame: RgbdFrame,
                      options: RenderOptions | None = None) -> RenderOutput:
    """Render a Gaussian set into the frame's camera, tile by tile.

    Per-contributor alphas are retained so rasterize_backward can replay
    the traversal; pass options.render_depth=True to also composite
    camera-space depth.
    """
    opts = options or RenderOptions()
    dtype = opts.dtype
    intr = frame.intrinsics
    w, h = intr.width, intr.height
    background = np.asarray(opts.background, dtype=np.float64)

    proj = project_gaussians(gaussians, frame)
    tiles = bin_and_sort(proj, w, h, opts.tile_size,
                         unlimited=not opts.use_support_box)
    rects = _tile_rects(w, h, opts.tile_size)

    def run_tile(i):
        return _composite_tile(rects[i], tiles[i], proj, background, opts)

    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(run_tile, range(len(rects))))
    else:
        results = [run_tile(i) for i in range(len(rects))]

    image = np.zeros((h, w, 3), dtype=dtype)
    transmittance = np.ones((h, w), dtype=dtype)
    depth = np.zeros((h, w), dtype=dtype) if opts.render_depth else None
    tile_alpha_store = []
    for rect, (block, trans, depth_block, alpha) in zip(rects, results):
        x0, y0, x1, y1 = rect
        shape = (y1 - y0, x1 - x0)
        image[y0:y1, x0:x1] = block.reshape(shape + (3,))
        transmittance[y0:y1, x0:x1] = trans.reshape(shape)
        if depth is not None:
            depth[y0:y1, x0:x1] = depth_block.reshape(shape)
        tile_alpha_store.append(alpha)

    return RenderOutput(
        image=image,
        transmittance=transmittance,
        depth=depth,
        proj=proj,
        tile_contributors=tiles,
        tile_alphas=tile_alpha_store,
        tile_rects=rects,
        n_gaussians=len(gaussians),
        options=opts,
    )


def render_depth(gaussians: GaussianSet, frame: RgbdFrame,
                 options: RenderOptions | None = None) -> np.ndarray:
    """Composite camera-space depth with the color traversal rules."""
    opts = options or RenderOptions()
    if not opts.render_depth:
        opts = replace(opts, render_depth=True)
    return rasterize_forward(gaussians, frame, opts).depth


def composite_pixel(colors, alphas, background, depths=None,
                    skip: float = ALPHA_SKIP, stop: float = TRANSMITTANCE_STOP):
    """Sequential front-to-back compositing of one pixel.

    Contributors arrive pre-sorted with their final alpha values; entries
    below `skip` are passed over, and traversal ends once transmittance
    falls below `stop` (the contributor that crossed the line is kept).
    Returns (rgb, final transmittance, composited depth or None).
    """
    colors = np.asarray(colors, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    out = np.zeros(3)
    depth_out = 0.0
    trans = 1.0
    for i in range(len(alphas)):
        a = alphas[i]
        if a < skip:
            continue
        out += colors[i] * (a * trans)
        if depths is not None:
            depth_out += depths[i] * (a * trans)
        trans *= 1.0 - a
        if trans < stop:
            break
    out += np.asarray(background, dtype=np.float64) * trans
    return out, trans, (depth_out if depths is not None else None)


def render_reference(gaussians: GaussianSet, frame: RgbdFrame,
                     options: RenderOptions | None = None):
    """Brute-force renderer: per-pixel evaluation over all Gaussians.

    Globally depth-sorts the projected set and composites every pixel
    sequentially with composite_pixel -- no tiling.  Serves as the oracle
    for rasterize_forward.  Returns (image, depth) where depth is None
    unless options.render_depth is set.
    """
    opts = options or RenderOptions()
    intr = frame.intrinsics
    w, h = intr.width, intr.height
    background = np.asarray(opts.background, dtype=np.float64)

    proj = project_gaussians(gaussians, frame)
    order = np.lexsort((proj.source_index, proj.depth))
    mu = proj.mu2d[order]
    inv_cov = proj.inv_cov2d[order]
    radius = proj.radius[order]
    opacity = proj.opacity[order]
    rgb = proj.rgb[order]
    z = proj.depth[order]

    image = np.empty((h, w, 3), dtype=np.float64)
    depth_map = np.zeros((h, w), dtype=np.float64) if opts.render_depth else None
    for row in range(h):
        py = row + 0.5
        for col in range(w):
            px = col + 0.5
            dx = px - mu[:, 0]
            dy = py - mu[:, 1]
            power = (
                -0.5 * (inv_cov[:, 0, 0] * dx * dx + inv_cov[:, 1, 1] * dy * dy)
                - inv_cov[:, 0, 1] * dx * dy
            )
            alpha = np.minimum(ALPHA_CLAMP, opacity * np.exp(power))
            if opts.use_support_box:
                support = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
                alpha = np.where(support, alpha, 0.0)
            cand = np.nonzero(alpha >= max(opts.alpha_skip, 1e-300))[0]
            pixel, _, d_val = composite_pixel(
                rgb[cand],
                alpha[cand],
                background,
                depths=z[cand] if opts.render_depth else None,
                skip=opts.alpha_skip,
            )
            image[row, col] = pixel
            if depth_map is not None:
                depth_map[row, col] = d_val
    return image, depth_map


def _tile_backward(rect, contrib, alpha_store, proj, background,
                   d_image, d_depth):
    """Per-contributor gradients from one tile.

    Returns (g_rgb, g_opacity, g_mu2d, g_cov_inv, g_z) arrays local to the
    tile's contributor list, or None when the tile is empty.
    """
    if len(contrib) == 0:
        return None
    x0, y0, x1, y1 = rect
    alpha = alpha_store.astype(np.float64)
    n_px, k = alpha.shape

    d_c = d_image[y0:y1, x0:x1].reshape(n_px, 3)
    d_d = d_depth[y0:y1, x0:x1].reshape(n_px) if d_depth is not None else None
    if not np.any(d_c) and (d_d is None or not np.any(d_d)):
        return None

    trans_after = np.cumprod(1.0 - alpha, axis=1)
    trans_final = trans_after[:, -1]
    trans_before = np.concatenate(
        [np.ones((n_px, 1)), trans_after[:, :-1]], axis=1
    )
    weights = alpha * trans_before  # (P, K)
    included = alpha > 0.0

    rgb = proj.rgb[contrib]
    z = proj.depth[contrib]
    opacity = proj.opacity[contrib]
    mu = proj.mu2d[contrib]
    inv_cov = proj.inv_cov2d[contrib]

    # Recompute the smooth quantities the stored alphas came from.
    u = np.arange(x0, x1, dtype=np.float64) + 0.5
    v = np.arange(y0, y1, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    dx = uu.reshape(-1)[:, None] - mu[None, :, 0]
    dy = vv.reshape(-1)[:, None] - mu[None, :, 1]
    power = (
        -0.5 * (inv_cov[None, :, 0, 0] * dx * dx + inv_cov[None, :, 1, 1] * dy * dy)
        - inv_cov[None, :, 0, 1] * dx * dy
    )
    gval = np.exp(power)
    clamped = (opacity[None, :] * gval >= ALPHA_CLAMP) & included

    # dL/d(rgb_k) and dL/d(z_k): direct weight terms.
    g_rgb = weights.T @ d_c
    g_z = weights.T @ d_d if d_d is not None else np.zeros(k)

    # dL/d(alpha_k): own contribution minus everything it occludes, with
    # color always dotted against the upstream gradient first so only
    # (P, K) intermediates appear:
    #   dL/da_k = e_k T_k - rho_k / (1 - a_k)
    # where e_k = d_c . rgb_k and rho_k = d_c . (suffix colors + bg T_fin).
    e = d_c @ rgb.T  # (P, K)
    ew = e * weights
    prefix = np.cumsum(ew, axis=1)
    total = prefix[:, -1] + (d_c @ background) * trans_final
    safe = 1.0 - alpha + (~included)
    g_alpha = e * trans_before - (total[:, None] - prefix) / safe
    if d_d is not None:
        e_d = d_d[:, None] * z[None, :]
        ewd = e_d * weights
        prefix_d = np.cumsum(ewd, axis=1)
        g_alpha += e_d * trans_before - (
            prefix_d[:, -1][:, None] - prefix_d
        ) / safe
    g_alpha = np.where(included & ~clamped, g_alpha, 0.0)

    # alpha = o * g  ->  opacity and Gaussian-value chains.
    g_opacity = np.einsum("pk,pk->k", g_alpha, gval)
    g_power = g_alpha * opacity[None, :] * gval

    # power = -0.5 d^T A d with d = pixel - mu2d.
    ad_x = inv_cov[None, :, 0, 0] * dx + inv_cov[None, :, 0, 1] * dy
    ad_y = inv_cov[None, :, 0, 1] * dx + inv_cov[None, :, 1, 1] * dy
    g_mu2d = np.stack(
        [
            np.einsum("pk,pk->k", g_power, ad_x),
            np.einsum("pk,pk->k", g_power, ad_y),
        ],
        axis=1,
    )
    g_cov_inv = np.empty((k, 2, 2))
    g_cov_inv[:, 0, 0] = np.einsum("pk,pk->k", g_power, -0.5 * dx * dx)
    g_cov_inv[:, 1, 1] = np.einsum("pk,pk->k", g_power, -0.5 * dy * dy)
    off = np.einsum("pk,pk->k", g_power, -0.5 * dx * dy)
    g_cov_inv[:, 0, 1] = off
    g_cov_inv[:, 1, 0] = off
    return g_rgb, g_opacity, g_mu2d, g_cov_inv, g_z


def rasterize_backward(out: RenderOutput, d_image: np.ndarray,
                       gaussians: GaussianSet, frame: RgbdFrame,
                       d_depth: np.ndarray | None = None) -> RenderGrads:
    """Analytic backward pass of rasterize_forward.

    Chains the loss gradient through compositing, the projected Gaussian,
    the EWA projection and the covariance factorization.  Sort order and
    binning are treated as locally constant; contributors skipped in the
    forward pass receive zero gradient, as do culled Gaussians.
    """
    h, w = out.transmittance.shape
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise ValueError(
            f"upstream gradient shape {d_image.shape} does not match image "
            f"({h}, {w}, 3)"
        )
    if d_depth is not None:
        d_depth = np.asarray(d_depth, dtype=np.float64)
        if d_depth.shape != (h, w):
            raise ValueError("upstream depth gradient shape mismatch")
        if out.depth is None:
            raise ValueError("forward pass did not composite depth")
    if len(gaussians) != out.n_gaussians:
        raise ValueError("gaussian set does not match the forward output")

    proj = out.proj
    m = len(proj)
    background = np.asarray(out.options.background, dtype=np.float64)

    g_rgb = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_mu2d = np.zeros((m, 2))
    g_cov_inv = np.zeros((m, 2, 2))
    g_z = np.zeros(m)

    def run_tile(i):
        return _tile_backward(
            out.tile_rects[i],
            out.tile_contributors[i],
            out.tile_alphas[i],
            proj,
            background,
            d_image,
            d_depth,
        )

    threads = out.options.threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_tile, range(len(out.tile_rects))))
    else:
        results = [run_tile(i) for i in range(len(out.tile_rects))]

    # Deterministic reduction: tiles accumulate in fixed row-major order.
    for i, res in enumerate(results):
        if res is None:
            continue
        t_rgb, t_opa, t_mu, t_cov, t_z = res
        contrib = out.tile_contributors[i]
        np.add.at(g_rgb, contrib, t_rgb)
        np.add.at(g_opacity, contrib, t_opa)
        np.add.at(g_mu2d, contrib, t_mu)
        np.add.at(g_cov_inv, contrib, t_cov)
        np.add.at(g_z, contrib, t_z)

    n = out.n_gaussians
    degree = gaussians.degree
    grads = RenderGrads(
        d_mu=np.zeros((n, 3)),
        d_rotation=np.zeros((n, 4)),
        d_log_scale=np.zeros((n, 3)),
        d_opacity_logit=np.zeros(n),
        d_sh=np.zeros((n, gaussians.sh_coeffs.shape[1], 3)),
    )
    if m == 0:
        return grads

    intr = frame.intrinsics
    w_rot = frame.pose.rotation
    src = proj.source_index

    # A = inv(cov2d): dL/d(cov2d) = -A G A.
    g_cov2d = -np.einsum("nij,njk,nkl->nil", proj.inv_cov2d, g_cov_inv,
                         proj.inv_cov2d)

    # cov2d = M cov3d M^T + low-pass, M = J W.
    m_mat = proj.jacobian @ w_rot
    g_cov3d = np.einsum("nji,njk,nkl->nil", m_mat, g_cov2d, m_mat)
    g_m = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, m_mat, proj.cov3d)
    g_jac = g_m @ w_rot.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    fx, fy = intr.fx, intr.fy

    g_t = np.zeros((m, 3))
    # Jacobian entries J00 = fx/z, J02 = -fx x/z^2, J11 = fy/z, J12 = -fy y/z^2.
    g_t[:, 0] += g_jac[:, 0, 2] * (-fx * inv_z2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-fy * inv_z2)
    g_t[:, 2] += (
        g_jac[:, 0, 0] * (-fx * inv_z2)
        + g_jac[:, 1, 1] * (-fy * inv_z2)
        + g_jac[:, 0, 2] * (2.0 * fx * x * inv_z3)
        + g_jac[:, 1, 2] * (2.0 * fy * y * inv_z3)
    )
    # Screen center mu2d = (fx x / z + cx, fy y / z + cy).
    g_t[:, 0] += g_mu2d[:, 0] * fx * inv_z
    g_t[:, 1] += g_mu2d[:, 1] * fy * inv_z
    g_t[:, 2] += -g_mu2d[:, 0] * fx * x * inv_z2 - g_mu2d[:, 1] * fy * y * inv_z2
    # Composited depth reads t_cam.z directly.
    g_t[:, 2] += g_z

    g_mu_world = g_t @ w_rot

    # SH color: coefficients plus (for degree >= 1) the view direction,
    # which itself depends on the world center.
    d_sh, d_dir = eval_sh_backward(
        gaussians.sh_coeffs[src], proj.view_dir, degree, proj.rgb_pre_clamp, g_rgb
    )
    if degree >= 1:
        dot = np.sum(proj.view_dir * d_dir, axis=1, keepdims=True)
        g_mu_world += (d_dir - proj.view_dir * dot) / proj.view_dist[:, None]

    # cov3d = R diag(s^2) R^T.
    r_mats = quat_to_rotation(gaussians.rotation[src])
    s = gaussians.scale[src]
    s2 = s * s
    g_r = 2.0 * np.einsum("nij,njk,nk->nik", g_cov3d, r_mats, s2)
    rt_g_r = np.einsum("nji,njk,nkl->nil", r_mats, g_cov3d, r_mats)
    g_s = 2.0 * s * np.einsum("nii->ni", rt_g_r)
    not_clamped = (s > SCALE_MIN) & (s < SCALE_MAX)
    g_log_scale = g_s * s * not_clamped

    jac_r = quat_rotation_jacobian(gaussians.rotation[src])
    g_q_unit = np.einsum("ncij,nij->nc", jac_r, g_r)
    g_q_raw = quat_normalize_backward(gaussians.raw_rotation[src], g_q_unit)

    o = proj.opacity
    g_logit = g_opacity * o * (1.0 - o)

    np.add.at(grads.d_mu, src, g_mu_world)
    np.add.at(grads.d_rotation, src, g_q_raw)
    np.add.at(grads.d_log_scale, src, g_log_scale)
    np.add.at(grads.d_opacity_logit, src, g_logit)
    np.add.at(grads.d_sh, src, d_sh)
    return grads
