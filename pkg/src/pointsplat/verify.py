"""Finite-difference gradient harnesses and the overfit harness.

Gradient checks run the renderer in its smooth configuration (skip
threshold and box support disabled) so that central differences are
well-posed; the hard-threshold behaviors carry their own exact unit
tests.  Two discontinuity classes are excluded per the testing contract:
configurations with near-tied depths (handled by construction: scenes are
drawn with a minimum pairwise depth gap) and max-pool argmax tie flips
(detected by comparing pooling winners at the perturbed points and
skipping the affected coordinate).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import encoder as enc
from .camera import back_project, merge_clouds
from .gaussian import SH_C0, from_free_params
from .losses import color_loss, default_perceptual_net, lpips_loss, total_loss
from .splat_render import RenderOptions, rasterize_backward, rasterize_forward
from .synthetic import make_test_frame, make_toy_scene, random_gaussians
from .trainer import OverfitConfig, TrainConfig, overfit_scene, scene_pipeline

FD_STEP = 1e-4
REL_TOL = 1e-3
_REL_FLOOR = 1e-4

SMOOTH_OPTS = RenderOptions(
    render_depth=True, alpha_skip=0.0, use_support_box=False
)


def relative_error(analytic: float, fd: float) -> float:
    denom = max(abs(analytic), abs(fd), _REL_FLOOR)
    return abs(analytic - fd) / denom


@dataclass
class GradReport:
    """Worst relative error per parameter class, plus bookkeeping."""

    max_errors: dict[str, float]
    n_checked: int
    n_excluded: int

    @property
    def worst(self) -> float:
        return max(self.max_errors.values()) if self.max_errors else 0.0


def _central_diff(fn, arr, index, h=FD_STEP):
    orig = arr[index]
    arr[index] = orig + h
    f_plus = fn()
    arr[index] = orig - h
    f_minus = fn()
    arr[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def gradcheck_rasterizer(seed: int = 0, n_scenes: int = 20, n_gaussians: int = 6,
                         width: int = 24, height: int = 24) -> GradReport:
    """Rasterizer backward vs central differences, per parameter class.

    The scalar objective is a fixed random weighting of all output pixels
    plus a weighting of the composited depth map, so every gradient path
    through color, alpha and depth is exercised at once.
    """
    max_err = {k: 0.0 for k in ("mu", "rotation", "log_scale",
                                "opacity_logit", "sh")}
    checked = 0
    for scene_idx in range(n_scenes):
        rng = np.random.default_rng(seed * 7919 + scene_idx)
        frame = make_test_frame(width, height)
        gaussians = random_gaussians(
            rng, n_gaussians, frame, min_depth_gap=5e-3,
            opacity_range=(0.15, 0.85),
        )
        w_img = rng.uniform(-1.0, 1.0, size=(height, width, 3))
        w_depth = rng.uniform(-1.0, 1.0, size=(height, width)) * 0.1

        params = {
            "mu": gaussians.mu.copy(),
            "rotation": gaussians.raw_rotation.copy(),
            "log_scale": gaussians.log_scale.copy(),
            "opacity_logit": gaussians.opacity_logit.copy(),
            "sh": gaussians.sh_coeffs.copy(),
        }

        def loss():
            gset = from_free_params(
                params["mu"], params["rotation"], params["log_scale"],
                params["opacity_logit"], params["sh"],
            )
            out = rasterize_forward(gset, frame, SMOOTH_OPTS)
            return float(np.sum(out.image * w_img) + np.sum(out.depth * w_depth))

        gset = from_free_params(
            params["mu"], params["rotation"], params["log_scale"],
            params["opacity_logit"], params["sh"],
        )
        out = rasterize_forward(gset, frame, SMOOTH_OPTS)
        grads = rasterize_backward(out, w_img, gset, frame, d_depth=w_depth)
        analytic = {
            "mu": grads.d_mu,
            "rotation": grads.d_rotation,
            "log_scale": grads.d_log_scale,
            "opacity_logit": grads.d_opacity_logit,
            "sh": grads.d_sh,
        }
        for name, arr in params.items():
            flat = arr.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                fd = _central_diff(loss, flat, i)
                err = relative_error(a_flat[i], fd)
                max_err[name] = max(max_err[name], err)
                checked += 1
    return GradReport(max_errors=max_err, n_checked=checked, n_excluded=0)


def gradcheck_losses(seed: int = 0, n_configs: int = 20, size: int = 16,
                     n_coords: int = 24) -> GradReport:
    """Color and perceptual loss gradients vs central differences."""
    net = default_perceptual_net()
    max_err = {"color": 0.0, "lpips": 0.0}
    checked = 0
    for cfg_idx in range(n_configs):
        rng = np.random.default_rng(seed * 104729 + cfg_idx)
        i_r = rng.uniform(0.05, 0.95, size=(size, size, 3))
        i_gt = rng.uniform(0.05, 0.95, size=(size, size, 3))

        _, c_grad = color_loss(i_r, i_gt)
        _, l_grad = lpips_loss(i_r, i_gt, net)
        flat = i_r.reshape(-1)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for i in coords:
            fd_c = _central_diff(lambda: color_loss(i_r, i_gt)[0], flat, i)
            fd_l = _central_diff(lambda: lpips_loss(i_r, i_gt, net)[0], flat, i)
            max_err["color"] = max(
                max_err["color"], relative_error(c_grad.reshape(-1)[i], fd_c)
            )
            max_err["lpips"] = max(
                max_err["lpips"], relative_error(l_grad.reshape(-1)[i], fd_l)
            )
            checked += 2
    return GradReport(max_errors=max_err, n_checked=checked, n_excluded=0)


def _depth_separated_subsample(cloud, frames, rng, n_points: int,
                               min_gap: float = 2e-3) -> np.ndarray:
    """Pick cloud indices whose camera depths are pairwise separated in
    every view (keeps FD away from sort discontinuities)."""
    order = rng.permutation(len(cloud))
    depths = [
        cloud.positions @ f.pose.rotation.T[:, 2] + f.pose.translation[2]
        for f in frames
    ]
    chosen: list[int] = []
    for idx in order:
        ok = all(
            all(abs(d[idx] - d[j]) >= min_gap for j in chosen) for d in depths
        )
        if ok:
            chosen.append(int(idx))
            if len(chosen) == n_points:
                break
    return np.array(sorted(chosen), dtype=np.int64)


def make_pipeline_problem(seed: int, n_points_per_view: int = 16,
                          width: int = 24, height: int = 18):
    """Small two-view problem for end-to-end gradient checks.

    Returns (encoder_params, head_params, masked_cloud, frames, targets,
    config).  The head's final layer gets small random values (the
    zero-initialized production head would make all upstream gradients
    vanish identically, which checks nothing).
    """
    rng = np.random.default_rng(seed * 6151 + 17)
    scene = make_toy_scene(seed=seed, width=width, height=height, n_frames=6)
    frames = [scene.frame(0), scene.frame(5)]
    clouds = [back_project(f, i) for i, f in enumerate(frames)]

    picked = []
    for cloud in clouds:
        idx = _depth_separated_subsample(cloud, frames, rng, n_points_per_view)
        picked.append(cloud.subset(idx))
    merged = merge_clouds(picked)

    config = TrainConfig(image_width=width, image_height=height)
    encoder_params = enc.init_encoder_params(rng)
    head_params = enc.init_head_params(rng, k=config.k,
                                       sh_degree=config.sh_degree)
    head_params["mlp.1.w"] = rng.normal(0.0, 0.02, head_params["mlp.1.w"].shape)
    head_params["mlp.1.b"] = rng.normal(0.0, 0.01, head_params["mlp.1.b"].shape)
    targets = [f.color for f in frames]
    return encoder_params, head_params, merged, frames, targets, config


def gradcheck_pipeline(seed: int = 0, n_configs: int = 20,
                       coords_per_tensor: int = 3) -> GradReport:
    """encoder + fusion + head backward vs central differences through the
    full chain (encode -> fuse -> predict -> render -> loss)."""
    net = default_perceptual_net()
    max_err: dict[str, float] = {}
    checked = 0
    excluded = 0
    for cfg_idx in range(n_configs):
        rng = np.random.default_rng(seed * 31337 + cfg_idx)
        (encoder_params, head_params, cloud, frames, targets,
         config) = make_pipeline_problem(seed * 1009 + cfg_idx)

        def run(want_grads: bool):
            return scene_pipeline(
                encoder_params, head_params, cloud, frames, targets, config,
                net, want_grads=want_grads, render_options=SMOOTH_OPTS,
            )

        base = run(want_grads=True)
        all_params = {f"encoder.{k}": v for k, v in encoder_params.items()}
        all_params.update({f"head.{k}": v for k, v in head_params.items()})

        for name, arr in all_params.items():
            group = name.split(".", 1)[0]
            max_err.setdefault(group, 0.0)
            flat = arr.reshape(-1)
            a_flat = base.grads[name].reshape(-1)
            n_pick = min(coords_per_tensor, flat.size)
            coords = rng.choice(flat.size, size=n_pick, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + FD_STEP
                plus = run(want_grads=False)
                flat[i] = orig - FD_STEP
                minus = run(want_grads=False)
                flat[i] = orig
                if (plus.winners_signature != base.winners_signature
                        or minus.winners_signature != base.winners_signature):
                    excluded += 1  # argmax tie flipped inside the FD window
                    continue
                fd = (plus.loss_total - minus.loss_total) / (2.0 * FD_STEP)
                max_err[group] = max(max_err[group],
                                     relative_error(a_flat[i], fd))
                checked += 1
    return GradReport(max_errors=max_err, n_checked=checked, n_excluded=excluded)


def make_overfit_problem(seed: int, n_gaussians: int = 512, width: int = 64,
                         height: int = 48):
    """Seeded synthetic scene plus Gaussians initialized from its geometry.

    Returns (gaussians, frames).  Centers and colors start on back-
    projected points, so the optimizer's job is shaping, not search.
    """
    rng = np.random.default_rng(seed * 2953 + 5)
    scene = make_toy_scene(seed=seed, width=width, height=height, n_frames=6)
    frames = [scene.frame(0), scene.frame(5)]
    merged = merge_clouds([back_project(f, i) for i, f in enumerate(frames)])
    idx = rng.choice(len(merged), size=n_gaussians, replace=False)

    mu = merged.positions[idx]
    colors = merged.colors[idx]
    quat = np.zeros((n_gaussians, 4))
    quat[:, 0] = 1.0
    # Footprints sized to the sample spacing and mostly opaque, so the
    # initial render already covers the image.
    log_scale = np.full((n_gaussians, 3), np.log(0.07))
    opacity_logit = np.full(n_gaussians, 2.0)
    sh = np.zeros((n_gaussians, 1, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    gaussians = from_free_params(mu, quat, log_scale, opacity_logit, sh)
    return gaussians, frames


def run_overfit(seed: int = 0, n_gaussians: int = 512, steps: int = 2000,
                self_target: bool = False,
                options: OverfitConfig | None = None) -> list[float]:
    """Overfit harness entry point; returns the PSNR trace.

    With `self_target` the targets are the initial render itself, so the
    loss is exactly zero at step 0 (PSNR reports as inf)."""
    gaussians, frames = make_overfit_problem(seed, n_gaussians)
    targets = None
    if self_target:
        opts = RenderOptions()
        targets = [rasterize_forward(gaussians, f, opts).image for f in frames]
    return overfit_scene(gaussians, frames, steps, targets=targets,
                         options=options)
