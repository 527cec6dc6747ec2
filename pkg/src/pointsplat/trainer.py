"""Pre-training loop: augmentation, forward/backward orchestration, AdamW.

One training step per scene batch:
  sample a view pair -> back-project both views -> joint random rotation of
  points and cameras -> mask half the merged cloud -> encode each view ->
  cross-view fusion -> predict Gaussians -> render both input views ->
  color + perceptual loss against the real images -> backpropagate through
  rasterizer, head, fusion and encoder -> average over the batch -> one
  AdamW update at the cosine-annealed learning rate.

Everything is deterministic under a fixed seed: scenes are processed in
order, all sampling comes from the TrainState RNG, and reductions happen
in fixed order regardless of thread count.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from .camera import PointCloud, RgbdFrame, back_project, merge_clouds, rotate_augment
from .gaussian import (
    GaussianSet,
    RawGaussianParams,
    activate,
    center_offset_backward,
    from_free_params,
)
from .losses import PerceptualNet, color_loss, depth_loss, lpips_loss
from .scene_io import Scene, sample_view_pair
from .splat_render import (
    RenderOptions,
    rasterize_backward,
    rasterize_forward,
)

logger = logging.getLogger(__name__)

AUG_TILT_RANGE = np.pi / 64  # X and Y rotation range (symmetric)
AUG_YAW_RANGE = np.pi  # Z rotation range (symmetric)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 4
    mask_ratio: float = 0.5
    views: int = 2
    frame_interval: int = 5
    loss_lambda: float = 0.05
    k: int = 1
    seed: int = 0
    image_width: int = 320
    image_height: int = 240
    sh_degree: int = 0
    feature_dim: int = 128
    depth_weight: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ValueError("mask_ratio must be in [0, 1)")
        for name in ("lr", "lr_min", "epochs", "batch_size", "frame_interval", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.views != 2:
            raise ValueError("this pipeline trains on exactly 2 views")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass
class TrainState:
    params: dict[str, np.ndarray]  # "encoder.*" and "head.*" tensors
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items()
                if k.startswith(prefix + ".")}


def init_train_state(config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, arr in enc.init_encoder_params(
        rng, feature_dim=config.feature_dim
    ).items():
        params[f"encoder.{name}"] = arr
    for name, arr in enc.init_head_params(
        rng, feature_dim=config.feature_dim, k=config.k, sh_degree=config.sh_degree
    ).items():
        params[f"head.{name}"] = arr
    return TrainState(
        params=params,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
        rng=rng,
    )


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from lr0 at step 0 to lr_min at total_steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
               config: TrainConfig) -> TrainState:
    """Decoupled weight decay, then a bias-corrected Adam update, in place."""
    t = state.step + 1
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name in state.params:
        g = grads[name]
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient shape mismatch for tensor {name}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for tensor {name}")
        p = state.params[name]
        p *= 1.0 - lr * config.weight_decay
        state.m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if not np.all(np.isfinite(p)):
            raise ValueError(f"parameter {name} became non-finite")
    state.step = t
    return state


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio on 8-bit-quantized images in [0, 1]."""
    q_r = np.round(np.clip(rendered, 0.0, 1.0) * 255.0) / 255.0
    q_t = np.round(np.clip(target, 0.0, 1.0) * 255.0) / 255.0
    mse = float(np.mean((q_r - q_t) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(1.0 / mse))


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss_color: float
    loss_lpips: float
    loss_total: float
    psnr: float
    n_gaussians: int = 0
    sample_render: np.ndarray | None = None

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.lr!r},{self.loss_color!r},{self.loss_lpips!r},"
            f"{self.loss_total!r},{self.psnr!r}"
        )


METRICS_HEADER = "step,lr,l_color,l_lpips,l_total,psnr"


@dataclass
class PipelineResult:
    loss_total: float
    loss_color: float
    loss_lpips: float
    psnr: float
    grads: dict[str, np.ndarray]
    gaussians: GaussianSet
    renders: list[np.ndarray]
    # Byte signature of all max-pool winner assignments; the gradient
    # harness uses it to detect (and exclude) argmax tie flips.
    winners_signature: bytes = b""


def _split_by_view(cloud: PointCloud, n_views: int) -> list[PointCloud]:
    return [cloud.subset(np.nonzero(cloud.source_view == i)[0])
            for i in range(n_views)]


def scene_pipeline(encoder_params: dict, head_params: dict, cloud: PointCloud,
                   frames: list[RgbdFrame], targets: list[np.ndarray],
                   config: TrainConfig, net: PerceptualNet,
                   target_depths: list[np.ndarray] | None = None,
                   want_grads: bool = True,
                   render_options: RenderOptions | None = None) -> PipelineResult:
    """Forward (and optionally backward) through encode-fuse-predict-render.

    `cloud` is the merged, masked two-view cloud; `frames` carry the
    (possibly augmented) camera poses and `targets` the real images.  The
    returned grads dict is keyed like TrainState.params.
    """
    views = _split_by_view(cloud, config.views)
    feats = []
    traces = []
    for view_cloud in views:
        if view_cloud.visible_count == 0:
            feats.append(np.zeros((0, config.feature_dim)))
            traces.append(None)
        else:
            f, tr = enc.encode_points(view_cloud, encoder_params)
            feats.append(f)
            traces.append(tr)

    fhat1, fhat2, fuse_trace = enc.cross_view_fuse(
        feats[0], feats[1], views[0], views[1], encoder_params
    )
    fhats = [fhat1, fhat2]

    raws, anchor_lists, anchor_idx_lists, head_traces = [], [], [], []
    for view_idx, view_cloud in enumerate(views):
        if view_cloud.visible_count == 0:
            head_traces.append(None)
            continue
        raw, anchors, anchor_idx, tr = enc.predict_gaussians(
            fhats[view_idx], view_cloud, head_params,
            k=config.k, sh_degree=config.sh_degree,
        )
        raws.append(raw)
        anchor_lists.append(anchors)
        anchor_idx_lists.append(anchor_idx)
        head_traces.append(tr)

    raw_all = RawGaussianParams(
        center_offset=np.concatenate([r.center_offset for r in raws]),
        rotation=np.concatenate([r.rotation for r in raws]),
        log_scale=np.concatenate([r.log_scale for r in raws]),
        opacity_logit=np.concatenate([r.opacity_logit for r in raws]),
        sh_coeffs=np.concatenate([r.sh_coeffs for r in raws]),
    )
    anchors_all = np.concatenate(anchor_lists)
    gaussians = activate(raw_all, anchors_all, np.concatenate(anchor_idx_lists))

    sig_parts = []
    for tr in traces:
        if tr is not None:
            sig_parts.append(tr.winners.tobytes())
    for side in (fuse_trace.side1, fuse_trace.side2):
        if side is not None and side.winners is not None:
            sig_parts.append(side.winners.tobytes())
    winners_signature = b"".join(sig_parts)

    opts = render_options or RenderOptions(
        threads=config.threads, render_depth=config.depth_weight > 0.0
    )
    n_views = len(frames)
    loss_total = 0.0
    loss_color_sum = 0.0
    loss_lpips_sum = 0.0
    psnr_sum = 0.0
    renders = []
    render_grads = None
    for view_idx, (frame, target) in enumerate(zip(frames, targets)):
        out = rasterize_forward(gaussians, frame, opts)
        renders.append(out.image)
        c_val, c_grad = color_loss(out.image, target)
        l_val, l_grad = lpips_loss(out.image, target, net)
        view_loss = c_val + config.loss_lambda * l_val
        d_image = (c_grad + config.loss_lambda * l_grad) / n_views
        d_depth = None
        if config.depth_weight > 0.0 and target_depths is not None:
            dz_val, dz_grad = depth_loss(out.depth, target_depths[view_idx])
            view_loss += config.depth_weight * dz_val
            d_depth = config.depth_weight * dz_grad / n_views
        loss_total += view_loss / n_views
        loss_color_sum += c_val / n_views
        loss_lpips_sum += l_val / n_views
        psnr_sum += psnr(out.image, target) / n_views
        if want_grads:
            g = rasterize_backward(out, d_image, gaussians, frame, d_depth=d_depth)
            if render_grads is None:
                render_grads = g
            else:
                render_grads.d_mu += g.d_mu
                render_grads.d_rotation += g.d_rotation
                render_grads.d_log_scale += g.d_log_scale
                render_grads.d_opacity_logit += g.d_opacity_logit
                render_grads.d_sh += g.d_sh

    grads: dict[str, np.ndarray] = {}
    if want_grads:
        d_offset = center_offset_backward(raw_all.center_offset,
                                          render_grads.d_mu)
        enc_grads = {k: np.zeros_like(v) for k, v in encoder_params.items()}
        head_grads = {k: np.zeros_like(v) for k, v in head_params.items()}

        d_fhats = []
        row = 0
        for view_idx in range(config.views):
            tr = head_traces[view_idx]
            if tr is None:
                d_fhats.append(np.zeros((0, config.feature_dim)))
                continue
            n_rows = tr.n_points * tr.k
            sl = slice(row, row + n_rows)
            g_head, d_fhat = enc.head_backward(
                tr, head_params,
                d_offset[sl], render_grads.d_rotation[sl],
                render_grads.d_log_scale[sl], render_grads.d_opacity_logit[sl],
                render_grads.d_sh[sl],
            )
            for name, val in g_head.items():
                head_grads[name] += val
            d_fhats.append(d_fhat)
            row += n_rows

        g_fuse, d_f1, d_f2 = enc.fuse_backward(
            fuse_trace, encoder_params, d_fhats[0], d_fhats[1]
        )
        for name, val in g_fuse.items():
            enc_grads[name] += val

        for view_idx, d_f in enumerate((d_f1, d_f2)):
            if traces[view_idx] is None:
                continue
            g_enc, _, _ = enc.encode_backward(
                traces[view_idx], encoder_params, d_f
            )
            for name, val in g_enc.items():
                enc_grads[name] += val

        for name, val in enc_grads.items():
            grads[f"encoder.{name}"] = val
        for name, val in head_grads.items():
            grads[f"head.{name}"] = val

    return PipelineResult(
        loss_total=loss_total,
        loss_color=loss_color_sum,
        loss_lpips=loss_lpips_sum,
        psnr=psnr_sum,
        grads=grads,
        gaussians=gaussians,
        renders=renders,
        winners_signature=winners_signature,
    )


def prepare_scene_sample(scene: Scene, config: TrainConfig, rng):
    """Sample, back-project, augment and mask one scene's view pair.

    Returns (masked_cloud, frames_with_augmented_poses, target_images).
    The loss targets are the original images: the augmentation is a joint
    rigid motion of points and cameras, so rendered content is unchanged.
    """
    pair = sample_view_pair(scene, rng, config.frame_interval)
    clouds = [back_project(f, i) for i, f in enumerate(pair)]
    merged = merge_clouds(clouds)
    angles = (
        rng.uniform(-AUG_TILT_RANGE, AUG_TILT_RANGE),
        rng.uniform(-AUG_TILT_RANGE, AUG_TILT_RANGE),
        rng.uniform(-AUG_YAW_RANGE, AUG_YAW_RANGE),
    )
    pivot = merged.positions.mean(axis=0)
    (aug_cloud,), aug_poses = rotate_augment(
        [merged], [f.pose for f in pair], angles, pivot
    )
    masked = enc.mask_points(aug_cloud, config.mask_ratio, rng)
    frames = [f.with_pose(p) for f, p in zip(pair, aug_poses)]
    targets = [f.color for f in pair]
    return masked, frames, targets


def train_step(state: TrainState, batch: list[Scene], config: TrainConfig,
               rng, total_steps: int, net: PerceptualNet) -> tuple[TrainState,
                                                                   StepMetrics]:
    """One optimizer step over a batch of scenes.

    Scenes run in the given order; gradients are arithmetically averaged
    over the scenes that produced visible points.
    """
    grad_sum = {k: np.zeros_like(p) for k, p in state.params.items()}
    loss_c = loss_l = loss_t = psnr_acc = 0.0
    n_gaussians = 0
    sample_render = None
    processed = 0
    for scene in batch:
        masked, frames, targets = prepare_scene_sample(scene, config, rng)
        if masked.visible_count == 0:
            logger.warning(
                "scene %s: no visible points after masking; skipping", scene.scene_id
            )
            continue
        result = scene_pipeline(
            state.group("encoder"), state.group("head"), masked, frames, targets,
            config, net,
        )
        for name in grad_sum:
            grad_sum[name] += result.grads[name]
        loss_c += result.loss_color
        loss_l += result.loss_lpips
        loss_t += result.loss_total
        psnr_acc += result.psnr
        n_gaussians = len(result.gaussians)
        if sample_render is None:
            sample_render = result.renders[0]
        processed += 1

    lr = cosine_lr(state.step, total_steps, config.lr, config.lr_min)
    if processed == 0:
        logger.warning("entire batch skipped; parameters unchanged")
        nan = float("nan")
        return state, StepMetrics(state.step, lr, nan, nan, nan, nan)

    grads = {k: g / processed for k, g in grad_sum.items()}
    state = adamw_step(state, grads, lr, config)
    metrics = StepMetrics(
        step=state.step,
        lr=lr,
        loss_color=loss_c / processed,
        loss_lpips=loss_l / processed,
        loss_total=loss_t / processed,
        psnr=psnr_acc / processed,
        n_gaussians=n_gaussians,
        sample_render=sample_render,
    )
    return state, metrics


@dataclass(frozen=True)
class OverfitConfig:
    lr: float = 1e-2
    lr_min: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_lambda: float = 0.05
    threads: int = 1


def overfit_scene(gaussians: GaussianSet, frames: list[RgbdFrame], steps: int,
                  targets: list[np.ndarray] | None = None,
                  options: OverfitConfig | None = None) -> list[float]:
    """Optimize raw Gaussian parameters directly against target images.

    Isolates the rasterizer + optimizer from the encoder.  Returns the
    PSNR trace: entry 0 is the initialization, entry i the value after i
    AdamW steps (weight decay 0, cosine-annealed lr).
    """
    opts = options or OverfitConfig()
    if targets is None:
        targets = [f.color for f in frames]
    from .losses import default_perceptual_net

    net = default_perceptual_net()
    render_opts = RenderOptions(threads=opts.threads)
    n_views = len(frames)

    params = {
        "mu": gaussians.mu.copy(),
        "rotation": gaussians.raw_rotation.copy(),
        "log_scale": gaussians.log_scale.copy(),
        "opacity_logit": gaussians.opacity_logit.copy(),
        "sh": gaussians.sh_coeffs.copy(),
    }
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}

    def evaluate(want_grads: bool):
        gset = from_free_params(
            params["mu"], params["rotation"], params["log_scale"],
            params["opacity_logit"], params["sh"],
        )
        grads = {k: np.zeros_like(p) for k, p in params.items()}
        psnr_acc = 0.0
        for frame, target in zip(frames, targets):
            out = rasterize_forward(gset, frame, render_opts)
            psnr_acc += psnr(out.image, target) / n_views
            if not want_grads:
                continue
            c_val, c_grad = color_loss(out.image, target)
            _, l_grad = lpips_loss(out.image, target, net)
            d_image = (c_grad + opts.loss_lambda * l_grad) / n_views
            g = rasterize_backward(out, d_image, gset, frame)
            grads["mu"] += g.d_mu
            grads["rotation"] += g.d_rotation
            grads["log_scale"] += g.d_log_scale
            grads["opacity_logit"] += g.d_opacity_logit
            grads["sh"] += g.d_sh
        return psnr_acc, grads

    trace = []
    for step in range(steps):
        step_psnr, grads = evaluate(want_grads=True)
        trace.append(step_psnr)  # PSNR after `step` updates
        lr = cosine_lr(step, steps, opts.lr, opts.lr_min)
        t = step + 1
        bc1 = 1.0 - opts.beta1**t
        bc2 = 1.0 - opts.beta2**t
        for name, p in params.items():
            g = grads[name]
            m[name] = opts.beta1 * m[name] + (1.0 - opts.beta1) * g
            v[name] = opts.beta2 * v[name] + (1.0 - opts.beta2) * (g * g)
            p -= lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + opts.eps)
    final_psnr, _ = evaluate(want_grads=False)
    trace.append(final_psnr)
    return trace
