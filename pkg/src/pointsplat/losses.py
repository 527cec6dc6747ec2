"""Pre-training objectives: pixel MSE, perceptual feature loss, combination.

The perceptual loss keeps the LPIPS structure -- channel-normalized
feature differences, weighted per channel, averaged per layer over space,
summed over layers -- but runs on a pluggable stack of fixed convolution
stages.  The default stack uses random weights generated once from a
fixed seed; any conforming weight file can be substituted.

Images are (H, W, 3) arrays in [0, 1].  All loss functions return
(value, gradient w.r.t. the rendered image).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorfile import read_tensor_file, write_tensor_file

DEFAULT_LAMBDA = 0.05
NORM_EPS = 1e-10
DEFAULT_NET_ID = "random-conv-v1"
_DEFAULT_NET_SEED = 611953


@dataclass(frozen=True)
class ConvStage:
    weights: np.ndarray  # (C_out, C_in, kh, kw), fixed
    stride: int
    relu: bool


@dataclass(frozen=True)
class PerceptualNet:
    """Fixed feature extractor for the perceptual loss.

    `channel_weights[l]` holds the per-channel weights applied to the
    normalized feature difference of stage l.
    """

    stages: tuple[ConvStage, ...]
    channel_weights: tuple[np.ndarray, ...]
    net_id: str

    def min_input_size(self) -> int:
        """Smallest H (= W) for which every stage output is non-empty."""
        size = 1
        for stage in reversed(self.stages):
            kh = stage.weights.shape[2]
            size = (size - 1) * stage.stride + kh
        return size


def default_perceptual_net() -> PerceptualNet:
    """Three fixed random-weight 3x3 stride-2 stages (channels 8/16/16)."""
    rng = np.random.default_rng(_DEFAULT_NET_SEED)
    channels = [(8, 3), (16, 8), (16, 16)]
    relus = [True, True, False]
    stages = []
    weights = []
    for (c_out, c_in), relu in zip(channels, relus):
        std = np.sqrt(2.0 / (c_in * 9))
        w = rng.normal(0.0, std, size=(c_out, c_in, 3, 3))
        stages.append(ConvStage(weights=w, stride=2, relu=relu))
        weights.append(np.ones(c_out))
    return PerceptualNet(
        stages=tuple(stages),
        channel_weights=tuple(weights),
        net_id=DEFAULT_NET_ID,
    )


def save_perceptual_net(net: PerceptualNet, path):
    tensors = {}
    for i, stage in enumerate(net.stages):
        tensors[f"stage{i}.weights"] = np.asarray(stage.weights, dtype=np.float64)
        tensors[f"stage{i}.channel_weights"] = np.asarray(
            net.channel_weights[i], dtype=np.float64
        )
        tensors[f"stage{i}.stride"] = np.asarray(stage.stride, dtype=np.int64)
        tensors[f"stage{i}.relu"] = np.asarray(int(stage.relu), dtype=np.int64)
    meta = {"kind": "perceptual-net", "net_id": net.net_id,
            "n_stages": str(len(net.stages))}
    write_tensor_file(path, tensors, meta)


def load_perceptual_net(path) -> PerceptualNet:
    tensors, meta = read_tensor_file(path)
    if meta.get("kind") != "perceptual-net":
        raise ValueError(f"{path}: not a perceptual net file")
    n = int(meta["n_stages"])
    stages = []
    weights = []
    for i in range(n):
        stages.append(
            ConvStage(
                weights=tensors[f"stage{i}.weights"],
                stride=int(tensors[f"stage{i}.stride"].reshape(-1)[0]),
                relu=bool(tensors[f"stage{i}.relu"].reshape(-1)[0]),
            )
        )
        weights.append(tensors[f"stage{i}.channel_weights"])
    return PerceptualNet(
        stages=tuple(stages), channel_weights=tuple(weights), net_id=meta["net_id"]
    )


def _conv2d(x, w, stride):
    """Valid (unpadded) strided convolution, x: (C_in, H, W)."""
    c_out, c_in, kh, kw = w.shape
    h_out = (x.shape[1] - kh) // stride + 1
    w_out = (x.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for di in range(kh):
        for dj in range(kw):
            xs = x[:, di : di + stride * h_out : stride,
                   dj : dj + stride * w_out : stride]
            out += np.einsum("oc,chw->ohw", w[:, :, di, dj], xs)
    return out


def _conv2d_input_backward(d_out, w, stride, x_shape):
    c_out, c_in, kh, kw = w.shape
    h_out, w_out = d_out.shape[1], d_out.shape[2]
    d_x = np.zeros(x_shape)
    for di in range(kh):
        for dj in range(kw):
            d_x[:, di : di + stride * h_out : stride,
                dj : dj + stride * w_out : stride] += np.einsum(
                "oc,ohw->chw", w[:, :, di, dj], d_out
            )
    return d_x


def _forward_features(image, net: PerceptualNet):
    """Stage outputs plus the pre-activation values needed for backward."""
    x = np.transpose(np.asarray(image, dtype=np.float64), (2, 0, 1))
    feats = []
    pre_acts = []
    for stage in net.stages:
        if (
            x.shape[1] < stage.weights.shape[2]
            or x.shape[2] < stage.weights.shape[3]
        ):
            raise ValueError(
                f"image of size {image.shape[1]}x{image.shape[0]} is smaller "
                f"than the perceptual net receptive field "
                f"({net.min_input_size()} px minimum)"
            )
        z = _conv2d(x, stage.weights, stage.stride)
        pre_acts.append(z)
        x = np.maximum(z, 0.0) if stage.relu else z
        feats.append(x)
    return feats, pre_acts


def _normalize_channels(f):
    """Unit-normalize feature vectors across channels per spatial position.

    Uses sqrt(sum_c f^2 + eps) in the denominator so constant (all-zero)
    patches stay finite in both the value and its derivative.
    """
    norm = np.sqrt(np.sum(f * f, axis=0, keepdims=True) + NORM_EPS)
    return f / norm, norm


def _normalize_backward(f, norm, d_fhat):
    dot = np.sum(f * d_fhat, axis=0, keepdims=True)
    return d_fhat / norm - f * (dot / norm**3)


def color_loss(i_r, i_gt):
    """Mean squared color error and its gradient w.r.t. the render.

    The per-pixel squared error is averaged over the 3 channels, then over
    all pixels: L = sum((I_r - I_gt)^2) / (H * W * 3).
    """
    i_r = np.asarray(i_r, dtype=np.float64)
    i_gt = np.asarray(i_gt, dtype=np.float64)
    if i_r.shape != i_gt.shape or i_r.ndim != 3 or i_r.shape[2] != 3:
        raise ValueError(f"image shapes {i_r.shape} vs {i_gt.shape} do not match")
    diff = i_r - i_gt
    count = diff.size
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def depth_loss(d_r, d_gt):
    """Optional mean squared depth error (extra rendering target)."""
    d_r = np.asarray(d_r, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_r.shape != d_gt.shape or d_r.ndim != 2:
        raise ValueError(f"depth shapes {d_r.shape} vs {d_gt.shape} do not match")
    diff = d_r - d_gt
    count = diff.size
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def lpips_loss(i_r, i_gt, net: PerceptualNet):
    """Perceptual distance: sum over layers of the spatial mean of
    squared channel-weighted normalized feature differences."""
    i_r = np.asarray(i_r, dtype=np.float64)
    i_gt = np.asarray(i_gt, dtype=np.float64)
    if i_r.shape != i_gt.shape:
        raise ValueError(f"image shapes {i_r.shape} vs {i_gt.shape} do not match")
    feats_r, pre_r = _forward_features(i_r, net)
    feats_g, _ = _forward_features(i_gt, net)

    value = 0.0
    d_feats = []
    for layer, (fr, fg) in enumerate(zip(feats_r, feats_g)):
        fr_hat, norm_r = _normalize_channels(fr)
        fg_hat, _ = _normalize_channels(fg)
        w = net.channel_weights[layer][:, None, None]
        diff = w * (fr_hat - fg_hat)
        m_l = fr.shape[1] * fr.shape[2]
        value += float(np.sum(diff * diff) / m_l)
        d_fr_hat = 2.0 * w * diff / m_l
        d_feats.append(_normalize_backward(fr, norm_r, d_fr_hat))

    # Backpropagate the per-layer feature gradients through the stack.
    d_x = np.zeros_like(np.transpose(i_r, (2, 0, 1)))
    carry = None
    for layer in range(len(net.stages) - 1, -1, -1):
        stage = net.stages[layer]
        d_feat = d_feats[layer] if carry is None else d_feats[layer] + carry
        if stage.relu:
            d_feat = d_feat * (pre_r[layer] > 0.0)
        x_shape = (
            np.transpose(i_r, (2, 0, 1)).shape
            if layer == 0
            else feats_r[layer - 1].shape
        )
        carry = _conv2d_input_backward(d_feat, stage.weights, stage.stride, x_shape)
    d_x = carry
    return value, np.transpose(d_x, (1, 2, 0))


def total_loss(i_r, i_gt, net: PerceptualNet, lam: float = DEFAULT_LAMBDA):
    """Weighted sum: color loss + lam * perceptual loss, with gradient."""
    c_val, c_grad = color_loss(i_r, i_gt)
    l_val, l_grad = lpips_loss(i_r, i_gt, net)
    return c_val + lam * l_val, c_grad + lam * l_grad
