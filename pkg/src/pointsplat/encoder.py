"""Point feature encoder, cross-view fusion, masking, and the Gaussian head.

The encoder is one set-abstraction block between two per-point MLPs:

    (position - centroid, color) -> MLP1 -> kNN(16) max-pool -> MLP2 -> F

Cross-view fusion exchanges information between the two views by
max-pooling each point's 8 nearest cross-view features and mixing them
with its own through a shared MLP.  The head maps fused features to raw
Gaussian parameters; its final layer is zero-initialized so training
starts with Gaussians sitting exactly on their anchor points with
opacity 0.5 and gray color.

Every forward returns a trace object holding the retained activations;
the matching backward consumes it and produces exact vector-Jacobian
products for all weights and inputs.  No autodiff engine is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import PointCloud
from .gaussian import RawGaussianParams, sh_coeff_count

ENCODER_KNN = 16
FUSION_KNN = 8
FEATURE_DIM = 128
DEFAULT_BASE_SCALE = 0.02  # metres; initial Gaussian scale before training

# Per-tuple raw head output: offset(3) quat(4) log_scale(3) logit(1) sh(3B).
_OFFSET = slice(0, 3)
_QUAT = slice(3, 7)
_LOG_SCALE = slice(7, 10)
_LOGIT = 10
_SH_START = 11


def raw_tuple_width(sh_degree: int) -> int:
    return _SH_START + 3 * sh_coeff_count(sh_degree)


def xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder_params(rng, in_dim: int = 6,
                        feature_dim: int = FEATURE_DIM) -> dict[str, np.ndarray]:
    widths1 = [in_dim, 64, 128, feature_dim]
    widths2 = [feature_dim, 64, 128, feature_dim]
    params = {}
    for name, widths in (("mlp1", widths1), ("mlp2", widths2)):
        for i in range(3):
            params[f"{name}.{i}.w"] = xavier_uniform(rng, widths[i], widths[i + 1])
            params[f"{name}.{i}.b"] = np.zeros(widths[i + 1])
    params["fuse.0.w"] = xavier_uniform(rng, 2 * feature_dim, feature_dim)
    params["fuse.0.b"] = np.zeros(feature_dim)
    params["fuse.1.w"] = xavier_uniform(rng, feature_dim, feature_dim)
    params["fuse.1.b"] = np.zeros(feature_dim)
    return params


def init_head_params(rng, feature_dim: int = FEATURE_DIM, k: int = 1,
                     sh_degree: int = 0) -> dict[str, np.ndarray]:
    width = raw_tuple_width(sh_degree)
    return {
        "mlp.0.w": xavier_uniform(rng, feature_dim, feature_dim),
        "mlp.0.b": np.zeros(feature_dim),
        # Zero final layer: predictions start at the base offsets below.
        "mlp.1.w": np.zeros((feature_dim, k * width)),
        "mlp.1.b": np.zeros(k * width),
    }


def head_output_base(k: int, sh_degree: int,
                     base_scale: float = DEFAULT_BASE_SCALE) -> np.ndarray:
    """Constant offsets added to the head output before activation.

    Identity quaternion and log(base_scale) keep the zero-initialized head
    away from the degenerate zero rotation and the scale clamp.
    """
    width = raw_tuple_width(sh_degree)
    base = np.zeros(k * width)
    for j in range(k):
        base[j * width + 3] = 1.0  # quaternion w
        base[j * width + 7 : j * width + 10] = np.log(base_scale)
    return base


def mask_points(cloud: PointCloud, ratio: float, rng) -> PointCloud:
    """Mark floor(ratio * N) uniformly chosen points as masked.

    Masked points are excluded from encoding and Gaussian prediction; the
    supervision images stay full.  Returns a new cloud.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n = len(cloud)
    visible = np.ones(n, dtype=bool)
    n_mask = int(np.floor(ratio * n))
    if n_mask:
        visible[rng.choice(n, size=n_mask, replace=False)] = False
    return PointCloud(
        positions=cloud.positions,
        colors=cloud.colors,
        source_view=cloud.source_view,
        source_pixel=cloud.source_pixel,
        visible_mask=visible,
    )


def knn_indices(query: np.ndarray, ref: np.ndarray, k: int,
                chunk: int = 1024) -> np.ndarray:
    """Indices of the k nearest reference points per query point.

    Ties are broken by the lowest reference index.  When the query and
    reference arrays are the same set, each point's own index is among its
    neighbors (distance zero).  Returns shape (Q, min(k, R)).
    """
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    n_ref = len(r)
    k_eff = min(k, n_ref)
    if k_eff == 0:
        return np.empty((len(q), 0), dtype=np.int64)
    r_sq = np.sum(r * r, axis=1)
    out = np.empty((len(q), k_eff), dtype=np.int64)
    n_cand = min(n_ref, k_eff + 16)
    for start in range(0, len(q), chunk):
        qc = q[start : start + chunk]
        d2 = np.sum(qc * qc, axis=1)[:, None] + r_sq[None, :] - 2.0 * (qc @ r.T)
        if n_cand < n_ref:
            cand = np.argpartition(d2, n_cand - 1, axis=1)[:, :n_cand]
        else:
            cand = np.broadcast_to(np.arange(n_ref), (len(qc), n_ref))
        # Candidates in ascending index order; a stable sort on distance
        # then breaks exact ties toward the lowest index.
        cand = np.sort(cand, axis=1)
        cd = np.take_along_axis(d2, cand, axis=1)
        order = np.argsort(cd, axis=1, kind="stable")[:, :k_eff]
        out[start : start + chunk] = np.take_along_axis(cand, order, axis=1)
    return out


@dataclass
class MlpTrace:
    inputs: list[np.ndarray]  # layer inputs a_0 .. a_{L-1}
    pre_acts: list[np.ndarray]  # z_l = a_l @ w + b


def mlp_forward(x, params: dict, prefix: str, n_layers: int):
    """Dense stack with ReLU after every layer except the last."""
    inputs = []
    pre_acts = []
    h = x
    for i in range(n_layers):
        inputs.append(h)
        z = h @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return h, MlpTrace(inputs=inputs, pre_acts=pre_acts)


def mlp_backward(trace: MlpTrace, params: dict, prefix: str, d_out):
    """Returns (d_input, {name: grad}) for one dense stack."""
    n_layers = len(trace.inputs)
    grads = {}
    d = d_out
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            d = d * (trace.pre_acts[i] > 0.0)
        grads[f"{prefix}.{i}.w"] = trace.inputs[i].T @ d
        grads[f"{prefix}.{i}.b"] = np.sum(d, axis=0)
        d = d @ params[f"{prefix}.{i}.w"].T
    return d, grads


def _maxpool_forward(features, neighbor_idx):
    """Per-point channelwise max over neighbor rows.

    Returns (pooled, winners) where winners[i, c] is the feature row that
    produced pooled[i, c]; the earliest neighbor-list position wins on
    exact ties.  Runs as a loop over the (small) neighbor axis to avoid
    materializing the (V, K, C) gather.
    """
    pooled = features[neighbor_idx[:, 0]].copy()
    winners = np.repeat(neighbor_idx[:, 0][:, None], features.shape[1], axis=1)
    for j in range(1, neighbor_idx.shape[1]):
        rows = neighbor_idx[:, j]
        cand = features[rows]
        better = cand > pooled
        np.copyto(pooled, cand, where=better)
        np.copyto(winners, np.broadcast_to(rows[:, None], winners.shape),
                  where=better)
    return pooled, winners


def _maxpool_backward(winners, d_pooled, n_rows):
    d_feat = np.zeros((n_rows, d_pooled.shape[1]))
    cols = np.broadcast_to(np.arange(d_pooled.shape[1]), winners.shape)
    np.add.at(d_feat, (winners.ravel(), cols.ravel()), d_pooled.ravel())
    return d_feat


@dataclass
class EncodeTrace:
    visible_idx: np.ndarray
    n_total: int
    mlp1: MlpTrace
    neighbor_idx: np.ndarray
    winners: np.ndarray
    mlp2: MlpTrace


def _visible_centroid(positions):
    # Column-sorted summation makes the centroid exactly permutation
    # invariant, which the encoder equivariance contract requires.
    return np.sum(np.sort(positions, axis=0), axis=0) / len(positions)


def encode_points(cloud: PointCloud, params: dict):
    """Per-point features for the visible points of a cloud.

    Returns (features, trace) with features row-aligned to the visible
    points in index order.  Raises when no point is visible.
    """
    vis = np.nonzero(cloud.visible_mask)[0]
    if len(vis) == 0:
        raise ValueError("cannot encode a cloud with no visible points")
    positions = cloud.positions[vis]
    centroid = _visible_centroid(positions)
    inp = np.concatenate([positions - centroid, cloud.colors[vis]], axis=1)
    h1, t1 = mlp_forward(inp, params, "mlp1", 3)
    neighbor_idx = knn_indices(positions, positions, ENCODER_KNN)
    pooled, winners = _maxpool_forward(h1, neighbor_idx)
    features, t2 = mlp_forward(pooled, params, "mlp2", 3)
    trace = EncodeTrace(
        visible_idx=vis,
        n_total=len(cloud),
        mlp1=t1,
        neighbor_idx=neighbor_idx,
        winners=winners,
        mlp2=t2,
    )
    return features, trace


def encode_backward(trace: EncodeTrace, params: dict, d_features):
    """Gradients of the encoder w.r.t. weights and cloud inputs.

    Returns (param_grads, d_positions, d_colors); the input gradients are
    full-cloud sized with zero rows at masked points.
    """
    if trace is None:
        raise ValueError("encode_backward requires the forward trace")
    d_pooled, g2 = mlp_backward(trace.mlp2, params, "mlp2", d_features)
    d_h1 = _maxpool_backward(trace.winners, d_pooled, len(trace.visible_idx))
    d_inp, g1 = mlp_backward(trace.mlp1, params, "mlp1", d_h1)
    d_pos_vis = d_inp[:, :3] - np.mean(d_inp[:, :3], axis=0, keepdims=True)
    d_positions = np.zeros((trace.n_total, 3))
    d_colors = np.zeros((trace.n_total, 3))
    d_positions[trace.visible_idx] = d_pos_vis
    d_colors[trace.visible_idx] = d_inp[:, 3:]
    return {**g1, **g2}, d_positions, d_colors


@dataclass
class FuseSideTrace:
    mlp: MlpTrace
    winners: np.ndarray | None  # None when the other side is empty
    n_other: int


@dataclass
class FuseTrace:
    side1: FuseSideTrace | None
    side2: FuseSideTrace | None
    c: int


def _fuse_side(features, positions, other_features, other_positions, params):
    c = features.shape[1]
    if len(other_features):
        nbr = knn_indices(positions, other_positions, FUSION_KNN)
        pooled, winners = _maxpool_forward(other_features, nbr)
    else:
        pooled = np.zeros((len(features), c))
        winners = None
    z = np.concatenate([features, pooled], axis=1)
    fused, trace = mlp_forward(z, params, "fuse", 2)
    return fused, FuseSideTrace(mlp=trace, winners=winners,
                                n_other=len(other_features))


def cross_view_fuse(f1, f2, cloud1: PointCloud, cloud2: PointCloud, params: dict):
    """Exchange features between two views' visible points.

    Each point concatenates its own feature with the max-pool of its 8
    nearest cross-view visible features and passes through a shared MLP.
    An empty opposite view degrades to a pass-through with the cross term
    zeroed.  Returns (fhat1, fhat2, trace).
    """
    p1 = cloud1.positions[cloud1.visible_mask]
    p2 = cloud2.positions[cloud2.visible_mask]
    if len(p1) != len(f1) or len(p2) != len(f2):
        raise ValueError("features are not aligned with visible points")
    c = f1.shape[1] if len(f1) else f2.shape[1]
    if len(f1):
        fhat1, t1 = _fuse_side(f1, p1, f2, p2, params)
    else:
        fhat1, t1 = np.zeros((0, c)), None
    if len(f2):
        fhat2, t2 = _fuse_side(f2, p2, f1, p1, params)
    else:
        fhat2, t2 = np.zeros((0, c)), None
    return fhat1, fhat2, FuseTrace(side1=t1, side2=t2, c=c)


def fuse_backward(trace: FuseTrace, params: dict, d_fhat1, d_fhat2):
    """Returns (param_grads, d_f1, d_f2)."""
    if trace is None:
        raise ValueError("fuse_backward requires the forward trace")
    c = trace.c
    grads = {k: np.zeros_like(params[k]) for k in params if k.startswith("fuse.")}
    n1, n2 = len(d_fhat1), len(d_fhat2)
    d_f1 = np.zeros((n1, c))
    d_f2 = np.zeros((n2, c))
    if trace.side1 is not None:
        d_z, g = mlp_backward(trace.side1.mlp, params, "fuse", d_fhat1)
        for name, v in g.items():
            grads[name] += v
        d_f1 += d_z[:, :c]
        if trace.side1.winners is not None:
            # Side 1 pooled side 2's features.
            d_f2 += _maxpool_backward(trace.side1.winners, d_z[:, c:], n2)
    if trace.side2 is not None:
        d_z, g = mlp_backward(trace.side2.mlp, params, "fuse", d_fhat2)
        for name, v in g.items():
            grads[name] += v
        d_f2 += d_z[:, :c]
        if trace.side2.winners is not None:
            d_f1 += _maxpool_backward(trace.side2.winners, d_z[:, c:], n1)
    return grads, d_f1, d_f2


@dataclass
class HeadTrace:
    mlp: MlpTrace
    n_points: int
    k: int
    sh_degree: int


def predict_gaussians(fhat, cloud: PointCloud, params: dict, k: int = 1,
                      sh_degree: int = 0,
                      base_scale: float = DEFAULT_BASE_SCALE):
    """Raw Gaussian parameters for every visible point, k tuples each.

    Returns (raw, anchors, anchor_index, trace); anchors are the visible
    point positions repeated k times, in point-major order, so the total
    Gaussian count is k * N_visible.
    """
    vis = np.nonzero(cloud.visible_mask)[0]
    if len(fhat) != len(vis):
        raise ValueError(
            f"feature rows ({len(fhat)}) do not match visible points ({len(vis)})"
        )
    out, mlp_trace = mlp_forward(fhat, params, "mlp", 2)
    out = out + head_output_base(k, sh_degree, base_scale)
    width = raw_tuple_width(sh_degree)
    flat = out.reshape(-1, width)  # (V * k, width), point-major
    raw = RawGaussianParams(
        center_offset=flat[:, _OFFSET],
        rotation=flat[:, _QUAT],
        log_scale=flat[:, _LOG_SCALE],
        opacity_logit=flat[:, _LOGIT],
        sh_coeffs=flat[:, _SH_START:].reshape(-1, sh_coeff_count(sh_degree), 3),
    )
    anchors = np.repeat(cloud.positions[vis], k, axis=0)
    anchor_index = np.repeat(vis, k)
    trace = HeadTrace(mlp=mlp_trace, n_points=len(vis), k=k, sh_degree=sh_degree)
    return raw, anchors, anchor_index, trace


def head_backward(trace: HeadTrace, params: dict, d_center_offset, d_rotation,
                  d_log_scale, d_opacity_logit, d_sh):
    """Assemble raw-parameter gradients and run them back through the head.

    Returns (param_grads, d_fhat)."""
    if trace is None:
        raise ValueError("head_backward requires the forward trace")
    width = raw_tuple_width(trace.sh_degree)
    n_rows = trace.n_points * trace.k
    d_flat = np.zeros((n_rows, width))
    d_flat[:, _OFFSET] = d_center_offset
    d_flat[:, _QUAT] = d_rotation
    d_flat[:, _LOG_SCALE] = d_log_scale
    d_flat[:, _LOGIT] = d_opacity_logit
    d_flat[:, _SH_START:] = d_sh.reshape(n_rows, -1)
    d_out = d_flat.reshape(trace.n_points, trace.k * width)
    d_fhat, grads = mlp_backward(trace.mlp, params, "mlp", d_out)
    return grads, d_fhat
