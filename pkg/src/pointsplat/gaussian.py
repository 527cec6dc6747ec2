"""Gaussian primitive representation and activations.

Raw (pre-activation) parameters come out of the prediction head; activation
binds them to their anchor points and maps them into valid ranges:

    center   mu    = anchor + DELTA_MAX * tanh(center_offset)
    scale    s     = clip(exp(log_scale), SCALE_MIN, SCALE_MAX)
    opacity  o     = sigmoid(opacity_logit)
    rotation qhat  = q / |q|

The raw values are retained on the activated set so the renderer's backward
pass can report gradients in raw-parameter space directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import quat_normalize, quat_to_rotation
from . import linalg

DELTA_MAX = 0.05  # metres; bound on predicted center offsets
SCALE_MIN = 1e-6
SCALE_MAX = 1.0  # metres

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

SUPPORTED_SH_DEGREES = (0, 1)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def raw_param_width(degree: int, k: int = 1) -> int:
    """Per-point width of the head output: k tuples of (offset, quat, log
    scale, opacity logit, SH coefficients)."""
    return k * (3 + 4 + 3 + 1 + 3 * sh_coeff_count(degree))


@dataclass
class RawGaussianParams:
    """Pre-activation parameters, one row per predicted Gaussian."""

    center_offset: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4) unnormalized quaternion
    log_scale: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    sh_coeffs: np.ndarray  # (N, B, 3) with B = (degree + 1)^2

    def __len__(self) -> int:
        return len(self.center_offset)

    @property
    def degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (
                self.center_offset,
                self.rotation,
                self.log_scale,
                self.opacity_logit,
                self.sh_coeffs,
            )
        )


@dataclass
class GaussianSet:
    """Activated Gaussians plus the raw values they were activated from."""

    mu: np.ndarray  # (N, 3) world metres
    rotation: np.ndarray  # (N, 4) unit quaternion
    scale: np.ndarray  # (N, 3) in (SCALE_MIN, SCALE_MAX]
    opacity: np.ndarray  # (N,) in (0, 1)
    sh_coeffs: np.ndarray  # (N, B, 3)
    anchor_point_index: np.ndarray  # (N,) int
    raw_rotation: np.ndarray  # (N, 4) pre-normalization
    log_scale: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1


def sigmoid(x):
    # Split form avoids overflow warnings for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(raw: RawGaussianParams, anchors: np.ndarray,
             anchor_index: np.ndarray | None = None) -> GaussianSet:
    """Bind raw parameters to their anchor points and map to valid ranges."""
    if not raw.is_finite():
        raise ValueError("raw Gaussian parameters contain non-finite values")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    if len(anchors) != len(raw):
        raise ValueError("anchor count does not match raw parameter count")
    if anchor_index is None:
        anchor_index = np.arange(len(raw), dtype=np.int64)
    return GaussianSet(
        mu=anchors + DELTA_MAX * np.tanh(raw.center_offset),
        rotation=quat_normalize(raw.rotation),
        scale=np.clip(np.exp(raw.log_scale), SCALE_MIN, SCALE_MAX),
        opacity=sigmoid(raw.opacity_logit),
        sh_coeffs=raw.sh_coeffs.copy(),
        anchor_point_index=np.asarray(anchor_index, dtype=np.int64),
        raw_rotation=raw.rotation.copy(),
        log_scale=raw.log_scale.copy(),
        opacity_logit=np.asarray(raw.opacity_logit, dtype=np.float64).copy(),
    )


def center_offset_backward(raw_offset: np.ndarray, d_mu: np.ndarray) -> np.ndarray:
    """Chain d(loss)/d(mu) back through mu = anchor + DELTA_MAX * tanh(raw)."""
    t = np.tanh(raw_offset)
    return d_mu * (DELTA_MAX * (1.0 - t * t))


def from_free_params(mu, rotation, log_scale, opacity_logit, sh_coeffs) -> GaussianSet:
    """Gaussian set whose centers are free variables (no anchor binding).

    Used by the overfit harness, which optimizes centers directly rather
    than through bounded offsets.
    """
    mu = np.asarray(mu, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    opacity_logit = np.asarray(opacity_logit, dtype=np.float64)
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    for arr in (mu, rotation, log_scale, opacity_logit, sh_coeffs):
        if not np.all(np.isfinite(arr)):
            raise ValueError("Gaussian parameters contain non-finite values")
    return GaussianSet(
        mu=mu.copy(),
        rotation=quat_normalize(rotation),
        scale=np.clip(np.exp(log_scale), SCALE_MIN, SCALE_MAX),
        opacity=sigmoid(opacity_logit),
        sh_coeffs=sh_coeffs.copy(),
        anchor_point_index=np.arange(len(mu), dtype=np.int64),
        raw_rotation=rotation.copy(),
        log_scale=log_scale.copy(),
        opacity_logit=opacity_logit.copy(),
    )


def build_covariance(rotation, scale):
    """3D covariance R diag(s^2) R^T from unit quaternion(s) and scale(s).

    Broadcasts (..., 4) x (..., 3) -> (..., 3, 3).  Output is symmetric
    positive definite for unit rotations and positive scales.
    """
    r = quat_to_rotation(rotation)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return np.einsum("...ik,...k,...jk->...ij", r, s2, r)


def gaussian_density(mu, cov, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T cov^-1 (x-mu)).

    Equals 1 at x = mu; raises for singular covariance.
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    cov_inv = linalg.mat3_inverse(cov)
    return float(np.exp(-0.5 * d @ cov_inv @ d))


def eval_sh(coeffs, view_dir, degree: int):
    """View-dependent color from real spherical harmonics coefficients.

    coeffs has shape (..., B, 3) with B = (degree + 1)^2; view_dir (..., 3)
    must be unit length.  Returns clamp(0.5 + sum_l c_l Y_l(dir), 0, 1).
    """
    rgb, _ = eval_sh_raw(coeffs, view_dir, degree)
    return np.clip(rgb, 0.0, 1.0)


def eval_sh_raw(coeffs, view_dir, degree: int):
    """Pre-clamp SH evaluation; returns (rgb_pre_clamp, basis values)."""
    if degree not in SUPPORTED_SH_DEGREES:
        raise ValueError(f"unsupported SH degree {degree}; expected 0 or 1")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    expected = sh_coeff_count(degree)
    if coeffs.shape[-2] != expected:
        raise ValueError(
            f"degree {degree} needs {expected} coefficient bands, "
            f"got {coeffs.shape[-2]}"
        )
    view_dir = np.asarray(view_dir, dtype=np.float64)
    basis = sh_basis(view_dir, degree)
    rgb = 0.5 + np.einsum("...b,...bc->...c", basis, coeffs)
    return rgb, basis


def sh_basis(view_dir, degree: int):
    """Real SH basis values Y_l(dir), shape (..., (degree+1)^2)."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    shape = view_dir.shape[:-1]
    basis = np.empty(shape + (sh_coeff_count(degree),), dtype=np.float64)
    basis[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = view_dir[..., 0], view_dir[..., 1], view_dir[..., 2]
        basis[..., 1] = -SH_C1 * y
        basis[..., 2] = SH_C1 * z
        basis[..., 3] = -SH_C1 * x
    return basis


def eval_sh_backward(coeffs, view_dir, degree: int, rgb_pre_clamp, d_rgb):
    """Gradients of the clamped SH color w.r.t. coefficients and direction.

    Channels clamped at 0 or 1 receive zero gradient.  Returns
    (d_coeffs, d_view_dir); the latter is zero for degree 0.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    inside = (rgb_pre_clamp > 0.0) & (rgb_pre_clamp < 1.0)
    d_pre = d_rgb * inside
    basis = sh_basis(view_dir, degree)
    d_coeffs = basis[..., :, None] * d_pre[..., None, :]
    d_dir = np.zeros_like(view_dir)
    if degree >= 1:
        # d(rgb)/d(dir) through the linear band: Y1 = (-C1 y, C1 z, -C1 x).
        d_dir[..., 0] = -SH_C1 * np.sum(coeffs[..., 3, :] * d_pre, axis=-1)
        d_dir[..., 1] = -SH_C1 * np.sum(coeffs[..., 1, :] * d_pre, axis=-1)
        d_dir[..., 2] = SH_C1 * np.sum(coeffs[..., 2, :] * d_pre, axis=-1)
    return d_coeffs, d_dir
