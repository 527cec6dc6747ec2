"""Pinhole camera model: RGB-D back-projection and forward projection.

Conventions (fixed once, used everywhere):
  * poses are stored world-to-camera: x_cam = R @ x_world + t.  Dataset
    files store camera-to-world matrices and are inverted at load time.
  * pixel (i, j) has continuous image coordinates (i + 0.5, j + 0.5);
    (u, v) pairs are (column, row).
  * depth 0 marks an invalid pixel and is excluded from back-projection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import euler_rotation, mat3_inverse

PIXEL_CENTER = 0.5
MIN_CAMERA_Z = 1e-6


class BehindCameraError(ValueError):
    """Projection requested for a point at or behind the camera plane."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera at a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError("pose rotation must be 3x3")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("pose rotation is not orthonormal within 1e-6")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def from_camera_to_world(cls, mat: np.ndarray) -> "CameraPose":
        """Invert a 4x4 camera-to-world matrix into the stored convention."""
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        if np.max(np.abs(mat[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise ValueError("pose matrix bottom row must be (0, 0, 0, 1)")
        r_c2w = mat[:3, :3]
        # mat3_inverse raises on non-invertible input; orthonormality is
        # checked by the CameraPose constructor afterwards.
        r_w2c = mat3_inverse(r_c2w)
        return cls(rotation=r_w2c, translation=-r_w2c @ mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class RgbdFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) metres, 0 = invalid
    intrinsics: CameraIntrinsics
    pose: CameraPose
    frame_id: int

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        h, w = self.intrinsics.height, self.intrinsics.width
        if color.shape != (h, w, 3):
            raise ValueError(
                f"frame {self.frame_id}: color shape {color.shape} does not "
                f"match intrinsics {h}x{w}"
            )
        if depth.shape != (h, w):
            raise ValueError(
                f"frame {self.frame_id}: depth shape {depth.shape} does not "
                f"match intrinsics {h}x{w}"
            )
        if np.any(depth < 0) or not np.all(np.isfinite(depth)):
            raise ValueError(f"frame {self.frame_id}: depth must be finite and >= 0")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)

    def with_pose(self, pose: CameraPose) -> "RgbdFrame":
        return replace(self, pose=pose)


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3) world metres
    colors: np.ndarray  # (N, 3) in [0, 1]
    source_view: np.ndarray  # (N,) int view index
    source_pixel: np.ndarray  # (N, 2) int (u, v) pixel indices
    visible_mask: np.ndarray  # (N,) bool

    def __post_init__(self):
        n = len(self.positions)
        for name in ("colors", "source_view", "source_pixel", "visible_mask"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"point cloud field {name} length mismatch")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def visible_count(self) -> int:
        return int(np.count_nonzero(self.visible_mask))

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(
            positions=self.positions[indices],
            colors=self.colors[indices],
            source_view=self.source_view[indices],
            source_pixel=self.source_pixel[indices],
            visible_mask=self.visible_mask[indices],
        )


def merge_clouds(clouds: list[PointCloud]) -> PointCloud:
    return PointCloud(
        positions=np.concatenate([c.positions for c in clouds], axis=0),
        colors=np.concatenate([c.colors for c in clouds], axis=0),
        source_view=np.concatenate([c.source_view for c in clouds], axis=0),
        source_pixel=np.concatenate([c.source_pixel for c in clouds], axis=0),
        visible_mask=np.concatenate([c.visible_mask for c in clouds], axis=0),
    )


def back_project(frame: RgbdFrame, view_index: int = 0) -> PointCloud:
    """Lift every depth-valid pixel of an RGB-D frame to a world-space point.

    Applies R^-1 (d * K^-1 [u, v, 1]^T - t) at each pixel center, with the
    pixel color attached.  An all-invalid depth map yields an empty cloud.
    """
    rows, cols = np.nonzero(frame.depth > 0)
    d = frame.depth[rows, cols]
    u = cols.astype(np.float64) + PIXEL_CENTER
    v = rows.astype(np.float64) + PIXEL_CENTER
    k_inv = mat3_inverse(frame.intrinsics.matrix())
    r_inv = mat3_inverse(frame.pose.rotation)
    uv1 = np.stack([u, v, np.ones_like(u)], axis=1)
    p_cam = d[:, None] * (uv1 @ k_inv.T)
    positions = (p_cam - frame.pose.translation) @ r_inv.T
    return PointCloud(
        positions=positions,
        colors=frame.color[rows, cols],
        source_view=np.full(len(rows), view_index, dtype=np.int64),
        source_pixel=np.stack([cols, rows], axis=1).astype(np.int64),
        visible_mask=np.ones(len(rows), dtype=bool),
    )


def project_points(points: np.ndarray, frame: RgbdFrame):
    """Pinhole projection of world points, shape (N, 3) -> (u, v, depth) arrays.

    Raises BehindCameraError if any point has camera-space z <= 1e-6.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = points @ frame.pose.rotation.T + frame.pose.translation
    z = p_cam[:, 2]
    if np.any(z <= MIN_CAMERA_Z):
        raise BehindCameraError(
            f"point at camera-space z={float(np.min(z)):.3e} is behind the camera"
        )
    intr = frame.intrinsics
    u = intr.fx * p_cam[:, 0] / z + intr.cx
    v = intr.fy * p_cam[:, 1] / z + intr.cy
    return u, v, z


def project_point(point: np.ndarray, frame: RgbdFrame):
    """Single-point convenience wrapper around project_points."""
    u, v, z = project_points(np.asarray(point)[None, :], frame)
    return float(u[0]), float(v[0]), float(z[0])


def rotate_augment(
    clouds: list[PointCloud],
    poses: list[CameraPose],
    angles: tuple[float, float, float],
    pivot: np.ndarray,
):
    """Apply one common rigid rotation about `pivot` to points and cameras.

    The scene content seen by each camera is unchanged: rendering the
    augmented points from the augmented poses reproduces the original views.
    Returns (new_clouds, new_poses).
    """
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    rot = euler_rotation(*angles)
    new_clouds = [
        PointCloud(
            positions=(c.positions - pivot) @ rot.T + pivot,
            colors=c.colors.copy(),
            source_view=c.source_view.copy(),
            source_pixel=c.source_pixel.copy(),
            visible_mask=c.visible_mask.copy(),
        )
        for c in clouds
    ]
    new_poses = []
    for pose in poses:
        r_new = pose.rotation @ rot.T
        t_new = pose.translation + pose.rotation @ pivot - r_new @ pivot
        new_poses.append(CameraPose(rotation=r_new, translation=t_new))
    return new_clouds, new_poses
