"""Deterministic synthetic RGB-D scenes and random Gaussian sets.

Scenes are analytically ray-cast (planes + spheres with smooth procedural
color fields), so depth and color are exact, photometrically consistent
across views, and entirely independent of the Gaussian renderer.  Values
are quantized exactly as the on-disk codec would store them (8-bit color,
millimetre depth), making in-memory scenes identical to written-then-
loaded ones.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics, CameraPose, RgbdFrame
from .gaussian import SH_C0, GaussianSet, from_free_params, sh_coeff_count
from .linalg import mat3_inverse
from .scene_io import Scene


def toy_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=0.85 * width,
        fy=0.85 * width,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def look_at_pose(eye, target, up=(0.0, -1.0, 0.0)) -> CameraPose:
    """World-to-camera pose for a camera at `eye` looking at `target`.

    Camera axes: x right, y down, z forward (v grows downward in the
    image, matching the projection convention).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    return CameraPose(rotation=rot, translation=-rot @ eye)


def _color_field(points: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Smooth procedural RGB in [0.05, 0.95] from world position."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    raw = np.stack(
        [
            np.sin(3.1 * x + phases[0]) * np.cos(2.3 * y + phases[1]),
            np.sin(2.7 * y + phases[2]) * np.cos(3.7 * z + phases[3]),
            np.sin(4.1 * z + phases[4]) * np.cos(2.9 * x + phases[5]),
        ],
        axis=1,
    )
    return 0.5 + 0.45 * raw


def make_toy_scene(seed: int = 0, width: int = 64, height: int = 48,
                   n_frames: int = 8, scene_id: str | None = None) -> Scene:
    """Ray-cast scene: back wall, floor, and two spheres, viewed along a
    slowly translating camera path."""
    rng = np.random.default_rng(seed)
    intr = toy_intrinsics(width, height)
    k_inv = mat3_inverse(intr.matrix())

    wall_z = 2.4 + 0.2 * rng.uniform()
    floor_y = 0.45 + 0.1 * rng.uniform()
    spheres = [
        (np.array([-0.3, 0.15, 1.2]) + rng.uniform(-0.08, 0.08, 3), 0.28),
        (np.array([0.35, 0.0, 1.6]) + rng.uniform(-0.08, 0.08, 3), 0.33),
    ]
    phase_sets = [rng.uniform(0.0, 2.0 * np.pi, 6) for _ in range(4)]

    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    uv1 = np.stack(
        [cols.ravel() + 0.5, rows.ravel() + 0.5, np.ones(width * height)], axis=1
    )
    dirs_cam = uv1 @ k_inv.T  # camera-z component is 1, so ray t == depth

    frames = []
    for i in range(n_frames):
        eye = np.array(
            [
                0.22 * np.sin(0.35 * i),
                -0.08 + 0.04 * np.cos(0.3 * i),
                -1.65 + 0.015 * i,
            ]
        )
        target = np.array([0.02 * i - 0.05, 0.12, 1.3])
        pose = look_at_pose(eye, target)
        origin = pose.camera_center()
        dirs = dirs_cam @ pose.rotation  # world directions, row per pixel

        t_best = np.full(len(dirs), np.inf)
        obj_best = np.full(len(dirs), -1, dtype=np.int64)

        def consider(t, mask, obj_id):
            hit = mask & (t > 1e-6) & (t < t_best)
            t_best[hit] = t[hit]
            obj_best[hit] = obj_id

        with np.errstate(divide="ignore", invalid="ignore"):
            t_wall = (wall_z - origin[2]) / dirs[:, 2]
            consider(t_wall, dirs[:, 2] > 1e-9, 0)
            t_floor = (floor_y - origin[1]) / dirs[:, 1]
            consider(t_floor, dirs[:, 1] > 1e-9, 1)
        for s_idx, (center, radius) in enumerate(spheres):
            oc = origin - center
            a = np.sum(dirs * dirs, axis=1)
            b = 2.0 * (dirs @ oc)
            c = float(oc @ oc) - radius * radius
            disc = b * b - 4.0 * a * c
            ok = disc >= 0.0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t_near = (-b - sq) / (2.0 * a)
            consider(t_near, ok, 2 + s_idx)

        hit_points = origin + t_best[:, None] * dirs
        color = np.zeros((len(dirs), 3))
        for obj_id, phases in enumerate(phase_sets):
            sel = obj_best == obj_id
            if np.any(sel):
                color[sel] = _color_field(hit_points[sel], phases)

        depth = np.where(np.isfinite(t_best), t_best, 0.0)
        # Quantize exactly as the on-disk codec stores values.
        depth_q = np.round(depth * 1000.0) / 1000.0
        color_q = np.round(np.clip(color, 0.0, 1.0) * 255.0) / 255.0
        frames.append(
            RgbdFrame(
                color=color_q.reshape(height, width, 3),
                depth=depth_q.reshape(height, width),
                intrinsics=intr,
                pose=pose,
                frame_id=i,
            )
        )
    return Scene(frames=frames, scene_id=scene_id or f"toy-{seed}")


def make_test_frame(width: int = 32, height: int = 32,
                    frame_id: int = 0) -> RgbdFrame:
    """Identity-pose frame used by renderer tests (content irrelevant)."""
    intr = toy_intrinsics(width, height)
    return RgbdFrame(
        color=np.zeros((height, width, 3)),
        depth=np.zeros((height, width)),
        intrinsics=intr,
        pose=CameraPose(rotation=np.eye(3), translation=np.zeros(3)),
        frame_id=frame_id,
    )


def random_gaussians(rng, n: int, frame: RgbdFrame,
                     z_range=(1.6, 3.0), scale_range=(0.015, 0.06),
                     opacity_range=(0.15, 0.85), sh_degree: int = 0,
                     min_depth_gap: float = 0.0) -> GaussianSet:
    """Random Gaussians placed inside the frame's view frustum.

    `min_depth_gap` enforces pairwise-distinct camera depths, which the
    gradient checks need to stay away from sort discontinuities.
    """
    intr = frame.intrinsics
    while True:
        z = rng.uniform(*z_range, size=n)
        if min_depth_gap <= 0.0 or n < 2:
            break
        gaps = np.diff(np.sort(z))
        if np.all(gaps >= min_depth_gap):
            break
    margin = 0.15
    u = rng.uniform(margin * intr.width, (1 - margin) * intr.width, size=n)
    v = rng.uniform(margin * intr.height, (1 - margin) * intr.height, size=n)
    x_cam = (u - intr.cx) / intr.fx * z
    y_cam = (v - intr.cy) / intr.fy * z
    p_cam = np.stack([x_cam, y_cam, z], axis=1)
    rot = frame.pose.rotation
    mu = (p_cam - frame.pose.translation) @ rot  # R^T (p_cam - t), row form

    quat = rng.normal(size=(n, 4))
    log_scale = np.log(rng.uniform(*scale_range, size=(n, 3)))
    opacity = rng.uniform(*opacity_range, size=n)
    opacity_logit = np.log(opacity / (1.0 - opacity))
    n_bands = sh_coeff_count(sh_degree)
    sh = np.zeros((n, n_bands, 3))
    sh[:, 0, :] = (rng.uniform(0.15, 0.85, size=(n, 3)) - 0.5) / SH_C0
    if sh_degree >= 1:
        sh[:, 1:, :] = rng.uniform(-0.05, 0.05, size=(n, n_bands - 1, 3))
    return from_free_params(mu, quat, log_scale, opacity_logit, sh)
