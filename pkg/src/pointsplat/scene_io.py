"""Dataset ingestion, view-pair sampling, and checkpoint persistence.

A scene directory follows the common RGB-D export layout:

    <scene>/intrinsics.txt    3x3 row-major pinhole matrix
    <scene>/pose/<id>.txt     4x4 row-major camera-to-world matrix
    <scene>/color/<id>.png    8-bit RGB
    <scene>/depth/<id>.png    16-bit grayscale, millimetres, 0 = invalid

Camera-to-world pose files are inverted at load time into the package's
world-to-camera convention.  When a target resolution is given, color is
resized bilinearly, depth by nearest neighbor, and intrinsics are scaled
to match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, CameraPose, RgbdFrame
from .tensorfile import read_tensor_file, write_tensor_file

DEPTH_SCALE = 1000.0  # 16-bit depth pixel value per metre
CHECKPOINT_KIND = "train-checkpoint"


@dataclass
class Scene:
    frames: list[RgbdFrame]
    scene_id: str

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"scene {self.scene_id}: frame ids must increase")
        dims = {(f.intrinsics.width, f.intrinsics.height) for f in self.frames}
        if len(dims) > 1:
            raise ValueError(f"scene {self.scene_id}: mixed frame dimensions")
        self._by_id = {f.frame_id: f for f in self.frames}

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, frame_id: int) -> RgbdFrame:
        return self._by_id[frame_id]

    def has_frame(self, frame_id: int) -> bool:
        return frame_id in self._by_id


def _read_matrix(path: Path, shape) -> np.ndarray:
    values = np.loadtxt(path, dtype=np.float64)
    if values.shape != shape:
        raise ValueError(f"{path}: expected {shape} matrix, got {values.shape}")
    return values


def _resize_nearest(depth: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = depth.shape
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(int)
    return depth[rows[:, None], cols[None, :]]


def load_scene(scene_dir, resolution: tuple[int, int] | None = None) -> Scene:
    """Load one scene directory; `resolution` is an optional (W, H) target."""
    scene_dir = Path(scene_dir)
    intr_path = scene_dir / "intrinsics.txt"
    if not intr_path.exists():
        raise FileNotFoundError(f"missing intrinsics file {intr_path}")
    k = _read_matrix(intr_path, (3, 3))

    pose_dir = scene_dir / "pose"
    if not pose_dir.is_dir():
        raise FileNotFoundError(f"missing pose directory {pose_dir}")
    frame_ids = sorted(int(p.stem) for p in pose_dir.glob("*.txt"))
    if not frame_ids:
        raise ValueError(f"scene {scene_dir.name}: no pose files found")

    frames = []
    native = None
    for fid in frame_ids:
        color_path = scene_dir / "color" / f"{fid}.png"
        depth_path = scene_dir / "depth" / f"{fid}.png"
        for p in (color_path, depth_path):
            if not p.exists():
                raise FileNotFoundError(f"frame {fid}: missing file {p}")
        try:
            pose = CameraPose.from_camera_to_world(
                _read_matrix(pose_dir / f"{fid}.txt", (4, 4))
            )
        except ValueError as exc:
            raise ValueError(f"frame {fid}: bad pose: {exc}") from exc

        color_img = Image.open(color_path)
        if color_img.mode != "RGB":
            color_img = color_img.convert("RGB")
        depth_raw = np.asarray(Image.open(depth_path))
        if depth_raw.ndim != 2:
            raise ValueError(f"frame {fid}: depth image must be single-channel")
        if (color_img.height, color_img.width) != depth_raw.shape:
            raise ValueError(
                f"frame {fid}: color {color_img.size} and depth "
                f"{depth_raw.shape[::-1]} sizes do not match"
            )
        if native is None:
            native = (color_img.width, color_img.height)
        elif native != (color_img.width, color_img.height):
            raise ValueError(f"frame {fid}: frame size differs from the scene's")

        if resolution is not None and resolution != native:
            width, height = resolution
            color_img = color_img.resize((width, height), Image.BILINEAR)
            depth_raw = _resize_nearest(depth_raw, width, height)
        else:
            width, height = native

        intr = CameraIntrinsics(
            fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2],
            width=native[0], height=native[1],
        ).scaled(width, height)
        frames.append(
            RgbdFrame(
                color=np.asarray(color_img, dtype=np.float64) / 255.0,
                depth=np.asarray(depth_raw, dtype=np.float64) / DEPTH_SCALE,
                intrinsics=intr,
                pose=pose,
                frame_id=fid,
            )
        )
    return Scene(frames=frames, scene_id=scene_dir.name)


def write_scene(scene: Scene, scene_dir):
    """Write a scene in the directory layout load_scene expects.

    Color is quantized to 8 bits and depth to millimetres, so a written
    frame loads back with color error at most 1/255 and, for depths that
    are already millimetre-quantized, exactly.
    """
    scene_dir = Path(scene_dir)
    (scene_dir / "pose").mkdir(parents=True, exist_ok=True)
    (scene_dir / "color").mkdir(exist_ok=True)
    (scene_dir / "depth").mkdir(exist_ok=True)
    intr = scene.frames[0].intrinsics
    np.savetxt(scene_dir / "intrinsics.txt", intr.matrix(), fmt="%.17g")
    for frame in scene.frames:
        c2w = np.linalg.inv(frame.pose.matrix())
        np.savetxt(scene_dir / "pose" / f"{frame.frame_id}.txt", c2w, fmt="%.17g")
        color8 = np.round(np.clip(frame.color, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(color8, mode="RGB").save(
            scene_dir / "color" / f"{frame.frame_id}.png"
        )
        depth16 = np.round(frame.depth * DEPTH_SCALE).astype(np.uint16)
        Image.fromarray(depth16).save(
            scene_dir / "depth" / f"{frame.frame_id}.png"
        )


def list_scene_dirs(data_dir) -> list[Path]:
    """Sorted subdirectories that look like scenes."""
    data_dir = Path(data_dir)
    return sorted(
        p for p in data_dir.iterdir() if p.is_dir() and (p / "intrinsics.txt").exists()
    )


def valid_anchor_ids(scene: Scene, interval: int = 5) -> list[int]:
    return [f.frame_id for f in scene.frames if scene.has_frame(f.frame_id + interval)]


def sample_view_pair(scene: Scene, rng, interval: int = 5):
    """Uniformly pick (frame_i, frame_{i+interval}) over valid anchors."""
    anchors = valid_anchor_ids(scene, interval)
    if not anchors:
        raise ValueError(
            f"scene {scene.scene_id}: no frame pair with id gap {interval}"
        )
    anchor = anchors[int(rng.integers(len(anchors)))]
    return scene.frame(anchor), scene.frame(anchor + interval)


def save_checkpoint(state, path, config, net_id: str = ""):
    """Persist a TrainState with its resolved config.

    The tensor payload round-trips bit-exactly; saving a loaded checkpoint
    reproduces the file byte for byte.
    """
    tensors = {}
    for name, arr in state.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in state.m.items():
        tensors[f"m.{name}"] = arr
    for name, arr in state.v.items():
        tensors[f"v.{name}"] = arr
    meta = {
        "kind": CHECKPOINT_KIND,
        "step": str(state.step),
        "rng_state": json.dumps(state.rng.bit_generator.state, sort_keys=True),
        "config_json": config.to_json(),
        "config_hash": config.config_hash(),
        "net_id": net_id,
    }
    write_tensor_file(path, tensors, meta)


@dataclass
class Checkpoint:
    state: "TrainState"  # noqa: F821 (resolved lazily; see load_checkpoint)
    config: "TrainConfig"  # noqa: F821
    config_hash: str
    net_id: str


def load_checkpoint(path) -> Checkpoint:
    from .trainer import TrainConfig, TrainState  # deferred to avoid a cycle

    tensors, meta = read_tensor_file(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a checkpoint file")
    config = TrainConfig.from_json(meta["config_json"])
    if config.config_hash() != meta["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        group, key = name.split(".", 1)
        {"param": params, "m": m, "v": v}[group][key] = arr
    rng = np.random.default_rng(config.seed)
    rng.bit_generator.state = json.loads(meta["rng_state"])
    state = TrainState(params=params, m=m, v=v, step=int(meta["step"]), rng=rng)
    return Checkpoint(
        state=state,
        config=config,
        config_hash=meta["config_hash"],
        net_id=meta["net_id"],
    )
