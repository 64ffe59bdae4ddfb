"""
Data Module - Pose dataset schema, JSONL loading/saving, input normalization
and a synthetic articulated-pose generator
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial.transform import Rotation

from dcgct import DatasetError, ConfigError, worker_count
from skeleton import SkeletonTopology

log = logging.getLogger("dcgct.data")

# Synthetic camera
IMAGE_WIDTH = 1000
IMAGE_HEIGHT = 1000
FOCAL_LENGTH = 1150.0
DEPTH_RANGE_MM = (3000.0, 6000.0)
LATERAL_JITTER_MM = 300.0

# Bone lengths (mm) from parent to joint and rest directions in a y-up body frame
BONE_TABLE: Dict[str, Tuple[float, Tuple[float, float, float]]] = {
    "RHip": (130.0, (-1.0, 0.0, 0.0)),
    "RKnee": (450.0, (0.0, -1.0, 0.0)),
    "RAnkle": (440.0, (0.0, -1.0, 0.0)),
    "LHip": (130.0, (1.0, 0.0, 0.0)),
    "LKnee": (450.0, (0.0, -1.0, 0.0)),
    "LAnkle": (440.0, (0.0, -1.0, 0.0)),
    "Spine": (230.0, (0.0, 1.0, 0.0)),
    "Thorax": (250.0, (0.0, 1.0, 0.0)),
    "Neck": (110.0, (0.0, 1.0, 0.0)),
    "Head": (120.0, (0.0, 1.0, 0.0)),
    "LShoulder": (150.0, (1.0, 0.0, 0.0)),
    "LElbow": (280.0, (0.0, -1.0, 0.0)),
    "LWrist": (250.0, (0.0, -1.0, 0.0)),
    "RShoulder": (150.0, (-1.0, 0.0, 0.0)),
    "RElbow": (280.0, (0.0, -1.0, 0.0)),
    "RWrist": (250.0, (0.0, -1.0, 0.0)),
}
DEFAULT_BONE = (200.0, (0.0, -1.0, 0.0))

# Per-joint local rotation limits (radians, xyz Euler magnitude)
ANGLE_LIMITS: Dict[str, Tuple[float, float, float]] = {
    "RHip": (0.2, 0.2, 0.2), "LHip": (0.2, 0.2, 0.2),
    "RKnee": (1.2, 0.3, 0.4), "LKnee": (1.2, 0.3, 0.4),
    "RAnkle": (1.0, 0.2, 0.2), "LAnkle": (1.0, 0.2, 0.2),
    "Spine": (0.4, 0.3, 0.3), "Thorax": (0.3, 0.3, 0.2),
    "Neck": (0.4, 0.5, 0.3), "Head": (0.3, 0.3, 0.3),
    "LShoulder": (0.2, 0.3, 0.3), "RShoulder": (0.2, 0.3, 0.3),
    "LElbow": (1.4, 0.8, 1.2), "RElbow": (1.4, 0.8, 1.2),
    "LWrist": (1.2, 0.4, 1.2), "RWrist": (1.2, 0.4, 1.2),
}
DEFAULT_LIMITS = (0.5, 0.5, 0.5)
TRAJECTORY_SIGMA_FRAMES = 3.0


@dataclass
class PoseSample:
    input2d: np.ndarray                   # [N, 2] or [T, N, 2], normalized image coordinates
    target3d_mm: np.ndarray               # [N, 3], root-relative
    action: Optional[str] = None
    subject: Optional[str] = None
    camera: Optional[Dict] = None

    @property
    def frames(self) -> int:
        return 1 if self.input2d.ndim == 2 else self.input2d.shape[0]

    def to_record(self) -> Dict:
        record = {"input2d": self.input2d.tolist(), "target3d_mm": self.target3d_mm.tolist()}
        if self.action is not None:
            record["action"] = self.action
        if self.subject is not None:
            record["subject"] = self.subject
        if self.camera is not None:
            record["camera"] = self.camera
        return record


@dataclass
class Dataset:
    samples: List[PoseSample]
    topology: SkeletonTopology
    frames: int = 1
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def inputs(self, indices=None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.input2d for s in chosen]).astype(np.float32)

    def targets(self, indices=None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.target3d_mm for s in chosen]).astype(np.float32)

    def actions(self) -> List[str]:
        return [s.action or "all" for s in self.samples]

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        """Index batches in file order, or in a seeded shuffled order when rng is given"""
        order = np.arange(len(self.samples))
        if rng is not None:
            order = rng.permutation(len(self.samples))
        for start in range(0, len(order), batch_size):
            yield order[start:start + batch_size]


def normalize_2d(pixels: np.ndarray, width: float, height: float) -> np.ndarray:
    """
    Map pixel coordinates to [-1, 1] along x with the aspect ratio preserved

    x' = 2x/width - 1; y' = (2y - height)/width
    """
    if width <= 0 or height <= 0:
        raise ConfigError("image width and height must be > 0")
    pixels = np.asarray(pixels, dtype=np.float64)
    out = np.empty_like(pixels)
    out[..., 0] = 2.0 * pixels[..., 0] / width - 1.0
    out[..., 1] = (2.0 * pixels[..., 1] - height) / width
    return out


def denormalize_2d(coords: np.ndarray, width: float, height: float) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(coords)
    out[..., 0] = (coords[..., 0] + 1.0) * width / 2.0
    out[..., 1] = (coords[..., 1] * width + height) / 2.0
    return out


def _parse_record(line_no: int, line: str, topo: SkeletonTopology) -> Optional[PoseSample]:
    line = line.strip()
    if not line:
        return None
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"line {line_no}: malformed JSON ({e})")
    if not isinstance(record, dict) or "input2d" not in record or "target3d_mm" not in record:
        raise DatasetError(f"line {line_no}: record needs input2d and target3d_mm")

    n = topo.joint_count
    try:
        input2d = np.asarray(record["input2d"], dtype=np.float64)
        target = np.asarray(record["target3d_mm"], dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetError(f"line {line_no}: input2d/target3d_mm must be numeric arrays")
    if input2d.ndim not in (2, 3) or input2d.shape[-2:] != (n, 2):
        raise DatasetError(f"line {line_no}: input2d shape {input2d.shape} does not match [{n}, 2] or [T, {n}, 2]")
    if target.shape != (n, 3):
        raise DatasetError(f"line {line_no}: target3d_mm shape {target.shape} does not match [{n}, 3]")
    if not np.all(np.isfinite(input2d)) or not np.all(np.isfinite(target)):
        raise DatasetError(f"line {line_no}: non-finite coordinates")

    root = target[topo.root]
    if np.any(root != 0.0):
        log.warning(f"line {line_no}: root joint not at origin, re-centering target")
        target = target - root
        target[topo.root] = 0.0

    return PoseSample(input2d, target, record.get("action"), record.get("subject"), record.get("camera"))


def load_dataset(path: str, topo: SkeletonTopology, split: str = "train") -> Dataset:
    """
    Load line-delimited JSON pose records

    Args:
        path: File of {input2d, target3d_mm, action?, subject?} lines
        topo: Topology every record must match
        split: train | val | test

    Returns:
        Dataset in file order
    """
    if not os.path.isfile(path):
        raise DatasetError(f"dataset file not found: {path}")
    with open(path, "r") as f:
        lines = f.readlines()

    workers = worker_count()
    if workers > 1 and len(lines) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parsed = list(pool.map(lambda item: _parse_record(item[0] + 1, item[1], topo), enumerate(lines)))
    else:
        parsed = [_parse_record(i + 1, line, topo) for i, line in enumerate(lines)]
    samples = [s for s in parsed if s is not None]

    frames = samples[0].frames if samples else 1
    for i, s in enumerate(samples):
        if s.frames != frames:
            raise DatasetError(f"sample {i}: {s.frames} frames, dataset arity is {frames}")
    log.info(f"Loaded {len(samples)} samples ({frames} frame(s)) from {path}")
    return Dataset(samples, topo, frames, split)


def save_dataset(dataset: Dataset, path: str):
    with open(path, "w") as f:
        for s in dataset.samples:
            f.write(json.dumps(s.to_record()) + "\n")


def _bone(name: str):
    return BONE_TABLE.get(name, DEFAULT_BONE)


def _forward_kinematics(topo: SkeletonTopology, root_rot: Rotation, local: np.ndarray) -> np.ndarray:
    """
    Joint positions (mm, y-up body frame, root at origin)

    Args:
        topo: Topology; parents precede children is not required
        root_rot: Global root orientation
        local: [N, 3] xyz Euler angles per joint (root row ignored)
    """
    n = topo.joint_count
    positions = np.zeros((n, 3))
    global_rot: List[Optional[Rotation]] = [None] * n
    global_rot[topo.root] = root_rot

    def resolve(j: int):
        if global_rot[j] is not None:
            return
        p = topo.parent[j]
        resolve(p)
        length, direction = _bone(topo.joint_names[j])
        rot = global_rot[p] * Rotation.from_euler("xyz", local[j])
        global_rot[j] = rot
        positions[j] = positions[p] + rot.apply(np.asarray(direction) * length)

    for j in range(n):
        resolve(j)
    return positions - positions[topo.root]


def _body_to_camera(points: np.ndarray) -> np.ndarray:
    """y-up body frame -> y-down camera frame"""
    return points * np.array([1.0, -1.0, 1.0])


def project(points_mm: np.ndarray, camera: Dict) -> np.ndarray:
    """Pinhole projection of camera-frame points to normalized 2D"""
    focal = camera["focal"]
    cx, cy = camera["center"]
    z = points_mm[..., 2]
    pixels = np.stack([focal * points_mm[..., 0] / z + cx, focal * points_mm[..., 1] / z + cy], axis=-1)
    return normalize_2d(pixels, camera["width"], camera["height"])


def synth_generate(topo: SkeletonTopology, count: int, frames: int = 1, noise_mm: float = 0.0,
                   seed: int = 0, split: str = "train") -> Dataset:
    """
    Generate posed skeletons by forward kinematics and project them to 2D

    Each sample draws joint angles within per-joint limits (smooth trajectories
    for frames > 1, target = middle frame), a yaw, and a subject 3-6 m in front
    of a 1150-unit pinhole camera. Pixel noise uses σ = f·noise_mm / depth.

    Args:
        topo: Skeleton topology
        count: Number of samples (>= 1)
        frames: Odd window length
        noise_mm: 2D noise expressed as millimeters at the subject's depth
        seed: RNG seed

    Returns:
        Dataset
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if frames < 1 or frames % 2 == 0:
        raise ConfigError(f"frames must be odd and >= 1, got {frames}")
    rng = np.random.default_rng(seed)
    n = topo.joint_count
    limits = np.array([ANGLE_LIMITS.get(name, DEFAULT_LIMITS) for name in topo.joint_names])
    limits[topo.root] = 0.0
    mid = (frames - 1) // 2

    samples = []
    for i in range(count):
        base = rng.uniform(-0.7, 0.7, size=(n, 3)) * limits
        if frames > 1:
            drift = rng.normal(0.0, 1.0, size=(frames, n, 3))
            drift = gaussian_filter1d(drift, TRAJECTORY_SIGMA_FRAMES, axis=0, mode="nearest")
            drift /= max(np.abs(drift).max(), 1e-9)
            angles = np.clip(base[None] + 0.3 * drift * limits[None], -limits[None], limits[None])
        else:
            angles = base[None]

        yaw = rng.uniform(-np.pi, np.pi)
        tilt = rng.uniform(-0.1, 0.1, size=2)
        root_rot = Rotation.from_euler("yxz", [yaw, tilt[0], tilt[1]])
        root_mm = np.array([
            rng.uniform(-LATERAL_JITTER_MM, LATERAL_JITTER_MM),
            rng.uniform(-LATERAL_JITTER_MM, LATERAL_JITTER_MM),
            rng.uniform(*DEPTH_RANGE_MM),
        ])
        camera = {"focal": FOCAL_LENGTH, "center": [IMAGE_WIDTH / 2.0, IMAGE_HEIGHT / 2.0],
                  "width": IMAGE_WIDTH, "height": IMAGE_HEIGHT, "root_mm": root_mm.tolist()}

        window = np.stack([_body_to_camera(_forward_kinematics(topo, root_rot, angles[t])) for t in range(frames)])
        input2d = project(window + root_mm, camera)
        if noise_mm > 0:
            sigma_px = FOCAL_LENGTH * noise_mm / root_mm[2]
            input2d = input2d + rng.normal(0.0, sigma_px, size=input2d.shape) * 2.0 / IMAGE_WIDTH

        target = window[mid].copy()
        target[topo.root] = 0.0
        samples.append(PoseSample(
            input2d[0] if frames == 1 else input2d,
            target,
            action="synthetic",
            subject=f"synth{i % 5}",
            camera=camera,
        ))
    log.info(f"Generated {count} synthetic samples ({frames} frame(s), noise {noise_mm} mm, seed {seed})")
    return Dataset(samples, topo, frames, split)
