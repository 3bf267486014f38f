"""Labelled grasp dataset: generation, binary record format and the scene split."""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import so3
from ..cloud import PointCloud, ball_query, build_neighborhoods, read_ply, write_ply
from ..orbit import DEFAULT_K, GraspPose, GripperSpec, finger_offset, orbit_rotation_matrices
from .oracle import DEFAULT_MU, GraspOracle
from .render import DEPTH_NOISE, camera_rig, observe
from .scene import WORKSPACE, Scene, SceneSpec, spawn_scene

log = logging.getLogger(__name__)

MAGIC = b"OGDS"
VERSION = 1
HEADER = struct.Struct("<4sIIIQQQ")
RECORD = np.dtype([("scene", "<u4"), ("object", "<u2"), ("position", "<f4", (3,)),
                   ("normal", "<f4", (3,)), ("mask", "<u8")])
DATASET_FILE = "dataset.ogds"
CLOUD_DIR = "clouds"


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 10
    mode: str = "pile"
    n_objects: int = 5
    library: tuple[str, ...] = ("box", "cylinder", "sphere")
    views: str = "single"
    points_per_object: int = 64
    K: int = DEFAULT_K
    r_l: float = 0.05
    m: int = 1024
    cloud_points: tuple[int, int] = (4000, 6000)
    normal_k: int = 16
    mu: float = DEFAULT_MU
    noise: float = DEPTH_NOISE
    workspace: float = WORKSPACE
    gripper: GripperSpec = field(default_factory=GripperSpec)
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if not 1 <= self.K <= 64:
            raise ValueError("K must lie in [1, 64] to fit the label bitmask")
        if self.points_per_object < 1:
            raise ValueError("points_per_object must be >= 1")
        lo, hi = self.cloud_points
        if not 0 < lo <= hi:
            raise ValueError("cloud_points range must be positive and ordered")

    def scene_spec(self, scene_id: int) -> SceneSpec:
        seed = int(np.random.SeedSequence([self.seed, scene_id]).generate_state(1)[0])
        return SceneSpec(mode=self.mode, n_objects=self.n_objects, library=tuple(self.library),
                         workspace=self.workspace, seed=seed)


def is_validation(scene_id: int) -> bool:
    """Deterministic 90/10 split on a hash of the scene id."""
    return zlib.crc32(struct.pack("<I", scene_id)) % 10 == 0


def mask_centers(cloud: PointCloud) -> list[tuple[int, int]]:
    """``(object id, point index)`` of the point nearest each object's labelled centroid."""
    if cloud.labels is None:
        raise ValueError("cloud has no labels")
    out = []
    for oid in np.unique(cloud.labels):
        if oid <= 0:
            continue
        idx = np.flatnonzero(cloud.labels == oid)
        c = cloud.positions[idx].mean(axis=0)
        d = np.linalg.norm(cloud.positions[idx] - c, axis=1)
        out.append((int(oid), int(idx[np.argmin(d)])))
    return out


def label_point(oracle: GraspOracle, cloud: PointCloud, index: int, K: int = DEFAULT_K) -> int:
    """Bitmask of oracle successes over the ``K`` orbit frames at ``cloud[index]``."""
    p, n = cloud.positions[index], cloud.normals[index]
    reach = oracle.gripper.max_opening + oracle.gripper.finger_depth
    local = cloud.subset(ball_query(cloud, p, reach))
    mask = 0
    for j, M in enumerate(orbit_rotation_matrices(n, K)):
        pose = finger_offset(GraspPose(so3.Rotation(M), p, point_index=index), local, oracle.gripper)
        if pose.executable and oracle(pose).success:
            mask |= 1 << j
    return mask


def observe_scene(scene: Scene, cfg: DataConfig, rng: np.random.Generator) -> PointCloud:
    cams = camera_rig(scene.workspace, cfg.views, rng, noise=cfg.noise)
    cloud = observe(scene, cams, rng, cfg.cloud_points, cfg.normal_k)
    # single precision so the float32 dataset records match the stored cloud exactly
    return PointCloud(cloud.positions.astype(np.float32).astype(np.float64), cloud.normals, cloud.labels)


def scene_records(scene_id: int, cfg: DataConfig) -> tuple[PointCloud, np.ndarray]:
    spec = cfg.scene_spec(scene_id)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    return label_scene(spawn_scene(spec), scene_id, cfg, rng)


def label_scene(scene: Scene, scene_id: int, cfg: DataConfig,
                rng: np.random.Generator) -> tuple[PointCloud, np.ndarray]:
    """Observe ``scene`` and label sampled candidate points on every visible object."""
    cloud = observe_scene(scene, cfg, rng)
    oracle = GraspOracle(scene, cfg.gripper, cfg.mu)
    rows = []
    for oid, ci in mask_centers(cloud):
        nb = build_neighborhoods(cloud, [ci], cfg.r_l, cfg.m)[0]
        pool = nb.query_indices[cloud.labels[nb.query_indices] == oid]
        pick = np.sort(rng.choice(pool, size=min(cfg.points_per_object, pool.size), replace=False))
        for idx in pick:
            rows.append((scene_id, oid, cloud.positions[idx], cloud.normals[idx], label_point(oracle, cloud, idx, cfg.K)))
    rec = np.zeros(len(rows), dtype=RECORD)
    for i, r in enumerate(rows):
        rec[i] = r
    return cloud, rec


def count_labels(records: np.ndarray, K: int) -> tuple[int, int]:
    pos = sum(bin(int(m)).count("1") for m in records["mask"])
    return pos, len(records) * K - pos


def write_dataset(path, records: np.ndarray, K: int, n_scenes: int) -> None:
    records = np.ascontiguousarray(records, dtype=RECORD)
    pos, neg = count_labels(records, K)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, K, n_scenes, len(records), pos, neg))
        f.write(records.tobytes())


def read_dataset(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, K, n_scenes, n_rec, pos, neg = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = raw[HEADER.size:]
    if len(body) != n_rec * RECORD.itemsize:
        raise ValueError(f"{path}: expected {n_rec} records, found {len(body) / RECORD.itemsize:g}")
    rec = np.frombuffer(body, dtype=RECORD).copy()
    return {"K": K, "n_scenes": n_scenes, "n_records": n_rec, "positive": pos, "negative": neg}, rec


def cloud_path(root, scene_id: int) -> Path:
    return Path(root) / CLOUD_DIR / f"scene_{scene_id:05d}.ply"


def generate_dataset(cfg: DataConfig, out_dir, progress=None) -> dict:
    """Render, label and write every scene; returns the count summary."""
    out = Path(out_dir)
    (out / CLOUD_DIR).mkdir(parents=True, exist_ok=True)
    all_rec = []
    for sid in range(cfg.n_scenes):
        cloud, rec = scene_records(sid, cfg)
        write_ply(cloud_path(out, sid), cloud)
        all_rec.append(rec)
        if progress:
            progress(sid, rec)
    records = np.concatenate(all_rec) if all_rec else np.zeros(0, dtype=RECORD)
    write_dataset(out / DATASET_FILE, records, cfg.K, cfg.n_scenes)
    pos, neg = count_labels(records, cfg.K)
    return {"scenes": cfg.n_scenes, "points": len(records), "poses": len(records) * cfg.K,
            "positive": pos, "negative": neg}


def load_scene_cloud(root, scene_id: int) -> PointCloud:
    return read_ply(cloud_path(root, scene_id))

