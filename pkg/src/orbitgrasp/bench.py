"""Declutter benchmark: rounds of render, select, execute and remove, plus GSR/DR metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import so3
from .cloud import PointCloud, ball_query, build_neighborhoods, height_thresholded_fps
from .orbit import (DEFAULT_K, HEIGHT_BAND, QUALITY_THRESHOLD, GraspPose, GripperSpec, finger_offset,
                    orbit_argmax, orbit_rotation_matrices, select_grasp, sigmoid)
from .scenegen.oracle import DEFAULT_MU, GraspOracle
from .scenegen.render import DEPTH_NOISE, camera_rig, observe
from .scenegen.scene import WORKSPACE, Scene, SceneSpec, spawn_scene

MAX_FAILURES = 2


@dataclass
class RoundResult:
    attempts: int
    successes: int
    cleared: int
    total: int
    termination: str                      # "cleared" | "two-failures"
    outcomes: list = field(default_factory=list)   # per attempt: oracle reason or "none"
    seed: int = 0
    repetition: int = 0
    index: int = 0

    def __post_init__(self):
        if not 0 <= self.successes <= self.attempts:
            raise ValueError("successes must lie in [0, attempts]")
        if not 0 <= self.cleared <= self.total:
            raise ValueError("cleared must lie in [0, total]")


@dataclass
class BenchReport:
    rounds: list
    gsr: float | None          # pooled successes / attempts
    dr: float | None           # pooled cleared / total
    gsr_mean: float | None
    gsr_std: float | None
    dr_mean: float | None
    dr_std: float | None
    successes: int
    attempts: int
    cleared: int
    total: int

    def text(self, title: str = "") -> str:
        def pct(x):
            return "   n/a" if x is None else f"{100 * x:6.1f}"

        lines = [title] if title else []
        lines.append(f"{'rep':>3} {'round':>5} {'seed':>10} {'att':>4} {'succ':>4} {'clr':>4} {'tot':>4}  termination")
        for r in self.rounds:
            lines.append(f"{r.repetition:>3} {r.index:>5} {r.seed:>10} {r.attempts:>4} {r.successes:>4} "
                         f"{r.cleared:>4} {r.total:>4}  {r.termination}")
        lines.append(f"GSR {pct(self.gsr)} %  ({self.successes}/{self.attempts})   "
                     f"mean {pct(self.gsr_mean)} +- {pct(self.gsr_std)}")
        lines.append(f"DR  {pct(self.dr)} %  ({self.cleared}/{self.total})   "
                     f"mean {pct(self.dr_mean)} +- {pct(self.dr_std)}")
        return "\n".join(lines)

    def jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rounds)


def _ratio(a: int, b: int) -> float | None:
    return a / b if b else None


def metrics(results) -> BenchReport:
    """Pooled GSR/DR plus mean and population std over repetitions."""
    results = list(results)
    if not results:
        raise ValueError("no rounds to summarise")
    s = sum(r.successes for r in results)
    a = sum(r.attempts for r in results)
    c = sum(r.cleared for r in results)
    t = sum(r.total for r in results)
    reps = sorted({r.repetition for r in results})
    gsrs, drs = [], []
    for k in reps:
        rr = [r for r in results if r.repetition == k]
        g = _ratio(sum(r.successes for r in rr), sum(r.attempts for r in rr))
        if g is not None:
            gsrs.append(g)
        drs.append(_ratio(sum(r.cleared for r in rr), sum(r.total for r in rr)))
    drs = [d for d in drs if d is not None]

    def ms(x):
        return (float(np.mean(x)), float(np.std(x))) if x else (None, None)

    gm, gs = ms(gsrs)
    dm, dsd = ms(drs)
    return BenchReport(results, _ratio(s, a), _ratio(c, t), gm, gs, dm, dsd, s, a, c, t)


# ------------------------------------------------------------------ rounds

@dataclass(frozen=True)
class BenchConfig:
    rounds: int = 20
    repetitions: int = 2
    mode: str = "pile"
    n_objects: int = 5
    library: tuple[str, ...] = ("box", "cylinder", "sphere")
    views: str = "multi"
    cloud_points: tuple[int, int] = (2000, 3000)
    normal_k: int = 16
    noise: float = DEPTH_NOISE
    mu: float = DEFAULT_MU
    workspace: float = WORKSPACE
    gripper: GripperSpec = field(default_factory=GripperSpec)
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.repetitions < 1:
            raise ValueError("rounds and repetitions must be >= 1")
        if self.views not in ("single", "multi"):
            raise ValueError("views must be 'single' or 'multi'")

    def round_seed(self, repetition: int, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, repetition, index]).generate_state(1)[0])

    def scene(self, repetition: int, index: int) -> Scene:
        spec = SceneSpec(mode=self.mode, n_objects=self.n_objects, library=tuple(self.library),
                         workspace=self.workspace, seed=self.round_seed(repetition, index))
        return spawn_scene(spec)


def run_round(scene: Scene, policy, cfg: BenchConfig = BenchConfig(), seed: int = 0, turn: float = 0.0,
              repetition: int = 0, index: int = 0) -> RoundResult:
    """Clear ``scene`` until empty or two consecutive failed attempts.

    ``turn`` rotates the scene and the camera rig together about the vertical
    axis through the workspace center. A policy returning ``None`` spends an
    attempt and counts as a failure.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE4C]))
    Rz = so3.rot_z(turn)
    ctr = np.array([scene.workspace / 2, scene.workspace / 2, 0.0])
    shift = ctr - Rz @ ctr
    if turn:
        scene = scene.transformed(Rz, shift)
    total = len(scene)
    attempts = successes = fails = 0
    outcomes = []
    while len(scene) and fails < MAX_FAILURES:
        cams = [c.transformed(Rz, shift) for c in camera_rig(scene.workspace, cfg.views, rng, noise=cfg.noise)]
        cloud = observe(scene, cams, rng, cfg.cloud_points, cfg.normal_k)
        cloud = PointCloud(cloud.positions, cloud.normals)  # policies never see object labels
        pose = policy(cloud, scene, rng)
        attempts += 1
        if pose is None:
            fails += 1
            outcomes.append("none")
            continue
        res = GraspOracle(scene, cfg.gripper, cfg.mu)(pose)
        outcomes.append(res.reason)
        if res.success:
            successes += 1
            fails = 0
            scene = scene.without(res.target)
        else:
            fails += 1
    return RoundResult(attempts, successes, total - len(scene), total,
                       "cleared" if not len(scene) else "two-failures", outcomes, seed, repetition, index)


def run_bench(policy, cfg: BenchConfig = BenchConfig(), turn: float = 0.0, progress=None) -> BenchReport:
    results = []
    for rep in range(cfg.repetitions):
        for i in range(cfg.rounds):
            seed = cfg.round_seed(rep, i)
            r = run_round(cfg.scene(rep, i), policy, cfg, seed, turn, rep, i)
            results.append(r)
            if progress:
                progress(r)
    return metrics(results)


# ----------------------------------------------------------------- policies

def _candidate_points(cloud: PointCloud, table_z: float = 0.0, threshold: float = 0.01) -> np.ndarray:
    keep = np.flatnonzero(cloud.positions[:, 2] > table_z + threshold)
    return keep if keep.size else np.arange(len(cloud))


class RandomPolicy:
    """Uniform random surface point above the table, uniform random orbit angle."""

    def __init__(self, gripper: GripperSpec = GripperSpec()):
        self.gripper = gripper

    def __call__(self, cloud: PointCloud, scene=None, rng=None) -> GraspPose:
        rng = np.random.default_rng(rng)
        pts = _candidate_points(cloud)
        i = int(pts[rng.integers(pts.size)])
        M = orbit_rotation_matrices(cloud.normals[i], 1, phase=rng.uniform(0, 2 * math.pi))[0]
        pose = GraspPose(so3.Rotation(M), cloud.positions[i], 0.5, i)
        return finger_offset(pose, cloud, self.gripper)


class OraclePolicy:
    """Upper bound: scans observed points top-down and returns the first pose the oracle accepts."""

    def __init__(self, gripper: GripperSpec = GripperSpec(), mu: float = DEFAULT_MU, K: int = DEFAULT_K,
                 max_points: int = 200):
        self.gripper, self.mu, self.K, self.max_points = gripper, mu, K, max_points

    def __call__(self, cloud: PointCloud, scene: Scene, rng=None) -> GraspPose | None:
        oracle = GraspOracle(scene, self.gripper, self.mu)
        pts = _candidate_points(cloud)
        pts = pts[np.argsort(-cloud.positions[pts, 2], kind="stable")][: self.max_points]
        reach = self.gripper.max_opening + self.gripper.finger_depth
        for i in pts:
            local = cloud.subset(ball_query(cloud, cloud.positions[i], reach))
            for M in orbit_rotation_matrices(cloud.normals[i], self.K):
                pose = finger_offset(GraspPose(so3.Rotation(M), cloud.positions[i], 1.0, int(i)), local, self.gripper)
                if pose.executable and oracle(pose).success:
                    return pose
        return None


class ModelPolicy:
    """Height-thresholded FPS centers, network field, continuous orbit argmax, selection rules."""

    def __init__(self, net, gripper: GripperSpec = GripperSpec(), k: int = 10, m: int = 1024,
                 threshold: float = QUALITY_THRESHOLD, band: float = HEIGHT_BAND, K: int = DEFAULT_K):
        self.net, self.gripper, self.k, self.m = net, gripper, k, m
        self.threshold, self.band, self.K = threshold, band, K

    def analyse(self, cloud: PointCloud) -> list[NeighborhoodGrasps]:
        """Per-neighborhood best orbit quality of every query point and the candidate poses."""
        from .equinet.unet import prepare_neighborhood

        if len(cloud) < self.k:
            raise ValueError(f"cloud has {len(cloud)} points, fewer than k={self.k}")
        centers = height_thresholded_fps(cloud, self.k)
        nbhds = build_neighborhoods(cloud, centers, self.net.cfg.r_l, self.m)
        reach = self.gripper.max_opening + self.gripper.finger_depth
        out = []
        for nb in nbhds:
            with torch.no_grad():
                coeffs = self.net(prepare_neighborhood(self.net.cfg, nb, cloud)).double().numpy()
            idx = nb.query_indices
            phase, logit = orbit_argmax(coeffs, cloud.normals[idx], self.K, self.net.cfg.L_out)
            q = sigmoid(logit)
            cands = []
            for j in np.flatnonzero(q >= self.threshold):
                i = int(idx[j])
                M = orbit_rotation_matrices(cloud.normals[i], 1, phase=phase[j])[0]
                pose = GraspPose(so3.Rotation(M), cloud.positions[i], float(q[j]), i)
                local = cloud.subset(ball_query(cloud, cloud.positions[i], reach))
                cands.append(finger_offset(pose, local, self.gripper))
            out.append(NeighborhoodGrasps(nb.center_index, idx, q, cands,
                                          select_grasp(cands, self.threshold, self.band)))
        return out

    def candidates(self, cloud: PointCloud) -> list[GraspPose]:
        return [c for g in self.analyse(cloud) for c in g.candidates]

    def __call__(self, cloud: PointCloud, scene=None, rng=None) -> GraspPose | None:
        return select_grasp(self.candidates(cloud), self.threshold, self.band)


@dataclass
class NeighborhoodGrasps:
    center_index: int
    query_indices: np.ndarray
    quality: np.ndarray          # best orbit quality per query point
    candidates: list
    best: GraspPose | None


def point_quality(cloud: PointCloud, groups) -> np.ndarray:
    """Per-point max orbit quality over all neighborhoods (0 outside every query set)."""
    q = np.zeros(len(cloud))
    for g in groups:
        np.maximum.at(q, g.query_indices, g.quality)
    return q
