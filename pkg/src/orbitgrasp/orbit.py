"""Orbit grasp sampling: frames around a contact normal, field evaluation, selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import so3
from .cloud import PointCloud

DEFAULT_K = 36
QUALITY_THRESHOLD = 0.95
HEIGHT_BAND = 0.03


@dataclass(frozen=True)
class GripperSpec:
    """Parallel-jaw gripper geometry in meters.

    Gripper frame: x = r1, y = closing direction (contact normal), z = approach.
    The closing line passes through the origin; fingers span
    ``z in [tip_offset - finger_depth, tip_offset]`` and the palm is a slab of
    thickness ``palm_clearance`` behind the finger bases.
    """

    max_opening: float = 0.08
    finger_depth: float = 0.05
    finger_thickness: float = 0.01
    palm_clearance: float = 0.02
    finger_width: float = 0.02
    tip_offset: float = 0.01

    def __post_init__(self):
        for name in ("max_opening", "finger_depth", "finger_thickness", "palm_clearance", "finger_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"gripper {name} must be positive")
        if not 0 <= self.tip_offset < self.finger_depth:
            raise ValueError("tip_offset must lie in [0, finger_depth)")


@dataclass(frozen=True)
class GraspPose:
    rotation: so3.Rotation
    translation: np.ndarray
    quality: float = 0.0
    point_index: int = -1
    executable: bool = True

    @property
    def normal(self) -> np.ndarray:
        return self.rotation.matrix[:, 1]

    @property
    def approach(self) -> np.ndarray:
        return self.rotation.matrix[:, 2]

    def transformed(self, R: np.ndarray, t=(0.0, 0.0, 0.0)) -> "GraspPose":
        R = np.asarray(R, dtype=np.float64)
        return replace(self, rotation=so3.Rotation(R @ self.rotation.matrix),
                       translation=R @ np.asarray(self.translation) + np.asarray(t, dtype=np.float64))


def _anchor(n: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0])
    if abs(ref @ n) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    a = ref - (ref @ n) * n
    return a / np.linalg.norm(a)


def orbit_approaches(n_p, K: int = DEFAULT_K, phase: float = 0.0, anchor=None) -> np.ndarray:
    """``(K, 3)`` approach directions evenly spaced on the circle orthogonal to ``n_p``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    n = so3.normalize(n_p)
    a = _anchor(n) if anchor is None else so3.normalize(np.asarray(anchor) - (np.asarray(anchor) @ n) * n)
    b = np.cross(n, a)
    ang = phase + 2 * math.pi * np.arange(K) / K
    return np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b


def orbit_rotation_matrices(n_p, K: int = DEFAULT_K, **kw) -> np.ndarray:
    """``(K, 3, 3)`` frames ``[r1, n_p, r3]`` with ``r1 = n_p x r3`` (right-handed)."""
    n = so3.normalize(n_p)
    r3 = orbit_approaches(n, K, **kw)
    r1 = np.cross(n, r3)
    return np.stack([r1, np.broadcast_to(n, r3.shape), r3], axis=2)


def orbit_frames(p, n_p, K: int = DEFAULT_K) -> list[so3.Rotation]:
    """Rotations of the orbit at contact ``p``; ``p`` fixes nothing but is kept for symmetry with poses."""
    return [so3.Rotation(m) for m in orbit_rotation_matrices(n_p, K)]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def orbit_qualities(coeffs: np.ndarray, normals: np.ndarray, K: int = DEFAULT_K, L: int | None = None) -> np.ndarray:
    """Qualities ``(n, K)`` of every orbit approach for many points at once."""
    coeffs = np.atleast_2d(coeffs)
    normals = np.atleast_2d(normals)
    if L is None:
        L = int(round(math.sqrt(coeffs.shape[1]))) - 1
    dirs = np.stack([orbit_approaches(n, K) for n in normals])  # (n, K, 3)
    Y = so3.sh_basis(dirs, L)
    return sigmoid(np.einsum("nkc,nc->nk", Y, coeffs))


def orbit_argmax(coeffs: np.ndarray, normals: np.ndarray, K: int = DEFAULT_K, L: int | None = None,
                 iters: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Continuous maximiser of each point's logit along its orbit.

    The restriction of a degree-``L`` field to the orbit circle is a
    trigonometric polynomial of degree ``L``; ``K > 2L`` samples recover it
    exactly. Every sampled local maximum is polished by Newton steps and the
    best one kept, so the result does not depend on the phase anchor.
    Returns ``(phase, logit)`` per point; ``orbit_approaches(n, 1, phase)``
    gives the direction.
    """
    coeffs = np.atleast_2d(coeffs)
    normals = np.atleast_2d(normals)
    if L is None:
        L = int(round(math.sqrt(coeffs.shape[1]))) - 1
    if K <= 2 * L:
        raise ValueError(f"K={K} samples cannot resolve a degree-{L} orbit signal")
    dirs = np.stack([orbit_approaches(n, K) for n in normals])
    vals = np.einsum("nkc,nc->nk", so3.sh_basis(dirs, L), coeffs)
    F = np.fft.rfft(vals, axis=1) / K
    k = np.arange(1, L + 1)
    a0 = F[:, 0].real
    a, b = 2 * F[:, 1:L + 1].real, -2 * F[:, 1:L + 1].imag

    def f(i, th):
        kt = th[:, None] * k
        return a0[i] + np.sum(a[i] * np.cos(kt) + b[i] * np.sin(kt), axis=1)

    left, right = np.roll(vals, 1, axis=1), np.roll(vals, -1, axis=1)
    pi_, ji = np.nonzero((vals >= left) & (vals >= right))
    th = 2 * math.pi * ji / K
    step_cap = 2 * math.pi / K
    th0 = th.copy()
    for _ in range(iters):
        kt = th[:, None] * k
        d1 = np.sum(k * (b[pi_] * np.cos(kt) - a[pi_] * np.sin(kt)), axis=1)
        d2 = -np.sum(k * k * (a[pi_] * np.cos(kt) + b[pi_] * np.sin(kt)), axis=1)
        step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), 0.0)
        th = np.clip(th + step, th0 - step_cap, th0 + step_cap)
    val = f(pi_, th)
    best_val = np.full(len(normals), -np.inf)
    best_th = np.zeros(len(normals))
    for p, t, v in zip(pi_, th, val):
        if v > best_val[p]:
            best_val[p], best_th[p] = v, t
    return np.mod(best_th, 2 * math.pi), best_val


def evaluate_orbit(field: so3.FourierField, point_index: int, n_p, K: int = DEFAULT_K) -> list[tuple]:
    """``(Rotation, quality)`` for each orbit frame, quality = sigmoid(f_p(r3))."""
    if not 0 <= point_index < len(field):
        raise IndexError(f"point {point_index} outside field of size {len(field)}")
    mats = orbit_rotation_matrices(n_p, K)
    logits = so3.sh_basis(mats[:, :, 2], field.L) @ field.data[point_index]
    return [(so3.Rotation(m), float(q)) for m, q in zip(mats, sigmoid(logits))]


# ------------------------------------------------------------ finger offset

def finger_offset(pose: GraspPose, cloud: PointCloud, gripper: GripperSpec = GripperSpec(),
                  gap_tol: float = 0.01) -> GraspPose:
    """Center the gripper on the object along the closing line.

    ``pose.translation`` is the contact point. Points inside the closing volume
    behind the contact (depth along ``-n_p``) are scanned from the contact
    outwards; the object ends at the first gap wider than ``gap_tol``. The
    gripper center moves to ``contact - w/2 * n_p``. An object wider than the
    opening marks the pose un-executable.
    """
    R = pose.rotation.matrix
    c = np.asarray(pose.translation, dtype=np.float64)
    rel = cloud.positions - c
    x, depth, z = rel @ R[:, 0], -(rel @ R[:, 1]), rel @ R[:, 2]
    g = gripper
    inside = ((np.abs(x) <= g.finger_width / 2) & (z >= g.tip_offset - g.finger_depth)
              & (z <= g.tip_offset) & (depth >= 0.0))
    d = np.sort(depth[inside])
    w = 0.0
    if d.size:
        gaps = np.flatnonzero(np.diff(np.concatenate([[0.0], d])) > gap_tol)
        w = float(d[gaps[0] - 1]) if gaps.size and gaps[0] > 0 else (0.0 if gaps.size else float(d[-1]))
    executable = pose.executable and w <= g.max_opening
    return replace(pose, translation=c - 0.5 * min(w, g.max_opening) * R[:, 1], executable=executable)


# ------------------------------------------------------------- selection

def select_grasp(candidates, threshold: float = QUALITY_THRESHOLD, band: float = HEIGHT_BAND,
                 reachable: Callable[[GraspPose], bool] | None = None) -> GraspPose | None:
    """Highest-quality pose within ``band`` below the highest surviving pose.

    Survivors have quality >= threshold, are executable, and pass the optional
    ``reachable`` predicate. Ties go to higher z, then lower point index.
    """
    surv = [c for c in candidates if c.quality >= threshold and c.executable
            and (reachable is None or reachable(c))]
    if not surv:
        return None
    z_top = max(c.translation[2] for c in surv)
    in_band = [c for c in surv if c.translation[2] >= z_top - band]
    return min(in_band, key=lambda c: (-c.quality, -c.translation[2], c.point_index))


# ----------------------------------------------------------------- export

def format_grasps(grasps) -> str:
    """One line per grasp: index, quality, rotation (row-major), translation."""
    lines = ["# point_index quality r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for g in grasps:
        # full precision so parsed rotations stay orthonormal
        vals = [f"{g.quality:.17g}"] + [f"{v:.17g}" for v in g.rotation.matrix.reshape(-1)]
        vals += [f"{v:.17g}" for v in g.translation]
        lines.append(f"{g.point_index} " + " ".join(vals))
    return "\n".join(lines) + "\n"


def parse_grasps(text: str) -> list[GraspPose]:
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        vals = np.array([float(t) for t in tok[1:]])
        out.append(GraspPose(so3.Rotation(vals[1:10].reshape(3, 3)), vals[10:13], float(vals[0]), int(tok[0])))
    return out
