"""Analytic antipodal grasp oracle with gripper collision checks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..orbit import GraspPose, GripperSpec
from .scene import Scene
from .shapes import Primitive, line_intervals, overlap_matrix, pack

DEFAULT_MU = 0.6
MIN_OVERLAP = 0.005
REASONS = ("ok", "no_contact", "exceeds_opening", "collision", "friction", "overlap")


@dataclass(frozen=True)
class OracleResult:
    success: bool
    reason: str
    target: int | None = None

    def __bool__(self) -> bool:
        return self.success


PARTS = ("finger_pos", "finger_neg", "palm", "sweep")
SOLID_PARTS = PARTS[:3]


def gripper_layout(gripper: GripperSpec, inflate: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Centers and half extents of the hand parts in the gripper frame (rows follow ``PARTS``).

    ``inflate`` grows (or, if negative, erodes) every half extent.
    """
    g = gripper
    w, ft, fw, fd = g.max_opening, g.finger_thickness, g.finger_width, g.finger_depth
    zf = g.tip_offset - fd / 2
    centers = np.array([[0.0, w / 2 + ft / 2, zf], [0.0, -(w / 2 + ft / 2), zf],
                        [0.0, 0.0, g.tip_offset - fd - g.palm_clearance / 2], [0.0, 0.0, zf]])
    halves = np.array([[fw / 2, ft / 2, fd / 2], [fw / 2, ft / 2, fd / 2],
                       [fw / 2, w / 2 + ft, g.palm_clearance / 2], [fw / 2, w / 2, fd / 2]]) + inflate
    if np.any(halves <= 0):
        raise ValueError("erosion removes a gripper part")
    return centers, halves


def gripper_boxes(pose: GraspPose, gripper: GripperSpec, inflate: float = 0.0) -> dict[str, Primitive]:
    """World boxes of the open hand plus the closing sweep between the fingers."""
    R = pose.rotation.matrix
    c = np.asarray(pose.translation, dtype=np.float64)
    centers, halves = gripper_layout(gripper, inflate)
    return {name: Primitive.box(h, rotation=R, position=c + R @ ctr)
            for name, ctr, h in zip(PARTS, centers, halves)}


class GraspOracle:
    """Oracle bound to one scene; reuse it for many poses."""

    def __init__(self, scene: Scene, gripper: GripperSpec = GripperSpec(), mu: float = DEFAULT_MU):
        if mu < 0:
            raise ValueError("friction coefficient mu must be non-negative")
        self.scene, self.gripper, self.mu = scene, gripper, mu
        self.cos_cone = 1.0 / math.sqrt(1.0 + mu * mu)
        self._packed = pack(scene.primitives) if len(scene) else None
        self._ids = np.array(scene.ids, dtype=np.int64)
        self._layout = gripper_layout(gripper)

    # ------------------------------------------------------------ pieces

    def closing_target(self, pose: GraspPose, target: int | None = None):
        """Target primitive along the closing line and its entry/exit parameters."""
        if self._packed is None:
            return None
        R = pose.rotation.matrix
        c = np.asarray(pose.translation, dtype=np.float64)
        reach = self.gripper.max_opening / 2 + self.gripper.finger_thickness
        iv = line_intervals(*self._packed[:4], c, np.ascontiguousarray(R[:, 1]))
        best = None
        for k, prim in enumerate(self.scene.primitives):
            t0, t1 = iv[k]
            if target is not None and prim.obj_id != target:
                continue
            if math.isnan(t0) or t0 > reach or t1 < -reach:
                continue
            score = 0.0 if t0 <= 0 <= t1 else min(abs(t0), abs(t1))
            if best is None or score < best[0]:
                best = (score, prim, float(t0), float(t1))
        return None if best is None else best[1:]

    def collides(self, pose: GraspPose, target: int | None, inflate: float = 0.0) -> bool:
        """Open hand against everything, closing sweep against non-targets; table included."""
        R = pose.rotation.matrix
        centers, halves = self._layout if inflate == 0.0 else gripper_layout(self.gripper, inflate)
        ts = np.asarray(pose.translation, dtype=np.float64) + centers @ R.T
        if self.scene.table and np.min(ts[:, 2] - halves @ np.abs(R[2])) < 0:
            return True
        if self._packed is None:
            return False
        skip = np.zeros((len(PARTS), len(self.scene)), dtype=np.bool_)
        skip[3] = self._ids == target
        boxes = (np.zeros(len(PARTS), dtype=np.int64), np.repeat(R[None], len(PARTS), axis=0), ts, halves,
                 np.linalg.norm(halves, axis=1))
        return bool(overlap_matrix(boxes, self._packed, skip).any())

    def _chord(self, prim: Primitive, origin, direction) -> tuple[float, float]:
        t0, t1 = prim.ray_interval(origin, direction)
        return float(t0[0]), float(t1[0])

    # -------------------------------------------------------------- verdict

    def __call__(self, pose: GraspPose, target: int | None = None) -> OracleResult:
        g = self.gripper
        found = self.closing_target(pose, target)
        if found is None:
            return OracleResult(False, "no_contact", target)
        prim, t0, t1 = found
        tid = prim.obj_id
        if t0 < -g.max_opening / 2 or t1 > g.max_opening / 2:
            return OracleResult(False, "exceeds_opening", tid)
        if self.collides(pose, tid):
            return OracleResult(False, "collision", tid)
        R = pose.rotation.matrix
        c = np.asarray(pose.translation, dtype=np.float64)
        y, z = R[:, 1], R[:, 2]
        p0, p1 = c + t0 * y, c + t1 * y
        n0, n1 = prim.normal_at(np.stack([p0, p1]))
        if -(n0 @ y) < self.cos_cone or n1 @ y < self.cos_cone:
            return OracleResult(False, "friction", tid)
        # finger pads must overlap the object along the approach axis
        inset = min(0.001, (t1 - t0) / 2)
        lo, hi = g.tip_offset - g.finger_depth, g.tip_offset
        for p, s in ((p0, inset), (p1, -inset)):
            a, b = self._chord(prim, p + s * y, z)
            if math.isnan(a) or min(b, hi) - max(a, lo) < MIN_OVERLAP:
                return OracleResult(False, "overlap", tid)
        return OracleResult(True, "ok", tid)


def grasp_oracle(scene: Scene, pose: GraspPose, gripper: GripperSpec = GripperSpec(),
                 mu: float = DEFAULT_MU, target: int | None = None) -> OracleResult:
    return GraspOracle(scene, gripper, mu)(pose, target)
