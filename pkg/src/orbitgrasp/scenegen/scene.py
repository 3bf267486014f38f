"""Scene specs, random placement (packed / pile) and quasi-static settling."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .. import so3
from .shapes import Primitive, distance

WORKSPACE = 0.30
REST_GAP = 1e-4
MAX_REJECTIONS = 1000


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    mode: str = "pile"
    n_objects: int = 5
    library: tuple[str, ...] = ("box", "cylinder", "sphere")
    box_size: tuple[float, float] = (0.02, 0.07)          # full edge length
    cylinder_radius: tuple[float, float] = (0.012, 0.03)
    cylinder_height: tuple[float, float] = (0.03, 0.10)
    sphere_radius: tuple[float, float] = (0.015, 0.035)
    workspace: float = WORKSPACE
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("pile", "packed"):
            raise ValueError(f"mode must be 'pile' or 'packed', got {self.mode!r}")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if not self.library or any(k not in ("box", "cylinder", "sphere") for k in self.library):
            raise ValueError(f"bad primitive library {self.library}")
        for name in ("box_size", "cylinder_radius", "cylinder_height", "sphere_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must be positive and ordered")
        if self.workspace <= 0:
            raise ValueError("workspace must be positive")


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    workspace: float = WORKSPACE
    table: bool = True

    @property
    def ids(self) -> list[int]:
        return [p.obj_id for p in self.primitives]

    def by_id(self, obj_id: int) -> Primitive:
        for p in self.primitives:
            if p.obj_id == obj_id:
                return p
        raise KeyError(obj_id)

    def __len__(self) -> int:
        return len(self.primitives)

    def without(self, obj_id: int, settle: bool = True) -> "Scene":
        rest = [p for p in self.primitives if p.obj_id != obj_id]
        if len(rest) == len(self.primitives):
            raise KeyError(obj_id)
        if settle and self.table:
            rest = resettle(rest)
        return replace(self, primitives=tuple(rest))

    def transformed(self, R, t=(0.0, 0.0, 0.0)) -> "Scene":
        return replace(self, primitives=tuple(p.transformed(R, t) for p in self.primitives))

    def rotated_about_center(self, angle: float) -> "Scene":
        """Rotation about the vertical axis through the workspace center."""
        R = so3.rot_z(angle)
        c = np.array([self.workspace / 2, self.workspace / 2, 0.0])
        return self.transformed(R, c - R @ c)


# ------------------------------------------------------------- orientation

def _align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    v = np.cross(a, b)
    s, c = np.linalg.norm(v), float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return so3.axis_angle_matrix(perp / np.linalg.norm(perp), math.pi)
    return so3.axis_angle_matrix(v / s, math.atan2(s, c))


def stable_orientation(kind: str, R: np.ndarray) -> np.ndarray:
    """Greedy rotation to a resting face: the most downward-facing box face or
    cylinder cap/side becomes exactly horizontal."""
    z = np.array([0.0, 0.0, 1.0])
    if kind == "sphere":
        return R
    if kind == "box":
        i = int(np.argmax(np.abs(R[2])))
        axis = R[:, i] * np.sign(R[2, i])
        return _align(axis, z) @ R
    axis = R[:, 2] * (1.0 if R[2, 2] >= 0 else -1.0)
    if axis[2] >= math.sqrt(0.5):
        return _align(axis, z) @ R
    flat = np.array([axis[0], axis[1], 0.0])
    n = np.linalg.norm(flat)
    flat = flat / n if n > 1e-9 else np.array([1.0, 0.0, 0.0])
    return _align(axis, flat) @ R


# ---------------------------------------------------------------- settling

def _contact_top(p: Primitive, q: Primitive) -> float | None:
    """Highest center height at which ``p`` (moved vertically) touches ``q``."""
    xy = p.position[:2] - q.position[:2]
    if np.linalg.norm(xy) > p.horizontal_extent() + q.horizontal_extent():
        return None
    span = p.radius + q.radius + 0.01
    lo, hi = q.position[2] - span, q.position[2] + span

    def dist(z):
        return distance(p.moved(position=np.array([p.position[0], p.position[1], z])), q)

    # separation along a vertical line is convex: golden-section for the minimum
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = dist(c), dist(d)
    for _ in range(60):
        if fc <= 0 or fd <= 0:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = dist(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = dist(d)
    if fc > 0 and fd > 0:
        return None
    inside = c if fc <= 0 else d
    top = hi
    for _ in range(50):
        mid = 0.5 * (inside + top)
        if dist(mid) <= 0:
            inside = mid
        else:
            top = mid
    return top


def rest_height(p: Primitive, support) -> float:
    """Lowest non-penetrating center height when dropping ``p`` onto the table and ``support``.

    Object contacts keep a ``REST_GAP`` clearance; table contact is exact.
    """
    z = p.vertical_extent()  # exact contact with the table
    for q in support:
        top = _contact_top(p, q)
        if top is not None:
            z = max(z, top + REST_GAP)
    return z


def drop(p: Primitive, support) -> Primitive:
    return p.moved(position=np.array([p.position[0], p.position[1], rest_height(p, support)]))


def resettle(prims) -> list[Primitive]:
    """Re-drop objects bottom-up after a removal (orientation kept)."""
    order = sorted(prims, key=lambda p: (p.min_z, p.obj_id))
    placed: list[Primitive] = []
    for p in order:
        q = drop(p, placed)
        if q.position[2] > p.position[2]:
            q = p
        placed.append(q)
    return sorted(placed, key=lambda p: p.obj_id)


# ----------------------------------------------------------------- spawning

def _random_shape(spec: SceneSpec, rng: np.random.Generator, obj_id: int) -> Primitive:
    kind = spec.library[int(rng.integers(len(spec.library)))]
    if kind == "box":
        half = rng.uniform(*spec.box_size, size=3) / 2
        return Primitive.box(half, obj_id=obj_id)
    if kind == "cylinder":
        return Primitive.cylinder(rng.uniform(*spec.cylinder_radius), rng.uniform(*spec.cylinder_height) / 2,
                                  obj_id=obj_id)
    return Primitive.sphere(rng.uniform(*spec.sphere_radius), obj_id=obj_id)


def _inside(p: Primitive, W: float) -> bool:
    r = p.horizontal_extent()
    return (r <= p.position[0] <= W - r and r <= p.position[1] <= W - r and p.max_z <= W)


def spawn_scene(spec: SceneSpec) -> Scene:
    """Random packed or pile scene, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5CE4E]))
    W = spec.workspace
    placed: list[Primitive] = []
    rejections = 0
    for obj_id in range(1, spec.n_objects + 1):
        shape = _random_shape(spec, rng, obj_id)
        while True:
            if rejections >= MAX_REJECTIONS:
                raise SceneError(f"could not place object {obj_id} after {MAX_REJECTIONS} rejections")
            if spec.mode == "packed":
                R = so3.rot_z(rng.uniform(-math.pi, math.pi))
                r = shape.moved(rotation=R).horizontal_extent()
                xy = rng.uniform(r, W - r, size=2) if W > 2 * r else np.array([W / 2, W / 2])
                cand = shape.moved(rotation=R)
                cand = cand.moved(position=np.array([xy[0], xy[1], cand.vertical_extent()]))
                ok = _inside(cand, W) and all(distance(cand, q) > 0.005 for q in placed)
            else:
                R = stable_orientation(shape.kind, so3.sample_uniform_rotation(rng).matrix)
                cand = shape.moved(rotation=R)
                r = cand.horizontal_extent()
                lo, hi = max(r, W / 2 - 0.08), min(W - r, W / 2 + 0.08)
                xy = rng.uniform(lo, hi, size=2) if hi > lo else np.array([W / 2, W / 2])
                cand = drop(cand.moved(position=np.array([xy[0], xy[1], 0.0])), placed)
                ok = _inside(cand, W)
            if ok:
                placed.append(cand)
                break
            rejections += 1
    return Scene(tuple(placed), W)
