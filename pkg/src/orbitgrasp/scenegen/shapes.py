"""Analytic convex primitives: containment, ray intervals, normals, SDF and GJK distance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

BOX, SPHERE, CYLINDER = 0, 1, 2
KINDS = {"box": BOX, "sphere": SPHERE, "cylinder": CYLINDER}


@dataclass(frozen=True)
class Primitive:
    """Convex solid posed in the world.

    ``dims`` are half extents for boxes, ``(r, r, r)`` for spheres and
    ``(r, r, half_height)`` for cylinders whose axis is the local z axis.
    """

    kind: str
    dims: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    obj_id: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        d = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(d <= 0):
            raise ValueError("primitive dimensions must be positive")
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))

    @classmethod
    def box(cls, half_extents, **kw):
        return cls("box", half_extents, **kw)

    @classmethod
    def sphere(cls, radius: float, **kw):
        return cls("sphere", (radius, radius, radius), **kw)

    @classmethod
    def cylinder(cls, radius: float, half_height: float, **kw):
        return cls("cylinder", (radius, radius, half_height), **kw)

    @property
    def code(self) -> int:
        return KINDS[self.kind]

    @property
    def radius(self) -> float:
        """Bounding-sphere radius."""
        if self.kind == "box":
            return float(np.linalg.norm(self.dims))
        if self.kind == "sphere":
            return float(self.dims[0])
        return float(math.hypot(self.dims[0], self.dims[2]))

    def vertical_extent(self) -> float:
        """Distance from the center down to the lowest point."""
        R, d = self.rotation, self.dims
        if self.kind == "box":
            return float(np.abs(R[2]) @ d)
        if self.kind == "sphere":
            return float(d[0])
        az = abs(R[2, 2])
        return float(az * d[2] + d[0] * math.sqrt(max(0.0, 1.0 - az * az)))

    def horizontal_extent(self) -> float:
        """Radius of a vertical cylinder around the center enclosing the shape."""
        R, d = self.rotation, self.dims
        if self.kind == "box":
            return float(max(np.linalg.norm(R[:2] @ (s * d)) for s in
                             (np.array([1, 1, 1]), np.array([1, 1, -1]), np.array([1, -1, 1]), np.array([-1, 1, 1]))))
        if self.kind == "sphere":
            return float(d[0])
        axis_h = math.hypot(R[0, 2], R[1, 2])
        return float(d[0] + d[2] * axis_h)

    @property
    def min_z(self) -> float:
        return float(self.position[2] - self.vertical_extent())

    @property
    def max_z(self) -> float:
        return float(self.position[2] + self.vertical_extent())

    def volume(self) -> float:
        d = self.dims
        if self.kind == "box":
            return float(8 * d.prod())
        if self.kind == "sphere":
            return float(4 / 3 * math.pi * d[0] ** 3)
        return float(2 * math.pi * d[0] ** 2 * d[2])

    def moved(self, position=None, rotation=None) -> "Primitive":
        return replace(self, position=self.position if position is None else position,
                       rotation=self.rotation if rotation is None else rotation)

    def transformed(self, R, t=(0.0, 0.0, 0.0)) -> "Primitive":
        R = np.asarray(R, dtype=np.float64)
        return replace(self, rotation=R @ self.rotation, position=R @ self.position + np.asarray(t, dtype=np.float64))

    def to_local(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.position) @ self.rotation

    # ------------------------------------------------------------ queries

    def contains(self, pts, inflate: float = 0.0) -> np.ndarray:
        return self.sdf(pts) <= inflate

    def sdf(self, pts) -> np.ndarray:
        """Exact signed distance to the surface (negative inside)."""
        q = self.to_local(pts).reshape(-1, 3)
        d = self.dims
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=1) - d[0]
        if self.kind == "box":
            e = np.abs(q) - d
            outside = np.linalg.norm(np.maximum(e, 0.0), axis=1)
            return outside + np.minimum(e.max(axis=1), 0.0)
        e = np.stack([np.hypot(q[:, 0], q[:, 1]) - d[0], np.abs(q[:, 2]) - d[2]], axis=1)
        return np.linalg.norm(np.maximum(e, 0.0), axis=1) + np.minimum(e.max(axis=1), 0.0)

    def normal_at(self, pts) -> np.ndarray:
        """Outward normal of the nearest surface patch."""
        q = self.to_local(pts).reshape(-1, 3)
        d = self.dims
        if self.kind == "sphere":
            n = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-300)
        elif self.kind == "box":
            face = np.argmin(d - np.abs(q), axis=1)
            n = np.zeros_like(q)
            n[np.arange(len(q)), face] = np.where(q[np.arange(len(q)), face] >= 0, 1.0, -1.0)
        else:
            rho = np.hypot(q[:, 0], q[:, 1])
            cap = (d[2] - np.abs(q[:, 2])) < (d[0] - rho)
            n = np.zeros_like(q)
            side = ~cap & (rho > 0)
            n[side, 0] = q[side, 0] / rho[side]
            n[side, 1] = q[side, 1] / rho[side]
            n[~cap & (rho == 0), 0] = 1.0
            n[cap, 2] = np.where(q[cap, 2] >= 0, 1.0, -1.0)
        return n @ self.rotation.T

    def ray_interval(self, origins, dirs):
        """Entry and exit parameters of the lines ``o + t d`` (NaN where missed)."""
        o = self.to_local(origins).reshape(-1, 3)
        v = (np.asarray(dirs, dtype=np.float64).reshape(-1, 3)) @ self.rotation
        v = np.broadcast_to(v, o.shape)
        d = self.dims
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "sphere":
                t0, t1 = _quadratic(np.einsum("ij,ij->i", v, v), np.einsum("ij,ij->i", o, v),
                                    np.einsum("ij,ij->i", o, o) - d[0] ** 2)
            elif self.kind == "box":
                t0, t1 = _slabs(o, v, d)
            else:
                a = v[:, 0] ** 2 + v[:, 1] ** 2
                b = o[:, 0] * v[:, 0] + o[:, 1] * v[:, 1]
                c = o[:, 0] ** 2 + o[:, 1] ** 2 - d[0] ** 2
                r0, r1 = _quadratic(a, b, c)
                z0, z1 = _slabs(o[:, 2:], v[:, 2:], d[2:])
                t0, t1 = np.maximum(r0, z0), np.minimum(r1, z1)
        miss = ~(t0 <= t1)
        t0, t1 = t0.copy(), t1.copy()
        t0[miss] = np.nan
        t1[miss] = np.nan
        return t0, t1


def _quadratic(a, b, c):
    """Roots of ``a t^2 + 2 b t + c`` (lines parallel to a degenerate axis handled)."""
    disc = b * b - a * c
    s = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.where(a > 0, (-b - s) / np.where(a > 0, a, 1.0), np.where(c <= 0, -np.inf, np.nan))
    t1 = np.where(a > 0, (-b + s) / np.where(a > 0, a, 1.0), np.where(c <= 0, np.inf, np.nan))
    bad = (a > 0) & (disc < 0)
    t0[bad] = np.nan
    t1[bad] = np.nan
    return t0, t1


def _slabs(o, v, h):
    lo = np.full(o.shape[0], -np.inf)
    hi = np.full(o.shape[0], np.inf)
    miss = np.zeros(o.shape[0], dtype=bool)
    for i in range(o.shape[1]):
        par = v[:, i] == 0
        vi = np.where(par, 1.0, v[:, i])
        a = (-h[i] - o[:, i]) / vi
        b = (h[i] - o[:, i]) / vi
        lo = np.where(par, lo, np.maximum(lo, np.minimum(a, b)))
        hi = np.where(par, hi, np.minimum(hi, np.maximum(a, b)))
        miss |= par & (np.abs(o[:, i]) > h[i])
    lo[miss] = np.nan
    hi[miss] = np.nan
    return lo, hi


# ------------------------------------------------------------------- GJK

def pack(prims) -> tuple:
    """Flat arrays for the compiled distance kernels."""
    prims = list(prims)
    kinds = np.array([p.code for p in prims], dtype=np.int64)
    Rs = np.array([p.rotation for p in prims], dtype=np.float64).reshape(-1, 3, 3)
    ts = np.array([p.position for p in prims], dtype=np.float64).reshape(-1, 3)
    ds = np.array([p.dims for p in prims], dtype=np.float64).reshape(-1, 3)
    rad = np.array([p.radius for p in prims], dtype=np.float64)
    return kinds, Rs, ts, ds, rad


@njit(cache=True)
def _support(kind, R, t, dims, d0, d1, d2):
    l0 = R[0, 0] * d0 + R[1, 0] * d1 + R[2, 0] * d2
    l1 = R[0, 1] * d0 + R[1, 1] * d1 + R[2, 1] * d2
    l2 = R[0, 2] * d0 + R[1, 2] * d1 + R[2, 2] * d2
    if kind == 0:
        p0 = dims[0] if l0 >= 0 else -dims[0]
        p1 = dims[1] if l1 >= 0 else -dims[1]
        p2 = dims[2] if l2 >= 0 else -dims[2]
    elif kind == 1:
        n = math.sqrt(l0 * l0 + l1 * l1 + l2 * l2)
        if n > 0:
            p0, p1, p2 = dims[0] * l0 / n, dims[0] * l1 / n, dims[0] * l2 / n
        else:
            p0, p1, p2 = dims[0], 0.0, 0.0
    else:
        rho = math.sqrt(l0 * l0 + l1 * l1)
        if rho > 0:
            p0, p1 = dims[0] * l0 / rho, dims[0] * l1 / rho
        else:
            p0, p1 = 0.0, 0.0
        p2 = dims[2] if l2 >= 0 else -dims[2]
    return (t[0] + R[0, 0] * p0 + R[0, 1] * p1 + R[0, 2] * p2,
            t[1] + R[1, 0] * p0 + R[1, 1] * p1 + R[1, 2] * p2,
            t[2] + R[2, 0] * p0 + R[2, 1] * p1 + R[2, 2] * p2)


@njit(cache=True)
def _dot(W, i, j):
    return W[i, 0] * W[j, 0] + W[i, 1] * W[j, 1] + W[i, 2] * W[j, 2]


@njit(cache=True)
def _closest_on_simplex(W, n, out):
    """Closest point to the origin in conv(W[:n]) written to ``out``; returns the support mask.

    Every face is tried; the valid affine projection of least norm wins.
    ``W[4:]`` is scratch space for edge vectors.
    """
    best_d = np.inf
    best_mask = 0
    idx = np.empty(4, dtype=np.int64)
    lam = np.empty(3)
    for mask in range(1, 1 << n):
        s = 0
        for i in range(n):
            if mask & (1 << i):
                idx[s] = i
                s += 1
        a = idx[0]
        for j in range(1, s):
            for r in range(3):
                W[3 + j, r] = W[idx[j], r] - W[a, r]
        ok = True
        if s == 2:
            g = _dot(W, 4, 4)
            if g <= 1e-300:
                continue
            lam[0] = -(W[a, 0] * W[4, 0] + W[a, 1] * W[4, 1] + W[a, 2] * W[4, 2]) / g
            ok = 0.0 < lam[0] < 1.0
        elif s == 3:
            g11, g12, g22 = _dot(W, 4, 4), _dot(W, 4, 5), _dot(W, 5, 5)
            r1 = -(W[a, 0] * W[4, 0] + W[a, 1] * W[4, 1] + W[a, 2] * W[4, 2])
            r2 = -(W[a, 0] * W[5, 0] + W[a, 1] * W[5, 1] + W[a, 2] * W[5, 2])
            det = g11 * g22 - g12 * g12
            if abs(det) <= 1e-30 * (g11 * g22 + 1e-300):
                continue
            lam[0] = (r1 * g22 - r2 * g12) / det
            lam[1] = (g11 * r2 - g12 * r1) / det
            ok = lam[0] > 0 and lam[1] > 0 and lam[0] + lam[1] < 1
        elif s == 4:
            # origin inside the tetrahedron: solve a + E lam = 0
            e = W[4:7]
            det = (e[0, 0] * (e[1, 1] * e[2, 2] - e[2, 1] * e[1, 2]) - e[1, 0] * (e[0, 1] * e[2, 2] - e[2, 1] * e[0, 2])
                   + e[2, 0] * (e[0, 1] * e[1, 2] - e[1, 1] * e[0, 2]))
            if abs(det) <= 1e-300:
                continue
            b0, b1, b2 = -W[a, 0], -W[a, 1], -W[a, 2]
            lam[0] = (b0 * (e[1, 1] * e[2, 2] - e[2, 1] * e[1, 2]) - e[1, 0] * (b1 * e[2, 2] - e[2, 1] * b2)
                      + e[2, 0] * (b1 * e[1, 2] - e[1, 1] * b2)) / det
            lam[1] = (e[0, 0] * (b1 * e[2, 2] - e[2, 1] * b2) - b0 * (e[0, 1] * e[2, 2] - e[2, 1] * e[0, 2])
                      + e[2, 0] * (e[0, 1] * b2 - b1 * e[0, 2])) / det
            lam[2] = (e[0, 0] * (e[1, 1] * b2 - b1 * e[1, 2]) - e[1, 0] * (e[0, 1] * b2 - b1 * e[0, 2])
                      + b0 * (e[0, 1] * e[1, 2] - e[1, 1] * e[0, 2])) / det
            ok = lam[0] > 0 and lam[1] > 0 and lam[2] > 0 and lam[0] + lam[1] + lam[2] < 1
        if not ok:
            continue
        p0, p1, p2 = W[a, 0], W[a, 1], W[a, 2]
        for j in range(1, s):
            p0 += lam[j - 1] * W[3 + j, 0]
            p1 += lam[j - 1] * W[3 + j, 1]
            p2 += lam[j - 1] * W[3 + j, 2]
        dd = p0 * p0 + p1 * p1 + p2 * p2
        if dd < best_d:
            best_d = dd
            best_mask = mask
            out[0], out[1], out[2] = p0, p1, p2
    return best_mask


@njit(cache=True)
def _gjk(ka, Ra, ta, da, kb, Rb, tb, db, boolean):
    """GJK on the Minkowski difference A - B.

    Returns the distance, or with ``boolean`` set stops early once a
    separating plane is found (returning 1.0) or containment is proven (0.0).
    """
    W = np.zeros((7, 3))
    v = np.empty(3)
    d0, d1, d2 = tb[0] - ta[0], tb[1] - ta[1], tb[2] - ta[2]
    if d0 == 0 and d1 == 0 and d2 == 0:
        d0 = 1.0
    a0, a1, a2 = _support(ka, Ra, ta, da, -d0, -d1, -d2)
    b0, b1, b2 = _support(kb, Rb, tb, db, d0, d1, d2)
    v[0], v[1], v[2] = a0 - b0, a1 - b1, a2 - b2
    W[0] = v
    n = 1
    for _ in range(96):
        vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
        if vv < 1e-24:
            return 0.0
        a0, a1, a2 = _support(ka, Ra, ta, da, -v[0], -v[1], -v[2])
        b0, b1, b2 = _support(kb, Rb, tb, db, v[0], v[1], v[2])
        w0, w1, w2 = a0 - b0, a1 - b1, a2 - b2
        vw = v[0] * w0 + v[1] * w1 + v[2] * w2
        if boolean and vw > 0:
            return 1.0
        if vv - vw <= 1e-12 * vv + 1e-20:
            return math.sqrt(vv)
        for i in range(n):
            if abs(W[i, 0] - w0) + abs(W[i, 1] - w1) + abs(W[i, 2] - w2) < 1e-15:
                return math.sqrt(vv)
        W[n, 0], W[n, 1], W[n, 2] = w0, w1, w2
        n += 1
        mask = _closest_on_simplex(W, n, v)
        if mask == 15:
            return 0.0
        m = 0
        for i in range(n):
            if mask & (1 << i):
                W[m] = W[i]
                m += 1
        n = m
    return math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


@njit(cache=True)
def gjk_distance(ka, Ra, ta, da, kb, Rb, tb, db):
    """Euclidean distance between two convex primitives (0 when they overlap)."""
    return _gjk(ka, Ra, ta, da, kb, Rb, tb, db, False)


@njit(cache=True)
def overlap_matrix(A, B, skip):
    """``hit[i, j]`` when shape ``A[i]`` intersects ``B[j]`` (``skip`` masks pairs)."""
    ka, Ra, ta, da, ra = A
    kb, Rb, tb, db, rb = B
    na, nb = ka.shape[0], kb.shape[0]
    hit = np.zeros((na, nb), dtype=np.bool_)
    for i in range(na):
        for j in range(nb):
            if skip[i, j]:
                continue
            c0, c1, c2 = ta[i, 0] - tb[j, 0], ta[i, 1] - tb[j, 1], ta[i, 2] - tb[j, 2]
            if c0 * c0 + c1 * c1 + c2 * c2 > (ra[i] + rb[j]) ** 2:
                continue
            if _gjk(ka[i], Ra[i], ta[i], da[i], kb[j], Rb[j], tb[j], db[j], True) <= 0.0:
                hit[i, j] = True
    return hit


@njit(cache=True)
def _slab(o, v, h):
    if v == 0.0:
        if abs(o) <= h:
            return -np.inf, np.inf
        return np.nan, np.nan
    a, b = (-h - o) / v, (h - o) / v
    return (a, b) if a <= b else (b, a)


@njit(cache=True)
def line_intervals(kinds, Rs, ts, ds, origin, direction):
    """Entry/exit parameters of one line against every packed primitive (NaN on miss)."""
    n = kinds.shape[0]
    out = np.full((n, 2), np.nan)
    for k in range(n):
        R, t, d = Rs[k], ts[k], ds[k]
        o = np.empty(3)
        v = np.empty(3)
        for i in range(3):
            o[i] = (origin[0] - t[0]) * R[0, i] + (origin[1] - t[1]) * R[1, i] + (origin[2] - t[2]) * R[2, i]
            v[i] = direction[0] * R[0, i] + direction[1] * R[1, i] + direction[2] * R[2, i]
        lo, hi = -np.inf, np.inf
        if kinds[k] == 0:
            for i in range(3):
                a, b = _slab(o[i], v[i], d[i])
                lo, hi = max(lo, a), min(hi, b)
                if np.isnan(a):
                    lo = np.nan
        else:
            if kinds[k] == 1:
                qa = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
                qb = o[0] * v[0] + o[1] * v[1] + o[2] * v[2]
                qc = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - d[0] * d[0]
            else:
                qa = v[0] * v[0] + v[1] * v[1]
                qb = o[0] * v[0] + o[1] * v[1]
                qc = o[0] * o[0] + o[1] * o[1] - d[0] * d[0]
                a, b = _slab(o[2], v[2], d[2])
                lo, hi = a, b
                if np.isnan(a):
                    continue
            if qa > 0:
                disc = qb * qb - qa * qc
                if disc < 0:
                    continue
                sq = math.sqrt(disc)
                lo, hi = max(lo, (-qb - sq) / qa), min(hi, (-qb + sq) / qa)
            elif qc > 0:
                continue
        if not np.isnan(lo) and lo <= hi:
            out[k, 0], out[k, 1] = lo, hi
    return out


def distance(a: Primitive, b: Primitive) -> float:
    return float(gjk_distance(a.code, a.rotation, a.position, a.dims, b.code, b.rotation, b.position, b.dims))


def intersects(a: Primitive, b: Primitive) -> bool:
    return distance(a, b) <= 0.0
