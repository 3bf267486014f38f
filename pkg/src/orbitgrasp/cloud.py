"""Point-cloud preprocessing: downsampling, normals, FPS, neighborhoods, PLY I/O."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DEFAULT_RADIUS = 0.05
DEFAULT_CONTEXT = 1024


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise ValueError("normals must align with positions")
            norms = np.linalg.norm(n, axis=1)
            if n.shape[0] and np.abs(norms - 1).max() > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", n / norms[:, None] if n.shape[0] else n)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != p.shape[0]:
                raise ValueError("labels must align with positions")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "PointCloud":
        R = np.asarray(rotation, dtype=np.float64)
        return PointCloud(
            self.positions @ R.T + np.asarray(translation, dtype=np.float64),
            None if self.normals is None else self.normals @ R.T,
            self.labels,
        )

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pos = np.concatenate([c.positions for c in clouds])
        nrm = None
        if all(c.normals is not None for c in clouds):
            nrm = np.concatenate([c.normals for c in clouds])
        lab = None
        if all(c.labels is not None for c in clouds):
            lab = np.concatenate([c.labels for c in clouds])
        return PointCloud(pos, nrm, lab)


@dataclass(frozen=True)
class Neighborhood:
    """Context set (m nearest neighbours of the center) with an inner query ball."""

    center: np.ndarray
    center_index: int
    context_indices: np.ndarray
    query_indices: np.ndarray
    r_l: float
    m: int

    @property
    def query_in_context(self) -> np.ndarray:
        """Positions of the query points inside ``context_indices``."""
        lookup = {int(j): i for i, j in enumerate(self.context_indices)}
        return np.array([lookup[int(q)] for q in self.query_indices], dtype=np.int64)


# -------------------------------------------------------------- downsampling

def _voxel_grid(cloud: PointCloud, voxel: float, origin=None) -> PointCloud:
    rel = cloud.positions if origin is None else cloud.positions - np.asarray(origin, dtype=np.float64)
    keys = np.floor(rel / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = counts.shape[0]
    pos = np.zeros((n, 3))
    np.add.at(pos, inverse, cloud.positions)
    pos /= counts[:, None]
    normals = None
    if cloud.normals is not None:
        acc = np.zeros((n, 3))
        np.add.at(acc, inverse, cloud.normals)
        lens = np.linalg.norm(acc, axis=1, keepdims=True)
        # cancelling normals: fall back to the first member's normal
        first = np.full(n, -1)
        first[inverse[::-1]] = np.arange(len(inverse))[::-1]
        bad = lens[:, 0] < 1e-9
        acc[bad] = cloud.normals[first[bad]]
        lens[bad] = 1.0
        normals = acc / lens
    labels = None
    if cloud.labels is not None:
        # majority label per voxel, lowest label on ties
        pairs, pair_counts = np.unique(np.stack([inverse, cloud.labels]), axis=1, return_counts=True)
        order = np.lexsort((pairs[1], -pair_counts, pairs[0]))
        pairs = pairs[:, order]
        keep = np.ones(pairs.shape[1], dtype=bool)
        keep[1:] = pairs[0, 1:] != pairs[0, :-1]
        labels = np.empty(n, dtype=np.int64)
        labels[pairs[0, keep]] = pairs[1, keep]
    return PointCloud(pos, normals, labels)


def voxel_downsample(cloud: PointCloud, voxel: float, target: tuple[int, int] | None = None,
                     max_iter: int = 20, origin=None) -> PointCloud:
    """One centroid per occupied voxel.

    With ``target=(lo, hi)`` the voxel size is bisected until the output count
    falls in ``[lo, hi]`` or ``max_iter`` iterations elapse. ``origin`` anchors
    a grid corner (default: the world origin).
    """
    if len(cloud) == 0:
        raise ValueError("cannot downsample an empty cloud")
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    out = _voxel_grid(cloud, voxel, origin)
    if target is None:
        return out
    lo_n, hi_n = target
    if lo_n <= len(out) <= hi_n or len(cloud) < lo_n:
        return out
    # bracket: small voxel -> many points, large voxel -> few points
    small, large = voxel, voxel
    if len(out) > hi_n:
        while len(_voxel_grid(cloud, large, origin)) > hi_n:
            large *= 2.0
    else:
        while len(_voxel_grid(cloud, small, origin)) < lo_n and small > 1e-6:
            small *= 0.5
    for _ in range(max_iter):
        mid = 0.5 * (small + large)
        out = _voxel_grid(cloud, mid, origin)
        if lo_n <= len(out) <= hi_n:
            return out
        if len(out) > hi_n:
            small = mid
        else:
            large = mid
    log.warning("voxel bisection stopped at %d points outside [%d, %d]", len(out), lo_n, hi_n)
    return out


# ------------------------------------------------------------------ normals

def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=(0.0, 0.0, 1.0),
                     return_flags: bool = False):
    """PCA normals over k-NN patches, oriented toward ``viewpoint``.

    ``viewpoint`` is a single 3-vector or one per point (fused multi-view clouds).
    Patches with zero covariance get the viewpoint direction and are flagged.
    """
    n = len(cloud)
    if k < 3 or n < k:
        raise ValueError(f"need k >= 3 and at least k points (k={k}, n={n})")
    pos = cloud.positions
    _, nn = cKDTree(pos).query(pos, k=k)
    patch = pos[nn]
    centered = patch - patch.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    vp = np.broadcast_to(np.asarray(viewpoint, dtype=np.float64), pos.shape)
    to_view = vp - pos
    flip = np.einsum("ni,ni->n", normals, to_view) < 0
    normals[flip] *= -1
    scale = np.trace(cov, axis1=1, axis2=2)
    degenerate = scale < 1e-18
    if degenerate.any():
        log.warning("%d degenerate normal patches", int(degenerate.sum()))
        normals[degenerate] = to_view[degenerate] / np.linalg.norm(to_view[degenerate], axis=1, keepdims=True)
    out = replace(cloud, normals=normals / np.linalg.norm(normals, axis=1, keepdims=True))
    return (out, degenerate) if return_flags else out


# ------------------------------------------------------------ FPS and kNN

def farthest_point_sampling(points, k: int) -> np.ndarray:
    """Greedy max-min subset, seeded at the point nearest the centroid.

    Ties go to the lowest index; indices are returned in selection order.
    """
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = pos.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    seed = int(np.argmin(np.linalg.norm(pos - pos.mean(axis=0), axis=1)))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed
    dist = np.linalg.norm(pos - pos[seed], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
    return chosen


def height_thresholded_fps(cloud: PointCloud, k: int, table_z: float = 0.0,
                           threshold: float = 0.01) -> np.ndarray:
    """FPS restricted to points above ``table_z + threshold`` (indices into ``cloud``)."""
    keep = np.flatnonzero(cloud.positions[:, 2] > table_z + threshold)
    if keep.size == 0:
        keep = np.arange(len(cloud))
    k = min(k, keep.size)
    return keep[farthest_point_sampling(cloud.positions[keep], k)]


def knn(points, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points, ascending distance, ties by index."""
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if k > pos.shape[0]:
        raise ValueError(f"k={k} exceeds cloud size {pos.shape[0]}")
    d = np.linalg.norm(pos - np.asarray(query, dtype=np.float64), axis=1)
    return np.argsort(d, kind="stable")[:k]


def ball_query(points, center, r: float) -> np.ndarray:
    if r <= 0:
        raise ValueError("radius must be positive")
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    d = np.linalg.norm(pos - np.asarray(center, dtype=np.float64), axis=1)
    return np.flatnonzero(d <= r)


def build_neighborhoods(cloud: PointCloud, centers, r_l: float = DEFAULT_RADIUS,
                        m: int = DEFAULT_CONTEXT) -> list[Neighborhood]:
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if centers.size == 0:
        raise ValueError("no centers given")
    pos = cloud.positions
    out = []
    for ci in centers:
        c = pos[ci]
        d = np.linalg.norm(pos - c, axis=1)
        order = np.argsort(d, kind="stable")
        query = np.flatnonzero(d <= r_l)
        m_i = min(m, len(pos))
        if query.size > m_i:
            log.info("raising context size from %d to %d at center %d", m_i, query.size, ci)
            m_i = int(query.size)
        out.append(Neighborhood(c.copy(), int(ci), order[:m_i], query, float(r_l), m_i))
    return out


# --------------------------------------------------------------------- PLY

def write_ply(path, cloud: PointCloud, colors=None, scalars: dict | None = None) -> None:
    """ASCII PLY with x y z, optional normals, label, rgb colors and float scalars."""
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    cols = [cloud.positions]
    fmts = ["%.17g"] * 3
    if cloud.normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
        cols.append(cloud.normals)
        fmts += ["%.17g"] * 3
    if cloud.labels is not None:
        props.append("property int label")
        cols.append(cloud.labels[:, None])
        fmts.append("%d")
    if colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
        cols.append(np.asarray(colors).reshape(n, 3))
        fmts += ["%d"] * 3
    for name, vals in (scalars or {}).items():
        props.append(f"property float {name}")
        cols.append(np.asarray(vals, dtype=np.float64).reshape(n, 1))
        fmts.append("%.17g")
    header = ["ply", "format ascii 1.0", f"element vertex {n}", *props, "end_header"]
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(header) + "\n")
        if n:
            data = np.concatenate([np.asarray(c, dtype=np.float64) for c in cols], axis=1)
            np.savetxt(f, data, fmt=fmts)


def read_ply(path) -> PointCloud:
    path = Path(path)
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path} is not a PLY file")
        names, n = [], None
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if tok[:2] == ["element", "vertex"]:
                n = int(tok[2])
            elif tok[0] == "property":
                names.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n is None:
            raise ValueError(f"{path} has no vertex element")
        data = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.zeros((0, len(names)))
    if data.shape[0] != n:
        raise ValueError(f"{path}: expected {n} vertices, read {data.shape[0]}")
    col = {name: i for i, name in enumerate(names)}
    pos = data[:, [col["x"], col["y"], col["z"]]]
    normals = data[:, [col["nx"], col["ny"], col["nz"]]] if "nx" in col else None
    if normals is not None and n:
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    labels = data[:, col["label"]].astype(np.int64) if "label" in col else None
    return PointCloud(pos, normals, labels)
