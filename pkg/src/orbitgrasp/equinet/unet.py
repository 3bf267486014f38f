"""Equivariant point UNet mapping a neighborhood to per-point SH coefficients."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .. import so3
from ..cloud import Neighborhood, PointCloud, farthest_point_sampling
from .irreps import IrrepsSpec, feature_to_flat
from .layers import N_RADIAL, EquivariantLinear, TPConv, edge_operators, sh_edge_attrs

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class NetworkConfig:
    L_out: int = 3
    hidden: str = "16x0+8x1+4x2+2x3"
    edge_lmax: int = 2         # highest edge SH degree in the convolutions
    n_stages: int = 3
    ratio: float = 0.25
    k: int = 16
    n_radial: int = N_RADIAL
    r_l: float = 0.05
    up_convs: bool = True
    dropout: float = 0.0  # reserved; not applied
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        hid = self.hidden_irreps
        if not 0 <= self.L_out <= 3:
            raise ValueError("L_out must lie in [0, 3]")
        if self.L_out > hid.lmax:
            raise ValueError(f"L_out={self.L_out} exceeds the hidden max degree {hid.lmax}")
        if hid.lmax > 3:
            raise ValueError("hidden degrees above 3 are not supported")
        if not 0 <= self.edge_lmax <= 3:
            raise ValueError("edge_lmax must lie in [0, 3]")
        if self.n_stages < 0:
            raise ValueError("n_stages must be >= 0")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.k < 1 or self.n_radial < 2 or self.r_l <= 0:
            raise ValueError("k >= 1, n_radial >= 2 and r_l > 0 required")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def hidden_irreps(self) -> IrrepsSpec:
        return IrrepsSpec.parse(self.hidden)

    @property
    def L_edge(self) -> int:
        return min(self.edge_lmax, self.hidden_irreps.lmax)

    @property
    def out_irreps(self) -> IrrepsSpec:
        return IrrepsSpec(tuple((1, l) for l in range(self.L_out + 1)))

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def stage_k(self, s: int) -> int:
        return self.k * 2 ** s

    def stage_rmax(self, s: int) -> float:
        return 2.0 * self.r_l * 2 ** s


# ----------------------------------------------------------- graph pooling

def knn_edges(pos: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Edges ``src -> dst`` from each node's ``k`` nearest nodes (itself included)."""
    n = pos.shape[0]
    k = min(k, n)
    _, nn_idx = cKDTree(pos).query(pos, k=k)
    nn_idx = np.asarray(nn_idx).reshape(n, k)
    return nn_idx.reshape(-1), np.repeat(np.arange(n), k)


@dataclass
class PoolStage:
    survivors: np.ndarray      # indices into the fine level
    coarse_edges: tuple        # KNN edges among survivors (coarse indexing)
    down_edges: tuple          # (fine src, coarse dst)

    @property
    def up_edges(self) -> tuple:
        """Inverted down-edges: (coarse src, fine dst)."""
        return self.down_edges[1], self.down_edges[0]


def fps_pool(pos: np.ndarray, ratio: float, k_coarse: int) -> PoolStage:
    """FPS downsampling with recorded fine->survivor edges.

    Every fine node sends to its nearest survivor; every survivor also collects
    its ``ceil(1/ratio)`` nearest fine nodes.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    n = pos.shape[0]
    n_keep = max(1, math.ceil(n * ratio - 1e-9))
    surv = farthest_point_sampling(pos, n_keep)
    # nearest survivor per fine node
    _, nearest = cKDTree(pos[surv]).query(pos, k=1)
    src = [np.arange(n)]
    dst = [np.asarray(nearest).reshape(-1)]
    k_pool = min(n, math.ceil(1.0 / ratio - 1e-9))
    if k_pool > 1:
        _, nn_idx = cKDTree(pos).query(pos[surv], k=k_pool)
        nn_idx = np.asarray(nn_idx).reshape(n_keep, k_pool)
        src.append(nn_idx.reshape(-1))
        dst.append(np.repeat(np.arange(n_keep), k_pool))
    pairs = np.unique(np.stack([np.concatenate(dst), np.concatenate(src)], axis=1), axis=0)
    down = (pairs[:, 1], pairs[:, 0])
    return PoolStage(surv, knn_edges(pos[surv], k_coarse), down)


@dataclass
class GraphLevel:
    pos: np.ndarray
    edges: tuple
    sh: torch.Tensor = None
    radial: torch.Tensor = None


@dataclass
class NetInput:
    """A neighborhood prepared for the network: centered geometry plus graph hierarchy."""

    normals: np.ndarray
    levels: list
    pools: list
    pool_attrs: list = field(default_factory=list)  # (sh, radial) per pool stage, fine->coarse
    query_rows: np.ndarray = None
    dtype: torch.dtype = torch.float32

    @property
    def pos(self) -> np.ndarray:
        return self.levels[0].pos


def _edge_attrs(src_pos, dst_pos, edges, L_edge, r_max, n_radial, dtype):
    s, d = edges
    Y, R = sh_edge_attrs(src_pos[s] - dst_pos[d], L_edge, r_max, n_radial)
    return torch.as_tensor(Y, dtype=dtype), torch.as_tensor(R, dtype=dtype)


def prepare_input(cfg: NetworkConfig, positions: np.ndarray, normals: np.ndarray, center,
                  query_rows=None) -> NetInput:
    """Build the graph hierarchy for centered coordinates ``positions - center``."""
    if normals is None:
        raise ValueError("the network needs per-point normals")
    pos = np.asarray(positions, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    L_edge = cfg.L_edge
    dtype = cfg.torch_dtype
    levels = [GraphLevel(pos, knn_edges(pos, cfg.stage_k(0)))]
    pools, pool_attrs = [], []
    for s in range(cfg.n_stages):
        fine = levels[-1]
        stage = fps_pool(fine.pos, cfg.ratio, cfg.stage_k(s + 1))
        pools.append(stage)
        coarse_pos = fine.pos[stage.survivors]
        levels.append(GraphLevel(coarse_pos, stage.coarse_edges))
        pool_attrs.append(_edge_attrs(fine.pos, coarse_pos, stage.down_edges, L_edge,
                                      cfg.stage_rmax(s + 1), cfg.n_radial, dtype))
    for s, lev in enumerate(levels):
        lev.sh, lev.radial = _edge_attrs(lev.pos, lev.pos, lev.edges, L_edge,
                                         cfg.stage_rmax(s), cfg.n_radial, dtype)
    rows = np.arange(pos.shape[0]) if query_rows is None else np.asarray(query_rows, dtype=np.int64)
    return NetInput(np.asarray(normals, dtype=np.float64), levels, pools, pool_attrs, rows, dtype)


def prepare_neighborhood(cfg: NetworkConfig, nbhd: Neighborhood, cloud: PointCloud) -> NetInput:
    ctx = nbhd.context_indices
    if cloud.normals is None:
        raise ValueError("the network needs per-point normals")
    return prepare_input(cfg, cloud.positions[ctx], cloud.normals[ctx], nbhd.center,
                         nbhd.query_in_context)


# ------------------------------------------------------------------ model

def _cart_to_sh_order(v: np.ndarray) -> np.ndarray:
    return v[..., [1, 2, 0]]


class EquiUNet(nn.Module):
    """Embedding, ``n_stages`` down blocks with FPS pooling, mirrored up blocks, SH head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        hid = cfg.hidden_irreps
        L_edge = cfg.L_edge
        S = cfg.n_stages
        self.embed = EquivariantLinear(IrrepsSpec(((1, 0), (2, 1))), hid, bias=False, generator=gen)

        def conv():
            return TPConv(hid, hid, L_edge, cfg.n_radial, generator=gen)

        self.down = nn.ModuleList([conv() for _ in range(S)])
        self.pool = nn.ModuleList([conv() for _ in range(S)])
        self.bottom = conv()
        self.unpool = nn.ModuleList([conv() for _ in range(S)])
        self.up = nn.ModuleList([conv() for _ in range(S)]) if cfg.up_convs else None
        self.head = EquivariantLinear(hid, cfg.out_irreps, bias=True, generator=gen)
        self.to(cfg.torch_dtype)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_features(self, inp: NetInput) -> dict:
        dt = inp.dtype
        n = inp.pos.shape[0]
        vec = np.stack([inp.normals, inp.pos / self.cfg.r_l], axis=1)
        x = {0: torch.ones(n, 1, 1, dtype=dt),
             1: torch.as_tensor(_cart_to_sh_order(vec), dtype=dt)}
        return self.embed(x)

    def forward(self, inp: NetInput) -> torch.Tensor:
        """Coefficients ``(n_query, (L_out+1)**2)`` for the query rows of ``inp``."""
        ops: dict = {}  # geometry-only edge operators, shared by every conv on a graph
        x = self.embed_features(inp)
        skips = []
        for s in range(self.cfg.n_stages):
            lev = inp.levels[s]
            x = self._conv(self.down[s], x, lev.edges, lev.sh, lev.radial, lev.pos.shape[0], ops, ("level", s))
            skips.append(x)
            sh, rad = inp.pool_attrs[s]
            x = self._conv(self.pool[s], x, inp.pools[s].down_edges, sh, rad,
                           len(inp.pools[s].survivors), ops, ("down", s))
        S = self.cfg.n_stages
        lev = inp.levels[-1]
        x = self._conv(self.bottom, x, lev.edges, lev.sh, lev.radial, lev.pos.shape[0], ops, ("level", S))
        for s in reversed(range(S)):
            x = unpool(self.unpool[s], x, inp, s, skips[s], ops)
            if self.up is not None:
                lev = inp.levels[s]
                x = self._conv(self.up[s], x, lev.edges, lev.sh, lev.radial, lev.pos.shape[0], ops, ("level", s))
        out = self.head(x)
        flat = feature_to_flat({l: out[l] for l in range(self.cfg.L_out + 1)})
        return flat[torch.as_tensor(inp.query_rows)]

    @staticmethod
    def _conv(layer, x, edges, sh, radial, n_dst, ops=None, key=None):
        src = torch.as_tensor(edges[0], dtype=torch.long)
        dst = torch.as_tensor(edges[1], dtype=torch.long)
        operators = None
        if ops is not None:
            k = (key, tuple(layer.paths))
            if k not in ops:
                ops[k] = edge_operators(sh, layer.paths)
            operators = ops[k]
        return layer(x, src, dst, sh, radial, n_dst, operators)


def unpool(layer: TPConv, coarse: dict, inp: NetInput, stage: int, skip: dict, ops: dict | None = None) -> dict:
    """Send coarse features back along the inverted down-edges and add the skip."""
    if not 0 <= stage < len(inp.pools):
        raise ValueError(f"no pooling stage {stage}")
    pool = inp.pools[stage]
    if next(iter(coarse.values())).shape[0] != len(pool.survivors):
        raise ValueError("coarse features do not match this pooling stage")
    n_fine = inp.levels[stage].pos.shape[0]
    src, dst = pool.up_edges
    # inverted edge vectors are the negated down-edge vectors
    sh_down, rad = inp.pool_attrs[stage]
    L_edge = math.isqrt(sh_down.shape[1]) - 1
    sign = torch.cat([torch.full((2 * l + 1,), (-1.0) ** l, dtype=sh_down.dtype) for l in range(L_edge + 1)])
    msgs = EquiUNet._conv(layer, coarse, (src, dst), sh_down * sign, rad, n_fine, ops, ("up", stage))
    return {l: msgs[l] + skip[l] for l in skip}


def forward(net: EquiUNet, nbhd: Neighborhood, cloud: PointCloud) -> so3.FourierField:
    """Run the network on one neighborhood; one coefficient row per query point."""
    inp = prepare_neighborhood(net.cfg, nbhd, cloud)
    with torch.no_grad():
        out = net(inp)
    return so3.FourierField(net.cfg.L_out, out.double().numpy())
