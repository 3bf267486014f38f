"""Equivariant building blocks: linear mixing, gate, edge attributes, TP convolution.

Features are dicts ``{l: tensor[n_nodes, mult, 2l+1]}`` laid out by an
:class:`IrrepsSpec`.
"""
from __future__ import annotations

import functools
import math

import numpy as np
import torch
from torch import nn

from .. import so3
from .irreps import IrrepsSpec, cg_coefficients, check_feature, selection_ok

N_RADIAL = 16
# edge SH are scaled so that the l=0 entry equals 1
EDGE_SCALE = math.sqrt(4 * math.pi)


# ------------------------------------------------------------------ linear

def equivariant_linear(x: dict, weights: dict, bias: torch.Tensor | None = None) -> dict:
    """Mix multiplicities within each degree; ``weights[l]`` is ``(mult_in, mult_out)``."""
    out = {}
    for l, w in weights.items():
        if l not in x:
            raise ValueError(f"input has no degree-{l} block")
        if x[l].shape[1] != w.shape[0]:
            raise ValueError(f"degree {l}: input mult {x[l].shape[1]} != weight rows {w.shape[0]}")
        out[l] = torch.einsum("nci,cd->ndi", x[l], w)
    if bias is not None:
        out[0] = out[0] + bias[None, :, None]
    return out


class EquivariantLinear(nn.Module):
    def __init__(self, irreps_in: IrrepsSpec, irreps_out: IrrepsSpec, bias: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.irreps_in, self.irreps_out = irreps_in, irreps_out
        self.weights = nn.ParameterDict()
        for mult, l in irreps_out.entries:
            c_in = irreps_in.mult(l)
            if c_in == 0:
                continue
            bound = math.sqrt(3.0 / c_in)
            w = (torch.rand(c_in, mult, generator=generator) * 2 - 1) * bound
            self.weights[str(l)] = nn.Parameter(w)
        self.bias = None
        if bias and irreps_out.mult(0):
            self.bias = nn.Parameter(torch.zeros(irreps_out.mult(0)))

    def forward(self, x: dict) -> dict:
        out = equivariant_linear(x, {int(l): w for l, w in self.weights.items()}, self.bias)
        ref = next(iter(x.values()))
        for mult, l in self.irreps_out.entries:
            if l not in out:
                out[l] = ref.new_zeros(ref.shape[0], mult, 2 * l + 1)
        return out


# -------------------------------------------------------------------- gate

def gate_irreps(irreps_out: IrrepsSpec) -> IrrepsSpec:
    """Pre-gate irreps: one extra scalar per nonscalar channel."""
    n_gates = sum(m for m, l in irreps_out.entries if l > 0)
    return IrrepsSpec(irreps_out.entries + ((n_gates, 0),)) if n_gates else irreps_out


def gate(x: dict, irreps_out: IrrepsSpec) -> dict:
    """Gated nonlinearity.

    Scalars go through ``s * sigmoid(s)``; each nonscalar channel is scaled by
    the sigmoid of its own gate scalar (the trailing scalar channels).
    """
    n_scalar = irreps_out.mult(0)
    n_gates = sum(m for m, l in irreps_out.entries if l > 0)
    if x[0].shape[1] != n_scalar + n_gates:
        raise ValueError(f"expected {n_scalar} scalars + {n_gates} gate scalars, got {x[0].shape[1]}")
    out = {}
    if n_scalar:
        s = x[0][:, :n_scalar]
        out[0] = s * torch.sigmoid(s)
    gates = torch.sigmoid(x[0][:, n_scalar:, 0])
    off = 0
    for mult, l in irreps_out.entries:
        if l == 0:
            continue
        out[l] = x[l] * gates[:, off:off + mult, None]
        off += mult
    return out


# --------------------------------------------------------- edge attributes

def radial_basis(lengths: np.ndarray, r_max: float, n: int = N_RADIAL) -> np.ndarray:
    centers = np.linspace(0.0, r_max, n)
    width = r_max / (n - 1)
    return np.exp(-0.5 * ((lengths[:, None] - centers[None, :]) / width) ** 2)


def sh_edge_attrs(vectors: np.ndarray, L_edge: int, r_max: float, n_radial: int = N_RADIAL):
    """SH of edge directions (blocked, up to ``L_edge``) and Gaussian radial features.

    Zero-length edges (self loops) get the ``l = 0``-only attribute.
    """
    vec = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    length = np.linalg.norm(vec, axis=1)
    loop = length < 1e-12
    unit = np.zeros_like(vec)
    unit[~loop] = vec[~loop] / length[~loop, None]
    Y = so3.sh_basis(unit, L_edge)
    Y[loop] = 0.0
    Y[loop, 0] = so3.sh_basis(np.array([0.0, 0.0, 1.0]), 0)[0]
    return Y, radial_basis(length, r_max, n_radial)


# -------------------------------------------------------------- TP conv

def conv_paths(irreps_in: IrrepsSpec, L_edge: int, out_degrees) -> list[tuple[int, int, int]]:
    paths = []
    for l_out in sorted(out_degrees):
        for l_in in irreps_in.degrees:
            for l_e in range(L_edge + 1):
                if selection_ok(l_in, l_e, l_out):
                    paths.append((l_in, l_e, l_out))
    return paths


@functools.lru_cache(maxsize=None)
def _stacked_cg(l_in: int, out_paths: tuple, dtype: torch.dtype) -> torch.Tensor:
    """CG tensors of all paths from ``l_in`` stacked as ``[(L_e+1)**2, 2l_in+1, cols]``."""
    n_sh = (max(l_e for l_e, _ in out_paths) + 1) ** 2
    cols = sum(2 * l_out + 1 for _, l_out in out_paths)
    C = np.zeros((n_sh, 2 * l_in + 1, cols))
    off = 0
    for l_e, l_out in out_paths:
        d = 2 * l_out + 1
        C[l_e * l_e:(l_e + 1) ** 2, :, off:off + d] = np.transpose(cg_coefficients(l_in, l_e, l_out), (1, 0, 2))
        off += d
    return torch.as_tensor(C * EDGE_SCALE, dtype=dtype)


def edge_operators(edge_sh: torch.Tensor, paths) -> dict:
    """Per-edge maps ``V_l_in -> (+)_paths V_l_out`` from edge SH contracted with CG.

    They depend only on geometry, so a graph can reuse them across layers.
    Returns ``{l_in: tensor[E, 2l_in+1, sum_p (2l_out+1)]}``.
    """
    ops = {}
    for l_in in sorted({p[0] for p in paths}):
        C = _stacked_cg(l_in, tuple((l_e, l_out) for li, l_e, l_out in paths if li == l_in), edge_sh.dtype)
        n_sh, d_in, cols = C.shape
        ops[l_in] = (edge_sh[:, :n_sh] @ C.reshape(n_sh, -1)).reshape(-1, d_in, cols)
    return ops


@functools.lru_cache(maxsize=None)
def _column_paths(out_degrees: tuple) -> torch.Tensor:
    """Path index of every output column when paths are laid out side by side."""
    return torch.repeat_interleave(torch.arange(len(out_degrees)), torch.tensor([2 * l + 1 for l in out_degrees]))


def tp_messages(x: dict, src: torch.Tensor, dst: torch.Tensor, edge_sh: torch.Tensor,
                radial: torch.Tensor, path_weights: dict, paths, n_dst: int,
                operators: dict | None = None) -> dict:
    """Mean-aggregated tensor-product messages, concatenated per output degree.

    ``path_weights[p]`` has shape ``(n_radial, mult_in)``: the learned radial
    function of path ``p`` for each sender channel.
    """
    n_src = next(iter(x.values())).shape[0]
    if src.numel() and (int(src.max()) >= n_src or int(dst.max()) >= n_dst
                        or int(src.min()) < 0 or int(dst.min()) < 0):
        raise ValueError("edge references a node outside the graph")
    ref = next(iter(x.values()))
    if operators is None:
        operators = edge_operators(edge_sh, paths)
    deg = torch.zeros(n_dst, dtype=ref.dtype).index_add_(0, dst, torch.ones_like(dst, dtype=ref.dtype))
    deg = deg.clamp(min=1.0)
    per_out: dict[int, list] = {}
    for l_in, op in operators.items():
        lp = [p for p in paths if p[0] == l_in]
        c = x[l_in].shape[1]
        # one radial weight per (path, channel), broadcast over that path's columns
        w = (radial @ torch.cat([path_weights[p] for p in lp], dim=1)).reshape(-1, len(lp), c)
        w_cols = w.index_select(1, _column_paths(tuple(p[2] for p in lp))).transpose(1, 2)
        msg = torch.bmm(x[l_in][src], op) * w_cols
        agg = msg.new_zeros((n_dst,) + msg.shape[1:]).index_add_(0, dst, msg) / deg[:, None, None]
        off = 0
        for p in lp:
            d = 2 * p[2] + 1
            per_out.setdefault(p[2], []).append(agg[:, :, off:off + d])
            off += d
    return {l_out: torch.cat(per_out[l_out], dim=1) for l_out in sorted(per_out)}


def tp_conv(x: dict, edges, edge_sh, radial, path_weights: dict, paths, linear: "EquivariantLinear",
            irreps_out: IrrepsSpec, n_dst: int, operators: dict | None = None) -> dict:
    """Message passing step: TP messages -> mean -> equivariant linear -> gate."""
    src, dst = edges
    msgs = tp_messages(x, src, dst, edge_sh, radial, path_weights, paths, n_dst, operators)
    return gate(linear(msgs), irreps_out)


class TPConv(nn.Module):
    def __init__(self, irreps_in: IrrepsSpec, irreps_out: IrrepsSpec, L_edge: int,
                 n_radial: int = N_RADIAL, generator: torch.Generator | None = None):
        super().__init__()
        self.irreps_in, self.irreps_out = irreps_in, irreps_out
        pre = gate_irreps(irreps_out)
        self.paths = conv_paths(irreps_in, L_edge, pre.degrees)
        self.path_weights = nn.ParameterDict()
        msg_mult: dict[int, int] = {}
        for p in self.paths:
            c_in = irreps_in.mult(p[0])
            # radial basis sums to ~2.5 near its support; keep messages O(1)
            w = (torch.rand(n_radial, c_in, generator=generator) * 2 - 1) * math.sqrt(3.0 / 2.5)
            self.path_weights[self._key(p)] = nn.Parameter(w)
            msg_mult[p[2]] = msg_mult.get(p[2], 0) + c_in
        self.msg_irreps = IrrepsSpec(tuple((m, l) for l, m in msg_mult.items()))
        self.linear = EquivariantLinear(self.msg_irreps, pre, generator=generator)

    @staticmethod
    def _key(p) -> str:
        return "_".join(map(str, p))

    def forward(self, x: dict, src, dst, edge_sh, radial, n_dst: int, operators: dict | None = None) -> dict:
        check_feature(x, self.irreps_in)
        weights = {p: self.path_weights[self._key(p)] for p in self.paths}
        return tp_conv(x, (src, dst), edge_sh, radial, weights, self.paths, self.linear,
                       self.irreps_out, n_dst, operators)
