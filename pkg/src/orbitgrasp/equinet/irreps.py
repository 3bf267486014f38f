"""Irrep bookkeeping and real Clebsch-Gordan coefficients."""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .. import so3

MAX_L = 3


@dataclass(frozen=True)
class IrrepsSpec:
    """Ordered ``(multiplicity, degree)`` pairs, one entry per degree."""

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        merged: dict[int, int] = {}
        for mult, l in self.entries:
            if mult < 1:
                raise ValueError(f"multiplicity must be >= 1, got {mult}")
            if l < 0:
                raise ValueError(f"degree must be >= 0, got {l}")
            merged[l] = merged.get(l, 0) + mult
        object.__setattr__(self, "entries", tuple((merged[l], l) for l in sorted(merged)))

    @classmethod
    def parse(cls, text: str) -> "IrrepsSpec":
        """Parse ``"16x0+8x1+4x2"``."""
        entries = []
        for part in text.replace(" ", "").split("+"):
            m = re.fullmatch(r"(\d+)x(\d+)", part)
            if not m:
                raise ValueError(f"bad irreps term {part!r}")
            entries.append((int(m.group(1)), int(m.group(2))))
        return cls(tuple(entries))

    def __str__(self) -> str:
        return "+".join(f"{m}x{l}" for m, l in self.entries)

    @property
    def degrees(self) -> list[int]:
        return [l for _, l in self.entries]

    @property
    def lmax(self) -> int:
        return max(self.degrees)

    def mult(self, l: int) -> int:
        return dict((d, m) for m, d in self.entries).get(l, 0)

    @property
    def dim(self) -> int:
        return sum(m * (2 * l + 1) for m, l in self.entries)


# An EquiFeature is a dict {l: tensor[n_nodes, mult, 2l+1]}.

def feature_to_flat(x: dict) -> torch.Tensor:
    """Blocked per-node vector: degree-major, then channel, then m."""
    return torch.cat([x[l].reshape(x[l].shape[0], -1) for l in sorted(x)], dim=1)


def feature_from_flat(flat: torch.Tensor, irreps: IrrepsSpec) -> dict:
    if flat.shape[1] != irreps.dim:
        raise ValueError(f"flat width {flat.shape[1]} does not match irreps {irreps} (dim {irreps.dim})")
    out, off = {}, 0
    for mult, l in irreps.entries:
        w = mult * (2 * l + 1)
        out[l] = flat[:, off:off + w].reshape(-1, mult, 2 * l + 1)
        off += w
    return out


def check_feature(x: dict, irreps: IrrepsSpec) -> None:
    for mult, l in irreps.entries:
        if l not in x or x[l].shape[1:] != (mult, 2 * l + 1):
            got = None if l not in x else tuple(x[l].shape[1:])
            raise ValueError(f"feature block l={l}: expected ({mult}, {2 * l + 1}), got {got}")


def rotate_feature(x: dict, g) -> dict:
    """Apply ``D^l(g)`` to every block (test helper)."""
    mats = so3.wigner_d_all(max(x), g)
    return {l: torch.einsum("ij,ncj->nci", torch.as_tensor(mats[l], dtype=t.dtype), t) for l, t in x.items()}


# --------------------------------------------------------- Clebsch-Gordan

def selection_ok(l1: int, l2: int, l3: int) -> bool:
    return abs(l1 - l2) <= l3 <= l1 + l2


@lru_cache(maxsize=None)
def _cg(l1: int, l2: int, l3: int) -> np.ndarray:
    # invariant vector of D1 (x) D2 (x) D3 for a few generic rotations
    rows = []
    for seed in (11, 23, 37):
        g = so3.sample_uniform_rotation(seed)
        D1, D2, D3 = so3.wigner_d(l1, g), so3.wigner_d(l2, g), so3.wigner_d(l3, g)
        K = np.kron(np.kron(D1, D2), D3)
        rows.append(K - np.eye(K.shape[0]))
    _, s, vt = np.linalg.svd(np.concatenate(rows))
    if s[-1] > 1e-9 or (len(s) > 1 and s[-2] < 1e-6):
        raise RuntimeError(f"unexpected invariant space for ({l1},{l2},{l3})")
    C = vt[-1].reshape(2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1)
    C *= np.sqrt(2 * l3 + 1) / np.linalg.norm(C)
    C[np.abs(C) < 1e-13] = 0.0
    first = C.reshape(-1)[np.flatnonzero(np.abs(C.reshape(-1)) > 1e-9)[0]]
    if first < 0:
        C = -C
    C += 0.0  # no negative zeros
    C.setflags(write=False)
    return C


def cg_coefficients(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real CG tensor ``C[m1, m2, m3]`` for the bilinear map ``V_l1 x V_l2 -> V_l3``.

    Normalized so that ``sum_{m1,m2} C[m1,m2,a] C[m1,m2,b] = delta_ab``; the
    sign makes the first nonzero entry positive.
    """
    if not selection_ok(l1, l2, l3):
        raise ValueError(f"selection rule violated: |{l1}-{l2}| <= {l3} <= {l1}+{l2}")
    if max(l1, l2, l3) > MAX_L:
        raise ValueError(f"degrees above {MAX_L} are not supported")
    return _cg(l1, l2, l3)
