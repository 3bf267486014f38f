"""Real spherical harmonics, Wigner D-matrices and rotation helpers.

Conventions
-----------
Real, orthonormal spherical harmonics without the Condon-Shortley phase.
Coefficients are stored degree-blocked, ``m`` running from ``-l`` to ``l``;
the entry for ``(l, m)`` sits at offset ``l*l + l + m``. For ``l = 1`` the
basis is proportional to ``(y, z, x)``.

Wigner matrices satisfy ``sh_basis(R @ u) == D(R) @ sh_basis(u)`` so that
rotating coefficients by ``D(R)`` gives the signal ``u -> f(R^T u)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_DEGREE = 8

# (x, y, z) -> real-SH order (m=-1: y, m=0: z, m=1: x)
_L1_PERM = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


def n_coeffs(L: int) -> int:
    return (L + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def degree_slice(l: int) -> slice:
    return slice(l * l, (l + 1) ** 2)


# ---------------------------------------------------------------- rotations

@dataclass(frozen=True)
class Rotation:
    """An element of SO(3) stored as a 3x3 matrix."""

    matrix: np.ndarray
    euler: tuple[float, float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        det = (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]) - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
               + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))
        if not (np.abs(m.T @ m - np.eye(3)).max() <= 1e-9 and abs(det - 1) <= 1e-9):
            raise ValueError("matrix is not a proper rotation")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3), (0.0, 0.0, 0.0))

    @classmethod
    def from_euler_zyz(cls, alpha: float, beta: float, gamma: float) -> "Rotation":
        m = rot_z(alpha) @ rot_y(beta) @ rot_z(gamma)
        return cls(m, (float(alpha), float(beta), float(gamma)))

    @classmethod
    def from_frame(cls, x_axis, y_axis, z_axis) -> "Rotation":
        return cls(np.column_stack([x_axis, y_axis, z_axis]))

    @classmethod
    def about_axis(cls, axis, angle: float) -> "Rotation":
        return cls(axis_angle_matrix(axis, angle))

    def to_euler_zyz(self) -> tuple[float, float, float]:
        return euler_zyz_from_matrix(self.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(self.matrix @ other.matrix)
        return self.matrix @ np.asarray(other)

    def apply(self, vectors) -> np.ndarray:
        """Rotate one vector or an ``(n, 3)`` array of row vectors."""
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.matrix.T


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def euler_zyz_from_matrix(m: np.ndarray) -> tuple[float, float, float]:
    cb = float(np.clip(m[2, 2], -1.0, 1.0))
    beta = math.acos(cb)
    if abs(math.sin(beta)) < 1e-9:
        # gimbal lock: only alpha +/- gamma is defined, put it all in alpha
        if cb > 0:
            return math.atan2(m[1, 0], m[0, 0]), 0.0, 0.0
        return math.atan2(-m[1, 0], -m[0, 0]), math.pi, 0.0
    alpha = math.atan2(m[1, 2], m[0, 2])
    gamma = math.atan2(m[2, 1], -m[2, 0])
    return alpha, beta, gamma


def sample_uniform_rotation(seed) -> Rotation:
    """Haar-uniform rotation, deterministic in ``seed`` (int or Generator)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rotation(quat_to_matrix(q))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# --------------------------------------------------------------- directions

def direction_from_angles(theta, phi) -> np.ndarray:
    """Unit vector(s) from polar angle ``theta`` and azimuth ``phi``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_direction(u) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    theta = np.arctan2(np.hypot(u[..., 0], u[..., 1]), u[..., 2])
    phi = np.arctan2(u[..., 1], u[..., 0])
    return theta, phi


def normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the golden-angle spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


# ------------------------------------------------------ spherical harmonics

def sh_basis(u, L: int) -> np.ndarray:
    """Real SH ``Y_l^m(u)`` for ``0 <= l <= L``, blocked by degree.

    ``u`` is a unit vector or an ``(..., 3)`` array of them; the result has
    shape ``(..., (L+1)**2)``.
    """
    if L < 0 or L > MAX_DEGREE:
        raise ValueError(f"degree L={L} outside [0, {MAX_DEGREE}]")
    u = np.asarray(u, dtype=np.float64)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    out = np.empty(u.shape[:-1] + (n_coeffs(L),))

    # cos(m phi) sin^m(theta) and sin(m phi) sin^m(theta) as polynomials in x, y
    xy = (x + 1j * y)
    powers = [np.ones_like(x, dtype=np.complex128)]
    for _ in range(L):
        powers.append(powers[-1] * xy)

    for m in range(L + 1):
        # Q_l^m(z) = P_l^m(z) / sin^m(theta), no Condon-Shortley phase
        q_prev = None
        q = np.full_like(z, _double_factorial(2 * m - 1))
        for l in range(m, L + 1):
            if l == m + 1:
                q_prev, q = q, (2 * m + 1) * z * q
            elif l > m + 1:
                q_prev, q = q, ((2 * l - 1) * z * q - (l + m - 1) * q_prev) / (l - m)
            k = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
            if m == 0:
                out[..., sh_index(l, 0)] = k * q
            else:
                k *= math.sqrt(2.0)
                out[..., sh_index(l, m)] = k * q * powers[m].real
                out[..., sh_index(l, -m)] = k * q * powers[m].imag
    return out


def _double_factorial(n: int) -> float:
    r = 1.0
    while n > 1:
        r *= n
        n -= 2
    return r


@dataclass(frozen=True)
class FourierCoeffs:
    """SH coefficients of one spherical signal, truncated at degree ``L``."""

    L: int
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if d.size != n_coeffs(self.L):
            raise ValueError(f"expected {(self.L + 1) ** 2} coefficients for L={self.L}, got {d.size}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    def block(self, l: int) -> np.ndarray:
        return self.data[degree_slice(l)]

    @classmethod
    def zeros(cls, L: int) -> "FourierCoeffs":
        return cls(L, np.zeros(n_coeffs(L)))


@dataclass(frozen=True)
class FourierField:
    """Per-point coefficients, one row per point of a query set."""

    L: int
    data: np.ndarray  # (n_points, (L+1)**2)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != n_coeffs(self.L):
            raise ValueError(f"field must be (n, {n_coeffs(self.L)}), got {d.shape}")
        object.__setattr__(self, "data", d)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> FourierCoeffs:
        return FourierCoeffs(self.L, self.data[i])


def eval_signal(c: FourierCoeffs, u) -> np.ndarray | float:
    """Evaluate the band-limited signal at one or many directions."""
    val = sh_basis(u, c.L) @ c.data
    return float(val) if np.ndim(val) == 0 else val


def sh_fit(samples_u, values, L: int, max_cond: float = 1e8):
    """Least-squares SH coefficients from sampled values.

    Returns ``(FourierCoeffs, residual)`` where ``residual`` is the RMS misfit.
    """
    u = np.asarray(samples_u, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(values, dtype=np.float64).reshape(-1)
    if u.shape[0] != f.shape[0]:
        raise ValueError("directions and values differ in length")
    A = sh_basis(u, L)
    cond = np.linalg.cond(A) if A.shape[0] >= A.shape[1] else np.inf
    if not np.isfinite(cond) or cond > max_cond:
        raise ValueError(f"design matrix is rank deficient (condition number {cond:.3g})")
    coef, *_ = np.linalg.lstsq(A, f, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - f) ** 2)))
    return FourierCoeffs(L, coef), resid


# -------------------------------------------------------- Wigner D-matrices

def wigner_d(l: int, g) -> np.ndarray:
    """Real Wigner matrix of degree ``l`` for rotation ``g``."""
    return wigner_d_all(l, g)[l]


def wigner_d_all(L: int, g) -> list[np.ndarray]:
    """Wigner matrices for every degree up to ``L``.

    Built recursively from the ``l = 1`` block (Ivanic-Ruedenberg recursion).
    """
    R = g.matrix if isinstance(g, Rotation) else np.asarray(g, dtype=np.float64)
    if L < 0 or L > MAX_DEGREE:
        raise ValueError(f"degree {L} outside [0, {MAX_DEGREE}]")
    mats = [np.ones((1, 1))]
    if L == 0:
        return mats
    r1 = _L1_PERM @ R @ _L1_PERM.T
    mats.append(r1)
    for l in range(2, L + 1):
        mats.append(_next_band(l, r1, mats[-1]))
    return mats


def _next_band(l: int, r1: np.ndarray, prev: np.ndarray) -> np.ndarray:
    lp = l - 1

    def r1_(i, j):
        return r1[i + 1, j + 1]

    def rp(a, b):
        return prev[a + lp, b + lp]

    def P(i, a, b):
        if b == l:
            return r1_(i, 1) * rp(a, l - 1) - r1_(i, -1) * rp(a, -l + 1)
        if b == -l:
            return r1_(i, 1) * rp(a, -l + 1) + r1_(i, -1) * rp(a, l - 1)
        return r1_(i, 0) * rp(a, b)

    out = np.zeros((2 * l + 1, 2 * l + 1))
    for m in range(-l, l + 1):
        d = 1 if m == 0 else 0
        am = abs(m)
        for n in range(-l, l + 1):
            denom = (l + n) * (l - n) if abs(n) < l else 2 * l * (2 * l - 1)
            u = math.sqrt((l + m) * (l - m) / denom)
            v = 0.5 * math.sqrt((1 + d) * (l + am - 1) * (l + am) / denom) * (1 - 2 * d)
            w = -0.5 * math.sqrt((l - am - 1) * (l - am) / denom) * (1 - d)
            val = 0.0
            if u != 0.0:
                val += u * P(0, m, n)
            if v != 0.0:
                if m == 0:
                    V = P(1, 1, n) + P(-1, -1, n)
                elif m > 0:
                    dd = 1 if m == 1 else 0
                    V = P(1, m - 1, n) * math.sqrt(1 + dd) - P(-1, -m + 1, n) * (1 - dd)
                else:
                    dd = 1 if m == -1 else 0
                    V = P(1, m + 1, n) * (1 - dd) + P(-1, -m - 1, n) * math.sqrt(1 + dd)
                val += v * V
            if w != 0.0:
                if m > 0:
                    W = P(1, m + 1, n) + P(-1, -m - 1, n)
                else:
                    W = P(1, m - 1, n) - P(-1, -m + 1, n)
                val += w * W
            out[m + l, n + l] = val
    return out


def block_diag_wigner(L: int, g) -> np.ndarray:
    """``blockdiag(D^0 .. D^L)`` acting on a full coefficient vector."""
    mats = wigner_d_all(L, g)
    out = np.zeros((n_coeffs(L), n_coeffs(L)))
    for l, D in enumerate(mats):
        s = degree_slice(l)
        out[s, s] = D
    return out


def rotate_coeffs(c: FourierCoeffs, g) -> FourierCoeffs:
    """Coefficients of the rotated signal ``u -> f(g^-1 u)``."""
    return FourierCoeffs(c.L, block_diag_wigner(c.L, g) @ c.data)


def rotate_field(field_: FourierField, g) -> FourierField:
    return FourierField(field_.L, field_.data @ block_diag_wigner(field_.L, g).T)
