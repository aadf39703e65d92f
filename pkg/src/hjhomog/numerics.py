"""Grids, monotone finite-difference operators and explicit stability bounds."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .environment import EnvironmentRealization
from .models import HamiltonianModel


@dataclass(frozen=True)
class Grid:
    """Uniform grid; ``N[i]`` points along axis ``i`` starting at ``origin[i]``."""

    n: int
    N: tuple[int, ...]
    h: float
    periodic: tuple[bool, ...]
    origin: tuple[float, ...]

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")
        if len(self.N) != self.n or len(self.periodic) != self.n or len(self.origin) != self.n:
            raise ValueError("grid metadata must have one entry per axis")

    @classmethod
    def torus(cls, L: float, h: float, n: int = 1) -> "Grid":
        N = int(round(L / h))
        if N < 3 or abs(N * h - L) > 1e-9 * L:
            raise ValueError(f"h={h} must divide L={L} into at least 3 cells")
        return cls(n, (N,) * n, float(h), (True,) * n, (0.0,) * n)

    @classmethod
    def box(cls, center: Sequence[float], radius: float, h: float) -> "Grid":
        """Non-periodic box ``center +- radius`` with ``center`` a grid node."""
        center = tuple(float(c) for c in np.atleast_1d(center))
        half = int(round(radius / h))
        n = len(center)
        return cls(n, (2 * half + 1,) * n, float(h), (False,) * n, tuple(c - half * h for c in center))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.N

    @property
    def size(self) -> int:
        return int(np.prod(self.N))

    def axes(self) -> list[np.ndarray]:
        return [self.origin[i] + self.h * np.arange(self.N[i]) for i in range(self.n)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*N, n)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def extent(self, axis: int = 0) -> float:
        return self.N[axis] * self.h if self.periodic[axis] else (self.N[axis] - 1) * self.h

    def index_of(self, x: Sequence[float]) -> tuple[int, ...]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = []
        for i in range(self.n):
            j = int(round((x[i] - self.origin[i]) / self.h))
            idx.append(j % self.N[i] if self.periodic[i] else j)
        return tuple(idx)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class VectorGridField:
    """``m`` component arrays on a common grid, with a time stamp."""

    values: np.ndarray
    grid: Grid
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"component shape {self.values.shape[1:]} does not match grid {self.grid.shape}")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def component(self, k: int) -> np.ndarray:
        return self.values[k]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def copy(self) -> "VectorGridField":
        return VectorGridField(self.values.copy(), self.grid, self.t)


@dataclass(frozen=True)
class DissipationBounds:
    alpha: tuple[float, ...]
    Lambda: float = 0.0

    def __post_init__(self):
        if any(a < 0 for a in self.alpha) or self.Lambda < 0:
            raise ValueError("dissipation bounds must be non-negative")

    @property
    def n(self) -> int:
        return len(self.alpha)


@dataclass
class SolveReport:
    converged: bool = True
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    dt: float | None = None
    steps: int = 0
    bounds: DissipationBounds | None = None
    diagnostics: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_history": [float(r) for r in self.residual_history],
            "dt": self.dt,
            "steps": self.steps,
            "alpha": None if self.bounds is None else list(self.bounds.alpha),
            "Lambda": None if self.bounds is None else self.bounds.Lambda,
            "diagnostics": _jsonable(self.diagnostics),
            "notes": list(self.notes),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# neighbor bookkeeping

def shift_field(u: np.ndarray, offset: Sequence[int], grid: Grid) -> np.ndarray:
    """``u`` evaluated at ``x + offset*h``; clamped at non-periodic edges."""
    out = u
    for i, o in enumerate(offset):
        if o == 0:
            continue
        axis = u.ndim - grid.n + i
        if grid.periodic[i]:
            out = np.roll(out, -o, axis=axis)
        else:
            idx = np.clip(np.arange(grid.N[i]) + o, 0, grid.N[i] - 1)
            out = np.take(out, idx, axis=axis)
    return out


def neighbor_index(grid: Grid, offset: Sequence[int]) -> np.ndarray:
    """Flat index of ``x + offset*h`` for every node (same rules as shift_field)."""
    flat = np.arange(grid.size).reshape(grid.shape)
    return shift_field(flat, offset, grid).ravel()


def _unit(n: int, i: int, sign: int = 1) -> tuple[int, ...]:
    return tuple(sign if j == i else 0 for j in range(n))


# ---------------------------------------------------------------------------
# gradients

def one_sided_gradients(u: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward differences, each of shape ``(n, *N)``.

    On non-periodic axes the missing one-sided difference at an edge is a copy
    of the available one.
    """
    u = np.asarray(u, dtype=float)
    Dm = np.empty((grid.n,) + u.shape)
    Dp = np.empty((grid.n,) + u.shape)
    for i in range(grid.n):
        Dp[i] = (shift_field(u, _unit(grid.n, i, 1), grid) - u) / grid.h
        Dm[i] = (u - shift_field(u, _unit(grid.n, i, -1), grid)) / grid.h
        if not grid.periodic[i]:
            axis = u.ndim - grid.n + i
            first = [slice(None)] * u.ndim
            last = [slice(None)] * u.ndim
            first[axis] = 0
            last[axis] = -1
            Dm[i][tuple(first)] = Dp[i][tuple(first)]
            Dp[i][tuple(last)] = Dm[i][tuple(last)]
    return Dm, Dp


def difference_matrices(grid: Grid) -> list[tuple[sp.csr_matrix, sp.csr_matrix]]:
    """Sparse ``(D-, D+)`` per axis acting on flattened fields (C order)."""
    size = grid.size
    eye = sp.identity(size, format="csr")
    rows = np.arange(size)
    out = []
    for i in range(grid.n):
        fwd = sp.csr_matrix((np.ones(size), (rows, neighbor_index(grid, _unit(grid.n, i, 1)))), shape=(size, size))
        bwd = sp.csr_matrix((np.ones(size), (rows, neighbor_index(grid, _unit(grid.n, i, -1)))), shape=(size, size))
        Dp = ((fwd - eye) / grid.h).tolil()
        Dm = ((eye - bwd) / grid.h).tolil()
        if not grid.periodic[i]:
            idx = np.arange(size).reshape(grid.shape)
            first = np.take(idx, 0, axis=i).ravel()
            last = np.take(idx, grid.N[i] - 1, axis=i).ravel()
            for j in first:
                Dm[j] = Dp[j]
            for j in last:
                Dp[j] = Dm[j]
        out.append((Dm.tocsr(), Dp.tocsr()))
    return out


# ---------------------------------------------------------------------------
# numerical Hamiltonian

def lax_friedrichs(model: HamiltonianModel, k: int, Dm, Dp, r, s, V, c, alpha) -> np.ndarray:
    """Vectorized ``H((D- + D+)/2, r, s) - sum_i alpha_i (D+_i - D-_i)/2``."""
    q = 0.5 * (Dm + Dp)
    H = model.hamiltonian(k, q, r, s, V, c)
    for i in range(Dm.shape[0]):
        H = H - 0.5 * alpha[i] * (Dp[i] - Dm[i])
    return H


def numerical_hamiltonian(model: HamiltonianModel, env: EnvironmentRealization, k: int, Dm, Dp, r, s, y,
                          bounds: DissipationBounds) -> float:
    """Point evaluation of the Lax-Friedrichs numerical Hamiltonian.

    ``s`` lists ``s_i`` for ``i != k``; ``y`` is the medium point.
    """
    Dm = np.atleast_1d(np.asarray(Dm, dtype=float))
    Dp = np.atleast_1d(np.asarray(Dp, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    s_red = np.atleast_1d(np.asarray(s, dtype=float))
    s_full = np.zeros(model.m)
    s_full[[i for i in range(model.m) if i != k]] = s_red
    co = env.coefficients(np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, env.n))
    H = lax_friedrichs(model, k, Dm[:, None], Dp[:, None], r[:, None], s_full[:, None], co["V"][k], co["c"][k],
                       bounds.alpha)
    return float(H[0])


# ---------------------------------------------------------------------------
# diffusion

def stencil_weights(A: np.ndarray, h: float) -> dict[tuple[int, ...], np.ndarray]:
    """Weights of the ``tr(A D^2 u)`` stencil; ``A`` has shape ``(n, n, ...)``.

    In 2-D the cross derivative uses the 7-point stencil oriented by the sign
    of ``a_12``, which is exact on quadratics.
    """
    n = A.shape[0]
    h2 = h * h
    if n == 1:
        a = A[0, 0]
        return {(1,): a / h2, (-1,): a / h2, (0,): -2 * a / h2}
    a11, a22, a12 = A[0, 0], A[1, 1], 0.5 * (A[0, 1] + A[1, 0])
    ap = np.maximum(a12, 0.0)
    an = np.maximum(-a12, 0.0)
    return {
        (1, 0): (a11 - ap - an) / h2,
        (-1, 0): (a11 - ap - an) / h2,
        (0, 1): (a22 - ap - an) / h2,
        (0, -1): (a22 - ap - an) / h2,
        (1, 1): ap / h2,
        (-1, -1): ap / h2,
        (1, -1): an / h2,
        (-1, 1): an / h2,
        (0, 0): (-2 * a11 - 2 * a22 + 2 * ap + 2 * an) / h2,
    }


def apply_diffusion(A: np.ndarray, u: np.ndarray, grid: Grid) -> np.ndarray:
    """``tr(A D^2 u)`` on the whole grid; ``A`` has shape ``(n, n, *N)``."""
    out = np.zeros_like(u, dtype=float)
    for off, w in stencil_weights(A, grid.h).items():
        if np.any(w != 0):
            out += w * shift_field(u, off, grid)
    return out


def diffusion_matrix(A: np.ndarray, grid: Grid) -> sp.csr_matrix:
    """Sparse matrix of ``tr(A D^2 .)`` with ``A`` of shape ``(n, n, *N)``."""
    size = grid.size
    rows = np.arange(size)
    M = sp.csr_matrix((size, size))
    for off, w in stencil_weights(A, grid.h).items():
        w = np.broadcast_to(w, grid.shape).ravel()
        if np.any(w != 0):
            M = M + sp.csr_matrix((w, (rows, neighbor_index(grid, off))), shape=(size, size))
    return M.tocsr()


def diffusion_term(env: EnvironmentRealization, k: int, field: np.ndarray, grid: Grid, point) -> float:
    """``tr(A_k D^2 u)`` at the grid node ``point`` (an index tuple), ``A_k`` sampled there."""
    point = tuple(int(i) for i in np.atleast_1d(point))
    x = np.array([grid.origin[i] + grid.h * point[i] for i in range(grid.n)])
    A = env.coefficients(x.reshape(1, grid.n))["A"][k][..., 0]
    total = 0.0
    for off, w in stencil_weights(A, grid.h).items():
        if w == 0:
            continue
        idx = []
        for i, o in enumerate(off):
            j = point[i] + o
            idx.append(j % grid.N[i] if grid.periodic[i] else min(max(j, 0), grid.N[i] - 1))
        total += float(w) * float(field[tuple(idx)])
    return total


def stencil_is_positive(A: np.ndarray, tol: float = 1e-14) -> bool:
    """Off-center stencil weights are non-negative (discrete comparison holds)."""
    if A.shape[0] == 1:
        return bool(np.all(A[0, 0] >= -tol))
    a12 = np.abs(0.5 * (A[0, 1] + A[1, 0]))
    return bool(np.all(A[0, 0] - a12 >= -tol) and np.all(A[1, 1] - a12 >= -tol))


def diffusion_bound(A: np.ndarray) -> tuple[float, bool]:
    """``Lambda >= sup ||A||`` and positivity flag.

    When the cross stencil has negative off-center weights, ``Lambda`` is
    inflated to cover the total off-center weight.
    """
    n = A.shape[0]
    if A.size == 0:
        return 0.0, True
    mats = np.moveaxis(A.reshape(n, n, -1), -1, 0)
    lam = float(np.max(np.linalg.norm(mats, ord=2, axis=(1, 2)))) if mats.shape[0] else 0.0
    positive = stencil_is_positive(A)
    if not positive:
        w = stencil_weights(A, 1.0)
        total = sum(np.abs(v) for off, v in w.items() if any(off))
        lam = max(lam, float(np.max(total)) / (2 * n))
    return lam, positive


def dissipation_bounds(model: HamiltonianModel, P: float, A: np.ndarray | None = None, n: int = 1,
                       margin: float = 0.2) -> DissipationBounds:
    """``alpha_i`` from the catalog closed form over ``|p| <= P(1 + margin)``.

    ``A`` (shape ``(m, n, n, ...)``, as returned by ``coefficients``) sets
    ``Lambda``; it is inflated when a cross stencil loses positivity.
    """
    speed = model.max_gradient_speed(P * (1.0 + margin))
    lam = 0.0
    if A is not None:
        n = A.shape[1]
        lam = max(diffusion_bound(A[k])[0] for k in range(A.shape[0]))
    return DissipationBounds((max(speed, 1e-12),) * n, lam)


def stable_dt(grid: Grid, bounds: DissipationBounds, eps: float, safety: float, reaction_rate: float = 0.0) -> float:
    """Explicit-Euler step keeping the combined scheme monotone.

    ``dt = safety / (sum_i alpha_i / h + 2 eps Lambda n / h^2 + reaction_rate)``.
    """
    if not 0 < safety <= 1:
        raise ValueError(f"safety={safety} must lie in (0, 1]")
    rate = sum(bounds.alpha) / grid.h + 2.0 * eps * bounds.Lambda * grid.n / grid.h**2 + reaction_rate
    if not rate > 0:
        raise ValueError("all rates vanish: the scheme has no dynamics")
    return safety / rate


def coupling_dt_cap(eps: float, m: int, c_max: float, value_range: float, safety: float) -> float:
    """Step cap from the stiffness of the quadratic coupling ``c ((u_k - u_j)/eps)_+^2``."""
    if m < 2 or c_max <= 0 or value_range <= 0:
        return np.inf
    return safety * eps**2 / (2.0 * m * c_max * value_range)


def sample_coefficients(env: EnvironmentRealization, grid: Grid, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Medium coefficients at ``x / scale`` for every node ``x`` of the grid."""
    return env.coefficients(grid.points() / scale)
