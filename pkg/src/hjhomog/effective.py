"""Discounted cell problems, vanishing-discount estimates of Hbar(p, r) and tables.

The discounted system at slope ``p`` and level ``r`` is

    delta v_k - tr(A_k D^2 v_k) + H_k(p + Dv_k, (r, ..., r), v_k - v_j, y) = 0

on the torus of the realization.  It is solved for ``z = delta v``, for which
the system reads ``z - tr(A D^2 z)/delta + H(p + Dz/delta, r, (z_k - z_j)/delta)``.
With a fixed Lax-Friedrichs dissipation the discrete map is convex with an
M-matrix Jacobian, so Newton's method converges monotonically after its first
step.  A plain pseudo-time relaxation is available as an alternative.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from .environment import EnvironmentRealization, EnvironmentSpec, realize
from .errors import ConvergenceError, SpecificationError, TableRangeError
from .models import HamiltonianModel, SaturationWarning, verify_assumptions
from .numerics import (
    DissipationBounds,
    Grid,
    SolveReport,
    VectorGridField,
    diffusion_bound,
    diffusion_matrix,
    difference_matrices,
)

METHODS = ("newton", "relaxation")


@dataclass
class CellProblem:
    env: EnvironmentRealization
    model: HamiltonianModel
    p: Sequence[float]
    r: float
    delta: float
    h: float = 0.125
    tol: float = 1e-8
    window: float = 1.0
    method: str = "newton"
    alpha: float | None = None
    max_iter: int = 200
    relaxation_safety: float = 0.9
    initial: np.ndarray | None = None

    def __post_init__(self):
        self.p = tuple(float(x) for x in np.atleast_1d(self.p))
        if len(self.p) != self.env.n:
            raise SpecificationError(f"slope p needs {self.env.n} entries", "p")
        if not self.delta > 0:
            raise SpecificationError("discount delta must be positive", "delta")
        if self.method not in METHODS:
            raise SpecificationError(f"method {self.method!r} not in {METHODS}", "method")
        if self.model.m != self.env.m:
            raise SpecificationError("model and environment disagree on m", "m")
        if self.env.L < 2 * self.window / self.delta - 1e-9:
            raise SpecificationError(
                f"torus side L={self.env.L} cannot hold the window ball of radius {self.window}/{self.delta}", "L"
            )

    @property
    def grid(self) -> Grid:
        return Grid.torus(self.env.L, self.h, self.env.n)


@dataclass
class _CellOperators:
    grid: Grid
    D: list
    diff: list
    A: np.ndarray
    V: np.ndarray
    c: np.ndarray
    Lambda: float


_OP_CACHE: dict = {}


def _operators(env: EnvironmentRealization, h: float) -> _CellOperators:
    key = (id(env), h)
    hit = _OP_CACHE.get(key)
    if hit is not None and hit[0] is env:
        return hit[1]
    grid = Grid.torus(env.L, h, env.n)
    co = env.coefficients(grid.points())
    A = co["A"]
    diff = []
    lam = 0.0
    for k in range(env.m):
        if np.any(A[k] != 0):
            diff.append(diffusion_matrix(A[k], grid))
            lam = max(lam, diffusion_bound(A[k])[0])
        else:
            diff.append(None)
    ops = _CellOperators(grid, difference_matrices(grid), diff, A, co["V"].reshape(env.m, -1),
                         co["c"].reshape(env.m, env.m, -1), lam)
    _OP_CACHE.clear()
    _OP_CACHE[key] = (env, ops)
    return ops


def a_priori_slope(model: HamiltonianModel, env: EnvironmentRealization, p: Sequence[float], h: float = 0.125) -> float:
    """Rough bound on ``|p + Dv|`` for the cell problem at slope ``p``.

    ``|p|`` plus the corrector slope ``(osc V_k / a_k)^(1/gamma_k)``.
    """
    ops = _operators(env, h)
    extra = 0.0
    for k in range(model.m):
        osc = float(ops.V[k].max() - ops.V[k].min())
        extra = max(extra, (osc / model.a[k]) ** (1.0 / model.gamma[k]))
    return float(np.linalg.norm(p)) + extra


def default_alpha(model: HamiltonianModel, env: EnvironmentRealization, p: Sequence[float], h: float = 0.125,
                  margin: float = 0.2) -> float:
    return max(model.max_gradient_speed(a_priori_slope(model, env, p, h) * (1.0 + margin)), 1e-12)


class _CellSystem:
    """Residual and Jacobian of the discrete cell system in ``z = delta v``."""

    def __init__(self, problem: CellProblem, alpha: float):
        self.pb = problem
        self.ops = _operators(problem.env, problem.h)
        self.alpha = alpha
        self.m = problem.model.m
        self.N = self.ops.grid.size
        self.n = problem.env.n

    def pieces(self, Z):
        pb, ops = self.pb, self.ops
        d = pb.delta
        Zk = Z.reshape(self.m, self.N)
        out = []
        for k in range(self.m):
            Dm = np.stack([Mm @ Zk[k] for Mm, _ in ops.D]) / d
            Dp = np.stack([Mp @ Zk[k] for _, Mp in ops.D]) / d
            q = np.asarray(pb.p)[:, None] + 0.5 * (Dm + Dp)
            s = (Zk[k][None] - Zk) / d
            out.append((Dm, Dp, q, s))
        return Zk, out

    def residual(self, Z, with_jacobian: bool = False):
        pb, ops, model = self.pb, self.ops, self.pb.model
        d = pb.delta
        r_hat = np.full(self.m, pb.r)
        Zk, parts = self.pieces(Z)
        F = np.empty((self.m, self.N))
        blocks = [[None] * self.m for _ in range(self.m)]
        hp_max = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SaturationWarning)
            for k, (Dm, Dp, q, s) in enumerate(parts):
                # the capped gradient term keeps the discrete system monotone at every iterate
                G, Hp = model.gradient_term_capped(k, q, self.alpha)
                H = G + model.coupling_term(k, s, ops.c[k]) + model.beta[k] * pb.r - ops.V[k]
                H = H - 0.5 * self.alpha * np.sum(Dp - Dm, axis=0)
                F[k] = Zk[k] + H
                if ops.diff[k] is not None:
                    F[k] -= (ops.diff[k] @ Zk[k]) / d
                if not with_jacobian:
                    continue
                hp_max = max(hp_max, float(np.max(np.abs(model.gradient_term_dp(k, q)))))
                Hs = model.coupling_term_ds(k, s, ops.c[k])
                J = sp.identity(self.N, format="csr")
                for i, (Mm, Mp) in enumerate(ops.D):
                    J = J + sp.diags((0.5 * Hp[i] + 0.5 * self.alpha) / d) @ Mm
                    J = J + sp.diags((0.5 * Hp[i] - 0.5 * self.alpha) / d) @ Mp
                if ops.diff[k] is not None:
                    J = J - ops.diff[k] / d
                if self.m > 1:
                    J = J + sp.diags(np.sum(Hs, axis=0) / d)
                    for j in range(self.m):
                        if j != k:
                            blocks[k][j] = sp.diags(-Hs[j] / d)
                blocks[k][k] = J
        F = F.ravel()
        if not with_jacobian:
            return F
        return F, sp.bmat(blocks, format="csc"), hp_max

    def hp_max(self, Z) -> float:
        _, parts = self.pieces(Z)
        return max(float(np.max(np.abs(self.pb.model.gradient_term_dp(k, q)))) for k, (_, _, q, _) in enumerate(parts))

    def relaxation_step(self, Z) -> float:
        """Pseudo-time step keeping the relaxation map monotone at the state ``Z``."""
        pb, ops, model = self.pb, self.ops, self.pb.model
        grid = ops.grid
        rate = self.n * self.alpha / grid.h + 2 * self.n * ops.Lambda / grid.h**2
        if model.m > 1:
            _, parts = self.pieces(Z)
            coupling = max(float(np.max(np.sum(model.coupling_term_ds(k, s, ops.c[k]), axis=0)))
                           for k, (_, _, _, s) in enumerate(parts))
            rate += coupling
        return pb.relaxation_safety / (1.0 + rate / pb.delta)


def _initial_guess(problem: CellProblem, ops: _CellOperators) -> np.ndarray:
    model = problem.model
    sup_h = -np.inf
    p = np.asarray(problem.p)
    for k in range(model.m):
        Hk = model.gradient_term(k, p[:, None]) + model.beta[k] * problem.r - ops.V[k]
        sup_h = max(sup_h, float(np.max(Hk)))
    return np.full(model.m * ops.grid.size, -sup_h)


def solve_cell(problem: CellProblem) -> tuple[VectorGridField, SolveReport]:
    """Solve the discounted cell system; returns ``v`` (not ``delta v``) and a report."""
    ops = _operators(problem.env, problem.h)
    alpha = problem.alpha if problem.alpha is not None else default_alpha(problem.model, problem.env, problem.p, problem.h)
    report = SolveReport()
    attempts = 0
    Z0 = problem.initial.ravel().copy() if problem.initial is not None else _initial_guess(problem, ops)
    while True:
        attempts += 1
        system = _CellSystem(problem, alpha)
        Z, history, iters, converged = _run(problem, system, Z0)
        hp = system.hp_max(Z)
        if not converged:
            raise ConvergenceError(
                f"cell solve did not converge in {iters} iterations (delta={problem.delta}, p={problem.p})", history
            )
        if hp <= alpha * (1 + 1e-9) or problem.alpha is not None or attempts >= 4:
            break
        report.notes.append(f"alpha={alpha:.4g} below sup|H_p|={hp:.4g}; re-solved with larger alpha")
        alpha = 1.2 * hp
        Z0 = Z
    if hp > alpha * (1 + 1e-9):
        report.notes.append(f"alpha={alpha:.4g} below sup|H_p|={hp:.4g}: scheme not monotone")
    grid = ops.grid
    d = problem.delta
    z = Z.reshape((problem.model.m,) + grid.shape)
    v = VectorGridField(z / d, grid)
    Zk = z.reshape(problem.model.m, -1)
    grad = 0.0
    for k in range(problem.model.m):
        for Mm, Mp in ops.D:
            grad = max(grad, float(np.max(np.abs(Mm @ Zk[k]))), float(np.max(np.abs(Mp @ Zk[k]))))
    inside = window_mask(grid, problem.window / d).ravel()
    gap = 0.0
    for i in range(problem.model.m):
        for j in range(i + 1, problem.model.m):
            gap = max(gap, float(np.max(np.abs(Zk[i][inside] - Zk[j][inside]))) / d)
    report.converged = True
    report.iterations = iters
    report.residual_history = history
    report.bounds = DissipationBounds((alpha,) * grid.n, ops.Lambda)
    report.diagnostics.update(
        {
            "value": float(-z[(0,) + (0,) * grid.n]),
            "component_values": [float(-z[(k,) + (0,) * grid.n]) for k in range(problem.model.m)],
            "sup_delta_v": float(np.max(np.abs(z))),
            "sup_grad_v": grad / d,
            "component_gap_window": gap,
            "alpha": alpha,
            "sup_Hp": hp,
            "delta": d,
            "method": problem.method,
        }
    )
    return v, report


def _run(problem: CellProblem, system: _CellSystem, Z0: np.ndarray):
    Z = Z0.copy()
    history = []
    scale = max(problem.delta, 1.0)
    if problem.method == "newton":
        for it in range(problem.max_iter + 1):
            F, J, _ = system.residual(Z, with_jacobian=True)
            res = float(np.max(np.abs(F)))
            history.append(res)
            est = float(np.max(np.abs(Z.reshape(problem.model.m, -1)[0])))
            if res < problem.tol * scale * (1 + est):
                return Z, history, it, True
            if it == problem.max_iter:
                break
            Z = Z - spla.spsolve(J, F)
            if not np.all(np.isfinite(Z)):
                break
        return Z, history, problem.max_iter, False
    for it in range(problem.max_iter + 1):
        F = system.residual(Z)
        res = float(np.max(np.abs(F)))
        if it % 10 == 0:
            history.append(res)
        est = float(np.max(np.abs(Z.reshape(problem.model.m, -1)[0])))
        if res < problem.tol * scale * (1 + est):
            history.append(res)
            return Z, history, it, True
        Z = Z - system.relaxation_step(Z) * F
    return Z, history, problem.max_iter, False


def rep_grid(Z: np.ndarray, env: EnvironmentRealization, h: float) -> Grid:
    return Grid.torus(env.L, h, env.n)


def window_mask(grid: Grid, radius: float) -> np.ndarray:
    """Nodes within periodic distance ``radius`` of the origin node."""
    dist2 = np.zeros(grid.shape)
    for i, ax in enumerate(np.meshgrid(*grid.axes(), indexing="ij")):
        L = grid.extent(i)
        d = np.minimum(np.abs(ax - grid.origin[i]), L - np.abs(ax - grid.origin[i]))
        dist2 = dist2 + d * d
    return dist2 <= radius * radius + 1e-12


# ---------------------------------------------------------------------------
# vanishing-discount estimate

def fit_power_law(deltas: Sequence[float], values: Sequence[float], b_range=(0.5, 2.0)) -> dict:
    """Fit ``values ~ H + a delta^b`` with ``b`` in ``b_range`` (variable projection)."""
    d = np.asarray(deltas, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(d) == 1:
        return {"Hbar": float(y[0]), "a": 0.0, "b": float("nan"), "residual": 0.0}
    spread = float(np.max(y) - np.min(y))
    if spread <= 1e-15 * max(1.0, float(np.max(np.abs(y)))):
        return {"Hbar": float(np.mean(y)), "a": 0.0, "b": float("nan"), "residual": 0.0}

    def solve(b):
        X = np.stack([np.ones_like(d), d**b], axis=1)
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        return coef, float(np.linalg.norm(X @ coef - y))

    if len(d) == 2:
        coef, res = solve(1.0)
        return {"Hbar": float(coef[0]), "a": float(coef[1]), "b": 1.0, "residual": res}
    res = minimize_scalar(lambda b: solve(b)[1], bounds=b_range, method="bounded", options={"xatol": 1e-8})
    coef, r = solve(res.x)
    return {"Hbar": float(coef[0]), "a": float(coef[1]), "b": float(res.x), "residual": r}


def schedule(delta0: float, halvings: int) -> list[float]:
    """``delta0 * 2^-j`` for ``j = 0..halvings``."""
    return [delta0 * 2.0**-j for j in range(halvings + 1)]


def estimate_Hbar(env: EnvironmentRealization, model: HamiltonianModel, p, r: float, deltas: Sequence[float],
                  window: float = 1.0, h: float = 0.125, method: str = "newton", alpha: float | None = None,
                  tol: float = 1e-8, max_iter: int = 200, fit_tol: float = 1e-6,
                  alpha_margin: float = 1.05) -> tuple[float, dict]:
    """Extrapolate ``-delta v_1^delta(0)`` along a decreasing discount schedule.

    With ``alpha=None`` the dissipation is first taken from the a priori slope
    bound and then tightened to ``alpha_margin`` times the largest ``|H_p|``
    met on the pilot solutions; a fixed ``alpha`` is raised (and the event
    noted) only if a solution violates it.
    """
    deltas = [float(x) for x in deltas]
    if len(deltas) == 0 or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise SpecificationError("discount schedule must be non-empty and strictly decreasing", "deltas")
    if env.L < 4 * window / deltas[-1] - 1e-9:
        raise SpecificationError(
            f"torus side L={env.L} is below 4R/delta_min = {4 * window / deltas[-1]}", "L")
    p = tuple(float(x) for x in np.atleast_1d(p))
    notes = []

    def sweep(a, inits=None):
        out, Z_prev = [], None
        for j, d in enumerate(deltas):
            if inits is not None:
                init = inits[j]
            elif Z_prev is not None:
                init = 0.5 * (Z_prev + float(np.mean(Z_prev)))
            else:
                init = None
            pb = CellProblem(env, model, p, r, d, h=h, tol=tol, window=window, method=method, alpha=a,
                             max_iter=max_iter, initial=init)
            v, rep = solve_cell(pb)
            Z_prev = v.values * d
            out.append((Z_prev, rep))
        return out, max(rep.diagnostics["sup_Hp"] for _, rep in out)

    if alpha is None:
        # pilot pass with the a priori bound, then tighten to the observed speed
        a0 = default_alpha(model, env, p, h)
        sols, hp = sweep(a0)
        alpha = max(alpha_margin * hp, 1e-12)
        if alpha < a0:
            sols, hp = sweep(alpha, [Z for Z, _ in sols])
        else:
            alpha = a0
    else:
        sols, hp = sweep(alpha)
    tries = 0
    while hp > alpha * (1 + 1e-9) and tries < 3:
        notes.append(f"alpha={alpha:.6g} below sup|H_p|={hp:.6g}; schedule re-solved")
        alpha = alpha_margin * hp
        sols, hp = sweep(alpha, [Z for Z, _ in sols])
        tries += 1
    raw = [rep.diagnostics["value"] for _, rep in sols]
    reports = [rep for _, rep in sols]
    z_windows = [Z[0][window_mask(rep_grid(Z, env, h), window / d)] for (Z, _), d in zip(sols, deltas)]
    fit = fit_power_law(deltas, raw)
    Hbar = fit["Hbar"]
    flatness = [float(np.max(np.abs(Hbar + zw))) for zw in z_windows]
    diffs = np.diff(raw)
    tol_mono = fit_tol + fit["residual"]
    monotone = bool(np.all(diffs >= -tol_mono) or np.all(diffs <= tol_mono))
    diag = {
        "p": list(p),
        "r": r,
        "deltas": deltas,
        "raw": raw,
        "fit": fit,
        "flatness": flatness,
        "flatness_decreasing": bool(all(b <= a + 1e-12 for a, b in zip(flatness, flatness[1:]))),
        "low_confidence": not monotone,
        "alpha": alpha,
        "h": h,
        "window": window,
        "L": env.L,
        "seed": env.seed,
        "iterations": [rep.iterations for rep in reports],
        "sup_delta_v": [rep.diagnostics["sup_delta_v"] for rep in reports],
        "sup_grad_v": [rep.diagnostics["sup_grad_v"] for rep in reports],
        "component_gap_window": [rep.diagnostics["component_gap_window"] for rep in reports],
        "component_values": [rep.diagnostics["component_values"] for rep in reports],
        "sup_Hp": hp,
        "notes": notes + [n for rep in reports for n in rep.notes],
    }
    return Hbar, diag


# ---------------------------------------------------------------------------
# tables

def multilinear(grids: Sequence[np.ndarray], values: np.ndarray, points: Sequence[np.ndarray]) -> np.ndarray:
    """Multilinear interpolation on a tensor grid, clamped to the grid box.

    Single-node axes are treated as constant along that axis.
    """
    pts = [np.asarray(x, dtype=float) for x in points]
    shape = np.broadcast(*pts).shape
    pts = [np.broadcast_to(x, shape) for x in pts]
    idx, wts = [], []
    for g, x in zip(grids, pts):
        g = np.asarray(g, dtype=float)
        if g.size == 1:
            idx.append((np.zeros(shape, dtype=int), np.zeros(shape, dtype=int)))
            wts.append(np.zeros(shape))
            continue
        xc = np.clip(x, g[0], g[-1])
        i0 = np.clip(np.searchsorted(g, xc, side="right") - 1, 0, g.size - 2)
        w = (xc - g[i0]) / (g[i0 + 1] - g[i0])
        idx.append((i0, i0 + 1))
        wts.append(w)
    out = np.zeros(shape)
    for corner in np.ndindex(*(2,) * len(grids)):
        w = np.ones(shape)
        ii = []
        for a, c in enumerate(corner):
            w = w * (wts[a] if c else 1.0 - wts[a])
            ii.append(idx[a][c])
        out += w * values[tuple(ii)]
    return out


@dataclass
class EffectiveHamiltonianTable:
    """Tabulated ``Hbar(p, r)``; ``values`` has shape ``(*len(p_grids[i]), len(r_grid))``."""

    p_grids: list
    r_grid: np.ndarray
    values: np.ndarray
    deltas: list = field(default_factory=list)
    residuals: np.ndarray | None = None
    spread: np.ndarray | None = None
    low_confidence: np.ndarray | None = None
    seeds: list = field(default_factory=list)
    env_spec: dict | None = None
    model: dict | None = None
    model_hash: str = ""
    h: float | None = None
    window: float | None = None
    alpha: float | None = None
    entries: list = field(default_factory=list)
    interpolation: str = "multilinear"

    def __post_init__(self):
        self.p_grids = [np.atleast_1d(np.asarray(g, dtype=float)) for g in self.p_grids]
        self.r_grid = np.atleast_1d(np.asarray(self.r_grid, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        expected = tuple(g.size for g in self.p_grids) + (self.r_grid.size,)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} does not match grids {expected}")
        for g in self.p_grids + [self.r_grid]:
            if g.size > 1 and np.any(np.diff(g) <= 0):
                raise ValueError("table grids must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("table values must be finite")
        if self.residuals is None:
            self.residuals = np.zeros_like(self.values)
        if self.low_confidence is None:
            self.low_confidence = np.zeros(self.values.shape, dtype=bool)

    @property
    def n(self) -> int:
        return len(self.p_grids)

    def interpolate(self, p, r) -> np.ndarray:
        """``Hbar`` at ``p`` (shape ``(n, ...)``) and ``r`` (broadcastable)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 0:
            p = p[None]
        return multilinear(self.p_grids + [self.r_grid], self.values, [p[i] for i in range(self.n)] + [np.asarray(r, dtype=float)])

    def __call__(self, p, r=0.0) -> float:
        return float(self.interpolate(np.atleast_1d(np.asarray(p, dtype=float)), r))

    def p_bounds(self) -> tuple[list, list]:
        return [float(g[0]) for g in self.p_grids], [float(g[-1]) for g in self.p_grids]

    def r_bounds(self) -> tuple[float, float]:
        return float(self.r_grid[0]), float(self.r_grid[-1])

    def slope_bounds(self) -> tuple[float, float]:
        """Largest node-difference slopes in ``p`` (any axis) and in ``r``."""
        sp_, sr = 0.0, 0.0
        for i, g in enumerate(self.p_grids):
            if g.size > 1:
                dv = np.diff(self.values, axis=i)
                dg = np.diff(g).reshape((-1,) + (1,) * (self.values.ndim - i - 1))
                sp_ = max(sp_, float(np.max(np.abs(dv / dg))))
        if self.r_grid.size > 1:
            dv = np.diff(self.values, axis=-1) / np.diff(self.r_grid)
            sr = max(sr, float(np.max(np.abs(dv))))
        return sp_, sr

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "p_grids": [g.tolist() for g in self.p_grids],
            "r_grid": self.r_grid.tolist(),
            "values": self.values.tolist(),
            "deltas": list(self.deltas),
            "residuals": self.residuals.tolist(),
            "spread": None if self.spread is None else self.spread.tolist(),
            "low_confidence": self.low_confidence.tolist(),
            "seeds": list(self.seeds),
            "env_spec": self.env_spec,
            "model": self.model,
            "model_hash": self.model_hash,
            "h": self.h,
            "window": self.window,
            "alpha": self.alpha,
            "interpolation": self.interpolation,
            "entries": self.entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveHamiltonianTable":
        return cls(
            p_grids=d["p_grids"],
            r_grid=d["r_grid"],
            values=d["values"],
            deltas=d.get("deltas", []),
            residuals=None if d.get("residuals") is None else np.asarray(d["residuals"], dtype=float),
            spread=None if d.get("spread") is None else np.asarray(d["spread"], dtype=float),
            low_confidence=None if d.get("low_confidence") is None else np.asarray(d["low_confidence"], dtype=bool),
            seeds=d.get("seeds", []),
            env_spec=d.get("env_spec"),
            model=d.get("model"),
            model_hash=d.get("model_hash", ""),
            h=d.get("h"),
            window=d.get("window"),
            alpha=d.get("alpha"),
            entries=d.get("entries", []),
            interpolation=d.get("interpolation", "multilinear"),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "EffectiveHamiltonianTable":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def export_csv(self, path) -> Path:
        """One row per node: ``r, p_0[, p_1], Hbar, spread, low_confidence``."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r"] + [f"p{i}" for i in range(self.n)] + ["Hbar", "spread", "low_confidence"])
            for j, r in enumerate(self.r_grid):
                for idx in np.ndindex(*(g.size for g in self.p_grids)):
                    key = idx + (j,)
                    spread = "" if self.spread is None else repr(float(self.spread[key]))
                    w.writerow([repr(float(r))] + [repr(float(self.p_grids[i][idx[i]])) for i in range(self.n)]
                               + [repr(float(self.values[key])), spread, int(self.low_confidence[key])])
        return path


def constant_table(func, p_grids, r_grid) -> EffectiveHamiltonianTable:
    """Table of a closed-form ``func(p_vector, r)`` (used for reference media)."""
    p_grids = [np.atleast_1d(np.asarray(g, dtype=float)) for g in p_grids]
    r_grid = np.atleast_1d(np.asarray(r_grid, dtype=float))
    vals = np.empty(tuple(g.size for g in p_grids) + (r_grid.size,))
    for idx in np.ndindex(*vals.shape):
        p = np.array([p_grids[i][idx[i]] for i in range(len(p_grids))])
        vals[idx] = func(p, r_grid[idx[-1]])
    return EffectiveHamiltonianTable(p_grids, r_grid, vals)


def _table_task(args):
    spec_dict, seed, model_dict, p, r, deltas, window, h, alpha, method, tol = args
    env = realize(EnvironmentSpec.from_dict(spec_dict), seed)
    model = HamiltonianModel.from_dict(model_dict, env.m)
    return estimate_Hbar(env, model, p, r, deltas, window=window, h=h, method=method, alpha=alpha, tol=tol)


def table_alpha(model: HamiltonianModel, envs: Sequence[EnvironmentRealization], p_grids, h: float) -> float:
    """One dissipation constant valid for every node of the table."""
    corners = np.array(np.meshgrid(*[[g[0], g[-1]] for g in p_grids], indexing="ij")).reshape(len(p_grids), -1).T
    return max(default_alpha(model, env, c, h) for env in envs for c in corners)


def build_table(envs, model: HamiltonianModel, p_grids, r_grid, deltas: Sequence[float], window: float = 1.0,
                h: float = 0.125, method: str = "newton", alpha: float | str | None = "shared", tol: float = 1e-8,
                workers: int = 1) -> EffectiveHamiltonianTable:
    """Tabulate ``Hbar`` at every ``(p, r)`` node; several realizations give mean and spread.

    ``alpha="shared"`` (default) tightens the dissipation per node on a pilot
    pass and then re-solves every node with the largest of those constants.
    One constant for all nodes keeps the discrete ``Hbar`` convex in ``p``;
    per-node constants shift the viscous bias from node to node.
    ``alpha=None`` keeps the per-node constants, ``alpha="common"`` uses one a
    priori constant and a number is used as given.  A node whose solutions
    violate its constant is re-solved with a larger one and the event is kept
    in its notes.
    """
    if isinstance(envs, EnvironmentRealization):
        envs = [envs]
    envs = list(envs)
    if not envs:
        raise SpecificationError("at least one realization is required", "envs")
    n = envs[0].n
    if np.ndim(p_grids[0]) == 0:
        p_grids = [p_grids]
    p_grids = [np.atleast_1d(np.asarray(g, dtype=float)) for g in p_grids]
    if len(p_grids) != n:
        raise SpecificationError(f"need {n} p-grids", "p_grids")
    r_grid = np.atleast_1d(np.asarray(r_grid, dtype=float))
    if alpha == "common":
        alpha = table_alpha(model, envs, p_grids, h)
    shape = tuple(g.size for g in p_grids) + (r_grid.size,)
    nodes = list(np.ndindex(*shape))
    tasks = []
    for e_idx, env in enumerate(envs):
        for idx in nodes:
            p = [float(p_grids[i][idx[i]]) for i in range(n)]
            tasks.append((e_idx, idx, p, float(r_grid[idx[-1]])))

    def solve_all(a):
        if workers > 1:
            args = [(envs[e].spec.to_dict(), envs[e].seed, model.to_dict(), p, r, list(deltas), window, h, a, method, tol)
                    for e, _, p, r in tasks]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(_table_task, args))
        return [estimate_Hbar(envs[e], model, p, r, deltas, window=window, h=h, method=method, alpha=a, tol=tol)
                for e, _, p, r in tasks]

    if alpha == "shared":
        pilot = solve_all(None)
        alpha = max(diag["alpha"] for _, diag in pilot)
        # a node may still raise its constant; repeat until all nodes agree
        for _ in range(3):
            results = solve_all(alpha)
            top = max(diag["alpha"] for _, diag in results)
            if top <= alpha:
                break
            alpha = top
    else:
        results = solve_all(alpha)

    per_seed = np.empty((len(envs),) + shape)
    resid = np.zeros(shape)
    low = np.zeros(shape, dtype=bool)
    entries = []
    for (e, idx, p, r), (val, diag) in zip(tasks, results):
        per_seed[(e,) + idx] = val
        resid[idx] = max(resid[idx], diag["fit"]["residual"])
        low[idx] |= diag["low_confidence"]
        entries.append({"node": list(idx), "seed": envs[e].seed, **_compact(diag)})
    values = per_seed.mean(axis=0)
    spread = per_seed.std(axis=0, ddof=1) if len(envs) > 1 else np.zeros(shape)
    return EffectiveHamiltonianTable(
        p_grids=p_grids,
        r_grid=r_grid,
        values=values,
        deltas=list(deltas),
        residuals=resid,
        spread=spread,
        low_confidence=low,
        seeds=[env.seed for env in envs],
        env_spec=envs[0].spec.to_dict(),
        model=model.to_dict(),
        model_hash=model.digest(),
        h=h,
        window=window,
        alpha=float(max(diag["alpha"] for _, diag in results)),
        entries=entries,
    )


def _compact(diag: dict) -> dict:
    keep = ("p", "r", "raw", "fit", "flatness", "flatness_decreasing", "low_confidence", "iterations", "alpha",
            "sup_Hp", "notes")
    return {k: diag[k] for k in keep}


# ---------------------------------------------------------------------------
# property checks

@dataclass
class PropertyCheck:
    passed: bool
    worst: float
    location: list | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst": self.worst, "location": self.location, "detail": self.detail}


@dataclass
class PropertyReport:
    checks: dict
    lipschitz_constant: float
    argmin: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": {k: v.to_dict() for k, v in self.checks.items()},
                "lipschitz_constant": self.lipschitz_constant, "argmin": self.argmin}


def _convexity_triples(table: EffectiveHamiltonianTable):
    """Yield (name, excess, slack, location) for collinear node triples."""
    vals, res = table.values, table.residuals
    n = table.n
    directions = [tuple(1 if j == i else 0 for j in range(n)) for i in range(n)]
    if n == 2:
        g0, g1 = table.p_grids
        uniform = (g0.size > 2 and g1.size > 2 and np.allclose(np.diff(g0), np.diff(g0)[0])
                   and np.allclose(np.diff(g1), np.diff(g1)[0]))
        if uniform:
            directions += [(1, 1), (1, -1)]
    for dvec in directions:
        for idx in np.ndindex(*vals.shape[:-1]):
            lo = tuple(idx[i] - dvec[i] for i in range(n))
            hi = tuple(idx[i] + dvec[i] for i in range(n))
            if any(not (0 <= lo[i] < vals.shape[i] and 0 <= hi[i] < vals.shape[i]) for i in range(n)):
                continue
            # weights from the parameter along the line
            pl = np.array([table.p_grids[i][lo[i]] for i in range(n)])
            pm = np.array([table.p_grids[i][idx[i]] for i in range(n)])
            ph = np.array([table.p_grids[i][hi[i]] for i in range(n)])
            a = np.linalg.norm(pm - pl)
            b = np.linalg.norm(ph - pm)
            for j in range(vals.shape[-1]):
                chord = (b * vals[lo + (j,)] + a * vals[hi + (j,)]) / (a + b)
                excess = vals[idx + (j,)] - chord
                slack = res[lo + (j,)] + res[idx + (j,)] + res[hi + (j,)]
                yield excess, slack, [*pm.tolist(), float(table.r_grid[j])]


def check_effective_properties(table: EffectiveHamiltonianTable, model: HamiltonianModel | None = None,
                               constants: dict | None = None, tol_conv: float = 1e-6,
                               tol_mono: float = 1e-9) -> PropertyReport:
    """Convexity in ``p``, monotonicity in ``r``, coercivity and local Lipschitz bounds on the nodes.

    ``constants`` holds ``C1`` and ``C3`` (e.g. from ``verify_assumptions``);
    the coercivity check is skipped when either constants or model is absent.
    """
    if any(g.size < 3 for g in table.p_grids):
        raise ValueError("the property checker needs at least 3 p-nodes per axis")
    checks = {}
    worst, loc, ok = 0.0, None, True
    for excess, slack, where in _convexity_triples(table):
        if excess - slack > worst:
            worst, loc = float(excess - slack), where
        if excess > tol_conv + slack:
            ok = False
    checks["convexity"] = PropertyCheck(ok, worst, loc, f"midpoint excess over chord, tol {tol_conv} + residuals")

    if table.r_grid.size > 1:
        diffs = np.diff(table.values, axis=-1)
        dr = np.diff(table.r_grid)
        worst_drop = float(max(0.0, -diffs.min()))
        where = np.unravel_index(int(np.argmin(diffs)), diffs.shape)
        slopes = diffs / dr
        detail = f"r-slopes in [{slopes.min():.6g}, {slopes.max():.6g}]"
        checks["r_monotone"] = PropertyCheck(bool(diffs.min() >= -tol_mono), worst_drop, [int(i) for i in where], detail)
        if model is not None:
            top = max(model.beta)
            over = float(max(0.0, np.max(slopes) - top))
            checks["r_slope_bound"] = PropertyCheck(over <= 1e-6 + float(np.max(table.residuals)), over, None,
                                                    f"r-slope at most max beta = {top}")
    else:
        checks["r_monotone"] = PropertyCheck(True, 0.0, None, "single r-node")

    if model is not None and constants is not None:
        C1, C3 = constants["C1"], constants["C3"]
        worst, loc, ok = 0.0, None, True
        for idx in np.ndindex(*table.values.shape):
            p = np.array([table.p_grids[i][idx[i]] for i in range(table.n)])
            bound = min(C1 * np.linalg.norm(p) ** g - C3 for g in model.gamma)
            gap = bound - table.values[idx]
            if gap > worst:
                worst, loc = float(gap), [*p.tolist(), float(table.r_grid[idx[-1]])]
            if gap > 1e-9 + table.residuals[idx]:
                ok = False
        checks["coercivity"] = PropertyCheck(ok, worst, loc, f"Hbar >= min_k(C1|p|^gamma_k - C3), C1={C1}, C3={C3}")

    gamma = max(model.gamma) if model is not None else 2.0
    lip = 0.0
    for i in range(table.n):
        g = table.p_grids[i]
        for idx in np.ndindex(*table.values.shape):
            if idx[i] + 1 >= g.size:
                continue
            nxt = list(idx)
            nxt[i] += 1
            nxt = tuple(nxt)
            p1 = np.array([table.p_grids[a][idx[a]] for a in range(table.n)])
            p2 = np.array([table.p_grids[a][nxt[a]] for a in range(table.n)])
            w = (1 + np.linalg.norm(p1) + np.linalg.norm(p2)) ** (gamma - 1) * np.linalg.norm(p1 - p2)
            lip = max(lip, abs(table.values[nxt] - table.values[idx]) / w)
    if table.r_grid.size > 1:
        lip = max(lip, float(np.max(np.abs(np.diff(table.values, axis=-1)) / np.diff(table.r_grid))))
    checks["lipschitz"] = PropertyCheck(bool(np.isfinite(lip)), float(lip), None, "local Lipschitz ratio")

    argmin = []
    interior_ok = True
    for j in range(table.r_grid.size):
        sl = table.values[..., j]
        k = np.unravel_index(int(np.argmin(sl)), sl.shape)
        argmin.append([float(table.p_grids[i][k[i]]) for i in range(table.n)])
        if any(k[i] in (0, table.p_grids[i].size - 1) for i in range(table.n)):
            interior_ok = False
    checks["interior_minimum"] = PropertyCheck(interior_ok, 0.0, None, "min over p attained away from the table edge")
    return PropertyReport(checks, float(lip), argmin)


def flat_interval(table: EffectiveHamiltonianTable, r_index: int = 0, tol: float = 1e-3) -> tuple[float, float]:
    """Extent of the 1-D nodes where ``Hbar`` is within ``tol`` of its minimum."""
    if table.n != 1:
        raise ValueError("flat_interval is defined for 1-D tables")
    vals = table.values[:, r_index]
    near = np.nonzero(vals <= vals.min() + tol)[0]
    g = table.p_grids[0]
    return float(g[near[0]]), float(g[near[-1]])


def verified_constants(model: HamiltonianModel, env: EnvironmentRealization, sample_radius: float = 10.0,
                       sample_count: int = 10_000, seed: int = 0) -> dict:
    """``C1..C5`` from the sampled assumption checker."""
    return verify_assumptions(model, env, sample_radius, sample_count, seed).constants
