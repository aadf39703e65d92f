"""Explicit monotone solvers for the coupled epsilon-system and the effective equation.

The epsilon-system reads, for ``k = 1..m``,

    u_k,t - eps tr(A_k(x/eps) D^2 u_k) + H_k(Du_k, u, (u_k - u_j)/eps, x/eps) = 0

and is advanced with forward Euler plus the Lax-Friedrichs numerical
Hamiltonian.  Time step and dissipation are fixed for the whole run unless the
gradient guard detects that the state left the box the bounds were built for,
in which case both are recomputed and the event is recorded.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .environment import ConstantField, EnvironmentRealization
from .errors import BlowUpError, ResourceError, SpecificationError, TableRangeError
from .models import HamiltonianModel, SaturationWarning
from .numerics import (
    DissipationBounds,
    Grid,
    SolveReport,
    VectorGridField,
    apply_diffusion,
    coupling_dt_cap,
    diffusion_bound,
    lax_friedrichs,
    one_sided_gradients,
    stable_dt,
)

S_MAX = 30.0


@dataclass
class EvolutionProblem:
    env: EnvironmentRealization
    model: HamiltonianModel
    eps: float
    u0: VectorGridField
    T: float
    snapshot_times: Sequence[float] = ()
    safety: float = 0.9
    dt: float | None = None
    alpha: float | None = None
    gradient_margin: float = 0.2
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not self.eps > 0:
            raise SpecificationError("eps must be positive", "eps")
        if not self.T > 0:
            raise SpecificationError("horizon T must be positive", "T")
        if self.u0.m != self.model.m or self.model.m != self.env.m:
            raise SpecificationError("initial data, model and environment disagree on m", "m")
        if self.u0.grid.n != self.env.n:
            raise SpecificationError("grid and environment disagree on n", "n")
        if not self.u0.is_finite():
            raise SpecificationError("initial data must be finite", "u0")
        times = sorted(float(t) for t in self.snapshot_times) if len(self.snapshot_times) else [self.T]
        if times[0] < 0 or times[-1] > self.T + 1e-12:
            raise SpecificationError("snapshot times must lie in [0, T]", "snapshot_times")
        self.snapshot_times = tuple(times)
        if not _all_constant(self.env):
            for i in range(self.u0.grid.n):
                if not self.u0.grid.periodic[i]:
                    raise SpecificationError("the evolution grid must be periodic", "grid")
                period = self.u0.grid.extent(i)
                if abs(period - self.eps * self.env.L) > 1e-9 * period:
                    raise SpecificationError(
                        f"grid period {period} must equal eps*L = {self.eps * self.env.L}", "grid"
                    )

    @property
    def grid(self) -> Grid:
        return self.u0.grid


@dataclass
class EvolutionResult:
    times: list[float]
    snapshots: list[VectorGridField]
    report: SolveReport
    eps: float | None = None

    def values(self) -> np.ndarray:
        """Snapshot values stacked as ``(len(times), m, *N)``."""
        return np.stack([s.values for s in self.snapshots])


def _all_constant(env: EnvironmentRealization) -> bool:
    return all(isinstance(f, ConstantField) for _, f in env.iter_fields())


def _max_gradient(u: np.ndarray, grid: Grid) -> float:
    best = 0.0
    for comp in u:
        Dm, Dp = one_sided_gradients(comp, grid)
        best = max(best, float(np.max(np.sqrt(np.sum(Dm * Dm, axis=0)))), float(np.max(np.sqrt(np.sum(Dp * Dp, axis=0)))))
    return best


def _coefficients(problem: EvolutionProblem) -> dict[str, np.ndarray]:
    return problem.env.coefficients(problem.grid.points() / problem.eps)


def gradient_box(problem: EvolutionProblem, co: dict | None = None) -> float:
    """A priori bound for ``|Du|`` along the run.

    The initial Lipschitz constant plus the corrector-scale slope
    ``max_k (osc V_k / a_k)^(1/gamma_k)`` that oscillating potentials induce.
    """
    co = _coefficients(problem) if co is None else co
    V = co["V"]
    extra = 0.0
    for k in range(problem.model.m):
        osc = float(np.max(V[k]) - np.min(V[k]))
        extra = max(extra, (osc / problem.model.a[k]) ** (1.0 / problem.model.gamma[k]))
    return _max_gradient(problem.u0.values, problem.grid) + extra


def step_parameters(problem: EvolutionProblem, co: dict | None = None, P: float | None = None) -> tuple[float, float, dict]:
    """``(alpha, dt, info)`` keeping the explicit step monotone on the anticipated state box."""
    co = _coefficients(problem) if co is None else co
    model, grid, eps = problem.model, problem.grid, problem.eps
    P = gradient_box(problem, co) if P is None else P
    alpha = model.max_gradient_speed(P * (1.0 + problem.gradient_margin))
    alpha = max(alpha, 1e-12)
    if problem.alpha is not None:
        alpha = float(problem.alpha)
    lam = max(diffusion_bound(co["A"][k])[0] for k in range(model.m))
    positive = all(diffusion_bound(co["A"][k])[1] for k in range(model.m))
    u = problem.u0.values
    value_range = float(np.max(u) - np.min(u))
    c_max = float(np.max(co["c"])) if model.m > 1 else 0.0
    s_top = min(value_range / eps, S_MAX)
    reaction = max(model.beta) + model.coupling_speed(s_top, c_max) / eps
    bounds = DissipationBounds((alpha,) * grid.n, lam)
    dt = stable_dt(grid, bounds, eps, problem.safety, reaction)
    if model.kind == "quadratic-coupling":
        dt = min(dt, coupling_dt_cap(eps, model.m, c_max, value_range, problem.safety))
    if problem.dt is not None:
        dt = float(problem.dt)
    info = {"gradient_box": P, "Lambda": lam, "stencil_positive": positive, "value_range": value_range,
            "reaction_rate": reaction, "c_max": c_max}
    return alpha, dt, info


def evolve_system(problem: EvolutionProblem) -> EvolutionResult:
    """Advance the coupled system and return snapshots at the requested times."""
    model, grid, eps = problem.model, problem.grid, problem.eps
    co = _coefficients(problem)
    A, V, c = co["A"], co["V"], co["c"]
    diffusive = [bool(np.any(A[k] != 0)) for k in range(model.m)]
    alpha, dt, info = step_parameters(problem, co)
    P = info["gradient_box"]
    report = SolveReport(dt=dt, bounds=DissipationBounds((alpha,) * grid.n, info["Lambda"]))
    report.diagnostics.update(info)
    if not info["stencil_positive"]:
        report.notes.append("cross-diffusion stencil not positive; Lambda inflated")

    required = int(np.ceil(problem.T / dt))
    if required > problem.max_steps:
        raise ResourceError(f"run needs {required} steps, budget is {problem.max_steps}", required)

    u = problem.u0.values.copy()
    m = model.m
    t = 0.0
    times, snaps = [], []
    sup_hist, coupling_hist, ut_hist = [], [], []
    ut_max = -np.inf
    ut_min = np.inf
    clamped = False
    steps = 0
    pending = list(problem.snapshot_times)

    def record():
        times.append(t)
        snaps.append(VectorGridField(u.copy(), grid, t))
        sup_hist.append(float(np.max(np.abs(u))))
        gap = max((float(np.max(np.abs(u[i] - u[j]))) for i in range(m) for j in range(m) if i < j), default=0.0)
        coupling_hist.append(gap / eps)

    while pending and pending[0] <= 0.0:
        pending.pop(0)
        record()

    check_every = 50
    while pending:
        target = pending[0]
        step = min(dt, target - t)
        if target - t - step < 1e-14 * max(1.0, target):
            step = target - t
        new = np.empty_like(u)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SaturationWarning)
            for k in range(m):
                Dm, Dp = one_sided_gradients(u[k], grid)
                s = (u[k][None] - u) / eps
                if model.kind == "exponential-coupling" and np.any(s > S_MAX):
                    clamped = True
                    s = np.minimum(s, S_MAX)
                H = lax_friedrichs(model, k, Dm, Dp, u, s, V[k], c[k], (alpha,) * grid.n)
                if diffusive[k]:
                    H = H - eps * apply_diffusion(A[k], u[k], grid)
                new[k] = u[k] - step * H
        steps += 1
        if not np.all(np.isfinite(new)):
            raise BlowUpError(f"non-finite value at step {steps} (t={t + step:.6g})", steps)
        rate = (new - u) / step
        ut_max = max(ut_max, float(np.max(rate)))
        ut_min = min(ut_min, float(np.min(rate)))
        u = new
        t = t + step
        if steps % check_every == 0 and problem.alpha is None:
            g = _max_gradient(u, grid)
            if g > P * (1.0 + problem.gradient_margin):
                P = 1.5 * g
                alpha, dt_new, _ = step_parameters(problem, co, P)
                dt = min(dt, dt_new)
                report.notes.append(f"gradient guard at step {steps}: |Du|={g:.4g}, alpha raised to {alpha:.4g}")
                report.bounds = DissipationBounds((alpha,) * grid.n, info["Lambda"])
                report.dt = dt
        if abs(t - target) <= 1e-12 * max(1.0, target):
            t = target
            pending.pop(0)
            record()
            ut_hist.append((t, ut_max))
        if steps > problem.max_steps:
            raise ResourceError(f"step budget {problem.max_steps} exhausted at t={t:.6g}", steps)

    report.steps = steps
    report.iterations = steps
    report.diagnostics.update(
        {
            "sup_norm": sup_hist,
            "sup_norm_bound": max(sup_hist) if sup_hist else 0.0,
            "coupling_magnitude": coupling_hist,
            "ut_max": ut_max,
            "ut_min": ut_min,
            "ut_sup": max(abs(ut_max), abs(ut_min)) if steps else 0.0,
            "s_clamped": clamped,
            "eps": eps,
        }
    )
    if clamped:
        report.notes.append(f"coupling argument clamped at s_max={S_MAX}")
    return EvolutionResult(times, snaps, report, eps)


def collapse_initial(u0) -> np.ndarray:
    """Pointwise minimum over components."""
    values = u0.values if isinstance(u0, VectorGridField) else np.asarray(u0, dtype=float)
    return np.min(values, axis=0)


# ---------------------------------------------------------------------------
# effective equation

def evolve_effective(table, ubar0: np.ndarray, T: float, grid: Grid, snapshot_times: Sequence[float] = (),
                     safety: float = 0.9, margin: float = 0.2, max_steps: int = 5_000_000) -> EvolutionResult:
    """Solve ``u_t + Hbar(Du, u) = 0`` with ``Hbar`` interpolated from ``table``.

    The r-slot receives the current value ``u(x, t)``.  The table must cover
    the gradients and values met along the run; a violation raises
    ``TableRangeError`` naming the needed range.
    """
    u = np.asarray(ubar0, dtype=float).copy()
    if u.shape != grid.shape:
        raise ValueError("initial data does not match the grid")
    times_req = sorted(float(s) for s in snapshot_times) if len(snapshot_times) else [float(T)]
    speed_p, speed_r = table.slope_bounds()
    alpha = max(speed_p * (1.0 + margin), 1e-12)
    bounds = DissipationBounds((alpha,) * grid.n)
    dt = stable_dt(grid, bounds, 0.0, safety, speed_r * (1.0 + margin))
    required = int(np.ceil(T / dt))
    if required > max_steps:
        raise ResourceError(f"effective run needs {required} steps, budget is {max_steps}", required)

    lo, hi = table.p_bounds()
    r_lo, r_hi = table.r_bounds()
    r_degenerate = table.r_grid.size == 1

    def guard(Dm, Dp, val):
        for i in range(grid.n):
            need_lo = min(float(Dm[i].min()), float(Dp[i].min()))
            need_hi = max(float(Dm[i].max()), float(Dp[i].max()))
            if need_lo < lo[i] - 1e-12 or need_hi > hi[i] + 1e-12:
                raise TableRangeError(
                    f"table p-axis {i} covers [{lo[i]}, {hi[i]}] but the run needs [{need_lo:.6g}, {need_hi:.6g}]",
                    f"p{i}", (need_lo, need_hi))
        if not r_degenerate:
            if val.min() < r_lo - 1e-12 or val.max() > r_hi + 1e-12:
                raise TableRangeError(
                    f"table r-axis covers [{r_lo}, {r_hi}] but the run needs [{val.min():.6g}, {val.max():.6g}]",
                    "r", (float(val.min()), float(val.max())))

    t = 0.0
    steps = 0
    times, snaps, lip_x, lip_t = [], [], [], []
    pending = list(times_req)
    last = None

    def record():
        times.append(t)
        snaps.append(VectorGridField(u[None].copy(), grid, t))
        Dm, Dp = one_sided_gradients(u, grid)
        lip_x.append(float(max(np.abs(Dm).max(), np.abs(Dp).max())))

    while pending and pending[0] <= 0.0:
        pending.pop(0)
        record()
    while pending:
        target = pending[0]
        step = min(dt, target - t)
        if target - t - step < 1e-14 * max(1.0, target):
            step = target - t
        Dm, Dp = one_sided_gradients(u, grid)
        guard(Dm, Dp, u)
        q = 0.5 * (Dm + Dp)
        H = table.interpolate(q, u)
        for i in range(grid.n):
            H = H - 0.5 * alpha * (Dp[i] - Dm[i])
        new = u - step * H
        steps += 1
        if not np.all(np.isfinite(new)):
            raise BlowUpError(f"non-finite value at step {steps}", steps)
        rate = float(np.max(np.abs(new - u))) / step
        lip_t.append(rate)
        u = new
        t += step
        if abs(t - target) <= 1e-12 * max(1.0, target):
            t = target
            pending.pop(0)
            record()
    report = SolveReport(dt=dt, steps=steps, iterations=steps, bounds=bounds)
    report.diagnostics.update(
        {
            "lipschitz_x": lip_x,
            "lipschitz_t_max": max(lip_t) if lip_t else 0.0,
            "lipschitz_x_nonincreasing": bool(all(b <= a + 1e-9 for a, b in zip(lip_x, lip_x[1:]))),
        }
    )
    return EvolutionResult(times, snaps, report)


# ---------------------------------------------------------------------------
# boundary layer

@dataclass
class BoundaryLayerProfile:
    times: np.ndarray
    M: np.ndarray
    eps: float
    C1: float
    C2: float
    residual: float
    C1_envelope: float
    delta: float
    C_delta: float
    fit_ok: bool
    flags: list = field(default_factory=list)

    def envelope(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.C1 * (self.eps + t + np.exp(-self.C2 * t / self.eps))

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "M": self.M.tolist(),
            "eps": self.eps,
            "C1": self.C1,
            "C2": self.C2,
            "relative_residual": self.residual,
            "C1_envelope": self.C1_envelope,
            "delta": self.delta,
            "C_delta": self.C_delta,
            "fit_ok": self.fit_ok,
            "flags": list(self.flags),
        }


def _layer_basis(t, eps, C2):
    return eps + t + np.exp(-C2 * t / eps)


def fit_layer_envelope(times, M, eps: float, c2_range=(1e-3, 1e3)) -> tuple[float, float, float]:
    """Least-squares ``M ~ C1 (eps + t + exp(-C2 t / eps))``; returns ``(C1, C2, relative residual)``.

    For fixed ``C2`` the optimal ``C1`` is a projection; ``C2`` is searched
    on a log scale.
    """
    t = np.asarray(times, dtype=float)
    M = np.asarray(M, dtype=float)
    norm = float(np.linalg.norm(M))
    if norm == 0:
        return 0.0, 1.0, 0.0

    def c1_for(C2):
        b = _layer_basis(t, eps, C2)
        return float(b @ M / (b @ b))

    def loss(logc2):
        C2 = np.exp(logc2)
        b = _layer_basis(t, eps, C2)
        return float(np.linalg.norm(M - c1_for(C2) * b))

    grid = np.linspace(np.log(c2_range[0]), np.log(c2_range[1]), 121)
    vals = [loss(g) for g in grid]
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(loss, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    best = res.x if res.fun <= vals[j] else grid[j]
    C2 = float(np.exp(best))
    C1 = c1_for(C2)
    return C1, C2, loss(best) / norm


def boundary_layer_profile(result: EvolutionResult, ubar0: np.ndarray, delta: float = 0.0,
                           eps: float | None = None) -> BoundaryLayerProfile:
    """Measure ``M(t) = max_k sup_x (u_k - ubar0)`` and fit the decay envelope.

    Also reports ``C_delta``, the smallest constant with
    ``u_k >= ubar0 - delta - C_delta t`` at every snapshot.
    """
    eps = result.eps if eps is None else eps
    if eps is None:
        raise ValueError("eps unknown for this result")
    times = np.asarray(result.times, dtype=float)
    vals = result.values()
    M = np.array([float(np.max(v - ubar0[None])) for v in vals])
    flags = []
    C1, C2, resid = fit_layer_envelope(times, M, eps)
    fit_ok = C2 > 0 and C1 > 0 and np.isfinite(resid)
    if len(M) > 2 and M[-1] >= M[0] and M[0] > 0:
        flags.append("M does not decay across the window")
    # smallest C1 for which the envelope (with the fitted C2) bounds M from above
    b = _layer_basis(times, eps, C2)
    C1_env = float(np.max(M / b))
    lower = np.array([float(np.max(ubar0[None] - delta - v)) for v in vals])
    mask = times > 0
    C_delta = float(max(0.0, np.max(lower[mask] / times[mask]))) if np.any(mask) else 0.0
    if np.any(lower[~mask] > 1e-12):
        flags.append("lower barrier violated at t = 0")
    return BoundaryLayerProfile(times, M, eps, C1, C2, resid, C1_env, delta, C_delta, fit_ok, flags)


# ---------------------------------------------------------------------------
# export

def export_snapshots_csv(result: EvolutionResult, path: str | Path) -> Path:
    """Columns ``t, x[, y], k, value``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        snap0 = result.snapshots[0]
        n = snap0.grid.n
        w.writerow(["t", "x"] + (["y"] if n == 2 else []) + ["k", "value"])
        pts = snap0.grid.points().reshape(-1, n)
        for snap in result.snapshots:
            for k in range(snap.m):
                flat = snap.values[k].ravel()
                for j in range(flat.size):
                    w.writerow([repr(snap.t)] + [repr(float(c)) for c in pts[j]] + [k, repr(float(flat[j]))])
    return path


def export_report_json(result: EvolutionResult, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    return path
