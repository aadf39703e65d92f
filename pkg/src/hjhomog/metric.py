"""Metric problems with an exclusion region, their large-scale averages and the support-function check.

At level ``mu`` the metric system reads

    -tr(A_k D^2 m_k) + H_k(p + Dm_k, (r, ..., r), m_k - m_j, y) = mu

outside an exclusion region around ``x``, with ``m = 0`` on the exclusion.  It
is solved on a box around ``x`` whose outer boundary carries the linear cone
``a |y - x|``, a supersolution whose slope ``a`` follows from coercivity.
Boundary data on the exclusion is 0 rather than a corrector offset; a bounded
offset does not change the linear growth rate that is measured here.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .effective import EffectiveHamiltonianTable, multilinear
from .environment import EnvironmentRealization, EnvironmentSpec, realize
from .errors import ConvergenceError, SpecificationError, TableRangeError
from .models import HamiltonianModel, SaturationWarning
from .numerics import (
    DissipationBounds,
    Grid,
    SolveReport,
    VectorGridField,
    diffusion_bound,
    diffusion_matrix,
    difference_matrices,
)

EXCLUSIONS = ("auto", "node", "ball")
BOUNDARY_NOTE = "exclusion boundary data set to 0 (no corrector offset)"


@dataclass
class MetricProblem:
    env: EnvironmentRealization
    model: HamiltonianModel
    p: Sequence[float]
    r: float
    mu: float
    x: Sequence[float] | None = None
    R_dom: float = 16.0
    h: float = 0.125
    exclusion: str = "auto"
    rho: float | None = None
    hbar_est: float | None = None
    margin: float | None = None
    tol: float = 1e-9
    alpha: float | None = None
    max_iter: int = 200
    grid: Grid | None = None

    def __post_init__(self):
        n = self.env.n
        self.p = tuple(float(v) for v in np.atleast_1d(self.p))
        if len(self.p) != n:
            raise SpecificationError(f"slope p needs {n} entries", "p")
        self.x = tuple(float(v) for v in (np.zeros(n) if self.x is None else np.atleast_1d(self.x)))
        if self.exclusion not in EXCLUSIONS:
            raise SpecificationError(f"exclusion {self.exclusion!r} not in {EXCLUSIONS}", "exclusion")
        if self.model.m != self.env.m:
            raise SpecificationError("model and environment disagree on m", "m")
        if self.grid is None:
            self.grid = Grid.box(self.x, self.R_dom, self.h)
        else:
            self.h = self.grid.h
        est = self.hbar_est if self.hbar_est is not None else hbar_upper_bound(self.model, self.env, self.p, self.r)
        margin = self.margin if self.margin is not None else 0.1 * (1.0 + abs(est))
        if self.mu < est + margin - 1e-12:
            raise SpecificationError(
                f"level mu={self.mu} is below Hbar estimate {est:.6g} + margin {margin:.6g}", "mu"
            )

    @property
    def exclusion_kind(self) -> str:
        if self.exclusion != "auto":
            return self.exclusion
        degenerate = all(float(np.max(np.abs(self._A()[k]))) == 0.0 for k in range(self.model.m))
        return "node" if degenerate or self.model.gamma_min > 2 else "ball"

    def _A(self):
        return self.env.coefficients(self.grid.points())["A"]

    @property
    def exclusion_radius(self) -> float:
        if self.exclusion_kind == "node":
            return 0.0
        return self.rho if self.rho is not None else max(1.0, 2 * self.h)


def hbar_upper_bound(model: HamiltonianModel, env: EnvironmentRealization, p, r: float, samples: int = 4096) -> float:
    """``sup_y max_k H_k(p, (r..r), 0, y)``, an upper bound for ``Hbar(p, r)`` (constant test function)."""
    n = env.n
    side = samples if n == 1 else int(np.sqrt(samples))
    ax = (np.arange(side) + 0.5) * env.L / side
    y = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1).reshape(-1, n)
    co = env.coefficients(y)
    p = np.asarray(p, dtype=float)
    best = -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        for k in range(model.m):
            s = np.zeros((model.m, y.shape[0]))
            H = model.hamiltonian(k, np.broadcast_to(p[:, None], (n, y.shape[0])), np.full(model.m, r), s,
                                  co["V"][k], co["c"][k])
            best = max(best, float(np.max(H)))
    return best


def barrier_slope(model: HamiltonianModel, env: EnvironmentRealization, p, r: float, mu: float) -> float:
    """Slope ``a`` with ``a |y - x|`` a supersolution: ``|p| + max_k ((mu + sup V_k - beta_k r)/a_k)^(1/gamma_k)``."""
    side = 4096 if env.n == 1 else 64
    ax = (np.arange(side) + 0.5) * env.L / side
    y = np.stack(np.meshgrid(*([ax] * env.n), indexing="ij"), axis=-1).reshape(-1, env.n)
    V = env.coefficients(y)["V"]
    slope = 0.0
    for k in range(model.m):
        top = max(mu + float(np.max(V[k])) - model.beta[k] * r, 0.0)
        slope = max(slope, (top / model.a[k]) ** (1.0 / model.gamma[k]))
    return float(np.linalg.norm(p)) + slope


def _region(problem: MetricProblem):
    grid = problem.grid
    pts = grid.points()
    dist = np.sqrt(np.sum((pts - np.asarray(problem.x)) ** 2, axis=-1))
    if problem.exclusion_kind == "node":
        excl = np.zeros(grid.shape, dtype=bool)
        excl[grid.index_of(problem.x)] = True
    else:
        excl = dist <= problem.exclusion_radius + 1e-12
    edge = np.zeros(grid.shape, dtype=bool)
    for i in range(grid.n):
        idx = [slice(None)] * grid.n
        idx[i] = 0
        edge[tuple(idx)] = True
        idx[i] = -1
        edge[tuple(idx)] = True
    edge &= ~excl
    return dist, excl, edge


class _MetricSystem:
    def __init__(self, problem: MetricProblem, alpha: float, co, D, diff, dist, excl, edge, slope):
        self.pb = problem
        self.alpha = alpha
        self.co = co
        self.D = D
        self.diff = diff
        self.m = problem.model.m
        self.N = problem.grid.size
        self.excl = excl.ravel()
        self.edge = edge.ravel()
        self.barrier = (slope * dist).ravel()

    def parts(self, Z):
        Zk = Z.reshape(self.m, self.N)
        p = np.asarray(self.pb.p)[:, None]
        out = []
        for k in range(self.m):
            Dm = np.stack([Mm @ Zk[k] for Mm, _ in self.D])
            Dp = np.stack([Mp @ Zk[k] for _, Mp in self.D])
            out.append((Dm, Dp, p + 0.5 * (Dm + Dp), Zk[k][None] - Zk))
        return Zk, out

    def residual(self, Z, with_jacobian=False):
        pb, model = self.pb, self.pb.model
        Zk, parts = self.parts(Z)
        V = self.co["V"]
        c = self.co["c"]
        F = np.empty((self.m, self.N))
        blocks = [[None] * self.m for _ in range(self.m)]
        excl, edge = self.excl, self.edge
        hp_max = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SaturationWarning)
            for k, (Dm, Dp, q, s) in enumerate(parts):
                G, Hp = model.gradient_term_capped(k, q, self.alpha)
                H = G + model.coupling_term(k, s, c[k]) + model.beta[k] * pb.r - V[k]
                H = H - 0.5 * self.alpha * np.sum(Dp - Dm, axis=0)
                if self.diff[k] is not None:
                    H = H - self.diff[k] @ Zk[k]
                # outer edge: cap by the barrier, max(H - mu, m - barrier) = 0
                capped = edge & (Zk[k] - self.barrier > H - pb.mu)
                F[k] = np.where(excl, Zk[k], np.where(capped, Zk[k] - self.barrier, H - pb.mu))
                free = ~(excl | capped)
                true_hp = model.gradient_term_dp(k, q)
                hp_max = max(hp_max, float(np.max(np.abs(true_hp[:, free]))) if np.any(free) else 0.0)
                if not with_jacobian:
                    continue
                pinned = (excl | capped).astype(float)
                keep = sp.diags(1.0 - pinned)
                pin = sp.diags(pinned)
                Hs = model.coupling_term_ds(k, s, c[k])
                J = sp.csr_matrix((self.N, self.N))
                for i, (Mm, Mp) in enumerate(self.D):
                    J = J + sp.diags(0.5 * (Hp[i] + self.alpha)) @ Mm + sp.diags(0.5 * (Hp[i] - self.alpha)) @ Mp
                if self.diff[k] is not None:
                    J = J - self.diff[k]
                if self.m > 1:
                    J = J + sp.diags(np.sum(Hs, axis=0))
                    for j in range(self.m):
                        if j != k:
                            blocks[k][j] = keep @ sp.diags(-Hs[j])
                blocks[k][k] = keep @ J + pin
        F = F.ravel()
        if not with_jacobian:
            return F, hp_max
        return F, sp.bmat(blocks, format="csc"), hp_max


def solve_metric(problem: MetricProblem) -> tuple[VectorGridField, SolveReport]:
    """Newton solve of the discrete metric system started from the cone barrier."""
    env, model, grid = problem.env, problem.model, problem.grid
    co = env.coefficients(grid.points())
    A = co["A"]
    co = {"V": co["V"].reshape(model.m, -1), "c": co["c"].reshape(model.m, model.m, -1)}
    D = difference_matrices(grid)
    diff, lam = [], 0.0
    for k in range(model.m):
        if np.any(A[k] != 0):
            diff.append(diffusion_matrix(A[k], grid))
            lam = max(lam, diffusion_bound(A[k])[0])
        else:
            diff.append(None)
    dist, excl, edge = _region(problem)
    slope = 1.01 * barrier_slope(model, env, problem.p, problem.r, problem.mu)
    if lam > 0:
        slope *= 1.2
    adaptive = problem.alpha is None
    alpha = problem.alpha if not adaptive else max(model.max_gradient_speed(1.2 * slope), 1e-12)
    report = SolveReport(notes=[BOUNDARY_NOTE])
    Z = np.tile((slope * dist).ravel(), model.m)
    Z[np.tile(excl.ravel(), model.m)] = 0.0
    history_all = []
    for attempt in range(4):
        system = _MetricSystem(problem, alpha, co, D, diff, dist, excl, edge, slope)
        Z, history, ok = _newton(system, Z, problem.tol * (1 + abs(problem.mu)), problem.max_iter)
        history_all += history
        if not ok:
            raise ConvergenceError(f"metric solve did not converge (mu={problem.mu}, p={problem.p})", history_all)
        _, hp = system.residual(Z)
        if adaptive and attempt == 0 and 1.05 * hp < alpha:
            alpha = max(1.05 * hp, 1e-12)
            continue
        if hp <= alpha * (1 + 1e-9):
            break
        report.notes.append(f"alpha={alpha:.4g} below sup|H_p|={hp:.4g}; re-solved")
        alpha = 1.05 * hp
    vals = Z.reshape((model.m,) + grid.shape)
    lip = 0.0
    for k in range(model.m):
        for Mm, Mp in D:
            lip = max(lip, float(np.max(np.abs(Mm @ vals[k].ravel()))), float(np.max(np.abs(Mp @ vals[k].ravel()))))
    off = ~excl
    report.converged = True
    report.iterations = len(history_all)
    report.residual_history = history_all
    report.bounds = DissipationBounds((alpha,) * grid.n, lam)
    report.diagnostics.update(
        {
            "barrier_slope": slope,
            "lipschitz": lip,
            "exclusion": problem.exclusion_kind,
            "exclusion_radius": problem.exclusion_radius,
            "min_off_exclusion": float(np.min(vals[:, off])) if np.any(off) else 0.0,
            "max_over_barrier": float(np.max(vals - slope * (dist + 1.0)[None])),
            "alpha": alpha,
            "sup_Hp": hp,
        }
    )
    return VectorGridField(vals, grid), report


def _newton(system: _MetricSystem, Z, tol, max_iter):
    history = []
    for it in range(max_iter + 1):
        F, J, _ = system.residual(Z, with_jacobian=True)
        res = float(np.max(np.abs(F)))
        history.append(res)
        if res < tol:
            return Z, history, True
        if it == max_iter:
            break
        Z = Z - spla.spsolve(J, F)
        if not np.all(np.isfinite(Z)):
            break
    return Z, history, False


def evaluate_at(field: VectorGridField, points) -> np.ndarray:
    """Multilinear values of every component at ``points`` (shape ``(K, n)``); returns ``(m, K)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    grid = field.grid
    out = []
    for k in range(field.m):
        out.append(multilinear(grid.axes(), field.values[k], [pts[:, i] for i in range(grid.n)]))
    return np.array(out)


# ---------------------------------------------------------------------------
# homogenized metric

@dataclass
class HomogenizedMetricEstimate:
    directions: np.ndarray
    t_schedule: np.ndarray
    ratios: np.ndarray
    M: np.ndarray
    correction: np.ndarray
    residuals: np.ndarray
    component_gap: np.ndarray
    seed_spread: np.ndarray
    p: tuple
    r: float
    mu: float
    seeds: list
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "directions": self.directions.tolist(),
            "t_schedule": self.t_schedule.tolist(),
            "ratios": self.ratios.tolist(),
            "M": self.M.tolist(),
            "correction": self.correction.tolist(),
            "residuals": self.residuals.tolist(),
            "component_gap": self.component_gap.tolist(),
            "seed_spread": self.seed_spread.tolist(),
            "p": list(self.p),
            "r": self.r,
            "mu": self.mu,
            "seeds": list(self.seeds),
            "notes": list(self.notes),
        }

    def export_csv(self, path) -> Path:
        """Rows ``direction, t, component, m/t`` averaged over seeds."""
        path = Path(path)
        mean = self.ratios.mean(axis=0)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["direction", "t", "component", "m_over_t"])
            for d, e in enumerate(self.directions):
                label = " ".join(repr(float(v)) for v in e)
                for j, t in enumerate(self.t_schedule):
                    for k in range(mean.shape[-1]):
                        w.writerow([label, repr(float(t)), k, repr(float(mean[d, j, k]))])
        return path


def fit_growth(t, ratios) -> tuple[float, float, float]:
    """Fit ``ratio = M + c/t``; returns ``(M, c, rms residual)``."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(ratios, dtype=float)
    X = np.stack([np.ones_like(t), 1.0 / t], axis=1)
    if len(t) == 1:
        return float(y[0]), 0.0, 0.0
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
    return float(coef[0]), float(coef[1]), res


def _unit_directions(directions, n):
    dirs = np.atleast_2d(np.asarray(directions, dtype=float)).reshape(-1, n)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise SpecificationError("directions must be non-zero", "directions")
    return dirs / norms


def estimate_M(env_or_spec, model: HamiltonianModel, p, r: float, mu: float, directions, t_schedule,
               seeds: Sequence[int] | None = None, h: float = 0.125, buffer: float = 4.0, **kwargs) -> HomogenizedMetricEstimate:
    """Average ``m_mu(t e)/t`` over a schedule of ``t`` and fit ``M + c/t`` per direction.

    ``env_or_spec`` is a realization (used as is) or a spec realized at every
    seed in ``seeds``.  Each seed needs one solve on a box of radius
    ``max(t) + buffer``.
    """
    t_schedule = np.asarray(sorted(float(t) for t in t_schedule))
    if len(t_schedule) == 0 or t_schedule[0] <= 0:
        raise SpecificationError("t schedule must be non-empty and positive", "t_schedule")
    if isinstance(env_or_spec, EnvironmentRealization):
        envs = [env_or_spec]
    else:
        seeds = [0] if seeds is None else list(seeds)
        envs = [realize(env_or_spec, s) for s in seeds]
    n = envs[0].n
    dirs = _unit_directions(directions, n)
    R = t_schedule[-1] + buffer
    for env in envs:
        if 2 * R > env.L + 1e-9:
            raise SpecificationError(f"domain of radius {R} does not fit in the torus of side {env.L}", "L")
    ratios = np.empty((len(envs), len(dirs), len(t_schedule), model.m))
    notes = []
    for s_idx, env in enumerate(envs):
        pb = MetricProblem(env, model, p, r, mu, R_dom=R, h=h, **kwargs)
        field_, rep = solve_metric(pb)
        pts = (t_schedule[None, :, None] * dirs[:, None, :]).reshape(-1, n)
        vals = evaluate_at(field_, pts).reshape(model.m, len(dirs), len(t_schedule))
        ratios[s_idx] = np.moveaxis(vals, 0, -1) / t_schedule[None, :, None]
        notes += rep.notes
        # the outer cap must not touch the measurement window
        if rep.diagnostics["max_over_barrier"] > 1e-9:
            notes.append(f"seed {env.seed}: barrier exceeded by {rep.diagnostics['max_over_barrier']:.3g}")
    mean = ratios.mean(axis=(0, 3))
    M = np.empty(len(dirs))
    corr = np.empty(len(dirs))
    res = np.empty(len(dirs))
    for d in range(len(dirs)):
        M[d], corr[d], res[d] = fit_growth(t_schedule, mean[d])
    gap = np.max(ratios.max(axis=3) - ratios.min(axis=3), axis=(0, 1))
    spread = ratios.mean(axis=3).std(axis=0, ddof=1).max(axis=0) if len(envs) > 1 else np.zeros(len(t_schedule))
    return HomogenizedMetricEstimate(dirs, t_schedule, ratios, M, corr, res, gap, spread, tuple(np.atleast_1d(p).tolist()),
                                     r, mu, [env.seed for env in envs], sorted(set(notes)))


# ---------------------------------------------------------------------------
# support function of the sublevel set

def support_function(table: EffectiveHamiltonianTable, p, r: float, mu: float, y, refine: int = 64) -> tuple[float, float]:
    """``sup{q . y : Hbar(p + q, r) <= mu}`` by a refined grid sup over the table box.

    Returns ``(value, refinement estimate)``; the estimate is the change of the
    sup when the refinement is halved.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = table.n
    # the sublevel set must stay away from the table's outer nodes
    vals = table.interpolate(np.array(np.meshgrid(*table.p_grids, indexing="ij")), r)
    border = np.zeros(vals.shape, dtype=bool)
    for i in range(n):
        idx = [slice(None)] * n
        idx[i] = 0
        border[tuple(idx)] = True
        idx[i] = -1
        border[tuple(idx)] = True
    if np.any(vals[border] <= mu):
        lo, hi = table.p_bounds()
        raise TableRangeError(
            f"sublevel set {{Hbar <= {mu}}} touches the table boundary {lo}..{hi}; widen the p-grid", "p", (lo, hi))
    if not np.any(vals <= mu):
        raise TableRangeError(f"sublevel set {{Hbar <= {mu}}} contains no table node", "p", None)
    if np.all(y == 0):
        return 0.0, 0.0

    def sup_at(factor):
        axes = []
        for g in table.p_grids:
            fine = [np.linspace(g[j], g[j + 1], factor + 1)[:-1] for j in range(g.size - 1)] + [g[-1:]]
            axes.append(np.concatenate(fine))
        P = np.array(np.meshgrid(*axes, indexing="ij"))
        H = table.interpolate(P, r)
        q = P - p.reshape((n,) + (1,) * n)
        score = np.tensordot(y, q, axes=(0, 0))
        inside = H <= mu + 1e-12
        return float(np.max(score[inside]))

    fine = sup_at(refine)
    coarse = sup_at(max(refine // 2, 1))
    return fine, abs(fine - coarse)


def metric_consistency(estimate: HomogenizedMetricEstimate, table: EffectiveHamiltonianTable, p, r: float,
                       mu: float, tol: float = 0.03) -> dict:
    """Compare fitted ``M_mu(e)`` with the support function of ``{Hbar <= mu}`` per direction."""
    rows = []
    for d, e in enumerate(estimate.directions):
        s, ref_err = support_function(table, p, r, mu, e)
        gap = abs(estimate.M[d] - s)
        rel = gap / max(abs(s), 1e-12)
        rows.append({"direction": e.tolist(), "M_fit": float(estimate.M[d]), "support": s,
                     "refinement": ref_err, "relative_gap": rel, "passed": bool(rel <= tol)})
    return {"passed": all(r_["passed"] for r_ in rows), "tolerance": tol, "mu": mu,
            "estimate_mu": estimate.mu, "directions": rows}


# ---------------------------------------------------------------------------
# structural checks

def metric_from(env: EnvironmentRealization, model: HamiltonianModel, p, r: float, mu: float, x, grid: Grid,
                **kwargs) -> tuple[VectorGridField, SolveReport]:
    """Metric with exclusion around ``x`` on a prescribed (shared) box grid."""
    return solve_metric(MetricProblem(env, model, p, r, mu, x=x, grid=grid, **kwargs))


def subadditivity_check(env: EnvironmentRealization, model: HamiltonianModel, p, r: float, mu: float,
                        triples, grid: Grid, **kwargs) -> dict:
    """Test ``m_k(y; x) <= m_k(y; z) + max_j m_j(z; x) + 2 h Lip`` on lattice triples ``(x, z, y)``.

    Adding one constant to every component keeps a solution a solution, so the
    constant is the largest component of ``m(z; x)``; for ``m = 1`` this is the
    plain triangle inequality.
    """
    cache = {}

    def field_for(center):
        key = tuple(np.round(np.atleast_1d(center), 12))
        if key not in cache:
            cache[key] = metric_from(env, model, p, r, mu, center, grid, **kwargs)
        return cache[key]

    rows = []
    lip = 0.0
    for x, z, y in triples:
        fx, rx = field_for(x)
        fz, rz = field_for(z)
        lip = max(lip, rx.diagnostics["lipschitz"], rz.diagnostics["lipschitz"])
        m_yx = evaluate_at(fx, [y])[:, 0]
        m_zx = evaluate_at(fx, [z])[:, 0]
        m_yz = evaluate_at(fz, [y])[:, 0]
        excess = m_yx - (m_yz + np.max(m_zx))
        k = int(np.argmax(excess))
        rows.append({"x": list(np.atleast_1d(x)), "z": list(np.atleast_1d(z)), "y": list(np.atleast_1d(y)),
                     "component": k, "lhs": float(m_yx[k]), "rhs": float(m_yz[k] + np.max(m_zx)),
                     "excess": float(excess[k])})
    slack = 2 * grid.h * lip
    worst = max(row["excess"] for row in rows)
    return {"passed": bool(worst <= slack), "slack": slack, "lipschitz": lip,
            "worst_excess": float(worst), "triples": rows}


def homogeneity_defects(env, model: HamiltonianModel, p, r: float, mu: float, starts, t_values, grid: Grid,
                        directions=None, component: int = 0, **kwargs) -> dict:
    """Mean of ``|m(x + 2t e; x)/(2t) - m(x + t e; x)/t|`` over realizations, start points ``x`` and directions ``e``.

    ``env`` is one realization or a sequence of them (independent media make
    the average far less noisy than nearby starts in one medium).
    """
    envs = [env] if isinstance(env, EnvironmentRealization) else list(env)
    n = envs[0].n
    if directions is None:
        directions = np.vstack([np.eye(n), -np.eye(n)])
    dirs = _unit_directions(directions, n)
    t_values = np.asarray(t_values, dtype=float)
    defects = np.zeros((len(envs), len(starts), len(dirs), len(t_values)))
    k = len(t_values)
    for b, e_ in enumerate(envs):
        for a, x in enumerate(starts):
            f, _ = metric_from(e_, model, p, r, mu, x, grid, **kwargs)
            x = np.atleast_1d(np.asarray(x, dtype=float))
            for d, e in enumerate(dirs):
                pts = np.concatenate([x + np.outer(t_values, e), x + np.outer(2 * t_values, e)])
                vals = evaluate_at(f, pts)[component]
                defects[b, a, d] = np.abs(vals[k:] / (2 * t_values) - vals[:k] / t_values)
    mean = defects.mean(axis=(0, 1, 2))
    return {"t": t_values.tolist(), "mean_defect": mean.tolist(),
            "decreasing": bool(np.all(np.diff(mean) < 0)), "samples": int(np.prod(defects.shape[:3])),
            "defects": defects.tolist()}


def save_json(obj: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path
